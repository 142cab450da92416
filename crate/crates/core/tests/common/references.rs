//! Slow, direct reference implementations used as oracles.

use koa_core::imaging::GrayImage;

/// Per-pixel CLAHE: for every output pixel, rebuild the histograms of the
/// surrounding tiles from scratch, clip them by moving one count at a time,
/// and read the CDF directly.
pub fn clahe_per_pixel(img: &GrayImage, tile_w: usize, tile_h: usize, clip: f64) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let tiles_x: Vec<(usize, usize)> = (0..w).step_by(tile_w).map(|s| (s, (s + tile_w).min(w))).collect();
    let tiles_y: Vec<(usize, usize)> = (0..h).step_by(tile_h).map(|s| (s, (s + tile_h).min(h))).collect();
    let center = |t: (usize, usize)| (t.0 + t.1 - 1) as f64 / 2.0;

    let neighbors = |tiles: &[(usize, usize)], pos: f64| -> (usize, usize, f64) {
        let left = (0..tiles.len()).filter(|&i| center(tiles[i]) <= pos).max_by(|&a, &b| {
            center(tiles[a]).partial_cmp(&center(tiles[b])).unwrap()
        });
        let right = (0..tiles.len()).filter(|&i| center(tiles[i]) > pos).min_by(|&a, &b| {
            center(tiles[a]).partial_cmp(&center(tiles[b])).unwrap()
        });
        match (left, right) {
            (None, Some(r)) => (r, r, 0.0),
            (Some(l), None) => (l, l, 0.0),
            (Some(l), Some(r)) => (l, r, (pos - center(tiles[l])) / (center(tiles[r]) - center(tiles[l]))),
            (None, None) => unreachable!("at least one tile"),
        }
    };

    let mapped = |tx: usize, ty: usize, bin: usize| -> f64 {
        let (x0, x1) = tiles_x[tx];
        let (y0, y1) = tiles_y[ty];
        let mut counts = vec![0u64; 256];
        for y in y0..y1 {
            for x in x0..x1 {
                let v = img.get(x, y);
                counts[(v * 255.0 + 0.5).floor() as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        let ceiling = ((clip * total as f64).floor() as u64).max(1);
        let mut pool = 0u64;
        for c in counts.iter_mut() {
            while *c > ceiling {
                *c -= 1;
                pool += 1;
            }
        }
        let mut next = 0;
        while pool > 0 {
            counts[next] += 1;
            next = (next + 1) % 256;
            pool -= 1;
        }
        counts[..=bin].iter().sum::<u64>() as f64 / total as f64
    };

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (r0, r1, wy) = neighbors(&tiles_y, y as f64);
        for x in 0..w {
            let (c0, c1, wx) = neighbors(&tiles_x, x as f64);
            let bin = (img.get(x, y) * 255.0 + 0.5).floor() as usize;
            let top = mapped(c0, r0, bin) * (1.0 - wx) + mapped(c1, r0, bin) * wx;
            let bottom = mapped(c0, r1, bin) * (1.0 - wx) + mapped(c1, r1, bin) * wx;
            out.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
        }
    }
    out
}

fn lanczos3(x: f64) -> f64 {
    use std::f64::consts::PI;
    if x == 0.0 {
        return 1.0;
    }
    if x.abs() >= 3.0 {
        return 0.0;
    }
    3.0 * (PI * x).sin() * (PI * x / 3.0).sin() / (PI * PI * x * x)
}

/// Source taps for one axis, computed directly from the mapping formula.
fn taps(out_pos: usize, in_len: usize, out_len: usize) -> Vec<(usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = if scale > 1.0 { scale } else { 1.0 };
    let src = (out_pos as f64 + 0.5) * scale - 0.5;
    let mut taps = Vec::new();
    let lo = (src - 3.0 * stretch).floor() as i64 - 1;
    let hi = (src + 3.0 * stretch).ceil() as i64 + 1;
    for i in lo..=hi {
        let wgt = lanczos3((i as f64 - src) / stretch);
        if wgt != 0.0 {
            taps.push((i.clamp(0, in_len as i64 - 1) as usize, wgt));
        }
    }
    taps
}

/// Lanczos-3 resize as a single 2-D double loop per output pixel.
pub fn resize_lanczos3(img: &GrayImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let mut out = Vec::with_capacity(out_w * out_h);
    for yo in 0..out_h {
        let ty = taps(yo, h, out_h);
        for xo in 0..out_w {
            let tx = taps(xo, w, out_w);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for &(sy, wy) in &ty {
                for &(sx, wx) in &tx {
                    acc += wy * wx * img.get(sx, sy);
                    norm += wy * wx;
                }
            }
            out.push((acc / norm).clamp(0.0, 1.0));
        }
    }
    out
}
