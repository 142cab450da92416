use super::{GrayImage, ImagingError};

pub const HISTOGRAM_BINS: usize = 256;

/// Axis-aligned pixel rectangle, `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn full(img: &GrayImage) -> Self {
        Self {
            x: 0,
            y: 0,
            width: img.width(),
            height: img.height(),
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// 256-bin luminance histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    bins: [u64; HISTOGRAM_BINS],
    total: u64,
}

impl Histogram {
    pub fn from_bins(bins: [u64; HISTOGRAM_BINS]) -> Self {
        let total = bins.iter().sum();
        Self { bins, total }
    }

    pub fn bins(&self) -> &[u64; HISTOGRAM_BINS] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Bin index of a normalized value: `floor(v * 255 + 0.5)`.
#[inline]
pub fn bin_of(v: f64) -> usize {
    ((v * 255.0 + 0.5).floor() as usize).min(HISTOGRAM_BINS - 1)
}

pub fn compute_histogram(img: &GrayImage, region: Rect) -> Result<Histogram, ImagingError> {
    if region.width == 0
        || region.height == 0
        || region.x + region.width > img.width()
        || region.y + region.height > img.height()
    {
        return Err(ImagingError::Bounds {
            region,
            width: img.width(),
            height: img.height(),
        });
    }
    let mut bins = [0u64; HISTOGRAM_BINS];
    for y in region.y..region.y + region.height {
        let row = &img.pixels()[y * img.width() + region.x..y * img.width() + region.x + region.width];
        for &v in row {
            bins[bin_of(v)] += 1;
        }
    }
    Ok(Histogram::from_bins(bins))
}

/// Clips every bin at `max(1, floor(clip_limit * total))` and hands the
/// removed mass back uniformly: `excess / 256` to every bin, then the
/// remainder one count at a time starting from bin 0. Single pass; the total
/// is preserved exactly.
pub fn clip_redistribute(hist: &Histogram, clip_limit: f64) -> Result<Histogram, ImagingError> {
    if hist.total == 0 {
        return Err(ImagingError::EmptyHistogram);
    }
    if !(clip_limit > 0.0 && clip_limit <= 1.0) {
        return Err(ImagingError::Parameter(format!(
            "clip limit {clip_limit} outside (0, 1]"
        )));
    }
    let ceiling = ((clip_limit * hist.total as f64).floor() as u64).max(1);
    let mut bins = hist.bins;
    let mut excess = 0u64;
    for count in bins.iter_mut() {
        if *count > ceiling {
            excess += *count - ceiling;
            *count = ceiling;
        }
    }
    let share = excess / HISTOGRAM_BINS as u64;
    let remainder = (excess % HISTOGRAM_BINS as u64) as usize;
    for (b, count) in bins.iter_mut().enumerate() {
        *count += share + u64::from(b < remainder);
    }
    Ok(Histogram::from_bins(bins))
}

/// Normalized inclusive CDF of the histogram.
pub fn equalization_map(hist: &Histogram) -> Result<[f64; HISTOGRAM_BINS], ImagingError> {
    if hist.total == 0 {
        return Err(ImagingError::EmptyHistogram);
    }
    let mut map = [0.0; HISTOGRAM_BINS];
    let mut cumulative = 0u64;
    let total = hist.total as f64;
    for (b, &count) in hist.bins.iter().enumerate() {
        cumulative += count;
        map[b] = cumulative as f64 / total;
    }
    Ok(map)
}

/// Tile geometry and clip limit for [`clahe`].
///
/// The clip limit is a fraction of the tile's pixel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub tile_width: usize,
    pub tile_height: usize,
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    /// 8x8-pixel tiles, clip limit 0.03.
    fn default() -> Self {
        Self {
            tile_width: 8,
            tile_height: 8,
            clip_limit: 0.03,
        }
    }
}

impl ClaheParams {
    pub fn new(tile_width: usize, tile_height: usize, clip_limit: f64) -> Result<Self, ImagingError> {
        let params = Self {
            tile_width,
            tile_height,
            clip_limit,
        };
        if tile_width < 2 || tile_height < 2 {
            return Err(ImagingError::Parameter(format!(
                "tile {tile_width}x{tile_height} smaller than 2x2"
            )));
        }
        if !(clip_limit > 0.0 && clip_limit <= 1.0) {
            return Err(ImagingError::Parameter(format!(
                "clip limit {clip_limit} outside (0, 1]"
            )));
        }
        Ok(params)
    }

    /// Alternative reading of "block size": split the image into a
    /// `cols x rows` grid of tiles instead of fixing the tile size in pixels.
    pub fn from_grid(
        img: &GrayImage,
        cols: usize,
        rows: usize,
        clip_limit: f64,
    ) -> Result<Self, ImagingError> {
        if cols == 0 || rows == 0 {
            return Err(ImagingError::Parameter("tile grid must be at least 1x1".into()));
        }
        Self::new(
            img.width().div_ceil(cols),
            img.height().div_ceil(rows),
            clip_limit,
        )
    }

    fn validate_for(&self, img: &GrayImage) -> Result<(), ImagingError> {
        Self::new(self.tile_width, self.tile_height, self.clip_limit)?;
        if self.tile_width > img.width() || self.tile_height > img.height() {
            return Err(ImagingError::Parameter(format!(
                "tile {}x{} larger than image {}x{}",
                self.tile_width,
                self.tile_height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

/// Tile start offsets and centers along one axis; the last tile may be short.
fn axis_tiles(len: usize, tile: usize) -> Vec<(usize, usize, f64)> {
    (0..len.div_ceil(tile))
        .map(|i| {
            let start = i * tile;
            let end = (start + tile).min(len);
            (start, end - start, (start + end - 1) as f64 / 2.0)
        })
        .collect()
}

/// Pair of neighbouring tile indices and the weight of the second one.
fn interpolation_neighbors(centers: &[(usize, usize, f64)], pos: f64) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if pos <= centers[0].2 {
        return (0, 0, 0.0);
    }
    if pos >= centers[last].2 {
        return (last, last, 0.0);
    }
    let lo = centers.partition_point(|c| c.2 <= pos) - 1;
    let hi = lo + 1;
    (lo, hi, (pos - centers[lo].2) / (centers[hi].2 - centers[lo].2))
}

#[inline]
fn bilinear_blend(top_left: f64, top_right: f64, bottom_left: f64, bottom_right: f64, wx: f64, wy: f64) -> f64 {
    let top = top_left * (1.0 - wx) + top_right * wx;
    let bottom = bottom_left * (1.0 - wx) + bottom_right * wx;
    top * (1.0 - wy) + bottom * wy
}

/// Contrast-limited adaptive histogram equalization.
///
/// Each tile gets a clipped, equalized lookup table; output pixels blend the
/// tables of the (up to) four tiles whose centers surround them, clamping to
/// the nearest table outside the outermost centers.
pub fn clahe(img: &GrayImage, params: &ClaheParams) -> Result<GrayImage, ImagingError> {
    params.validate_for(img)?;
    let cols = axis_tiles(img.width(), params.tile_width);
    let rows = axis_tiles(img.height(), params.tile_height);

    let mut maps = Vec::with_capacity(cols.len() * rows.len());
    for &(y, h, _) in &rows {
        for &(x, w, _) in &cols {
            let hist = compute_histogram(img, Rect { x, y, width: w, height: h })?;
            maps.push(equalization_map(&clip_redistribute(&hist, params.clip_limit)?)?);
        }
    }
    let map_at = |col: usize, row: usize| &maps[row * cols.len() + col];

    let x_neighbors: Vec<_> = (0..img.width())
        .map(|x| interpolation_neighbors(&cols, x as f64))
        .collect();
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..img.height() {
        let (r0, r1, wy) = interpolation_neighbors(&rows, y as f64);
        for (x, &(c0, c1, wx)) in x_neighbors.iter().enumerate() {
            let b = bin_of(img.get(x, y));
            let v = bilinear_blend(
                map_at(c0, r0)[b],
                map_at(c1, r0)[b],
                map_at(c0, r1)[b],
                map_at(c1, r1)[b],
                wx,
                wy,
            );
            out.push(v.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(img.width(), img.height(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist_with(entries: &[(usize, u64)]) -> Histogram {
        let mut bins = [0u64; HISTOGRAM_BINS];
        for &(b, c) in entries {
            bins[b] = c;
        }
        Histogram::from_bins(bins)
    }

    /// Count-by-count reference: remove excess one unit at a time, then deal
    /// the units back one per bin cycling from bin 0.
    fn redistribute_by_dealing(hist: &Histogram, clip: f64) -> [u64; HISTOGRAM_BINS] {
        let ceiling = ((clip * hist.total() as f64).floor() as u64).max(1);
        let mut bins = *hist.bins();
        let mut pool = 0u64;
        for b in bins.iter_mut() {
            while *b > ceiling {
                *b -= 1;
                pool += 1;
            }
        }
        let mut next = 0usize;
        while pool > 0 {
            bins[next] += 1;
            next = (next + 1) % HISTOGRAM_BINS;
            pool -= 1;
        }
        bins
    }

    #[test]
    fn histogram_constant_and_top_bin() {
        let zero = GrayImage::filled(4, 4, 0.0).unwrap();
        let h = compute_histogram(&zero, Rect::full(&zero)).unwrap();
        assert_eq!(h.bins()[0], 16);
        assert_eq!(h.total(), 16);
        assert_eq!(h.bins()[1..].iter().sum::<u64>(), 0);

        let one = GrayImage::filled(2, 2, 1.0).unwrap();
        let h = compute_histogram(&one, Rect::full(&one)).unwrap();
        assert_eq!(h.bins()[255], 4);
    }

    #[test]
    fn histogram_half_value_lands_in_bin_128() {
        let img = GrayImage::new(2, 1, vec![0.0, 0.5]).unwrap();
        let h = compute_histogram(&img, Rect::full(&img)).unwrap();
        assert_eq!(h.bins()[0], 1);
        assert_eq!(h.bins()[128], 1);
        assert_eq!(h.total(), 2);
    }

    #[test]
    fn histogram_rejects_out_of_bounds_region() {
        let img = GrayImage::filled(4, 4, 0.2).unwrap();
        let region = Rect { x: 2, y: 0, width: 3, height: 1 };
        assert!(matches!(
            compute_histogram(&img, region),
            Err(ImagingError::Bounds { .. })
        ));
    }

    #[test]
    fn clip_noop_when_ceiling_covers_max() {
        let h = hist_with(&[(3, 5), (9, 5)]);
        assert_eq!(clip_redistribute(&h, 0.5).unwrap(), h);
    }

    #[test]
    fn clip_single_spike() {
        let h = hist_with(&[(100, 64)]);
        let out = clip_redistribute(&h, 0.25).unwrap();
        assert_eq!(out.bins(), &redistribute_by_dealing(&h, 0.25));
        // 48 excess < 256 bins: one each to bins 0..48, the spike keeps 16.
        assert_eq!(out.bins()[100], 16);
        assert!(out.bins()[..48].iter().all(|&c| c == 1));
        assert!(out.bins()[48..100].iter().all(|&c| c == 0));
        assert_eq!(out.total(), 64);
    }

    #[test]
    fn clip_two_bins() {
        let h = hist_with(&[(0, 40), (1, 24)]);
        let out = clip_redistribute(&h, 0.5).unwrap();
        assert_eq!(out.bins(), &redistribute_by_dealing(&h, 0.5));
        assert_eq!(out.bins()[0], 33);
        assert_eq!(out.bins()[1], 25);
        assert!(out.bins()[2..8].iter().all(|&c| c == 1));
        assert!(out.bins()[8..].iter().all(|&c| c == 0));
    }

    #[test]
    fn empty_histogram_errors() {
        let h = Histogram::from_bins([0; HISTOGRAM_BINS]);
        assert_eq!(clip_redistribute(&h, 0.1), Err(ImagingError::EmptyHistogram));
        assert_eq!(equalization_map(&h), Err(ImagingError::EmptyHistogram));
    }

    #[test]
    fn equalization_map_cases() {
        let uniform = Histogram::from_bins([3; HISTOGRAM_BINS]);
        let map = equalization_map(&uniform).unwrap();
        for (b, &m) in map.iter().enumerate() {
            assert!((m - (b + 1) as f64 / 256.0).abs() < 1e-15);
        }

        let spike = hist_with(&[(0, 7)]);
        assert!(equalization_map(&spike).unwrap().iter().all(|&m| m == 1.0));

        let ends = hist_with(&[(0, 2), (255, 2)]);
        let map = equalization_map(&ends).unwrap();
        assert_eq!(map[0], 0.5);
        assert_eq!(map[254], 0.5);
        assert_eq!(map[255], 1.0);
    }

    #[test]
    fn clahe_parameter_errors() {
        let img = GrayImage::filled(8, 8, 0.5).unwrap();
        assert!(clahe(&img, &ClaheParams { tile_width: 16, tile_height: 4, clip_limit: 0.1 }).is_err());
        assert!(ClaheParams::new(1, 4, 0.1).is_err());
        assert!(ClaheParams::new(4, 4, 0.0).is_err());
        assert!(ClaheParams::new(4, 4, 1.5).is_err());
    }

    #[test]
    fn clahe_binary_checkerboard_stays_in_range() {
        let img = GrayImage::from_fn(16, 16, |x, y| ((x + y) % 2) as f64).unwrap();
        let out = clahe(&img, &ClaheParams::new(4, 4, 0.03).unwrap()).unwrap();
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        // Every tile sees the same two levels, so the output stays two-valued.
        let mut distinct: Vec<u64> = out.pixels().iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn clahe_constant_image_is_constant() {
        let img = GrayImage::filled(8, 8, 0.3).unwrap();
        let out = clahe(&img, &ClaheParams::new(4, 4, 0.03).unwrap()).unwrap();
        let first = out.pixels()[0];
        assert!(out.pixels().iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn uneven_edge_tiles() {
        let tiles = axis_tiles(10, 4);
        assert_eq!(tiles, vec![(0, 4, 1.5), (4, 4, 5.5), (8, 2, 8.5)]);
        assert_eq!(interpolation_neighbors(&tiles, 0.0), (0, 0, 0.0));
        assert_eq!(interpolation_neighbors(&tiles, 9.0), (2, 2, 0.0));
        assert_eq!(interpolation_neighbors(&tiles, 7.0), (1, 2, 0.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn clip_preserves_total(
            counts in proptest::collection::vec(0u64..500, HISTOGRAM_BINS),
            clip in 0.001f64..=1.0,
        ) {
            let mut bins = [0u64; HISTOGRAM_BINS];
            bins.copy_from_slice(&counts);
            bins[7] += 1;
            let h = Histogram::from_bins(bins);
            let out = clip_redistribute(&h, clip).unwrap();
            prop_assert_eq!(out.total(), h.total());
            prop_assert_eq!(out.bins().iter().sum::<u64>(), h.total());
        }

        #[test]
        fn equalization_map_is_monotone(counts in proptest::collection::vec(0u64..50, HISTOGRAM_BINS)) {
            let mut bins = [0u64; HISTOGRAM_BINS];
            bins.copy_from_slice(&counts);
            bins[0] += 1;
            let map = equalization_map(&Histogram::from_bins(bins)).unwrap();
            prop_assert!(map.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(map[255], 1.0);
        }
    }
}
