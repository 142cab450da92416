use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use super::HarnessError;
use crate::imaging::{pnm, resize, GrayImage, ResampleFilter};

/// Target sizes of the two-step upscale: a super-resolution step to
/// `intermediate` (external tool or Lanczos-3), then Lanczos-3 to `output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpscaleSizes {
    pub intermediate: usize,
    pub output: usize,
}

impl Default for UpscaleSizes {
    fn default() -> Self {
        Self {
            intermediate: 256,
            output: 224,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpscaleFailure {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpscaleSummary {
    pub processed: usize,
    pub failures: Vec<UpscaleFailure>,
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.to_string_lossy().replace('\'', "'\\''"))
}

/// Upscales every `*.pgm` in `dir_in` into `dir_out` (same file names).
///
/// With a `template`, each file is first handed to `sh -c` with `{in}` and
/// `{out}` replaced by the quoted input and a temporary output path; the
/// tool's result is then resized to `sizes.output`. Without one, the
/// built-in Lanczos-3 path resizes to `sizes.intermediate` and then to
/// `sizes.output`. Per-file failures are collected and do not stop the run.
pub fn external_upscale(
    dir_in: &Path,
    dir_out: &Path,
    template: Option<&str>,
    sizes: UpscaleSizes,
) -> Result<UpscaleSummary, HarnessError> {
    if let Some(t) = template {
        if !t.contains("{in}") || !t.contains("{out}") {
            return Err(HarnessError::Config(format!(
                "upscale command {t:?} needs both {{in}} and {{out}} placeholders"
            )));
        }
    }
    if sizes.intermediate == 0 || sizes.output == 0 {
        return Err(HarnessError::Config("upscale sizes must be positive".into()));
    }
    fs::create_dir_all(dir_out).map_err(HarnessError::io(dir_out))?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(dir_in)
        .map_err(HarnessError::io(dir_in))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    inputs.sort();

    let mut summary = UpscaleSummary::default();
    for input in inputs {
        let name = input.file_name().expect("file has a name");
        let target = dir_out.join(name);
        match upscale_one(&input, &target, template, sizes) {
            Ok(()) => summary.processed += 1,
            Err(reason) => {
                log::warn!("upscale failed for {}: {reason}", input.display());
                summary.failures.push(UpscaleFailure { path: input, reason });
            }
        }
    }
    Ok(summary)
}

fn upscale_one(input: &Path, target: &Path, template: Option<&str>, sizes: UpscaleSizes) -> Result<(), String> {
    let upscaled: GrayImage = match template {
        None => {
            let img = pnm::read_pgm(input).map_err(|e| e.to_string())?;
            resize(&img, sizes.intermediate, sizes.intermediate, ResampleFilter::Lanczos3).map_err(|e| e.to_string())?
        }
        Some(t) => {
            let stem = target.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let tmp = target.with_file_name(format!(".{stem}.external.pgm"));
            let cmd = t.replace("{in}", &shell_quote(input)).replace("{out}", &shell_quote(&tmp));
            let status = Command::new("sh").arg("-c").arg(&cmd).status().map_err(|e| format!("spawn: {e}"))?;
            if !status.success() {
                let _ = fs::remove_file(&tmp);
                return Err(format!("command exited with {status}"));
            }
            let img = pnm::read_pgm(&tmp).map_err(|e| format!("reading tool output: {e}"));
            let _ = fs::remove_file(&tmp);
            img?
        }
    };
    let out = resize(&upscaled, sizes.output, sizes.output, ResampleFilter::Lanczos3).map_err(|e| e.to_string())?;
    pnm::write_pgm(target, &out).map_err(|e| e.to_string())
}
