//! Experiment harness: synthetic corpora, metrics, the three-variant
//! experiment runner, report emission, the external upscaler hook and
//! configuration files.

pub mod config;
mod experiment;
mod metrics;
mod report;
pub mod synth;
mod upscale;

pub use experiment::{
    build_manifest, denoiser_checkpoint, load_labeled, run_experiment, write_numbered, AugmentSpec, DiffusionSource, ExperimentSpec,
};
pub use metrics::{confusion, Metrics};
pub use report::{emit_metrics_csv, emit_report, parse_metrics_csv, whole_percent, ExperimentReport, ExperimentRow, ReportFormat};
pub use upscale::{external_upscale, UpscaleFailure, UpscaleSizes, UpscaleSummary};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::classifier::ClassifierError;
use crate::dataset::{DatasetError, KlGrade};
use crate::diffusion::DiffusionError;
use crate::imaging::pnm::PnmError;
use crate::imaging::ImagingError;
use crate::nngraph::NnError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no trained denoiser for grade {grade} at {path}; train one with `koa diff-train --grade {grade}`")]
    MissingDenoiser { grade: KlGrade, path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
