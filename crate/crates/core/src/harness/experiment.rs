use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{confusion, Metrics};
use super::report::ExperimentRow;
use super::synth;
use super::upscale::{external_upscale, UpscaleSizes};
use super::HarnessError;
use crate::classifier::{
    pretrain_backbone, train_stage1, train_stage2, Classifier, DenseLayer, FreezePolicy, Labeled, TrainProtocol,
};
use crate::dataset::{
    assemble_augmented, scan_tree, stratified_split, AugmentPlan, KlGrade, Manifest, Origin, Split, SplitRatios, Variant,
};
use crate::diffusion::{build_schedule, sample, train_denoiser, DenoiserTrainConfig, SampleRequest, UNet, UNetConfig};
use crate::imaging::{clahe, pnm, resize, ClaheParams, GrayImage, ResampleFilter};

/// Where the augmented variant gets its per-grade denoisers.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionSource {
    /// Train one denoiser per grade on that grade's training images.
    Train(DenoiserTrainConfig),
    /// Load `denoiser-{grade}.ckpt` files from a directory.
    Checkpoints(PathBuf),
}

pub fn denoiser_checkpoint(dir: &Path, grade: KlGrade) -> PathBuf {
    dir.join(format!("denoiser-{grade}.ckpt"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub plan: AugmentPlan,
    /// Side length the denoisers work at.
    pub generation_size: usize,
    pub upscale: UpscaleSizes,
    /// Optional external super-resolution command (see [`external_upscale`]).
    pub upscale_command: Option<String>,
    pub timesteps: usize,
    pub ddim_steps: usize,
    pub eta: f64,
    pub source: DiffusionSource,
    /// Lower bound on optimizer steps per grade denoiser; small grades get
    /// more epochs so every denoiser sees a similar number of updates.
    pub min_denoiser_steps: usize,
}

/// One (model, variant) cell. All stochastic stages derive their seeds from
/// `seed`; the seed inside `protocol` and any denoiser config is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub model_name: String,
    pub variant: Variant,
    pub seed: u64,
    /// Classifier input side length.
    pub input_size: usize,
    pub protocol: TrainProtocol,
    pub policy: FreezePolicy,
    pub lora_rank: Option<usize>,
    pub pretrain_per_class: usize,
    pub pretrain_epochs: usize,
    pub clahe: ClaheParams,
    pub augment: AugmentSpec,
}

impl ExperimentSpec {
    /// Settings sized for a CPU run on about a thousand 32×32 images:
    /// generation at 16×16, upscaled 16 → 64 → 32.
    pub fn desk_scale(variant: Variant, seed: u64) -> Self {
        Self {
            model_name: "koa-cnn".into(),
            variant,
            seed,
            input_size: 32,
            protocol: TrainProtocol::default(),
            policy: FreezePolicy::default(),
            lora_rank: None,
            pretrain_per_class: 60,
            pretrain_epochs: 4,
            clahe: ClaheParams::default(),
            augment: AugmentSpec {
                plan: AugmentPlan::default(),
                generation_size: 16,
                upscale: UpscaleSizes {
                    intermediate: 64,
                    output: 32,
                },
                upscale_command: None,
                timesteps: 1000,
                ddim_steps: 20,
                eta: 0.0,
                min_denoiser_steps: 500,
                source: DiffusionSource::Train(DenoiserTrainConfig {
                    epochs: 20,
                    batch_size: 8,
                    learning_rate: 1e-3,
                    seed: 0,
                    unet: UNetConfig {
                        base_channels: 16,
                        time_dim: 64,
                    },
                }),
            },
        }
    }
}

fn seed_for(base: u64, offset: u64) -> u64 {
    base.wrapping_add(offset.wrapping_mul(0x9E37_79B9))
}

/// Loads an original image and applies the variant's preprocessing plus
/// the resize to the classifier input.
fn prepare(path: &Path, variant: Variant, params: &ClaheParams, size: usize) -> Result<GrayImage, HarnessError> {
    let img = pnm::read_pgm(path)?;
    let img = if variant == Variant::Original { img } else { clahe(&img, params)? };
    fit(img, size)
}

fn fit(img: GrayImage, size: usize) -> Result<GrayImage, HarnessError> {
    if img.dimensions() == (size, size) {
        Ok(img)
    } else {
        Ok(resize(&img, size, size, ResampleFilter::Lanczos3)?)
    }
}

/// Loads one split of `manifest` as classifier inputs of side `size`.
/// Originals get CLAHE unless the manifest is the original variant;
/// generated images are used as written.
pub fn load_labeled(
    manifest: &Manifest,
    split: Split,
    params: &ClaheParams,
    size: usize,
) -> Result<Vec<Labeled>, HarnessError> {
    manifest
        .in_split(split)
        .map(|s| {
            let image = match s.origin {
                Origin::Original => prepare(&s.image_ref, manifest.variant, params, size)?,
                Origin::Generated => fit(pnm::read_pgm(&s.image_ref)?, size)?,
            };
            Ok(Labeled {
                image,
                label: s.grade.index(),
            })
        })
        .collect()
}

fn obtain_denoiser(
    spec: &ExperimentSpec,
    grade: KlGrade,
    train_images: &[GrayImage],
    work_dir: &Path,
) -> Result<UNet, HarnessError> {
    let aug = &spec.augment;
    match &aug.source {
        DiffusionSource::Checkpoints(dir) => {
            let path = denoiser_checkpoint(dir, grade);
            if !path.is_file() {
                return Err(HarnessError::MissingDenoiser { grade, path });
            }
            Ok(UNet::load(&path)?)
        }
        DiffusionSource::Train(config) => {
            if train_images.is_empty() {
                return Err(HarnessError::Contract(format!(
                    "grade {grade} has no training images to fit a denoiser on"
                )));
            }
            let schedule = build_schedule(aug.timesteps)?;
            let batches = train_images.len().div_ceil(config.batch_size.max(1));
            let config = DenoiserTrainConfig {
                seed: seed_for(spec.seed, 10 + u64::from(grade.value())),
                epochs: config.epochs.max(aug.min_denoiser_steps.div_ceil(batches)),
                ..*config
            };
            let trained = train_denoiser(train_images, &schedule, &config)?;
            let dir = work_dir.join("denoisers");
            fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
            trained.model.save(denoiser_checkpoint(&dir, grade))?;
            Ok(trained.model)
        }
    }
}

/// Generates, upscales and writes the augmentation images for every grade
/// with a nonzero plan count into `work_dir/generated/{grade}/`.
fn generate(spec: &ExperimentSpec, base: &Manifest, work_dir: &Path) -> Result<PathBuf, HarnessError> {
    let aug = &spec.augment;
    let generated = work_dir.join("generated");
    let raw_root = work_dir.join("raw");
    let schedule = build_schedule(aug.timesteps)?;
    for grade in KlGrade::ALL {
        let count = aug.plan.count(grade);
        let out_dir = generated.join(grade.to_string());
        let raw_dir = raw_root.join(grade.to_string());
        for dir in [&out_dir, &raw_dir] {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(HarnessError::io(dir))?;
            }
        }
        if count == 0 {
            continue;
        }
        let train_images = base
            .in_split(Split::Train)
            .filter(|s| s.grade == grade && s.origin == Origin::Original)
            .map(|s| {
                let img = pnm::read_pgm(&s.image_ref)?;
                fit(clahe(&img, &spec.clahe)?, aug.generation_size)
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let model = obtain_denoiser(spec, grade, &train_images, work_dir)?;
        let request = SampleRequest {
            count,
            size: aug.generation_size,
            ddim_steps: aug.ddim_steps,
            eta: aug.eta,
            seed: seed_for(spec.seed, 20 + u64::from(grade.value())),
        };
        let images = sample(&model, &schedule, &request)?;
        write_numbered(&raw_dir, &images)?;
        let summary = external_upscale(&raw_dir, &out_dir, aug.upscale_command.as_deref(), aug.upscale)?;
        if let Some(f) = summary.failures.first() {
            log::warn!(
                "{} of {} generated grade-{grade} images failed to upscale (first: {}: {})",
                summary.failures.len(),
                count,
                f.path.display(),
                f.reason
            );
        }
    }
    Ok(generated)
}

/// Writes images as `dir/00000.pgm`, `dir/00001.pgm`, ...
pub fn write_numbered(dir: &Path, images: &[GrayImage]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    for (i, img) in images.iter().enumerate() {
        pnm::write_pgm(dir.join(format!("{i:05}.pgm")), img)?;
    }
    Ok(())
}

/// Builds the manifest for `spec.variant` from the tree at `data_root`.
/// Intermediate files go under `work_dir`.
pub fn build_manifest(spec: &ExperimentSpec, data_root: &Path, work_dir: &Path) -> Result<Manifest, HarnessError> {
    let scan = scan_tree(data_root)?;
    for s in &scan.skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let split = stratified_split(&scan.manifest, SplitRatios::default(), spec.seed)?;
    Ok(match spec.variant {
        Variant::Original | Variant::Preprocessed => split.with_variant(spec.variant),
        Variant::Augmented => {
            let generated = generate(spec, &split, work_dir)?;
            assemble_augmented(&split, generated, &spec.augment.plan)?
        }
    })
}

fn evaluate(model: &Classifier, data: &[Labeled]) -> Result<Metrics, HarnessError> {
    let images: Vec<GrayImage> = data.iter().map(|d| d.image.clone()).collect();
    let preds = model.classify(&images)?;
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    confusion(&preds, &labels)
}

/// Runs one variant end to end: manifest, preprocessing, optional
/// generation, proxy pretraining, the two fine-tuning stages, and evaluation
/// on the test and valid splits.
pub fn run_experiment(spec: &ExperimentSpec, data_root: &Path, work_dir: &Path) -> Result<ExperimentRow, HarnessError> {
    let manifest = build_manifest(spec, data_root, work_dir)?;
    let load = |split| load_labeled(&manifest, split, &spec.clahe, spec.input_size);
    let (train, test, valid) = (load(Split::Train)?, load(Split::Test)?, load(Split::Valid)?);

    let proxy = synth::proxy_textures(spec.pretrain_per_class, spec.input_size, seed_for(spec.seed, 1));
    let pretrain_protocol = TrainProtocol {
        seed: seed_for(spec.seed, 2),
        ..spec.protocol
    };
    let pre = pretrain_backbone(&proxy, spec.input_size, spec.pretrain_epochs, &pretrain_protocol)?;
    let mut model = pre.model.with_fresh_head(seed_for(spec.seed, 3))?;
    if let Some(rank) = spec.lora_rank {
        model.apply_lora(DenseLayer::Hidden, rank, seed_for(spec.seed, 4))?;
    }
    let protocol = TrainProtocol {
        seed: seed_for(spec.seed, 5),
        ..spec.protocol
    };
    train_stage1(&mut model, &train, &protocol)?;
    train_stage2(&mut model, &train, &protocol, &spec.policy)?;
    model.merge_lora();

    Ok(ExperimentRow {
        model: spec.model_name.clone(),
        variant: spec.variant,
        test: evaluate(&model, &test)?,
        valid: evaluate(&model, &valid)?,
        train_size: train.len(),
    })
}
