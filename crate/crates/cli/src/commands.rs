use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use koa_core::classifier::{
    argmax, pretrain_backbone, train_stage1, train_stage2, Classifier, DenseLayer, FreezePolicy, TrainProtocol,
};
use koa_core::dataset::{
    assemble_augmented, class_counts, scan_tree, stratified_split, AugmentPlan, KlGrade, Manifest, Split, SplitRatios,
    Variant,
};
use koa_core::diffusion::{build_schedule, sample, train_denoiser, DenoiserTrainConfig, SampleRequest, UNet, UNetConfig};
use koa_core::explain::{grad_cam, overlay, DEFAULT_LAYER};
use koa_core::harness::synth;
use koa_core::harness::{
    confusion, emit_metrics_csv, emit_report, external_upscale, load_labeled, parse_metrics_csv, run_experiment,
    write_numbered, DiffusionSource, ExperimentReport, ExperimentSpec, Metrics, ReportFormat, UpscaleSizes,
};
use koa_core::imaging::{clahe, pnm, resize, ClaheParams, ResampleFilter};

use crate::settings::Settings;
use crate::{
    AssembleArgs, DiffSampleArgs, DiffTrainArgs, EvalArgs, ExperimentArgs, GradcamArgs, PrepArgs, PretrainArgs,
    ReportArgs, SynthArgs, TrainArgs, UpscaleArgs,
};

/// Grade totals of the reference corpus, used by `synth --scale`.
const REFERENCE_COUNTS: [usize; 5] = [3857, 1770, 2578, 1286, 295];

fn desk() -> ExperimentSpec {
    ExperimentSpec::desk_scale(Variant::Original, 0)
}

fn denoiser_defaults() -> DenoiserTrainConfig {
    match desk().augment.source {
        DiffusionSource::Train(c) => c,
        DiffusionSource::Checkpoints(_) => unreachable!("desk defaults train denoisers"),
    }
}

fn clahe_params(s: &Settings, section: &str, tile: Option<usize>, clip: Option<f64>) -> Result<ClaheParams> {
    let d = ClaheParams::default();
    let tile = s.get(tile, section, "tile", d.tile_width)?;
    let clip = s.get(clip, section, "clip", d.clip_limit)?;
    Ok(ClaheParams::new(tile, tile, clip)?)
}

fn pgm_files(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            pgm_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn prep(s: &Settings, a: PrepArgs) -> Result<()> {
    let input = match a.input {
        Some(p) => p,
        None => s.data_root(a.data_root, "prep")?,
    };
    let params = clahe_params(s, "prep", a.tile, a.clip)?;
    let mut files = Vec::new();
    pgm_files(&input, &mut files)?;
    files.sort();
    let mut failed = 0;
    for file in &files {
        let target = a.output.join(file.strip_prefix(&input)?);
        let result = pnm::read_pgm(file)
            .map_err(anyhow::Error::from)
            .and_then(|img| Ok(clahe(&img, &params)?))
            .and_then(|out| {
                if let Some(dir) = target.parent() {
                    fs::create_dir_all(dir)?;
                }
                Ok(pnm::write_pgm(&target, &out)?)
            });
        if let Err(e) = result {
            log::warn!("{}: {e:#}", file.display());
            failed += 1;
        }
    }
    println!("processed {} images, {failed} failed", files.len() - failed);
    Ok(())
}

pub fn diff_train(s: &Settings, a: DiffTrainArgs) -> Result<()> {
    const SEC: &str = "diff-train";
    let root = s.data_root(a.data_root, SEC)?;
    let grade = KlGrade::new(a.grade)?;
    let aug = desk().augment;
    let d = denoiser_defaults();
    let seed = s.get(a.seed, SEC, "seed", 0)?;
    let size = s.get(a.size, SEC, "size", aug.generation_size)?;
    let config = DenoiserTrainConfig {
        epochs: s.get(a.epochs, SEC, "epochs", d.epochs)?,
        batch_size: s.get(a.batch, SEC, "batch", d.batch_size)?,
        learning_rate: s.get(a.lr, SEC, "lr", d.learning_rate)?,
        seed,
        unet: UNetConfig {
            base_channels: s.get(a.base_channels, SEC, "base_channels", d.unet.base_channels)?,
            ..d.unet
        },
    };
    let min_steps = s.get(a.min_steps, SEC, "min_steps", aug.min_denoiser_steps)?;
    let schedule = build_schedule(s.get(a.timesteps, SEC, "timesteps", aug.timesteps)?)?;
    let params = ClaheParams::default();

    let split = stratified_split(&scan_tree(&root)?.manifest, SplitRatios::default(), seed)?;
    let images = split
        .in_split(Split::Train)
        .filter(|x| x.grade == grade)
        .map(|x| {
            let img = pnm::read_pgm(&x.image_ref)?;
            let img = if a.raw { img } else { clahe(&img, &params)? };
            Ok(resize(&img, size, size, ResampleFilter::Lanczos3)?)
        })
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        bail!("no training images for grade {grade} under {}", root.display());
    }
    let batches = images.len().div_ceil(config.batch_size.max(1));
    let config = DenoiserTrainConfig {
        epochs: config.epochs.max(min_steps.div_ceil(batches)),
        ..config
    };
    let trained = train_denoiser(&images, &schedule, &config)?;
    trained.model.save(&a.out)?;
    println!(
        "grade {grade}: {} images, {} epochs, loss {:.4} -> {:.4}",
        images.len(),
        config.epochs,
        trained.losses.first().copied().unwrap_or(f64::NAN),
        trained.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn diff_sample(s: &Settings, a: DiffSampleArgs) -> Result<()> {
    const SEC: &str = "diff-sample";
    let aug = desk().augment;
    let model = UNet::load(&a.checkpoint)?;
    let schedule = build_schedule(s.get(a.timesteps, SEC, "timesteps", aug.timesteps)?)?;
    let request = SampleRequest {
        count: s.get(a.count, SEC, "count", aug.plan.count(KlGrade::new(1)?))?,
        size: s.get(a.size, SEC, "size", aug.generation_size)?,
        ddim_steps: s.get(a.ddim_steps, SEC, "ddim_steps", aug.ddim_steps)?,
        eta: s.get(a.eta, SEC, "eta", aug.eta)?,
        seed: s.get(a.seed, SEC, "seed", 0)?,
    };
    let images = sample(&model, &schedule, &request)?;
    write_numbered(&a.out, &images)?;
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}

pub fn upscale(s: &Settings, a: UpscaleArgs) -> Result<()> {
    const SEC: &str = "upscale";
    let d = UpscaleSizes::default();
    let sizes = UpscaleSizes {
        intermediate: s.get(a.intermediate, SEC, "intermediate", d.intermediate)?,
        output: s.get(a.size, SEC, "size", d.output)?,
    };
    let command = s.optional(a.command, SEC, "command")?;
    let summary = external_upscale(&a.input, &a.output, command.as_deref(), sizes)?;
    for f in &summary.failures {
        eprintln!("failed: {}: {}", f.path.display(), f.reason);
    }
    println!("processed {}, failed {}", summary.processed, summary.failures.len());
    if summary.processed == 0 && !summary.failures.is_empty() {
        bail!("every image failed to upscale");
    }
    Ok(())
}

pub fn assemble(s: &Settings, a: AssembleArgs) -> Result<()> {
    const SEC: &str = "assemble";
    let root = s.data_root(a.data_root, SEC)?;
    let seed = s.get(a.seed, SEC, "seed", 0)?;
    let scan = scan_tree(&root)?;
    for skip in &scan.skipped {
        log::warn!("skipped {}: {}", skip.path.display(), skip.reason);
    }
    let split = stratified_split(&scan.manifest, SplitRatios::default(), seed)?;
    let generated = s.optional(a.generated, SEC, "generated")?;
    let manifest = match generated {
        Some(dir) => {
            let count = s.get(a.per_class_count, SEC, "per_class_count", desk().augment.plan.count(KlGrade::new(1)?))?;
            assemble_augmented(&split, dir, &AugmentPlan::except_grade0(count))?
        }
        None => {
            let variant: Variant = s.get(a.variant.as_deref().map(str::to_string), SEC, "variant", "original".into())?
                .parse()?;
            split.with_variant(variant)
        }
    };
    manifest.save(&a.out)?;
    print!("{}", class_counts(&manifest));
    Ok(())
}

pub fn pretrain(s: &Settings, a: PretrainArgs) -> Result<()> {
    const SEC: &str = "pretrain";
    let spec = desk();
    let size = s.get(a.size, SEC, "size", spec.input_size)?;
    let per_class = s.get(a.per_class, SEC, "per_class", spec.pretrain_per_class)?;
    let epochs = s.get(a.epochs, SEC, "epochs", spec.pretrain_epochs)?;
    let seed = s.get(a.seed, SEC, "seed", 0)?;
    let protocol = TrainProtocol {
        batch_size: s.get(a.batch, SEC, "batch", spec.protocol.batch_size)?,
        learning_rate: s.get(a.lr, SEC, "lr", spec.protocol.learning_rate)?,
        seed,
        ..spec.protocol
    };
    let proxy = synth::proxy_textures(per_class, size, seed);
    let pre = pretrain_backbone(&proxy, size, epochs, &protocol)?;
    pre.model.save(&a.out)?;
    println!("proxy accuracy {:.3} after {epochs} epochs", pre.accuracy);
    Ok(())
}

pub fn train(s: &Settings, a: TrainArgs) -> Result<()> {
    const SEC: &str = "train";
    let spec = desk();
    let seed = s.get(a.seed, SEC, "seed", 0)?;
    let protocol = TrainProtocol {
        stage1_epochs: s.get(a.epochs_stage1, SEC, "epochs_stage1", spec.protocol.stage1_epochs)?,
        stage2_epochs: s.get(a.epochs_stage2, SEC, "epochs_stage2", spec.protocol.stage2_epochs)?,
        batch_size: s.get(a.batch, SEC, "batch", spec.protocol.batch_size)?,
        learning_rate: s.get(a.lr, SEC, "lr", spec.protocol.learning_rate)?,
        seed,
    };
    let policy = FreezePolicy {
        unfreeze_last: s.get(a.unfreeze_last, SEC, "unfreeze_last", spec.policy.unfreeze_last)?,
    };
    let lora_rank: Option<usize> = s.optional(a.lora_rank, SEC, "lora_rank")?;
    let mut model = match s.optional(a.pretrained, SEC, "pretrained")? {
        Some(path) => Classifier::load(&path)?.with_fresh_head(seed)?,
        None => Classifier::new(s.get(a.size, SEC, "size", spec.input_size)?, seed)?,
    };
    let manifest = Manifest::load(&a.manifest)?;
    let data = load_labeled(&manifest, Split::Train, &spec.clahe, model.input_size())?;
    if let Some(rank) = lora_rank.filter(|&r| r > 0) {
        model.apply_lora(DenseLayer::Hidden, rank, seed.wrapping_add(1))?;
    }
    let l1 = train_stage1(&mut model, &data, &protocol)?;
    let l2 = train_stage2(&mut model, &data, &protocol, &policy)?;
    model.merge_lora();
    model.save(&a.out)?;
    println!(
        "{} training images; stage 1 loss {:.4}, stage 2 loss {:.4}",
        data.len(),
        l1.last().copied().unwrap_or(f64::NAN),
        l2.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("samples   {}", m.total());
    println!("accuracy  {:.4}", m.accuracy);
    println!("macro F1  {:.4}", m.macro_f1);
    let recall: Vec<String> = m.per_class_recall.iter().map(|r| format!("{r:.3}")).collect();
    println!("recall    {}", recall.join(" "));
    println!("confusion (rows true, columns predicted)");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:6}")).collect();
        println!("{}", cells.join(""));
    }
}

pub fn eval(s: &Settings, a: EvalArgs) -> Result<()> {
    const SEC: &str = "eval";
    let split: Split = s.get(a.split, SEC, "split", "test".to_string())?.parse()?;
    let model = Classifier::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let data = load_labeled(&manifest, split, &desk().clahe, model.input_size())?;
    let images: Vec<_> = data.iter().map(|d| d.image.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    let metrics = confusion(&model.classify(&images)?, &labels)?;
    print_metrics(&metrics);
    Ok(())
}

pub fn gradcam(s: &Settings, a: GradcamArgs) -> Result<()> {
    const SEC: &str = "gradcam";
    let model = Classifier::load(&a.checkpoint)?;
    let img = pnm::read_pgm(&a.image)?;
    let n = model.input_size();
    let img = if img.dimensions() == (n, n) {
        img
    } else {
        resize(&img, n, n, ResampleFilter::Lanczos3)?
    };
    let probs = model.predict(&img)?;
    let class = match a.class {
        Some(c) => c,
        None => argmax(&probs),
    };
    let layer = s.get(a.layer, SEC, "layer", DEFAULT_LAYER)?;
    let blend = s.get(a.blend, SEC, "blend", 0.5)?;
    let cam = grad_cam(&model, &img, class, layer)?;
    pnm::write_ppm(&a.out, &overlay(&img, &cam, blend)?)?;
    if let Some(path) = &a.map {
        pnm::write_pgm(path, &cam.to_image()?)?;
    }
    println!("grade {class} (p = {:.3}), layer {layer}, wrote {}", probs[class], a.out.display());
    Ok(())
}

pub fn experiment(s: &Settings, a: ExperimentArgs) -> Result<()> {
    const SEC: &str = "experiment";
    let root = s.data_root(a.data_root, SEC)?;
    let seed = s.get(a.seed, SEC, "seed", 0)?;
    let which = s.get(a.variant, SEC, "variant", "all".to_string())?;
    let variants: Vec<Variant> = if which == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![which.parse()?]
    };
    let format: ReportFormat = s
        .get(a.format, SEC, "format", "markdown".to_string())?
        .parse()
        .map_err(anyhow::Error::msg)?;

    let mut spec = ExperimentSpec::desk_scale(Variant::Original, seed);
    spec.model_name = s.get(a.model_name, SEC, "model_name", spec.model_name)?;
    spec.protocol.stage1_epochs = s.get(a.epochs_stage1, SEC, "epochs_stage1", spec.protocol.stage1_epochs)?;
    spec.protocol.stage2_epochs = s.get(a.epochs_stage2, SEC, "epochs_stage2", spec.protocol.stage2_epochs)?;
    spec.protocol.batch_size = s.get(a.batch, SEC, "batch", spec.protocol.batch_size)?;
    spec.protocol.learning_rate = s.get(a.lr, SEC, "lr", spec.protocol.learning_rate)?;
    spec.policy.unfreeze_last = s.get(a.unfreeze_last, SEC, "unfreeze_last", spec.policy.unfreeze_last)?;
    spec.lora_rank = s.optional(a.lora_rank, SEC, "lora_rank")?.filter(|&r: &usize| r > 0);
    let per_class = s.get(a.per_class_count, SEC, "per_class_count", spec.augment.plan.count(KlGrade::new(1)?))?;
    spec.augment.plan = AugmentPlan::except_grade0(per_class);
    spec.augment.timesteps = s.get(a.timesteps, SEC, "timesteps", spec.augment.timesteps)?;
    spec.augment.ddim_steps = s.get(a.ddim_steps, SEC, "ddim_steps", spec.augment.ddim_steps)?;
    spec.augment.eta = s.get(a.eta, SEC, "eta", spec.augment.eta)?;
    spec.augment.upscale_command = s.optional(a.upscale_command, SEC, "upscale_command")?;
    if let Some(dir) = s.optional(a.denoisers, SEC, "denoisers")? {
        spec.augment.source = DiffusionSource::Checkpoints(dir);
    }

    let mut report = ExperimentReport::default();
    for variant in variants {
        let cell = ExperimentSpec { variant, ..spec.clone() };
        log::info!("running {variant}");
        let row = run_experiment(&cell, &root, &a.work.join(variant.to_string()))?;
        eprintln!(
            "{variant}: test accuracy {:.3}, valid accuracy {:.3}, {} training images",
            row.test.accuracy, row.valid.accuracy, row.train_size
        );
        report.push(row);
    }
    if let Some(path) = s.optional(a.metrics, SEC, "metrics")? {
        fs::write(&path, emit_metrics_csv(&report)).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", emit_report(&report, format));
    Ok(())
}

pub fn report(s: &Settings, a: ReportArgs) -> Result<()> {
    let format: ReportFormat = s
        .get(a.format, "report", "format", "markdown".to_string())?
        .parse()
        .map_err(anyhow::Error::msg)?;
    let mut report = ExperimentReport::default();
    for path in &a.metrics {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let part = parse_metrics_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        report.rows.extend(part.rows);
    }
    print!("{}", emit_report(&report, format));
    Ok(())
}

pub fn synth(s: &Settings, a: SynthArgs) -> Result<()> {
    const SEC: &str = "synth";
    let counts: [usize; 5] = match a.counts {
        Some(c) => c.try_into().map_err(|_| anyhow::anyhow!("--counts needs five values"))?,
        None => {
            let scale = s.get(a.scale, SEC, "scale", 0.1)?;
            if scale.is_nan() || scale <= 0.0 {
                bail!("scale must be positive");
            }
            REFERENCE_COUNTS.map(|c| (c as f64 * scale).round() as usize)
        }
    };
    let size = s.get(a.size, SEC, "size", desk().input_size)?;
    let seed = s.get(a.seed, SEC, "seed", 0)?;
    synth::write_tree(&a.out, counts, size, seed)?;
    println!("wrote {} images ({counts:?}) to {}", counts.iter().sum::<usize>(), a.out.display());
    Ok(())
}
