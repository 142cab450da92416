mod common;

use std::path::Path;

use common::fixtures::{metrics_with, published_report};
use koa_core::dataset::{AugmentPlan, KlGrade, Manifest, Origin, Split, Variant};
use koa_core::diffusion::{DenoiserTrainConfig, UNetConfig};
use koa_core::harness::synth::{pseudo_radiographs, write_tree};
use koa_core::harness::{
    build_manifest, emit_report, external_upscale, run_experiment, write_numbered, DiffusionSource, ExperimentReport,
    ExperimentRow, ExperimentSpec, HarnessError, ReportFormat, UpscaleSizes,
};
use koa_core::imaging::{pnm, resize, GrayImage, ResampleFilter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, size: usize, seed: u64) -> Vec<GrayImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| GrayImage::from_fn(size, size, |_, _| rng.random::<f64>()).unwrap())
        .collect()
}

#[test]
fn report_matches_golden_table() {
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/results_table.md")).unwrap();
    let text = emit_report(&published_report(), ReportFormat::Markdown);
    assert_eq!(text, golden);
    assert!(text.contains("| EfficientNet B3 | 68% | 76% | 84% |\n"));

    let csv = emit_report(&published_report(), ReportFormat::Csv);
    assert_eq!(csv.lines().nth(4), Some("EfficientNet B3,68,76,84"));
    assert_eq!(csv.lines().count(), 8);
}

#[test]
fn report_truncates_percent() {
    let mut report = ExperimentReport::default();
    report.push(ExperimentRow {
        model: "m".into(),
        variant: Variant::Original,
        test: metrics_with(2, 3),
        valid: metrics_with(2, 3),
        train_size: 3,
    });
    assert_eq!(emit_report(&report, ReportFormat::Markdown).lines().nth(2), Some("| m | 66% | - | - |"));
}

#[test]
fn upscale_fallback_produces_final_size() {
    let tmp = tempfile::tempdir().unwrap();
    let (din, dout) = (tmp.path().join("in"), tmp.path().join("out"));
    write_numbered(&din, &random_images(3, 16, 1)).unwrap();
    let summary = external_upscale(&din, &dout, None, UpscaleSizes::default()).unwrap();
    assert_eq!(summary.processed, 3);
    assert!(summary.failures.is_empty());
    for i in 0..3 {
        let img = pnm::read_pgm(dout.join(format!("{i:05}.pgm"))).unwrap();
        assert_eq!(img.dimensions(), (224, 224));
    }
}

#[test]
fn copy_command_equals_final_stage_only() {
    let tmp = tempfile::tempdir().unwrap();
    let (din, dout) = (tmp.path().join("in dir"), tmp.path().join("out"));
    write_numbered(&din, &random_images(4, 20, 2)).unwrap();
    let sizes = UpscaleSizes {
        intermediate: 256,
        output: 48,
    };
    let summary = external_upscale(&din, &dout, Some("cp {in} {out}"), sizes).unwrap();
    assert_eq!(summary.processed, 4);
    for i in 0..4 {
        let name = format!("{i:05}.pgm");
        let input = pnm::read_pgm(din.join(&name)).unwrap();
        let expected = resize(&input, 48, 48, ResampleFilter::Lanczos3).unwrap();
        let got = std::fs::read(dout.join(&name)).unwrap();
        assert_eq!(got, pnm::encode_pgm(&expected));
    }
}

#[test]
fn one_failing_file_is_collected() {
    let tmp = tempfile::tempdir().unwrap();
    let (din, dout) = (tmp.path().join("in"), tmp.path().join("out"));
    write_numbered(&din, &random_images(10, 8, 3)).unwrap();
    let template = "case {in} in *00003.pgm) exit 3;; esac; cp {in} {out}";
    let summary = external_upscale(&din, &dout, Some(template), UpscaleSizes { intermediate: 8, output: 8 }).unwrap();
    assert_eq!(summary.processed, 9);
    assert_eq!(summary.failures.len(), 1);
    assert!(summary.failures[0].path.ends_with("00003.pgm"));
    assert!(!dout.join("00003.pgm").exists());
}

#[test]
fn template_without_placeholders_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let err = external_upscale(tmp.path(), tmp.path(), Some("cp {in} x"), UpscaleSizes::default()).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
}

const COUNTS: [usize; 5] = [20, 10, 12, 8, 6];

fn tiny_spec(variant: Variant, seed: u64) -> ExperimentSpec {
    let mut spec = ExperimentSpec::desk_scale(variant, seed);
    spec.input_size = 16;
    spec.pretrain_per_class = 4;
    spec.pretrain_epochs = 1;
    spec.protocol.stage1_epochs = 1;
    spec.protocol.stage2_epochs = 1;
    spec.augment.plan = AugmentPlan { per_grade: [0, 0, 0, 2, 3] };
    spec.augment.generation_size = 8;
    spec.augment.upscale = UpscaleSizes {
        intermediate: 32,
        output: 16,
    };
    spec.augment.timesteps = 50;
    spec.augment.ddim_steps = 3;
    spec.augment.min_denoiser_steps = 0;
    spec.augment.source = DiffusionSource::Train(DenoiserTrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 0,
        unet: UNetConfig {
            base_channels: 4,
            time_dim: 8,
        },
    });
    spec
}

fn corpus() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    write_tree(&tmp.path().join("data"), COUNTS, 32, 7).unwrap();
    tmp
}

fn strip_variant(m: &Manifest) -> String {
    m.to_text().lines().skip(1).collect::<Vec<_>>().join("\n")
}

#[test]
fn variant_manifests_differ_only_where_expected() {
    let tmp = corpus();
    let data = tmp.path().join("data");
    let work = tmp.path().join("work");
    let original = build_manifest(&tiny_spec(Variant::Original, 3), &data, &work).unwrap();
    let pre = build_manifest(&tiny_spec(Variant::Preprocessed, 3), &data, &work).unwrap();
    let aug = build_manifest(&tiny_spec(Variant::Augmented, 3), &data, &work).unwrap();

    assert_eq!(original.variant, Variant::Original);
    assert_eq!(pre.variant, Variant::Preprocessed);
    assert_eq!(strip_variant(&original), strip_variant(&pre));

    let train = |m: &Manifest| m.in_split(Split::Train).count();
    assert_eq!(train(&aug), train(&pre) + 5);
    assert_eq!(aug.len(), pre.len() + 5);
    for s in aug.samples().iter().filter(|s| s.origin == Origin::Generated) {
        assert_eq!(s.split, Some(Split::Train));
        assert!(s.grade.value() >= 3);
        assert_eq!(pnm::read_pgm(&s.image_ref).unwrap().dimensions(), (16, 16));
    }
    let sum_generated = |g: u8| {
        aug.samples()
            .iter()
            .filter(|s| s.origin == Origin::Generated && s.grade == KlGrade::new(g).unwrap())
            .count()
    };
    assert_eq!((sum_generated(3), sum_generated(4)), (2, 3));
}

#[test]
fn missing_denoiser_names_the_grade() {
    let tmp = corpus();
    let data = tmp.path().join("data");
    let ckpts = tmp.path().join("ckpts");
    std::fs::create_dir_all(&ckpts).unwrap();
    let mut spec = tiny_spec(Variant::Augmented, 1);
    spec.augment.source = DiffusionSource::Checkpoints(ckpts);
    let err = build_manifest(&spec, &data, &tmp.path().join("work")).unwrap_err();
    match &err {
        HarnessError::MissingDenoiser { grade, .. } => assert_eq!(grade.value(), 3),
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("grade 3"));
}

#[test]
fn trained_denoisers_are_reusable_as_checkpoints() {
    let tmp = corpus();
    let data = tmp.path().join("data");
    let work = tmp.path().join("work");
    let trained = build_manifest(&tiny_spec(Variant::Augmented, 4), &data, &work).unwrap();
    let first: Vec<Vec<u8>> = trained
        .samples()
        .iter()
        .filter(|s| s.origin == Origin::Generated)
        .map(|s| std::fs::read(&s.image_ref).unwrap())
        .collect();

    let mut spec = tiny_spec(Variant::Augmented, 4);
    spec.augment.source = DiffusionSource::Checkpoints(work.join("denoisers"));
    let reloaded = build_manifest(&spec, &data, &tmp.path().join("work2")).unwrap();
    let second: Vec<Vec<u8>> = reloaded
        .samples()
        .iter()
        .filter(|s| s.origin == Origin::Generated)
        .map(|s| std::fs::read(&s.image_ref).unwrap())
        .collect();
    assert_eq!(first, second);
}

#[test]
fn experiment_is_deterministic_and_reconciles_with_splits() {
    let tmp = corpus();
    let data = tmp.path().join("data");
    for variant in Variant::ALL {
        let spec = tiny_spec(variant, 11);
        let a = run_experiment(&spec, &data, &tmp.path().join("a")).unwrap();
        let b = run_experiment(&spec, &data, &tmp.path().join("b")).unwrap();
        assert_eq!(a, b);

        let manifest = build_manifest(&spec, &data, &tmp.path().join("c")).unwrap();
        for (split, metrics) in [(Split::Test, &a.test), (Split::Valid, &a.valid)] {
            for grade in KlGrade::ALL {
                let expected = manifest.in_split(split).filter(|s| s.grade == grade).count();
                assert_eq!(metrics.support(grade.index()), expected, "{variant} {split} grade {grade}");
            }
        }
        assert_eq!(a.train_size, manifest.in_split(Split::Train).count());
    }
}

#[test]
fn synthetic_tree_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    write_tree(tmp.path(), [2, 1, 0, 1, 1], 16, 5).unwrap();
    let expected = pseudo_radiographs([2, 1, 0, 1, 1], 16, 5);
    let img = pnm::read_pgm(tmp.path().join("3/00000.pgm")).unwrap();
    assert_eq!(img.quantize(), expected[3].image.quantize());
}
