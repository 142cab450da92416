//! Dataset catalog: KL-graded samples, stratified splits and the three
//! dataset variants (original, preprocessed, augmented).
//!
//! On disk a dataset is a directory tree `root/{0..4}/*.pgm`. A [`Manifest`]
//! is persisted as tab-separated lines `id, path, grade, split, origin`
//! preceded by one `#` header line carrying the variant and split seed.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::pnm;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("augmentation needs generated images for grade {grade}, but {dir} is missing")]
    MissingGenerated { grade: KlGrade, dir: PathBuf },
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid value: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Kellgren-Lawrence grade, 0 (none) to 4 (severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KlGrade(u8);

impl KlGrade {
    pub const COUNT: usize = 5;
    pub const ALL: [KlGrade; 5] = [KlGrade(0), KlGrade(1), KlGrade(2), KlGrade(3), KlGrade(4)];

    pub fn new(value: u8) -> Result<Self, DatasetError> {
        if (value as usize) < Self::COUNT {
            Ok(Self(value))
        } else {
            Err(DatasetError::Invalid(format!("KL grade {value} outside 0..=4")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for KlGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for KlGrade {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: u8 = s
            .parse()
            .map_err(|_| DatasetError::Invalid(format!("not a KL grade: {s:?}")))?;
        Self::new(v)
    }
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = DatasetError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(DatasetError::Invalid(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    Valid,
}

text_enum!(Split { Train => "train", Test => "test", Valid => "valid" });

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Valid];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Original,
    Generated,
}

text_enum!(Origin { Original => "original", Generated => "generated" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Original,
    Preprocessed,
    Augmented,
}

text_enum!(Variant { Original => "original", Preprocessed => "preprocessed", Augmented => "augmented" });

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::Preprocessed, Variant::Augmented];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image_ref: PathBuf,
    pub grade: KlGrade,
    /// `None` until [`stratified_split`] assigns one.
    pub split: Option<Split>,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    samples: Vec<Sample>,
    pub variant: Variant,
    pub seed: Option<u64>,
}

impl Manifest {
    /// Builds a manifest, sorting samples by id and rejecting duplicate ids
    /// and generated samples outside the training split.
    pub fn new(mut samples: Vec<Sample>, variant: Variant, seed: Option<u64>) -> Result<Self, DatasetError> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate sample id {:?}", s.id)));
            }
            if s.origin == Origin::Generated && matches!(s.split, Some(Split::Test | Split::Valid)) {
                return Err(DatasetError::Invalid(format!(
                    "generated sample {:?} assigned to {}",
                    s.id,
                    s.split.expect("matched Some")
                )));
            }
        }
        Ok(Self { samples, variant, seed })
    }

    pub fn empty(variant: Variant) -> Self {
        Self {
            samples: Vec::new(),
            variant,
            seed: None,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# koa-manifest v1 variant={} seed={}\n",
            self.variant,
            self.seed.map_or_else(|| "-".to_string(), |s| s.to_string())
        );
        for s in &self.samples {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.id,
                s.image_ref.display(),
                s.grade,
                s.split.map_or("-", Split::as_str),
                s.origin
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            reason: "empty manifest".into(),
        })?;
        let header_err = |reason: &str| DatasetError::Parse {
            line: 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = header
            .strip_prefix("# koa-manifest v1 ")
            .ok_or_else(|| header_err("missing '# koa-manifest v1' header"))?
            .split_whitespace()
            .collect();
        let mut variant = None;
        let mut seed = None;
        for field in fields {
            match field.split_once('=') {
                Some(("variant", v)) => variant = Some(v.parse()?),
                Some(("seed", "-")) => seed = None,
                Some(("seed", v)) => seed = Some(v.parse().map_err(|_| header_err("bad seed"))?),
                _ => return Err(header_err("unknown header field")),
            }
        }
        let variant = variant.ok_or_else(|| header_err("missing variant"))?;

        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| DatasetError::Parse { line: i + 1, reason };
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, path, grade, split, origin] = cols[..] else {
                return Err(parse_err(format!("expected 5 tab-separated fields, got {}", cols.len())));
            };
            samples.push(Sample {
                id: id.to_string(),
                image_ref: PathBuf::from(path),
                grade: grade.parse().map_err(|e: DatasetError| parse_err(e.to_string()))?,
                split: match split {
                    "-" => None,
                    s => Some(s.parse().map_err(|e: DatasetError| parse_err(e.to_string()))?),
                },
                origin: origin.parse().map_err(|e: DatasetError| parse_err(e.to_string()))?,
            });
        }
        Self::new(samples, variant, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// A file that [`scan_tree`] could not use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug)]
pub struct Scan {
    pub manifest: Manifest,
    pub skipped: Vec<Skipped>,
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

/// Catalogs `root/{0..4}/*.pgm`. Each file's header is decoded; unreadable
/// images are reported in [`Scan::skipped`] and left out.
pub fn scan_tree(root: impl AsRef<Path>) -> Result<Scan, DatasetError> {
    let root = root.as_ref();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let grade: KlGrade = name.parse().map_err(|_| {
            DatasetError::Layout(format!(
                "unexpected subdirectory {:?} in {} (expected 0..4)",
                name,
                root.display()
            ))
        })?;
        for file in sorted_entries(&dir)? {
            if !file.is_file() || !is_pgm(&file) {
                continue;
            }
            if let Err(e) = pnm::read_pgm(&file) {
                log::warn!("skipping {}: {e}", file.display());
                skipped.push(Skipped {
                    path: file,
                    reason: e.to_string(),
                });
                continue;
            }
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            samples.push(Sample {
                id: format!("{grade}/{stem}"),
                image_ref: file.clone(),
                grade,
                split: None,
                origin: Origin::Original,
            });
        }
    }
    Ok(Scan {
        manifest: Manifest::new(samples, Variant::Original, None)?,
        skipped,
    })
}

/// Train / test / valid fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub valid: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.75,
            test: 0.15,
            valid: 0.10,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.test, self.valid];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Invalid(format!("split ratios {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items: each split gets the
    /// floor of its exact share, and leftover items go to the splits with
    /// the largest fractional parts (ties: train, then test, then valid).
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let exact = [self.train, self.test, self.valid].map(|r| r * n as f64);
        let mut counts = exact.map(|e| e.floor() as usize);
        let mut leftover = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            counts[i] += 1;
            leftover -= 1;
        }
        counts
    }
}

fn grade_rng(seed: u64, grade: KlGrade) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (u64::from(grade.value()) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Per-grade seeded shuffle followed by [`SplitRatios::apportion`].
/// Generated samples are pinned to the training split and excluded from
/// the apportionment.
pub fn stratified_split(manifest: &Manifest, ratios: SplitRatios, seed: u64) -> Result<Manifest, DatasetError> {
    ratios.validate()?;
    let mut samples = manifest.samples.clone();
    for grade in KlGrade::ALL {
        let mut idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.grade == grade && s.origin == Origin::Original)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut grade_rng(seed, grade));
        let [train, test, _] = ratios.apportion(idx.len());
        for (rank, &i) in idx.iter().enumerate() {
            samples[i].split = Some(if rank < train {
                Split::Train
            } else if rank < train + test {
                Split::Test
            } else {
                Split::Valid
            });
        }
    }
    for s in samples.iter_mut().filter(|s| s.origin == Origin::Generated) {
        s.split = Some(Split::Train);
    }
    Manifest::new(samples, manifest.variant, Some(seed))
}

/// Number of generated images to add per grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPlan {
    pub per_grade: [usize; KlGrade::COUNT],
}

impl Default for AugmentPlan {
    /// 200 images for each grade except grade 0.
    fn default() -> Self {
        Self::except_grade0(200)
    }
}

impl AugmentPlan {
    pub fn none() -> Self {
        Self { per_grade: [0; 5] }
    }

    pub fn except_grade0(count: usize) -> Self {
        Self {
            per_grade: [0, count, count, count, count],
        }
    }

    pub fn count(&self, grade: KlGrade) -> usize {
        self.per_grade[grade.index()]
    }

    pub fn total(&self) -> usize {
        self.per_grade.iter().sum()
    }
}

/// Appends generated images from `generated_dir/{grade}/*.pgm` to the
/// training split. At most `plan.count(grade)` files are taken per grade, in
/// file-name order.
pub fn assemble_augmented(
    base: &Manifest,
    generated_dir: impl AsRef<Path>,
    plan: &AugmentPlan,
) -> Result<Manifest, DatasetError> {
    if let Some(s) = base.samples.iter().find(|s| s.split.is_none()) {
        return Err(DatasetError::Invalid(format!(
            "base manifest has unsplit sample {:?}; run stratified_split first",
            s.id
        )));
    }
    let generated_dir = generated_dir.as_ref();
    let mut samples = base.samples.clone();
    for grade in KlGrade::ALL {
        let wanted = plan.count(grade);
        if wanted == 0 {
            continue;
        }
        let dir = generated_dir.join(grade.to_string());
        if !dir.is_dir() {
            return Err(DatasetError::MissingGenerated { grade, dir });
        }
        let files = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_pgm(p));
        for file in files.take(wanted) {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            samples.push(Sample {
                id: format!("gen/{grade}/{stem}"),
                image_ref: file.clone(),
                grade,
                split: Some(Split::Train),
                origin: Origin::Generated,
            });
        }
    }
    Manifest::new(samples, Variant::Augmented, base.seed)
}

/// Sample counts per grade and split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    /// `[grade][train, test, valid, unassigned]`
    pub table: [[usize; 4]; KlGrade::COUNT],
}

impl ClassCounts {
    pub fn get(&self, grade: KlGrade, split: Option<Split>) -> usize {
        let col = match split {
            Some(Split::Train) => 0,
            Some(Split::Test) => 1,
            Some(Split::Valid) => 2,
            None => 3,
        };
        self.table[grade.index()][col]
    }

    pub fn grade_total(&self, grade: KlGrade) -> usize {
        self.table[grade.index()].iter().sum()
    }

    pub fn total(&self) -> usize {
        self.table.iter().flatten().sum()
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| Grade | Train | Test | Valid | Total |")?;
        writeln!(f, "|---|---|---|---|---|")?;
        for grade in KlGrade::ALL {
            let row = self.table[grade.index()];
            writeln!(f, "| {grade} | {} | {} | {} | {} |", row[0], row[1], row[2], self.grade_total(grade))?;
        }
        Ok(())
    }
}

pub fn class_counts(manifest: &Manifest) -> ClassCounts {
    let mut counts = ClassCounts::default();
    for s in &manifest.samples {
        let col = match s.split {
            Some(Split::Train) => 0,
            Some(Split::Test) => 1,
            Some(Split::Valid) => 2,
            None => 3,
        };
        counts.table[s.grade.index()][col] += 1;
    }
    counts
}
