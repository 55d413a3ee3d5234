//! Composition-classification data: a loader for KU-PCP style directories
//! and a deterministic synthetic generator with one archetype per class.
//!
//! Two on-disk layouts are accepted under `root`:
//!
//! * a manifest `root/labels.csv` with header `path,split,labels`, where
//!   `path` is relative to `root`, `split` is `train` or `test`, and
//!   `labels` is a `;`-separated list of class names;
//! * per-class folders `root/{train,test}/{class name}/<image>`. A file name
//!   present under several class folders of the same split becomes one
//!   multi-label sample.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::{load_network_input, GrayscaleImage, INPUT_SIZE};
use crate::render::{Archetype, Canvas};

pub const NUM_CLASSES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CompositionClass {
    RuleOfThirds,
    Center,
    Horizontal,
    Symmetric,
    Diagonal,
    Curved,
    Vertical,
    Triangle,
    RepeatedPattern,
}

impl CompositionClass {
    pub const ALL: [CompositionClass; NUM_CLASSES] = [
        CompositionClass::RuleOfThirds,
        CompositionClass::Center,
        CompositionClass::Horizontal,
        CompositionClass::Symmetric,
        CompositionClass::Diagonal,
        CompositionClass::Curved,
        CompositionClass::Vertical,
        CompositionClass::Triangle,
        CompositionClass::RepeatedPattern,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Canonical dataset label string.
    pub fn name(self) -> &'static str {
        match self {
            CompositionClass::RuleOfThirds => "rule-of-thirds",
            CompositionClass::Center => "center",
            CompositionClass::Horizontal => "horizontal",
            CompositionClass::Symmetric => "symmetric",
            CompositionClass::Diagonal => "diagonal",
            CompositionClass::Curved => "curved",
            CompositionClass::Vertical => "vertical",
            CompositionClass::Triangle => "triangle",
            CompositionClass::RepeatedPattern => "repeated pattern",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

/// Ordered, duplicate-free, nonempty set of classes. The first entry is the
/// primary label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionLabel {
    classes: Vec<CompositionClass>,
}

impl CompositionLabel {
    pub fn new(classes: impl IntoIterator<Item = CompositionClass>) -> Result<Self> {
        let mut out: Vec<CompositionClass> = Vec::new();
        for c in classes {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        if out.is_empty() {
            return Err(Error::RejectedInput("composition label needs at least one class".into()));
        }
        Ok(Self { classes: out })
    }

    pub fn single(class: CompositionClass) -> Self {
        Self { classes: vec![class] }
    }

    pub fn classes(&self) -> &[CompositionClass] {
        &self.classes
    }

    pub fn primary(&self) -> CompositionClass {
        self.classes[0]
    }

    pub fn contains(&self, class: CompositionClass) -> bool {
        self.classes.contains(&class)
    }

    pub fn multi_hot(&self) -> [bool; NUM_CLASSES] {
        let mut v = [false; NUM_CLASSES];
        for c in &self.classes {
            v[c.index()] = true;
        }
        v
    }

    fn merge(&mut self, class: CompositionClass) {
        if !self.classes.contains(&class) {
            self.classes.push(class);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSample {
    pub image: GrayscaleImage,
    pub label: CompositionLabel,
    pub split: Split,
}

/// Result of scanning a dataset directory.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<CompositionSample>,
    pub skipped: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CompositionSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Percentage of samples in `split` carrying each class (multi-label
    /// samples count toward every class they carry).
    pub fn class_percentages(&self, split: Split) -> [f64; NUM_CLASSES] {
        class_percentages(self.split(split))
    }

    pub fn multi_label_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let multi = self.samples.iter().filter(|s| s.label.classes().len() > 1).count();
        multi as f64 / self.samples.len() as f64
    }
}

pub fn class_percentages<'a>(samples: impl Iterator<Item = &'a CompositionSample>) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    let mut total = 0usize;
    for s in samples {
        total += 1;
        for c in s.label.classes() {
            counts[c.index()] += 1;
        }
    }
    let mut out = [0.0; NUM_CLASSES];
    if total > 0 {
        for (o, c) in out.iter_mut().zip(counts) {
            *o = 100.0 * c as f64 / total as f64;
        }
    }
    out
}

struct PendingSample {
    path: PathBuf,
    source_id: String,
    label: CompositionLabel,
    split: Split,
}

/// Loads a KU-PCP style dataset, preprocessing every image to 256x256.
pub fn load_kupcp(root: &Path) -> Result<LoadReport> {
    let manifest = root.join("labels.csv");
    let pending = if manifest.is_file() {
        read_manifest(root, &manifest)?
    } else {
        scan_class_folders(root)?
    };
    let mut report = LoadReport::default();
    if pending.is_empty() {
        let msg = format!("no composition samples found under {}", root.display());
        log::warn!("{msg}");
        report.warnings.push(msg);
        return Ok(report);
    }

    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for p in &pending {
        if let Some(prev) = seen.insert(&p.source_id, p.split) {
            if prev != p.split {
                return Err(Error::schema(
                    p.source_id.clone(),
                    "sample listed in both train and test splits",
                ));
            }
            return Err(Error::schema(p.source_id.clone(), "sample listed twice"));
        }
    }

    for p in pending {
        match load_network_input(&p.path, p.source_id.clone(), None) {
            Ok(image) => report.samples.push(CompositionSample {
                image,
                label: p.label,
                split: p.split,
            }),
            Err(e) => {
                let msg = format!("skipping {}: {e}", p.path.display());
                log::warn!("{msg}");
                report.warnings.push(msg);
                report.skipped.push((p.path, e.to_string()));
            }
        }
    }
    if !report.skipped.is_empty() {
        report
            .warnings
            .push(format!("{} unreadable images skipped", report.skipped.len()));
    }
    Ok(report)
}

fn parse_labels(field: &str, location: &str) -> Result<CompositionLabel> {
    let mut classes = Vec::new();
    for name in field.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let class = CompositionClass::from_name(name)
            .ok_or_else(|| Error::schema(location, format!("unknown class name {name:?}")))?;
        classes.push(class);
    }
    CompositionLabel::new(classes).map_err(|_| Error::schema(location, "empty label list"))
}

fn read_manifest(root: &Path, manifest: &Path) -> Result<Vec<PendingSample>> {
    #[derive(Deserialize)]
    struct Row {
        path: String,
        split: String,
        labels: String,
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(manifest)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        // header is line 1
        let location = format!("{}:{}", manifest.display(), i + 2);
        let row = row.map_err(|e| Error::schema(location.clone(), e.to_string()))?;
        let split = Split::parse(&row.split)
            .ok_or_else(|| Error::schema(location.clone(), format!("unknown split {:?}", row.split)))?;
        let label = parse_labels(&row.labels, &location)?;
        out.push(PendingSample {
            path: root.join(&row.path),
            source_id: row.path,
            label,
            split,
        });
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn scan_class_folders(root: &Path) -> Result<Vec<PendingSample>> {
    let mut out: Vec<PendingSample> = Vec::new();
    for split in [Split::Train, Split::Test] {
        let split_dir = root.join(split.name());
        if !split_dir.is_dir() {
            continue;
        }
        // file name -> index into `out`, for multi-label merging
        let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
        for class_dir in sorted_entries(&split_dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let class_name = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let class = CompositionClass::from_name(&class_name).ok_or_else(|| {
                Error::schema(class_dir.display().to_string(), format!("unknown class name {class_name:?}"))
            })?;
            for file in sorted_entries(&class_dir)? {
                if !file.is_file() {
                    continue;
                }
                let fname = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
                match by_name.get(&fname) {
                    Some(&idx) => out[idx].label.merge(class),
                    None => {
                        by_name.insert(fname.clone(), out.len());
                        out.push(PendingSample {
                            path: file,
                            source_id: format!("{}/{fname}", split.name()),
                            label: CompositionLabel::single(class),
                            split,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn sample_seed(seed: u64, class: usize, i: usize) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(1 + (class as u64) * 1_000_003 + i as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one archetype image of `class` from its own RNG.
pub fn render_archetype(class: CompositionClass, rng: &mut ChaCha8Rng, source_id: String) -> Result<GrayscaleImage> {
    use rand::Rng;
    let mut canvas = Canvas::new(INPUT_SIZE, INPUT_SIZE, 0.0);
    let base = rng.gen_range(0.1..0.25);
    canvas.noise_background(base, 0.05, rng);
    let arch = Archetype::sample(class, rng);
    arch.draw(&mut canvas, rng.gen_range(0.8..1.0));
    canvas.into_image(source_id)
}

/// `n_per_class` single-label training samples per class, bitwise
/// deterministic in `seed`.
pub fn generate_synthetic_composition(n_per_class: usize, seed: u64) -> Result<Vec<CompositionSample>> {
    generate_split(n_per_class, seed, Split::Train)
}

/// Same generator, tagging the split. Use distinct seeds for train and test.
pub fn generate_split(n_per_class: usize, seed: u64, split: Split) -> Result<Vec<CompositionSample>> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for class in CompositionClass::ALL {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, class.index(), i));
            let id = format!("synthetic/{seed}/{}/{i}", class.name().replace(' ', "-"));
            out.push(CompositionSample {
                image: render_archetype(class, &mut rng, id)?,
                label: CompositionLabel::single(class),
                split,
            });
        }
    }
    Ok(out)
}

/// Writes samples as `{split}/{class}/{n}.png` plus a `labels.csv`
/// manifest readable by [`load_kupcp`].
pub fn write_dataset(samples: &[CompositionSample], root: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path({
        std::fs::create_dir_all(root)?;
        root.join("labels.csv")
    })?;
    w.write_record(["path", "split", "labels"])?;
    for (n, s) in samples.iter().enumerate() {
        let rel = format!("{}/{}/{n:05}.png", s.split.name(), s.label.primary().name().replace(' ', "-"));
        let path = root.join(&rel);
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        crate::preprocessing::save_png(&s.image, &path)?;
        let labels: Vec<&str> = s.label.classes().iter().map(|c| c.name()).collect();
        w.write_record([rel.as_str(), s.split.name(), &labels.join(";")])?;
    }
    w.flush()?;
    Ok(())
}
