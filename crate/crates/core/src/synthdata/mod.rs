//! Seeded synthetic two-view multi-domain dataset, its on-disk manifest and
//! the training-time sampling helpers.

mod augment;
mod batch;
mod render;

pub use augment::{augment_image, augment_pair, AugmentParams};
pub use batch::{compose_batch, BatchComposer};
pub use render::{render_pair, LesionKind, LesionMeta};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::io::{self as tio, FormatError};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "sample_id,cc_path,mlo_path,label,domain_id,split";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const LESIONS_FILE: &str = "lesions.csv";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("bad manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("augmentation is only applied to training images")]
    TestSplit,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Acquisition style of one synthetic vendor/site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain_id: usize,
    pub intensity_offset: f64,
    pub intensity_scale: f64,
    pub gamma_exponent: f64,
    pub noise_std: f64,
    pub texture_frequency: f64,
}

/// Reference style table; domains beyond it are derived deterministically.
const STYLES: [(f64, f64, f64, f64, f64); 4] = [
    (0.00, 0.46, 1.00, 0.020, 3.0),
    (0.46, 0.38, 0.85, 0.025, 5.0),
    (0.68, 0.30, 1.20, 0.015, 4.0),
    (0.24, 0.42, 1.10, 0.022, 6.0),
];

pub fn domain_style(domain_id: usize) -> DomainStyle {
    let (o, s, g, n, f) = if domain_id < STYLES.len() {
        STYLES[domain_id]
    } else {
        let k = (domain_id - STYLES.len()) as f64;
        let u = |a: f64| (a * (k + 1.0)).fract();
        (0.05 + 0.4 * u(0.618_034), 0.6 + 0.35 * u(0.414_214), 0.8 + 0.5 * u(0.732_051), 0.015 + 0.02 * u(0.236_068), 3.0 + 3.0 * u(0.302_776))
    };
    DomainStyle { domain_id, intensity_offset: o, intensity_scale: s, gamma_exponent: g, noise_std: n, texture_frequency: f }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_domains: usize,
    pub per_domain: usize,
    pub malignant_fraction: f64,
    pub image_size: usize,
    pub seed: u64,
    /// Domains held out entirely for testing; defaults to the last one.
    pub unseen_domains: Vec<usize>,
    /// Fraction of each seen domain assigned to the training split.
    pub train_fraction: f64,
}

impl GenConfig {
    /// The frozen reference benchmark: 4 domains of 400 pairs, a quarter
    /// malignant, 64-pixel images, seed 42, domain 3 unseen.
    pub fn reference() -> Self {
        GenConfig::new(4, 400, 0.25, 64, 42)
    }

    pub fn new(num_domains: usize, per_domain: usize, malignant_fraction: f64, image_size: usize, seed: u64) -> Self {
        GenConfig {
            num_domains,
            per_domain,
            malignant_fraction,
            image_size,
            seed,
            unseen_domains: vec![num_domains.saturating_sub(1)],
            train_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.num_domains < 2 {
            return bad("need at least 2 domains");
        }
        if self.per_domain < 4 {
            return bad("need at least 4 samples per domain");
        }
        if !(self.malignant_fraction > 0.0 && self.malignant_fraction < 1.0) {
            return bad("malignant fraction must lie strictly between 0 and 1");
        }
        if self.image_size < 16 {
            return bad("image size must be at least 16");
        }
        if self.unseen_domains.iter().any(|&d| d >= self.num_domains) {
            return bad("unseen domain id out of range");
        }
        if self.unseen_domains.len() >= self.num_domains {
            return bad("at least one domain must be seen");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must lie strictly between 0 and 1");
        }
        let styles: Vec<DomainStyle> = (0..self.num_domains).map(domain_style).collect();
        for (i, a) in styles.iter().enumerate() {
            for b in &styles[i + 1..] {
                let same = (a.intensity_offset, a.intensity_scale, a.gamma_exponent, a.noise_std, a.texture_frequency)
                    == (b.intensity_offset, b.intensity_scale, b.gamma_exponent, b.noise_std, b.texture_frequency);
                if same {
                    return Err(DataError::Config(format!("domains {} and {} share a style", a.domain_id, b.domain_id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub cc_path: String,
    pub mlo_path: String,
    pub label: u8,
    pub domain_id: usize,
    pub split: Split,
}

/// Sample table plus the seen/unseen partition. Seen domains are those
/// with training rows; unseen domains only have test rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub seen_domains: Vec<usize>,
    pub unseen_domains: Vec<usize>,
}

impl DatasetManifest {
    pub fn from_rows(root: PathBuf, rows: Vec<ManifestRow>) -> Self {
        let all: BTreeSet<usize> = rows.iter().map(|r| r.domain_id).collect();
        let seen: BTreeSet<usize> = rows.iter().filter(|r| r.split == Split::Train).map(|r| r.domain_id).collect();
        let unseen = all.difference(&seen).copied().collect();
        DatasetManifest { root, rows, seen_domains: seen.into_iter().collect(), unseen_domains: unseen }
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER.split(',')).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.sample_id.as_str(),
                &r.cc_path,
                &r.mlo_path,
                &r.label.to_string(),
                &r.domain_id.to_string(),
                r.split.as_str(),
            ])
            .expect("in-memory write");
        }
        let bytes = w.into_inner().expect("in-memory flush");
        fs::write(path, bytes).map_err(io_err(path))
    }

    /// Reads `manifest.csv` from a dataset directory (or a CSV path).
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        let bad = |msg: String| DataError::Manifest { path: file.display().to_string(), msg };
        if text.lines().next() != Some(MANIFEST_HEADER) {
            return Err(bad(format!("header must be `{MANIFEST_HEADER}`")));
        }
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            if rec.len() != 6 {
                return Err(bad(format!("row {} has {} fields", i + 1, rec.len())));
            }
            let label = match &rec[3] {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("row {}: label `{other}` is not 0/1", i + 1))),
            };
            let domain_id = rec[4].parse().map_err(|_| bad(format!("row {}: bad domain id `{}`", i + 1, &rec[4])))?;
            let split = Split::parse(&rec[5]).ok_or_else(|| bad(format!("row {}: bad split `{}`", i + 1, &rec[5])))?;
            rows.push(ManifestRow {
                sample_id: rec[0].to_string(),
                cc_path: rec[1].to_string(),
                mlo_path: rec[2].to_string(),
                label,
                domain_id,
                split,
            });
        }
        let mut ids = BTreeSet::new();
        for r in &rows {
            if !ids.insert(&r.sample_id) {
                return Err(bad(format!("duplicate sample id `{}`", r.sample_id)));
            }
        }
        Ok(DatasetManifest::from_rows(root, rows))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn find(&self, sample_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.sample_id == sample_id)
    }

    /// Indices of rows in `split` belonging to `domains`.
    pub fn select(&self, split: Split, domains: &[usize]) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split && domains.contains(&self.rows[i].domain_id)).collect()
    }

    /// Loads both views of a row as `1×H×W` tensors.
    pub fn load(&self, row: &ManifestRow) -> Result<(Tensor<f32>, Tensor<f32>), DataError> {
        let cc = tio::read_file(&self.resolve(&row.cc_path))?;
        let mlo = tio::read_file(&self.resolve(&row.mlo_path))?;
        Ok((cc, mlo))
    }

    /// Checks that every referenced tensor file exists and parses.
    pub fn verify(&self) -> Result<(), DataError> {
        for r in &self.rows {
            self.load(r)?;
        }
        Ok(())
    }
}

/// Number of malignant samples per domain: `round(fraction · per_domain)`,
/// kept within `[1, per_domain − 1]`.
pub fn malignant_count(per_domain: usize, fraction: f64) -> usize {
    ((fraction * per_domain as f64).round() as usize).clamp(1, per_domain - 1)
}

/// Writes the tensor files, `manifest.csv` and `lesions.csv` under
/// `out_dir`. Output depends only on `cfg`.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let n_mal = malignant_count(cfg.per_domain, cfg.malignant_fraction);
    let mut rows = Vec::new();
    let mut lesions = csv::Writer::from_writer(Vec::new());
    lesions
        .write_record(["sample_id", "kind", "cc_row", "cc_col", "mlo_row", "mlo_col", "radius"])
        .expect("in-memory write");
    for d in 0..cfg.num_domains {
        let style = domain_style(d);
        let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed);
        drng.set_stream(1 + d as u64);
        let mut labels: Vec<u8> = (0..cfg.per_domain).map(|i| (i < n_mal) as u8).collect();
        labels.shuffle(&mut drng);
        let unseen = cfg.unseen_domains.contains(&d);
        let splits = assign_splits(&labels, cfg.train_fraction, unseen, &mut drng);
        for i in 0..cfg.per_domain {
            let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
            srng.set_stream(((d as u64 + 1) << 32) | i as u64);
            let (cc, mlo, meta) = render_pair(cfg.image_size, &style, labels[i] == 1, &mut srng);
            let id = format!("d{d}-{i:05}");
            let cc_rel = format!("images/{id}_cc.mdgt");
            let mlo_rel = format!("images/{id}_mlo.mdgt");
            tio::write_file(&out_dir.join(&cc_rel), &cc)?;
            tio::write_file(&out_dir.join(&mlo_rel), &mlo)?;
            let f = |v: f64| format!("{v:.3}");
            lesions
                .write_record([id.clone(), meta.kind.as_str().to_string(), f(meta.cc_row), f(meta.cc_col), f(meta.mlo_row), f(meta.mlo_col), f(meta.radius)])
                .expect("in-memory write");
            rows.push(ManifestRow { sample_id: id, cc_path: cc_rel, mlo_path: mlo_rel, label: labels[i], domain_id: d, split: splits[i] });
        }
    }
    let lpath = out_dir.join(LESIONS_FILE);
    fs::write(&lpath, lesions.into_inner().expect("in-memory flush")).map_err(io_err(&lpath))?;
    let manifest = DatasetManifest::from_rows(out_dir.to_path_buf(), rows);
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Stratified train/test assignment within one domain.
fn assign_splits(labels: &[u8], train_fraction: f64, unseen: bool, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut splits = vec![Split::Test; labels.len()];
    if unseen {
        return splits;
    }
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let n_train = ((idx.len() as f64) * train_fraction).round() as usize;
        for &i in &idx[..n_train.min(idx.len())] {
            splits[i] = Split::Train;
        }
    }
    splits
}

/// Lesion metadata written next to the manifest.
pub fn read_lesions(dir: &Path) -> Result<Vec<(String, LesionMeta)>, DataError> {
    let path = dir.join(LESIONS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |msg: String| DataError::Manifest { path: path.display().to_string(), msg };
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(format!("bad number `{}`", &rec[i])));
        let kind = LesionKind::parse(&rec[1]).ok_or_else(|| bad(format!("bad lesion kind `{}`", &rec[1])))?;
        out.push((
            rec[0].to_string(),
            LesionMeta { kind, cc_row: num(2)?, cc_col: num(3)?, mlo_row: num(4)?, mlo_col: num(5)?, radius: num(6)? },
        ));
    }
    Ok(out)
}
