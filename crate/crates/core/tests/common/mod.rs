#![allow(dead_code)]

use mammodg::metrics::EvalRecord;
use mammodg::synthdata::DatasetManifest;

/// Peak of the 3x3 box-smoothed CC image: the trivial intensity classifier.
pub fn peak_intensity(img: &[f32], s: usize) -> f64 {
    let mut best = f64::MIN;
    for y in 1..s - 1 {
        for x in 1..s - 1 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += img[(y + dy - 1) * s + x + dx - 1] as f64;
                }
            }
            best = best.max(acc / 9.0);
        }
    }
    best
}

pub fn trivial_records(m: &DatasetManifest) -> Vec<EvalRecord> {
    m.rows
        .iter()
        .map(|r| {
            let (cc, _) = m.load(r).unwrap();
            let s = *cc.dims().last().unwrap();
            EvalRecord { sample_id: r.sample_id.clone(), domain_id: r.domain_id, score: peak_intensity(cc.data(), s), label: r.label }
        })
        .collect()
}

/// All-pairs AUC: concordant pairs plus half the ties.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

pub fn records(scores: &[f64], labels: &[u8], domains: &[usize]) -> Vec<EvalRecord> {
    scores
        .iter()
        .zip(labels)
        .zip(domains)
        .enumerate()
        .map(|(i, ((&score, &label), &domain_id))| EvalRecord { sample_id: format!("s{i}"), domain_id, score, label })
        .collect()
}

/// Trapezoid area under an `fpr,tpr,threshold` polyline.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

use mammodg::synthdata::{generate_dataset, GenConfig, ManifestRow, Split};
use mammodg::tensor::{io as tio, Tensor};
use mammodg::trainkit::TrainConfig;
use std::path::Path;

/// Small network settings that keep every component active on 32-pixel inputs.
pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        base_lr: 1e-3,
        stage_channels: vec![4, 8, 8, 16],
        tiles: 2,
        heads: 2,
        reduction_ratio: 4,
        seed,
        ..TrainConfig::default()
    }
}

/// Three domains of twelve 32-pixel pairs; domains 0 and 1 seen.
pub fn tiny_dataset(dir: &Path) -> DatasetManifest {
    generate_dataset(&GenConfig::new(3, 12, 0.5, 32, 5), dir).unwrap()
}

/// Separable fixture: malignant pairs carry a bright 8x8 square in the same
/// column band of both views; everything else is flat noise.
pub fn separable_dataset(dir: &Path) -> DatasetManifest {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut rows = Vec::new();
    for d in 0..3usize {
        for i in 0..64usize {
            let label = (i % 2) as u8;
            let split = if d == 2 || i >= 48 { Split::Test } else { Split::Train };
            let id = format!("d{d}-{i:05}");
            let mut paths = Vec::new();
            let col = rng.random_range(4..20usize);
            for v in ["cc", "mlo"] {
                let row = rng.random_range(4..20usize);
                let mut data: Vec<f32> = (0..32 * 32).map(|_| 0.3 + rng.random_range(-0.05..0.05f32)).collect();
                if label == 1 {
                    for y in row..row + 8 {
                        for x in col..col + 8 {
                            data[y * 32 + x] += 0.4;
                        }
                    }
                }
                let rel = format!("images/{id}_{v}.mdgt");
                tio::write_file(&dir.join(&rel), &Tensor::new(vec![1, 32, 32], data).unwrap()).unwrap();
                paths.push(rel);
            }
            rows.push(ManifestRow { sample_id: id, cc_path: paths[0].clone(), mlo_path: paths[1].clone(), label, domain_id: d, split });
        }
    }
    let m = DatasetManifest::from_rows(dir.to_path_buf(), rows);
    m.write(&dir.join(mammodg::synthdata::MANIFEST_FILE)).unwrap();
    m
}

use rand::Rng;

pub fn uniform(rng: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
