use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint, MetricSnapshot};
use super::{adam_step, AdamState, Selection, TrainConfig, TrainError};
use crate::fusion::FusionError;
use crate::metrics::{auc, evaluate, EvalRecord, MetricsReport};
use crate::micl::MiclError;
use crate::model::{AblationFlags, Model, ModelError};
use crate::synthdata::{augment_pair, BatchComposer, DatasetManifest, Split};
use crate::tensor::{Element, Tape, Tensor, TensorError};
use crate::Mode;

pub const BEST_FILE: &str = "best.mdgc";
pub const LAST_FILE: &str = "last.mdgc";
pub const HISTORY_FILE: &str = "history.csv";

const EVAL_CHUNK: usize = 32;

/// Every manifest image held in memory, in row order.
pub struct ImageCache {
    images: Vec<(Tensor<f32>, Tensor<f32>)>,
    size: usize,
}

impl ImageCache {
    pub fn load(manifest: &DatasetManifest) -> Result<Self, TrainError> {
        let mut images = Vec::with_capacity(manifest.rows.len());
        let mut size = None;
        for r in &manifest.rows {
            let (cc, mlo) = manifest.load(r)?;
            for t in [&cc, &mlo] {
                let d = t.dims();
                let side = d[d.len() - 1];
                if d.len() != 3 || d[0] != 1 || d[1] != side || *size.get_or_insert(side) != side {
                    return Err(TrainError::Config(format!("{}: images must all be 1xSxS of one size, got {d:?}", r.sample_id)));
                }
            }
            images.push((cc, mlo));
        }
        Ok(ImageCache { images, size: size.unwrap_or(0) })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize) -> &(Tensor<f32>, Tensor<f32>) {
        &self.images[row]
    }
}

/// Stacks `1xSxS` images into one `[N,1,S,S]` batch.
fn stack(images: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut dims = vec![images.len()];
    dims.extend_from_slice(images[0].dims());
    let data = images.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(dims, data).expect("finite pixels")
}

/// Breast-level evaluation-mode scores for `rows`.
pub fn predict_records(
    model: &Model<f32>,
    manifest: &DatasetManifest,
    cache: &ImageCache,
    rows: &[usize],
) -> Result<Vec<EvalRecord>, TrainError> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let cc: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &cache.get(i).0).collect();
        let mlo: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &cache.get(i).1).collect();
        let preds = model.predict(&stack(&cc), &stack(&mlo))?;
        for (&i, p) in chunk.iter().zip(preds) {
            let r = &manifest.rows[i];
            out.push(EvalRecord { sample_id: r.sample_id.clone(), domain_id: r.domain_id, score: p.breast, label: r.label });
        }
    }
    Ok(out)
}

/// Metrics over every row of `split`.
pub fn evaluate_model(
    model: &Model<f32>,
    manifest: &DatasetManifest,
    cache: &ImageCache,
    split: Split,
) -> Result<(MetricsReport, Vec<EvalRecord>), TrainError> {
    let rows: Vec<usize> = (0..manifest.rows.len()).filter(|&i| manifest.rows[i].split == split).collect();
    let records = predict_records(model, manifest, cache, &rows)?;
    Ok((evaluate(&records)?, records))
}

/// Pooled AUC over the records of `domains`; `None` when undefined.
fn subset_auc(records: &[EvalRecord], domains: &[usize]) -> Option<f64> {
    let sub: Vec<EvalRecord> = records.iter().filter(|r| domains.contains(&r.domain_id)).cloned().collect();
    auc(&sub).ok()
}

fn snapshot(
    model: &Model<f32>,
    manifest: &DatasetManifest,
    cache: &ImageCache,
    selection: Selection,
    train_loss: Option<f64>,
) -> Result<MetricSnapshot, TrainError> {
    let (report, records) = evaluate_model(model, manifest, cache, Split::Test)?;
    let seen_auc = subset_auc(&records, &manifest.seen_domains);
    let unseen_auc = subset_auc(&records, &manifest.unseen_domains);
    let selection_auc = match selection {
        Selection::Unseen => unseen_auc,
        Selection::SeenHoldout => seen_auc,
    };
    Ok(MetricSnapshot { report, selection, selection_auc, seen_auc, unseen_auc, train_loss })
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// Completed epochs, counting from one.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub seen_auc: Option<f64>,
    pub unseen_auc: Option<f64>,
    pub selection_auc: Option<f64>,
    /// Wall time; kept out of `history.csv` so seeded runs stay byte-identical.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest selection AUC; ties keep the earlier epoch.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn non_finite(e: &ModelError) -> Option<&'static str> {
    match e {
        ModelError::Tensor(TensorError::NonFinite { op })
        | ModelError::Micl(MiclError::Tensor(TensorError::NonFinite { op }))
        | ModelError::Fusion(FusionError::Tensor(TensorError::NonFinite { op }))
        | ModelError::Fusion(FusionError::NonFinite(op)) => Some(op),
        _ => None,
    }
}

fn write_history(path: &Path, history: &[EpochLog]) -> Result<(), TrainError> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,lr,train_loss,seen_auc,unseen_auc,selection_auc\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch,
            h.lr,
            h.train_loss,
            opt(h.seen_auc),
            opt(h.unseen_auc),
            opt(h.selection_auc)
        ));
    }
    fs::write(path, s).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, manifest, None, out_dir, &mut |_| {})
}

/// Trains from `cfg.seed`, writing `last.mdgc` after every epoch and
/// `best.mdgc` whenever the selection AUC improves. A non-finite loss or
/// gradient aborts with the files from the last good epoch left in place.
pub fn train_with(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    cache: Option<&ImageCache>,
    out_dir: &Path,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if manifest.seen_domains.len() < 2 {
        return Err(TrainError::Config(format!("need at least 2 seen domains, found {}", manifest.seen_domains.len())));
    }
    match cfg.selection {
        Selection::Unseen if manifest.unseen_domains.is_empty() => {
            return Err(TrainError::Config("unseen selection needs an unseen domain; try seen-holdout".into()))
        }
        Selection::SeenHoldout if manifest.select(Split::Test, &manifest.seen_domains).is_empty() => {
            return Err(TrainError::Config("seen-holdout selection needs test rows in the seen domains".into()))
        }
        _ => {}
    }
    let owned;
    let cache = match cache {
        Some(c) => c,
        None => {
            owned = ImageCache::load(manifest)?;
            &owned
        }
    };
    fs::create_dir_all(out_dir).map_err(|source| TrainError::Io { path: out_dir.display().to_string(), source })?;
    let model_config = cfg.model_config(cache.size());
    let mut model: Model<f32> = Model::new(&model_config, cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut composer = BatchComposer::new(manifest, &manifest.seen_domains, cfg.batch_size, Split::Train)?;
    let steps = composer.batches_per_epoch();

    let make_ckpt = |model: &Model<f32>, adam: &AdamState<f32>, epoch, metrics| Checkpoint {
        train_config: cfg.clone(),
        model_config: model_config.clone(),
        epoch,
        metrics: Some(metrics),
        params: model.params.clone(),
        adam: adam.clone(),
    };
    let init = make_ckpt(&model, &adam, 0, snapshot(&model, manifest, cache, cfg.selection, None)?);
    let (best_path, last_path) = (out_dir.join(BEST_FILE), out_dir.join(LAST_FILE));
    save_checkpoint(&init, &last_path)?;
    if cfg.epochs == 0 {
        save_checkpoint(&init, &best_path)?;
        return Ok(TrainOutcome { best: init.clone(), last: init, history: Vec::new() });
    }

    let mut best: Option<Checkpoint> = None;
    let mut last = init;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at_epoch(epoch);
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let batch = composer.next_batch(&mut rng);
            let (mut cc, mut mlo) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
            for &i in &batch {
                let (a, b) = cache.get(i);
                if cfg.augment {
                    let (a, b) = augment_pair(a, b, Split::Train, &mut rng)?;
                    cc.push(a);
                    mlo.push(b);
                } else {
                    cc.push(a.clone());
                    mlo.push(b.clone());
                }
            }
            let labels: Vec<f64> = batch.iter().map(|&i| manifest.rows[i].label as f64).collect();
            let diverged = |what: String| TrainError::Diverged { epoch, step, what };

            let tape = Tape::new();
            let bound = model.params.bind(&tape, true);
            let x_cc = tape.constant(stack(&cc.iter().collect::<Vec<_>>()));
            let x_mlo = tape.constant(stack(&mlo.iter().collect::<Vec<_>>()));
            let out = match model.forward(&tape, &bound, x_cc, x_mlo, Some(&labels), Mode::Train, &mut rng) {
                Ok(o) => o,
                Err(e) => match non_finite(&e) {
                    Some(op) => return Err(diverged(format!("non-finite value in {op}"))),
                    None => return Err(e.into()),
                },
            };
            let total = out.loss.expect("labels given").total;
            let loss = tape.item(total).to_f64_lossy();
            if !loss.is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            let grads = bound.gradients(&model.params, tape.backward(total)?);
            if grads.grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            adam_step(&mut model.params, &grads, &mut adam, lr, cfg.adam_betas, cfg.adam_eps)?;
            loss_sum += loss;
        }
        let train_loss = loss_sum / steps as f64;
        let snap = snapshot(&model, manifest, cache, cfg.selection, Some(train_loss))?;
        let ckpt = make_ckpt(&model, &adam, epoch + 1, snap.clone());
        save_checkpoint(&ckpt, &last_path)?;
        let score = |c: &Checkpoint| c.metrics.as_ref().and_then(|m| m.selection_auc).unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score(&ckpt) > score(b)) {
            save_checkpoint(&ckpt, &best_path)?;
            best = Some(ckpt.clone());
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss,
            seen_auc: snap.seen_auc,
            unseen_auc: snap.unseen_auc,
            selection_auc: snap.selection_auc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        observer(&log);
        history.push(log);
        write_history(&out_dir.join(HISTORY_FILE), &history)?;
        last = ckpt;
    }
    Ok(TrainOutcome { best: best.expect("at least one epoch"), last, history })
}

/// Outcome of one ablation arm, read from its best checkpoint.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: String,
    pub flags: AblationFlags,
    pub best_epoch: usize,
    pub selection_auc: Option<f64>,
    pub seen_auc: Option<f64>,
    pub unseen_auc: Option<f64>,
    pub out_dir: PathBuf,
}

/// Sorts arms as baseline first, then by the number of components, then by
/// the order cve, ms, ge, micl.
pub fn order_arms(arms: &mut [AblationFlags]) {
    arms.sort_by_key(|f| {
        let on = [f.use_cve, f.use_mixstyle_stages, f.use_global_encoder, f.use_micl];
        (on.iter().filter(|&&b| b).count(), on.map(|b| !b))
    });
}

/// Trains every arm with the same seed and data into `out_dir/<arm>`.
pub fn ablate(
    base: &TrainConfig,
    manifest: &DatasetManifest,
    arms: &[AblationFlags],
    out_dir: &Path,
    observer: &mut dyn FnMut(&str, &EpochLog),
) -> Result<Vec<ArmResult>, TrainError> {
    let cache = ImageCache::load(manifest)?;
    let mut ordered = arms.to_vec();
    order_arms(&mut ordered);
    let mut results = Vec::new();
    for flags in ordered {
        let mut cfg = base.clone();
        cfg.set_flags(flags);
        let arm = flags.arm_name();
        let dir = out_dir.join(&arm);
        let outcome = train_with(&cfg, manifest, Some(&cache), &dir, &mut |log| observer(&arm, log))?;
        let m = outcome.best.metrics.as_ref();
        results.push(ArmResult {
            arm,
            flags,
            best_epoch: outcome.best.epoch,
            selection_auc: m.and_then(|m| m.selection_auc),
            seen_auc: m.and_then(|m| m.seen_auc),
            unseen_auc: m.and_then(|m| m.unseen_auc),
            out_dir: dir,
        });
    }
    Ok(results)
}
