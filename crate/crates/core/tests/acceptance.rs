//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! when any criterion fails. The end-to-end and ablation criteria train on
//! the reference benchmark and take most of the runtime.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mammodg::cve::{geometric_vector, CveParams};
use mammodg::fusion::{global_encode, GlobalEncoderParams};
use mammodg::metrics::{auc, export_roc};
use mammodg::micl::{contrastive_loss, contrastive_sets, critical_embeddings, mixstyle, tile_to_bag, ContrastiveBatchSets, DsmilParams, MixstyleConfig};
use mammodg::model::AblationFlags;
use mammodg::nn::ParamSet;
use mammodg::synthdata::{generate_dataset, BatchComposer, DatasetManifest, GenConfig, Split};
use mammodg::tensor::{Tape, Tensor};
use mammodg::trainkit::{lr_at_epoch, load_checkpoint, train_with, ImageCache, TrainConfig};
use mammodg::View;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bits, brute_auc, records, trapezoid, uniform};

/// Epoch budget for the reference runs; the criterion allows up to 50.
const REFERENCE_EPOCHS: usize = 8;
const REFERENCE_LR: f64 = 1e-3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mammodg")
}

fn gradient_integrity() -> Verdict {
    let t0 = Instant::now();
    let o = Command::new(bin()).arg("gradcheck").output().expect("binary runs");
    let secs = t0.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&o.stdout);
    let modules = ["backbone", "cve", "micl", "global_encoder", "shared_decoder", "full_model"];
    let mut worst = 0.0f64;
    let mut found = 0;
    for line in text.lines() {
        let mut f = line.split_whitespace();
        if let (Some(m), Some(e)) = (f.next(), f.next()) {
            if modules.contains(&m) {
                found += 1;
                worst = worst.max(e.parse().unwrap_or(f64::INFINITY));
            }
        }
    }
    let pass = o.status.success() && found == modules.len() && worst <= 1e-4 && secs < 120.0;
    verdict(pass, format!("{found} modules, max rel err {worst:.2e} (<= 1e-4), {secs:.1}s (< 120s)"))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn stats(x: &[f64], hw: usize) -> Vec<(f64, f64)> {
    x.chunks(hw)
        .map(|c| {
            let m = c.iter().sum::<f64>() / hw as f64;
            (m, (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw as f64).sqrt())
        })
        .collect()
}

fn algebraic_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, good: bool, err: f64| {
        ok &= good;
        notes.push(format!("{name} {err:.1e}"));
    };

    // Mixstyle at m = 1 and interpolated statistics
    let cfg = MixstyleConfig::default();
    let x = uniform(&mut rng, &[6, 4, 5, 5], -2.0, 2.0);
    let tape = Tape::new();
    let f = tape.constant(x.clone());
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);
    let id = tape.value(mixstyle(&tape, f, &perm, 1.0, &cfg).unwrap());
    let e = max_abs(id.data(), x.data());
    check("mixstyle-identity", e <= 1e-6, e);
    let m = 0.37;
    let out = tape.value(mixstyle(&tape, f, &perm, m, &cfg).unwrap());
    let (sx, so) = (stats(x.data(), 25), stats(out.data(), 25));
    let mut e = 0.0f64;
    for i in 0..6 {
        for k in 0..4 {
            let (mu, sd) = sx[i * 4 + k];
            let (mp, sp) = sx[perm[i] * 4 + k];
            let (se, spe) = ((sd * sd + cfg.epsilon).sqrt(), (sp * sp + cfg.epsilon).sqrt());
            let (om, os) = so[i * 4 + k];
            e = e.max((om - (m * mu + (1.0 - m) * mp)).abs());
            e = e.max((os - (m * se + (1.0 - m) * spe) * sd / se).abs());
        }
    }
    check("mixstyle-stats", e <= 1e-5, e);

    // instance norm moments
    let raw = tape.constant(uniform(&mut rng, &[3, 5, 6, 6], -3.0, 3.0));
    let n = tape.value(tape.instance_norm(raw, mammodg::cve::IN_EPS).unwrap());
    let s = stats(n.data(), 36);
    let em = s.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    let es = s.iter().map(|p| (p.1 - 1.0).abs()).fold(0.0, f64::max);
    check("in-mean", em <= 1e-6, em);
    check("in-std", es <= 1e-5, es);

    // geometric vector against a column scan
    let w = uniform(&mut rng, &[8, 1, 7, 5], 0.0, 1.0);
    let v = tape.value(geometric_vector(&tape, tape.constant(w.clone())).unwrap());
    let mut exact = true;
    for b in 0..8 {
        for c in 0..5 {
            let col = (0..7).map(|r| w.data()[b * 35 + r * 5 + c]).fold(f64::NEG_INFINITY, f64::max);
            exact &= v.data()[b * 5 + c] == col;
        }
    }
    check("geometric-vector", exact, if exact { 0.0 } else { 1.0 });

    // all-zero CVE parameters
    let mut p = ParamSet::<f64>::new();
    let cp = CveParams::new(&mut p, "cve", 8, 4, &mut rng).unwrap();
    let names: Vec<String> = p.names().to_vec();
    for nm in &names {
        let d = p.by_name(nm).unwrap().dims().to_vec();
        p.set(nm, Tensor::zeros(&d)).unwrap();
    }
    let bound = p.bind(&tape, false);
    let fa = tape.constant(uniform(&mut rng, &[2, 8, 5, 5], -1.0, 1.0));
    let fb = tape.constant(uniform(&mut rng, &[2, 8, 5, 5], -1.0, 1.0));
    let out = mammodg::cve::enhance(&tape, &bound, &cp, fa, fb).unwrap();
    let mut e = 0.0f64;
    for o in &out {
        let want: Vec<f64> = tape.value(o.f_tilde_plus).data().iter().map(|v| 1.25 * v).collect();
        e = e.max(max_abs(tape.value(o.f_hat).data(), &want));
    }
    check("zero-cve", e <= 1e-9, e);

    // freshly initialised transformer
    let mut p = ParamSet::<f64>::new();
    let enc = GlobalEncoderParams::new(&mut p, "encoder", 16, 4, 8, 4, &mut rng).unwrap();
    let bound = p.bind(&tape, false);
    let (a, b) = (uniform(&mut rng, &[2, 16, 8, 8], -1.0, 1.0), uniform(&mut rng, &[2, 16, 8, 8], -1.0, 1.0));
    let g = global_encode(&tape, &bound, &enc, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
    let same = bits(&tape.value(g.cc)) == bits(&a) && bits(&tape.value(g.mlo)) == bits(&b);
    check("transformer-identity", same, if same { 0.0 } else { 1.0 });

    // contrastive hand value
    let t = |d: &[f64]| tape.constant(Tensor::new(vec![1, 2], d.to_vec()).unwrap());
    let sets = ContrastiveBatchSets { anchors: Some(t(&[1.0, 0.0])), positives: Some(t(&[1.0, 0.0])), negatives: Some(t(&[0.0, 1.0])), tau: 1.0, lambda: 0.5 };
    let l = tape.item(contrastive_loss(&tape, &sets).unwrap());
    let e = (l + (1f64.exp() / (1f64.exp() + 1.0)).ln()).abs();
    check("contrastive", e <= 1e-6 && (l - 0.31326).abs() <= 1e-5, e);

    verdict(ok, notes.join(", "))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut roc_worst = 0.0f64;
    let dir = tempfile::tempdir().unwrap();
    for case in 0..1000 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        // coarse grids force ties
        let levels = if case % 2 == 0 { 5.0 } else { 1e6 };
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect();
        let recs = records(&scores, &labels, &vec![0; n]);
        let a = auc(&recs).unwrap();
        worst = worst.max((a - brute_auc(&scores, &labels)).abs());
        if case % 50 == 0 {
            let path = dir.path().join("roc.csv");
            export_roc(&recs, &path).unwrap();
            let pts: Vec<(f64, f64)> = fs::read_to_string(&path)
                .unwrap()
                .lines()
                .skip(1)
                .map(|l| {
                    let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
                    (v[0], v[1])
                })
                .collect();
            roc_worst = roc_worst.max((trapezoid(&pts) - a).abs());
        }
    }
    let hand = auc(&records(&[0.9, 0.6, 0.4, 0.2], &[1, 0, 1, 0], &[0; 4])).unwrap();
    verdict(
        worst <= 1e-12 && roc_worst <= 1e-6 && hand == 0.75,
        format!("rank vs brute {worst:.1e} (<= 1e-12), trapezoid vs AUC {roc_worst:.1e} (<= 1e-6), hand fixture {hand}"),
    )
}

/// Best-checkpoint AUCs of one reference run.
#[derive(Clone, Copy)]
struct RunResult {
    seen: f64,
    unseen: f64,
    best_epoch: usize,
    minutes: f64,
}

struct Reference {
    manifest: DatasetManifest,
    cache: ImageCache,
    root: tempfile::TempDir,
    runs: BTreeMap<(String, u64), RunResult>,
}

impl Reference {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&GenConfig::reference(), &root.path().join("data")).unwrap();
        let cache = ImageCache::load(&manifest).unwrap();
        Reference { manifest, cache, root, runs: BTreeMap::new() }
    }

    fn run(&mut self, flags: AblationFlags, seed: u64) -> RunResult {
        let key = (flags.arm_name(), seed);
        if let Some(r) = self.runs.get(&key) {
            return *r;
        }
        let mut cfg = TrainConfig { epochs: REFERENCE_EPOCHS, base_lr: REFERENCE_LR, seed, ..TrainConfig::default() };
        cfg.set_flags(flags);
        let out = self.root.path().join(format!("{}-{seed}", key.0));
        let t0 = Instant::now();
        let outcome = train_with(&cfg, &self.manifest, Some(&self.cache), &out, &mut |_| {}).unwrap();
        let m = outcome.best.metrics.as_ref().unwrap();
        let r = RunResult {
            seen: m.seen_auc.unwrap(),
            unseen: m.unseen_auc.unwrap(),
            best_epoch: outcome.best.epoch,
            minutes: t0.elapsed().as_secs_f64() / 60.0,
        };
        say(&format!(
            "    {:<12} seed {seed}: best epoch {}, seen {:.4}, unseen {:.4}, {:.1} min",
            key.0, r.best_epoch, r.seen, r.unseen, r.minutes
        ));
        self.runs.insert(key, r);
        r
    }
}

fn end_to_end(reference: &mut Reference) -> Verdict {
    let mut good = 0;
    let mut parts = Vec::new();
    let mut slow = false;
    for seed in 1..=5 {
        let r = reference.run(AblationFlags::FULL, seed);
        if r.seen >= 0.90 && r.unseen >= 0.80 {
            good += 1;
        }
        slow |= r.minutes >= 30.0;
        parts.push(format!("{:.3}/{:.3}", r.seen, r.unseen));
    }
    verdict(
        good >= 4 && !slow,
        format!("{good}/5 seeds reach seen >= 0.90 and unseen >= 0.80 within {REFERENCE_EPOCHS} epochs (seen/unseen: {})", parts.join(" ")),
    )
}

fn directional_ablation(reference: &mut Reference) -> Verdict {
    let arms = ["baseline", "cve", "cve+ms+ge", "full"];
    let mut mean = BTreeMap::new();
    for arm in arms {
        let flags = AblationFlags::parse_arm(arm).unwrap();
        let u: f64 = (1..=3).map(|s| reference.run(flags, s).unseen).sum::<f64>() / 3.0;
        mean.insert(arm, u);
    }
    let (b, c, g, f) = (mean["baseline"], mean["cve"], mean["cve+ms+ge"], mean["full"]);
    let pass = f >= g && g >= b && f >= c && c >= b && f - b >= 0.03;
    verdict(
        pass,
        format!("mean unseen AUC baseline {b:.4}, +CVE {c:.4}, +GE {g:.4}, full {f:.4}; margin {:.4} (>= 0.03)", f - b),
    )
}

fn protocol_fidelity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&GenConfig::new(4, 40, 0.25, 16, 42), dir.path()).unwrap();
    let mut composer = BatchComposer::new(&m, &m.seen_domains, 12, Split::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut even = true;
    for _ in 0..200 {
        let batch = composer.next_batch(&mut rng);
        even &= batch.len() == 12;
        for &d in &m.seen_domains {
            even &= batch.iter().filter(|&&i| m.rows[i].domain_id == d).count() == 4;
        }
    }
    let lr = [lr_at_epoch(2e-5, 0), lr_at_epoch(2e-5, 5), lr_at_epoch(2e-5, 10)];
    let want = [2e-5, 1.8e-5, 1.62e-5];
    let lr_ok = lr.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-15 * b);
    verdict(even && lr_ok, format!("200 batches of 12 over 3 seen domains, 4 per domain: {even}; lr {:e} / {:e} / {:e}", lr[0], lr[1], lr[2]))
}

fn run_ok(args: &[&str]) -> bool {
    Command::new(bin()).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> bool {
    names.iter().all(|n| fs::read(a.join(n)).ok().zip(fs::read(b.join(n)).ok()).is_some_and(|(x, y)| x == y))
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let gen = |out: &Path| run_ok(&["gen-data", "--out", &s(out), "--domains", "3", "--per-domain", "16", "--malignant-frac", "0.5", "--size", "32", "--seed", "9"]);
    let gen_ok = gen(&d.join("a")) && gen(&d.join("b"));
    let manifest = DatasetManifest::read(&d.join("a/manifest.csv")).unwrap();
    let mut files = vec!["manifest.csv".to_string(), "lesions.csv".to_string()];
    for r in &manifest.rows {
        files.push(r.cc_path.clone());
        files.push(r.mlo_path.clone());
    }
    let refs: Vec<&str> = files.iter().map(|s| s.as_str()).collect();
    let data_same = gen_ok && same_files(&d.join("a"), &d.join("b"), &refs);

    let cfg = d.join("cfg.json");
    fs::write(&cfg, r#"{"epochs":2,"batch_size":4,"base_lr":0.001,"stage_channels":[4,8,8,16],"tiles":2,"heads":2,"reduction_ratio":4}"#).unwrap();
    let train = |out: &Path| run_ok(&["train", "--data", &s(&d.join("a")), "--out", &s(out), "--config", &s(&cfg), "--seed", "4"]);
    let train_ok = train(&d.join("r1")) && train(&d.join("r2"));
    let runs_same = train_ok && same_files(&d.join("r1"), &d.join("r2"), &["best.mdgc", "last.mdgc", "history.csv", "config.json"]);

    let path = d.join("r1/best.mdgc");
    let ckpt = load_checkpoint(&path).unwrap();
    let round_trip = ckpt.to_bytes() == fs::read(&path).unwrap();
    let report = d.join("report.json");
    let eval_ok = run_ok(&["eval", "--ckpt", &s(&path), "--data", &s(&d.join("a")), "--split", "test", "--report", &s(&report)]);
    let snapshot = eval_ok && fs::read_to_string(&report).unwrap() == ckpt.metrics.unwrap().report.to_json();
    verdict(
        data_same && runs_same && round_trip && snapshot,
        format!("data identical {data_same}, training identical {runs_same}, checkpoint round trip {round_trip}, eval equals snapshot {snapshot}"),
    )
}

fn hard_negatives() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agree = 0;
    for case in 0..1000u64 {
        let c = rng.random_range(2..7);
        let n = rng.random_range(1..4);
        let mut p = ParamSet::<f64>::new();
        let mut prng = ChaCha8Rng::seed_from_u64(case);
        let d = DsmilParams::new(&mut p, "micl", c, &mut prng).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let f = tape.constant(uniform(&mut rng, &[1, c, 2 * n, 2 * n], -1.0, 1.0));
        let bag = tile_to_bag(&tape, &bound, &d, f, n, View::Mlo).unwrap();
        let anchor = critical_embeddings(&tape, bag.instances, &bag.critical).unwrap();
        let sets = contrastive_sets(&tape, anchor, anchor, &[0.0], 0.5, 0.5).unwrap();
        let q = tape.value(sets.negatives.unwrap()).to_f64();

        let inst = tape.value(bag.instances).to_f64();
        let w = p.by_name("micl.f_m.weight").unwrap().data();
        let b = p.by_name("micl.f_m.bias").unwrap().data()[0];
        let scores: Vec<f64> = inst.chunks(c).map(|x| b + x.iter().zip(w).map(|(u, v)| u * v).sum::<f64>()).collect();
        let best = (0..scores.len()).fold(0, |k, i| if scores[i] > scores[k] { i } else { k });
        let row = &inst[best * c..(best + 1) * c];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bag.critical == [best] && q.iter().zip(row).all(|(a, r)| (a - r / norm).abs() < 1e-9) {
            agree += 1;
        }
    }
    verdict(agree == 1000, format!("{agree}/1000 benign bags contribute their argmax instance to Q"))
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let report = |id: usize, name: &'static str, v: Verdict, results: &mut Vec<(usize, &str, Verdict)>| {
        say(&format!("criterion {id} {:<28} {}  {}", name, if v.pass { "PASS" } else { "FAIL" }, v.detail));
        results.push((id, name, v));
    };
    report(1, "gradient integrity", gradient_integrity(), &mut results);
    report(2, "algebraic invariants", algebraic_invariants(), &mut results);
    report(3, "metric oracles", metric_oracles(), &mut results);
    report(6, "protocol fidelity", protocol_fidelity(), &mut results);
    report(7, "reproducibility", reproducibility(), &mut results);
    report(8, "hard negatives", hard_negatives(), &mut results);
    let mut reference = Reference::new();
    report(4, "end-to-end learning", end_to_end(&mut reference), &mut results);
    report(5, "directional ablation", directional_ablation(&mut reference), &mut results);

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    say(&format!("acceptance: {}/{} criteria pass in {:.1} min", results.len() - failed.len(), results.len(), t0.elapsed().as_secs_f64() / 60.0));
    if !failed.is_empty() {
        say(&format!("failed criteria: {}", failed.join(", ")));
        std::process::exit(1);
    }
}
