//! The `mammodg` command line. Exit codes: 0 success, 1 domain error, 2 usage
//! error. Diagnostics go to stderr, results and paths to stdout.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::metrics::export_roc;
use crate::model::AblationFlags;
use crate::synthdata::{generate_dataset, DatasetManifest, GenConfig, Split, MANIFEST_FILE};
use crate::tensor::Tensor;
use crate::trainkit::gradsuite::{run_suite, GradSuiteConfig};
use crate::trainkit::{
    load_checkpoint, order_arms, train_with, ArmResult, EpochLog, ImageCache, Selection, TrainConfig, TrainError, BEST_FILE,
    LAST_FILE,
};
use crate::View;

#[derive(Parser, Debug)]
#[command(name = "mammodg", version, about = "Two-view domain-generalizing mammogram classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    GenData(GenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradArgs),
    /// Train several component arms with a shared seed and data.
    Ablate(AblateArgs),
    /// Write the stage-3 CVE attention maps of one sample.
    ExportAttention(ExportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Use the frozen reference benchmark; the shape flags must be left out.
    #[arg(long, conflicts_with_all = ["domains", "per_domain", "malignant_frac", "size", "seed", "unseen"])]
    reference: bool,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 400)]
    per_domain: usize,
    #[arg(long, default_value_t = 0.25)]
    malignant_frac: f64,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated held-out domains; defaults to the last one.
    #[arg(long, value_delimiter = ',')]
    unseen: Option<Vec<usize>>,
}

/// Training settings shared by `train` and `ablate`. Flags override the
/// JSON config, which overrides the defaults.
#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_selection)]
    selection: Option<Selection>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Component set, e.g. `full`, `baseline` or `cve+ms`.
    #[arg(long, value_parser = parse_arm)]
    arm: Option<AblationFlags>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 6)]
    elements: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, value_delimiter = ',', value_parser = parse_arm, default_value = "baseline,cve,cve+ms,cve+ms+ge,full")]
    arms: Vec<AblationFlags>,
    /// Arms trained concurrently.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sample: String,
    #[arg(long)]
    out: PathBuf,
    /// CVE level, 1 to 3.
    #[arg(long, default_value_t = 3)]
    level: usize,
}

fn parse_arm(s: &str) -> Result<AblationFlags, String> {
    AblationFlags::parse_arm(s).ok_or_else(|| format!("unknown arm '{s}' (use baseline, full or a +-joined subset of cve, ms, ge, micl)"))
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    Selection::parse(s).ok_or_else(|| format!("unknown selection '{s}' (use unseen or seen-holdout)"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split '{s}' (use train or test)"))
}

/// A domain error with its message.
struct Fail(String);

impl<E: std::fmt::Display> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail(e.to_string())
    }
}

type Outcome = Result<(), Fail>;

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out, err),
        Command::Eval(a) => eval_cmd(a, out, err),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Ablate(a) => ablate_cmd(a, out, err),
        Command::ExportAttention(a) => export_attention(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(Fail(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn gen_data(a: GenArgs, out: &mut dyn Write) -> Outcome {
    let cfg = if a.reference {
        GenConfig::reference()
    } else {
        let mut c = GenConfig::new(a.domains, a.per_domain, a.malignant_frac, a.size, a.seed);
        if let Some(u) = a.unseen {
            c.unseen_domains = u;
        }
        c
    };
    let m = generate_dataset(&cfg, &a.out)?;
    writeln!(out, "{}", a.out.join(MANIFEST_FILE).display())?;
    writeln!(out, "{} pairs, seen domains {:?}, unseen domains {:?}", m.rows.len(), m.seen_domains, m.unseen_domains)?;
    Ok(())
}

fn read_manifest(data: &Path) -> Result<DatasetManifest, Fail> {
    Ok(DatasetManifest::read(&data.join(MANIFEST_FILE))?)
}

fn resolve_config(o: &TrainOpts) -> Result<TrainConfig, Fail> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Fail(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.selection {
        cfg.selection = v;
    }
    if o.no_augment {
        cfg.augment = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn log_line(prefix: &str, l: &EpochLog) -> String {
    format!(
        "{prefix}epoch {:>3}  lr {:.3e}  loss {:.4}  seen {}  unseen {}  ({:.1}s)",
        l.epoch,
        l.lr,
        l.train_loss,
        fmt_auc(l.seen_auc),
        fmt_auc(l.unseen_auc),
        l.seconds
    )
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let mut cfg = resolve_config(&a.opts)?;
    if let Some(f) = a.arm {
        cfg.set_flags(f);
    }
    let manifest = read_manifest(&a.opts.data)?;
    fs::create_dir_all(&a.opts.out)?;
    fs::write(a.opts.out.join("config.json"), cfg.to_json())?;
    let outcome = train_with(&cfg, &manifest, None, &a.opts.out, &mut |l| {
        let _ = writeln!(err, "{}", log_line("", l));
    })?;
    let m = outcome.best.metrics.as_ref();
    writeln!(out, "{}", a.opts.out.join(BEST_FILE).display())?;
    writeln!(out, "{}", a.opts.out.join(LAST_FILE).display())?;
    writeln!(
        out,
        "best epoch {}  seen AUC {}  unseen AUC {}",
        outcome.best.epoch,
        fmt_auc(m.and_then(|m| m.seen_auc)),
        fmt_auc(m.and_then(|m| m.unseen_auc))
    )?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = ckpt.model()?;
    let manifest = read_manifest(&a.data)?;
    let cache = ImageCache::load(&manifest)?;
    let (report, records) = crate::trainkit::evaluate_model(&model, &manifest, &cache, a.split)?;
    if let (Some(snap), Split::Test) = (&ckpt.metrics, a.split) {
        let verdict = if snap.report == report { "matches" } else { "differs from" };
        writeln!(err, "report {verdict} the snapshot stored at epoch {}", ckpt.epoch)?;
    }
    let json = report.to_json();
    match &a.report {
        Some(p) => {
            fs::write(p, &json).map_err(|e| Fail(format!("{}: {e}", p.display())))?;
            writeln!(out, "{}", p.display())?;
        }
        None => writeln!(out, "{json}")?,
    }
    if let Some(p) = &a.roc {
        export_roc(&records, p)?;
        writeln!(out, "{}", p.display())?;
    }
    Ok(())
}

fn gradcheck(a: GradArgs, out: &mut dyn Write) -> Outcome {
    let cfg = GradSuiteConfig { elements_per_input: a.elements, tolerance: a.tolerance, seed: a.seed };
    let checks = run_suite(&cfg)?;
    writeln!(out, "{:<16} {:>12} {:>8} {:>8} {:>8}", "module", "max_rel_err", "checked", "kinks", "status")?;
    for c in &checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        writeln!(out, "{:<16} {:>12.3e} {:>8} {:>8} {:>8}", c.module, c.max_rel_err, c.checked, c.excluded, status)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.module).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run_arm(base: &TrainConfig, manifest: &DatasetManifest, cache: &ImageCache, flags: AblationFlags, root: &Path, log: &mut dyn FnMut(&EpochLog)) -> Result<ArmResult, TrainError> {
    let mut cfg = base.clone();
    cfg.set_flags(flags);
    let arm = flags.arm_name();
    let dir = root.join(&arm);
    let outcome = train_with(&cfg, manifest, Some(cache), &dir, log)?;
    let m = outcome.best.metrics.as_ref();
    Ok(ArmResult {
        arm,
        flags,
        best_epoch: outcome.best.epoch,
        selection_auc: m.and_then(|m| m.selection_auc),
        seen_auc: m.and_then(|m| m.seen_auc),
        unseen_auc: m.and_then(|m| m.unseen_auc),
        out_dir: dir,
    })
}

/// Comparison table, one row per arm, in component order.
pub fn ablation_table(results: &[ArmResult]) -> String {
    let mut s = format!("{:<16} {:>10} {:>10} {:>10}\n", "arm", "best_epoch", "seen_auc", "unseen_auc");
    for r in results {
        let _ = writeln!(s, "{:<16} {:>10} {:>10} {:>10}", r.arm, r.best_epoch, fmt_auc(r.seen_auc), fmt_auc(r.unseen_auc));
    }
    s
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let cfg = resolve_config(&a.opts)?;
    let manifest = read_manifest(&a.opts.data)?;
    let cache = ImageCache::load(&manifest)?;
    let mut arms = a.arms.clone();
    order_arms(&mut arms);
    arms.dedup();
    fs::create_dir_all(&a.opts.out)?;
    let root = a.opts.out.as_path();
    let mut results = Vec::with_capacity(arms.len());
    if a.threads <= 1 {
        for &f in &arms {
            let name = f.arm_name();
            let r = run_arm(&cfg, &manifest, &cache, f, root, &mut |l| {
                let _ = writeln!(err, "{}", log_line(&format!("[{name}] "), l));
            })?;
            results.push(r);
        }
    } else {
        for group in arms.chunks(a.threads) {
            let done: Vec<Result<ArmResult, TrainError>> = std::thread::scope(|s| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|&f| {
                        let (cfg, manifest, cache) = (&cfg, &manifest, &cache);
                        s.spawn(move || run_arm(cfg, manifest, cache, f, root, &mut |_| {}))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("arm thread panicked")).collect()
            });
            for r in done {
                let r = r?;
                writeln!(err, "[{}] done, best epoch {}", r.arm, r.best_epoch)?;
                results.push(r);
            }
        }
    }
    let table = ablation_table(&results);
    fs::write(a.opts.out.join("ablation.txt"), &table)?;
    write!(out, "{table}")?;
    Ok(())
}

/// Nearest-neighbour upsampling of an `[h, w]` map in `[0, 1]` to an 8-bit
/// `size x size` binary PGM.
pub fn pgm_bytes(map: &[f64], h: usize, w: usize, size: usize) -> Vec<u8> {
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    for y in 0..size {
        for x in 0..size {
            let v = map[(y * h / size) * w + x * w / size];
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    bytes
}

fn export_attention(a: ExportArgs, out: &mut dyn Write) -> Outcome {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = ckpt.model()?;
    if !model.config.flags.use_cve {
        return Err(Fail(format!("checkpoint arm '{}' has no CVE module", model.config.flags.arm_name())));
    }
    if !(1..=3).contains(&a.level) {
        return Err(Fail(format!("CVE level {} outside 1..=3", a.level)));
    }
    let manifest = read_manifest(&a.data)?;
    let row = manifest.find(&a.sample).ok_or_else(|| Fail(format!("sample '{}' not in the manifest", a.sample)))?;
    let (cc, mlo) = manifest.load(row)?;
    let size = cc.dims()[2];
    let batch = |t: &Tensor<f32>| t.reshape(vec![1, 1, size, size]);
    let maps = model.cve_maps(&batch(&cc)?, &batch(&mlo)?)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("view,column,v\n");
    for ((w_hat, v), view) in maps[a.level - 1].iter().zip([View::Cc, View::Mlo]) {
        let d = w_hat.dims();
        let (h, w) = (d[2], d[3]);
        let data = w_hat.to_f64();
        let path = a.out.join(format!("{}_{}.pgm", a.sample, view.as_str()));
        fs::write(&path, pgm_bytes(&data, h, w, size))?;
        writeln!(out, "{}", path.display())?;
        for (c, x) in v.to_f64().iter().enumerate() {
            let _ = writeln!(csv, "{},{c},{x}", view.as_str());
        }
    }
    let path = a.out.join(format!("{}_v.csv", a.sample));
    fs::write(&path, csv)?;
    writeln!(out, "{}", path.display())?;
    Ok(())
}
