use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fusioncast::autodiff::Fault;
use fusioncast::config::{PriorSourceKind, RunConfig};
use fusioncast::data::dataset::{build_windows, load_dataset, synth_corpus, write_dataset, write_priors, PriorMode};
use fusioncast::data::fgrid::{save_grid, Dtype};
use fusioncast::data::{SampleWindow, Split, SplitRanges, Unit};
use fusioncast::metrics::{write_comparison, write_report, CsiAgg, MetricsReport, COMPARISON_CSV};
use fusioncast::model::{checkpoint, FusionCast, Variant};
use fusioncast::train::{
    evaluate_baselines, evaluate_model, gradcheck_suite, mean_over_seeds, prepare, predict_physical, run_seeds,
    train, write_contrasts, AblationData,
};
use fusioncast::verify::{kernel_oracles, metric_oracles};

/// Resolved configuration written next to every run's outputs.
const SNAPSHOT: &str = "resolved.conf";

#[derive(Parser)]
#[command(
    name = "fusioncast",
    version,
    about = "Precipitation nowcasting from radar, water vapour and an extrapolated prior",
    after_help = RunConfig::key_help()
)]
struct Cli {
    /// Configuration file with [section] headers and key = value lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.epochs=5. Repeatable; applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset: radar and water-vapour grids, station CSV, manifest.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extrapolated prior frames.
    Prior {
        #[command(subcommand)]
        cmd: PriorCmd,
    },
    /// Train one variant; writes best.ckpt, train_log.csv and the resolved config.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        /// Dataset directory (data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// pooled sums counts over samples; mean averages per-sample scores.
        #[arg(long)]
        csi_agg: Option<CsiAgg>,
        /// Fail when a scored cell has no events in prediction or truth.
        #[arg(long)]
        strict: bool,
        /// Also score persistence and the prior on the same windows.
        #[arg(long)]
        baselines: bool,
    },
    /// Train and test every variant for every seed on fresh synthetic data.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast one window and write one fgrid file per lead.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the split's windows, in dataset order.
        #[arg(long)]
        window: usize,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks and oracle comparisons.
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum PriorCmd {
    /// Store the prior of every window under <data>/prior/.
    Generate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VerifyArgs {
    /// Scale the sigmoid adjoint by this factor; the run must then fail.
    #[arg(long, hide = true)]
    corrupt_sigmoid: Option<f64>,
}

/// An error that carries its own exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Exit { code: 2, message: message.into() }.into()
}

fn failure(message: impl Into<String>) -> anyhow::Error {
    Exit { code: 1, message: message.into() }.into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use fusioncast::Error as E;
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<E>() {
        Some(E::UndefinedCsi { .. } | E::Diverged { .. } | E::NonFiniteGradient { .. }) => 1,
        Some(
            E::Config { .. }
            | E::InvalidArgument(_)
            | E::ShapeMismatch { .. }
            | E::InvalidShape { .. }
            | E::EmptySequence(_),
        ) => 2,
        Some(E::Path { .. } | E::Io(_) | E::Format { .. } | E::Csv { .. } | E::NoStations) => 3,
        _ if err.downcast_ref::<std::io::Error>().is_some() => 3,
        _ => 1,
    }
}

impl Cli {
    /// `base`, then the config file, then `--set`, then subcommand flags.
    fn resolve(&self, mut cfg: RunConfig, flags: &[(&str, String)]) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_str(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn path_flag(key: &'static str, p: &Option<PathBuf>) -> Option<(&'static str, String)> {
    p.as_ref().map(|p| (key, p.display().to_string()))
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(SNAPSHOT);
    fs::write(&path, cfg.snapshot()).with_context(|| format!("writing {}", path.display()))
}

/// The snapshot written by the training run that produced `checkpoint`.
fn checkpoint_config(checkpoint: &Path) -> Result<RunConfig> {
    let snap = checkpoint.parent().unwrap_or(Path::new(".")).join(SNAPSHOT);
    if snap.is_file() {
        Ok(RunConfig::load(&snap)?)
    } else {
        Ok(RunConfig::default())
    }
}

fn prior_mode(cfg: &RunConfig) -> PriorMode {
    match cfg.data.prior {
        PriorSourceKind::Generate => PriorMode::Generate(cfg.data.prior_config),
        PriorSourceKind::Stored => PriorMode::Stored(cfg.data.dir.clone()),
    }
}

fn load_windows(cfg: &RunConfig) -> Result<Vec<SampleWindow>> {
    let dir = &cfg.data.dir;
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    let scenes = load_dataset(dir, &cfg.load_options(cfg.model.variant.uses_pwv()))?;
    Ok(build_windows(
        &scenes,
        cfg.model.t_in,
        cfg.model.t_out,
        &prior_mode(cfg),
        &SplitRanges::default(),
    )?)
}

fn split_windows(windows: Vec<SampleWindow>, split: Split) -> Result<Vec<SampleWindow>> {
    let picked: Vec<_> = windows.into_iter().filter(|w| w.split == Some(split)).collect();
    if picked.is_empty() {
        return Err(usage(format!("the {split} split has no windows")));
    }
    Ok(picked)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<FusionCast> {
    let mut model = FusionCast::new(cfg.model.clone())?;
    checkpoint::load_into(&mut model.params, path)?;
    Ok(model)
}

fn print_report(r: &MetricsReport) {
    let mut line = format!("{:18}", r.variant);
    for (ti, &tau) in r.thresholds.iter().enumerate() {
        for (li, &lead) in r.lead_frames.iter().enumerate() {
            let v = r.csi[ti][li].map_or("NA".to_string(), |v| format!("{v:.3}"));
            line += &format!(" csi[{tau},{}m]={v}", lead as i64 * fusioncast::metrics::FRAME_MINUTES);
        }
    }
    println!("{line} rmse={:.4} mae={:.4}", r.rmse, r.mae);
}

fn cmd_synth(cli: &Cli, seed: Option<u64>, scenes: Option<usize>, out: &Path) -> Result<()> {
    let mut flags = vec![("data.dir", out.display().to_string())];
    flags.extend(seed.map(|s| ("data.seed", s.to_string())));
    flags.extend(scenes.map(|s| ("data.scenes", s.to_string())));
    let cfg = cli.resolve(RunConfig::default(), &flags)?;
    let corpus = synth_corpus(cfg.data.seed, cfg.data.scenes, &cfg.data.synth)?;
    write_dataset(out, &corpus)?;
    write_snapshot(out, &cfg)?;
    println!("wrote {} scenes to {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_prior_generate(cli: &Cli, data: &Option<PathBuf>) -> Result<()> {
    let flags: Vec<_> = path_flag("data.dir", data).into_iter().collect();
    let cfg = cli.resolve(RunConfig::default(), &flags)?;
    let dir = &cfg.data.dir;
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    let scenes = load_dataset(dir, &cfg.load_options(false))?;
    let n = write_priors(dir, &scenes, cfg.model.t_in, cfg.model.t_out, &cfg.data.prior_config)?;
    write_snapshot(&dir.join("prior"), &cfg)?;
    println!("wrote priors for {n} windows under {}", dir.join("prior").display());
    Ok(())
}

fn cmd_train(cli: &Cli, variant: Option<Variant>, data: &Option<PathBuf>, out: &Path) -> Result<()> {
    let mut flags: Vec<_> = path_flag("data.dir", data).into_iter().collect();
    flags.extend(variant.map(|v| ("model.variant", v.to_string())));
    let cfg = cli.resolve(RunConfig::default(), &flags)?;
    let windows = load_windows(&cfg)?;
    let data = AblationData::from_windows(&windows, cfg.data.max_train_windows)?;
    if data.train.is_empty() {
        return Err(usage("the train split has no windows"));
    }
    write_snapshot(out, &cfg)?;
    let mut model = FusionCast::new(cfg.model.clone())?;
    let start = Instant::now();
    let outcome = train(&mut model, &data.train, &data.val, &cfg.train, Some(out))?;
    println!(
        "trained {} on {} windows in {:.1}s; best epoch {} (val CSI {})",
        cfg.model.variant,
        data.train.len(),
        start.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.best_val_csi.map_or("NA".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cli: &Cli,
    checkpoint: &Path,
    split: Split,
    data: &Option<PathBuf>,
    out: &Path,
    agg: Option<CsiAgg>,
    strict: bool,
    baselines: bool,
) -> Result<()> {
    let mut flags: Vec<_> = path_flag("data.dir", data).into_iter().collect();
    flags.extend(agg.map(|a| ("eval.csi_agg", a.to_string())));
    if strict {
        flags.push(("eval.strict", "true".into()));
    }
    let cfg = cli.resolve(checkpoint_config(checkpoint)?, &flags)?;
    let model = load_model(&cfg, checkpoint)?;
    let windows = split_windows(load_windows(&cfg)?, split)?;
    let prepared = prepare(&windows)?;
    let (mut report, _) = evaluate_model(&model, &prepared, &cfg.eval)?;
    report.fingerprint = cfg.fingerprint();
    let mut reports = vec![report];
    if baselines {
        for mut b in evaluate_baselines(&windows, &cfg.eval)? {
            b.fingerprint = cfg.fingerprint();
            reports.push(b);
        }
    }
    write_report(out, &reports)?;
    write_snapshot(out, &cfg)?;
    for r in &reports {
        print_report(r);
    }
    if cfg.strict {
        for r in &reports {
            r.require_defined()?;
        }
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli, out: &Path) -> Result<()> {
    let cfg = cli.resolve(RunConfig::default(), &[])?;
    write_snapshot(out, &cfg)?;

    // One row per trained model; every variant of a seed shares data,
    // initialization and training seeds.
    let plan_path = out.join("plan.csv");
    fs::write(&plan_path, "seed,variant,data_seed,init_seed,train_seed\n").context("writing plan.csv")?;
    let start = Instant::now();
    let outcomes = run_seeds(
        &cfg.ablate.seeds,
        |seed| {
            let (plan, data) = cfg.seed_plan(seed)?;
            let first = &plan.entries[0];
            let mut rows = String::new();
            for e in &plan.entries {
                if (e.model.init_seed, e.train.seed) != (first.model.init_seed, first.train.seed) {
                    return Err(fusioncast::Error::InvalidArgument(format!("seed {seed}: variants disagree on seeds")));
                }
                rows += &format!("{seed},{},{seed},{},{}\n", e.model.variant, e.model.init_seed, e.train.seed);
            }
            let mut f = fs::OpenOptions::new().append(true).open(&plan_path).map_err(fusioncast::Error::Io)?;
            std::io::Write::write_all(&mut f, rows.as_bytes())?;
            eprintln!(
                "seed {seed}: {} train, {} val, {} test windows",
                data.train.len(),
                data.val.len(),
                data.test.len()
            );
            Ok((plan, data))
        },
        Some(out),
    )?;
    let mean = mean_over_seeds(&outcomes)?;
    write_comparison(&out.join(COMPARISON_CSV), &mean)?;
    let contrasts = write_contrasts(&out.join("contrasts.csv"), &outcomes)?;
    println!("{} seeds in {:.1}s; mean over seeds:", outcomes.len(), start.elapsed().as_secs_f64());
    for r in &mean {
        print_report(r);
    }
    for (c, s) in &contrasts {
        println!(
            "{} vs {} at {} mm/h, {} min: {:.4} vs {:.4}, diff {:+.4} (se {:.4})",
            c.better,
            c.worse,
            c.threshold,
            c.lead_frame as i64 * fusioncast::metrics::FRAME_MINUTES,
            s.mean_a,
            s.mean_b,
            s.mean_diff,
            s.se_diff
        );
    }
    Ok(())
}

fn cmd_predict(
    cli: &Cli,
    checkpoint: &Path,
    index: usize,
    split: Split,
    data: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let flags: Vec<_> = path_flag("data.dir", data).into_iter().collect();
    let cfg = cli.resolve(checkpoint_config(checkpoint)?, &flags)?;
    let model = load_model(&cfg, checkpoint)?;
    let windows = split_windows(load_windows(&cfg)?, split)?;
    let w = windows
        .get(index)
        .ok_or_else(|| usage(format!("window {index} out of range: the {split} split has {}", windows.len())))?;
    let frames = predict_physical(&model, &w.to_model_input()?)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (g, &t) in frames.iter().zip(&w.target_epochs) {
        save_grid(&out.join(format!("{t}.fgrid")), g, t, Unit::MmPerHour, Dtype::F64)?;
    }
    write_snapshot(out, &cfg)?;
    println!("wrote {} frames from origin {} to {}", frames.len(), w.origin_epoch(), out.display());
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let fault = args.corrupt_sigmoid.map(Fault::SigmoidAdjointScale);
    let mut ok = true;

    let grad = gradcheck_suite(fault)?;
    for c in &grad.cases {
        println!(
            "  {:28} max rel err {:.2e} (< {:.0e}) worst {} [{}]",
            c.name,
            c.report.max_rel_err,
            c.tolerance,
            c.report.worst_param,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "suite gradcheck: {} ({} cases, {:.2}s)",
        if grad.passed() { "pass" } else { "FAIL" },
        grad.cases.len(),
        grad.elapsed.as_secs_f64()
    );
    ok &= grad.passed();

    for suite in [kernel_oracles(1)?, metric_oracles(2)?] {
        for c in &suite.checks {
            println!(
                "  {:28} max err {:.2e} (<= {:.0e}) over {} [{}]",
                c.name,
                c.max_err,
                c.tolerance,
                c.instances,
                if c.passed() { "ok" } else { "FAIL" }
            );
        }
        println!(
            "suite {}: {} ({} checks, {:.2}s)",
            suite.name,
            if suite.passed() { "pass" } else { "FAIL" },
            suite.checks.len(),
            suite.elapsed.as_secs_f64()
        );
        ok &= suite.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(failure("verification failed"))
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    match &cli.cmd {
        Cmd::Synth { seed, scenes, out } => cmd_synth(cli, *seed, *scenes, out),
        Cmd::Prior { cmd: PriorCmd::Generate { data } } => cmd_prior_generate(cli, data),
        Cmd::Train { variant, data, out } => cmd_train(cli, *variant, data, out),
        Cmd::Eval { checkpoint, split, data, out, csi_agg, strict, baselines } => {
            cmd_eval(cli, checkpoint, *split, data, out, *csi_agg, *strict, *baselines)
        }
        Cmd::Ablate { out } => cmd_ablate(cli, out),
        Cmd::Predict { checkpoint, window, split, data, out } => cmd_predict(cli, checkpoint, *window, *split, data, out),
        Cmd::Verify(args) => cmd_verify(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
