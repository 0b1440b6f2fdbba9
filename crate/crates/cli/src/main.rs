use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use csdn::harness::{
    build_dataset, check_head, checkpoint, evaluate_run, grad_suite, run_ablation, run_layer_sweep, run_training,
    Report, RunConfig, CHECKPOINT_FILE, METRICS_FILE,
};
use csdn::CsdnError;

#[derive(Parser)]
#[command(
    name = "csdn",
    version,
    about = "Train, evaluate and ablate the CSDN detection head on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `head.topology`, e.g. `n+b+d` or `s-d`.
    #[arg(long)]
    topology: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes the metric log and checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the held-out split it was trained against.
    Eval {
        /// Checkpoint file; defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train every topology of the ablation matrix for every seed. `--seed`
    /// shifts the seed list to start there; `--topology` restricts the matrix
    /// to one row.
    Ablate(RunArgs),
    /// Train the configured topology at each depth of `sweep.layers`.
    SweepLayers(RunArgs),
    /// Finite-difference check of every backward pass.
    GradCheck {
        #[command(flatten)]
        run: RunArgs,
        /// Number of consecutive seeds, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Re-render a saved report (`.tsv`, or a directory holding one).
    Report { input: PathBuf },
}

/// Failure categories, one exit code each.
enum Failure {
    Error(CsdnError),
    GradCheck(usize),
}

impl From<CsdnError> for Failure {
    fn from(e: CsdnError) -> Self {
        Self::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Error(e.into())
    }
}

impl Failure {
    fn category(&self) -> (&'static str, u8) {
        match self {
            Self::Error(CsdnError::Config(_) | CsdnError::InvalidArgument(_)) => ("config", 2),
            Self::Error(CsdnError::Io(_)) => ("io", 3),
            Self::Error(CsdnError::Checkpoint(_)) => ("checkpoint", 4),
            Self::Error(CsdnError::Divergence { .. } | CsdnError::NonFinite(_)) => ("divergence", 5),
            Self::Error(_) => ("internal", 6),
            Self::GradCheck(_) => ("grad-check", 7),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Error(e) => write!(f, "{e}"),
            Self::GradCheck(n) => write!(f, "{n} case(s) exceeded the tolerance"),
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.run.output_dir = out.clone();
    }
    if let Some(t) = &args.topology {
        cfg.head.topology = t.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_text())?;
    let started = Instant::now();
    let data = build_dataset(&cfg)?;
    let run = run_training(&cfg, &data, Some(&dir))?;
    for record in &run.outcome.history {
        println!("{record}");
    }
    let e = &run.outcome.final_eval;
    println!(
        "trained {} ({} params) for {} epochs / {} steps in {:.1}s",
        cfg.head.topology,
        run.num_params(),
        run.outcome.history.len(),
        run.outcome.steps,
        started.elapsed().as_secs_f64()
    );
    println!(
        "P {:.4}  R {:.4}  mAP50 {:.4}  mAP@[.5:.95] {:.4}",
        e.precision, e.recall, e.map50, e.map5095
    );
    println!(
        "wrote {} and {}",
        dir.join(METRICS_FILE).display(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval(checkpoint_path: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let path = checkpoint_path.map_or_else(|| out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let (cfg, head, store) = checkpoint::load(&path)?;
    let data = build_dataset(&cfg)?;
    let e = evaluate_run(&cfg, &head, &store, &data)?;
    println!(
        "checkpoint {} ({}, seed {})",
        path.display(),
        cfg.head.topology,
        cfg.run.seed
    );
    println!(
        "P {:.4}  R {:.4}  mAP50 {:.4}  mAP@[.5:.95] {:.4}",
        e.precision, e.recall, e.map50, e.map5095
    );
    println!(
        "{:>5}  {:>6}  {:>6}  {:>7}  {:>12}",
        "class", "gts", "dets", "AP50", "AP@[.5:.95]"
    );
    for c in &e.per_class {
        let ap = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:>5}  {:>6}  {:>6}  {:>7}  {:>12}",
            c.class_id,
            c.num_gt,
            c.num_dets,
            ap(c.ap50),
            ap(c.ap5095)
        );
    }
    Ok(())
}

fn finish_report(report: &Report, dir: &Path, stem: &str) -> Result<(), Failure> {
    report.write(dir, stem)?;
    print!("{}", report.to_text());
    println!("\nwrote {}", dir.join(format!("{stem}.tsv")).display());
    Ok(())
}

fn ablate(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&RunArgs {
        seed: None,
        topology: None,
        ..args.clone()
    })?;
    if let Some(seed) = args.seed {
        let n = cfg.ablation.seeds.len() as u64;
        cfg.ablation.seeds = (seed..seed + n).collect();
    }
    if let Some(t) = &args.topology {
        let t: csdn::head::Topology = t.parse()?;
        cfg.ablation.topologies = vec![t.to_string()];
    }
    let dir = cfg.run.output_dir.clone();
    let data = build_dataset(&cfg)?;
    let report = run_ablation(&cfg, &data, Some(&dir.join("ablation")))?;
    finish_report(&report, &dir, "ablation")
}

fn sweep(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let dir = cfg.run.output_dir.clone();
    let data = build_dataset(&cfg)?;
    let report = run_layer_sweep(&cfg, &data, Some(&dir.join("sweep")))?;
    finish_report(&report, &dir, "sweep")
}

fn grad_check(args: &RunArgs, seeds: u64, epsilon: f64, tolerance: f64) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let mut failed = 0;
    for seed in cfg.run.seed..cfg.run.seed + seeds {
        let mut cases = grad_suite(seed, epsilon)?;
        if args.topology.is_some() {
            cases.push(csdn::harness::GradCase {
                name: format!("head {}", cfg.head.topology),
                seed,
                report: check_head(&cfg.head.topology, 2, seed, epsilon)?,
            });
        }
        for c in cases {
            let ok = c.report.max_rel_error < tolerance;
            failed += usize::from(!ok);
            println!(
                "{}  seed {:<4} {:<22} max rel error {:.3e} over {} coordinates (worst {}[{}])",
                if ok { "ok  " } else { "FAIL" },
                seed,
                c.name,
                c.report.max_rel_error,
                c.report.coordinates,
                c.report.worst_param,
                c.report.worst_index
            );
        }
    }
    if failed > 0 {
        return Err(Failure::GradCheck(failed));
    }
    Ok(())
}

fn report(input: &Path) -> Result<(), Failure> {
    let path = if input.is_dir() {
        ["ablation.tsv", "sweep.tsv"]
            .iter()
            .map(|f| input.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| CsdnError::InvalidArgument(format!("no report found in {}", input.display())))?
    } else {
        input.to_path_buf()
    };
    let report = Report::from_tsv(&std::fs::read_to_string(&path)?)?;
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval { checkpoint, out } => eval(checkpoint.as_deref(), out),
        Command::Ablate(a) => ablate(a),
        Command::SweepLayers(a) => sweep(a),
        Command::GradCheck {
            run,
            seeds,
            epsilon,
            tolerance,
        } => grad_check(run, *seeds, *epsilon, *tolerance),
        Command::Report { input } => report(input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (category, code) = f.category();
            eprintln!("error [{category}]: {f}");
            ExitCode::from(code)
        }
    }
}
