//! `ensda` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ensda::da::{self, DaConfig, DaSummary, Mec, Scenario};
use ensda::gmm::{fit_gmm_traced, GmmOptions};
use ensda::slp::{self, Audit, SlpConfig};
use ensda::smoother::{Gamma0Rule, GammaSchedule, IesConfig};

const SEED_ENV: &str = "ENSDA_SEED";

#[derive(Parser)]
#[command(name = "ensda", version, about = "Ensemble kernel learning and data assimilation experiments")]
struct Cli {
    /// Worker threads for member evaluations (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised residual learning on synthetic 1D data.
    Slp(SlpArgs),
    /// Data assimilation on a 2D Gaussian random field.
    Da(DaArgs),
    /// Fit a 1D Gaussian mixture and print it as JSON.
    GmmFit(GmmArgs),
    /// Collect data-assimilation summaries under a directory into one table.
    Report(ReportArgs),
}

/// Smoother settings shared by `slp` and `da`.
#[derive(Args, Clone, Default)]
struct IesArgs {
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    max_inner: Option<usize>,
    #[arg(long)]
    gamma_grow: Option<f64>,
    #[arg(long)]
    gamma_shrink: Option<f64>,
    /// Fixed initial gamma; by default it balances the prediction spread
    /// against the noise level.
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    svd_energy: Option<f64>,
    #[arg(long)]
    rel_change_stop: Option<f64>,
    #[arg(long)]
    target_factor: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    StepSize,
    Literal,
}

impl IesArgs {
    fn apply(&self, c: &mut IesConfig) {
        if let Some(v) = self.max_outer {
            c.max_outer = v;
        }
        if let Some(v) = self.max_inner {
            c.max_inner = v;
        }
        if let Some(v) = self.gamma_grow {
            c.gamma_grow = v;
        }
        if let Some(v) = self.gamma_shrink {
            c.gamma_shrink = v;
        }
        if let Some(v) = self.gamma0 {
            c.gamma0 = Gamma0Rule::Fixed(v);
        }
        if let Some(v) = self.schedule {
            c.schedule = match v {
                ScheduleArg::StepSize => GammaSchedule::StepSize,
                ScheduleArg::Literal => GammaSchedule::Literal,
            };
        }
        if let Some(v) = self.svd_energy {
            c.svd_energy = v;
        }
        if let Some(v) = self.rel_change_stop {
            c.rel_change_stop = v;
        }
        if let Some(v) = self.target_factor {
            c.target_factor = v;
        }
    }
}

#[derive(Args)]
struct SlpArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input modes as `mean,std,count` separated by `;`.
    #[arg(long, allow_hyphen_values = true)]
    modes: Option<String>,
    /// Number of input clusters (1 trains a single ensemble).
    #[arg(long)]
    n_cl: Option<usize>,
    /// Random seed (falls back to the config, then to ENSDA_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_cp: Option<usize>,
    #[arg(long)]
    n_e: Option<usize>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[command(flatten)]
    ies: IesArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum MecArg {
    None,
    Kernel,
    Bias,
}

#[derive(Args)]
struct DaArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long, value_enum)]
    mec: Option<MecArg>,
    /// Clusters of the kernel correction.
    #[arg(long)]
    n_cl: Option<usize>,
    /// Random seed (falls back to the config, then to ENSDA_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    n_cp: Option<usize>,
    #[arg(long)]
    n_e: Option<usize>,
    #[arg(long)]
    n_neighbors: Option<usize>,
    #[command(flatten)]
    ies: IesArgs,
}

#[derive(Args)]
struct GmmArgs {
    /// File with one sample per line (lines that do not parse are skipped).
    #[arg(long, conflicts_with = "modes")]
    input: Option<PathBuf>,
    /// Generate inputs from `mean,std,count` modes instead.
    #[arg(long, allow_hyphen_values = true)]
    modes: Option<String>,
    #[arg(long, default_value_t = 3)]
    n_cl: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Write the model here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for `da_summary.json`.
    out_dir: PathBuf,
    /// Where to write the table (default: `<out_dir>/report.csv`).
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    modes: Option<String>,
    n_cl: Option<usize>,
    slp: SlpConfig,
    da: DaConfig,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid run configuration in {}", path.display()))
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

fn report_audits(audits: &[Audit]) -> ExitCode {
    let failed: Vec<&Audit> = audits.iter().filter(|a| !a.passed).collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for a in failed {
            eprintln!("audit failed: {}", a.name);
        }
        ExitCode::from(1)
    }
}

fn cmd_slp(args: SlpArgs) -> Result<ExitCode> {
    let rc = load_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, rc.seed)?;
    let mut cfg = rc.slp;
    if let Some(v) = args.n_cp {
        cfg.n_cp = v;
    }
    if let Some(v) = args.n_e {
        cfg.n_e = v;
    }
    if let Some(v) = args.train_frac {
        cfg.train_frac = v;
    }
    args.ies.apply(&mut cfg.ies);
    cfg.ies.validate()?;
    let modes_text = args.modes.or(rc.modes).unwrap_or_else(|| "-5,1,10000".into());
    let modes = slp::parse_modes(&modes_text)?;
    let n_cl = args.n_cl.or(rc.n_cl).unwrap_or(1);
    let out = args.out.or(rc.out).unwrap_or_else(|| PathBuf::from("ensda-out/slp"));

    let data = slp::gen_slp_data(&modes, seed)?;
    let (train, cv) = slp::split_dataset(&data, cfg.train_frac, seed)?;
    log::info!("slp: {} training and {} validation points, {n_cl} cluster(s)", train.len(), cv.len());
    let run = slp::train_mmls(&train, &cv, n_cl, &cfg, seed)?;
    let summary = run.write_outputs(&out, &train, &cv)?;
    println!(
        "grid error {:.4} (uncorrected {:.4}); outputs in {}",
        summary.grid_error,
        summary.baseline_grid_error,
        out.display()
    );
    Ok(report_audits(&summary.audits))
}

fn cmd_da(args: DaArgs) -> Result<ExitCode> {
    let rc = load_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, rc.seed)?;
    let mut cfg = rc.da;
    if let Some(s) = args.scenario {
        cfg.scenario = s;
    }
    let n_cl = args.n_cl.or(rc.n_cl);
    match args.mec {
        Some(MecArg::None) => cfg.mec = Mec::None,
        Some(MecArg::Bias) => cfg.mec = Mec::Bias,
        Some(MecArg::Kernel) => cfg.mec = Mec::Kernel { n_cl: n_cl.unwrap_or(1) },
        None => {
            if let (Mec::Kernel { .. }, Some(n)) = (cfg.mec, n_cl) {
                cfg.mec = Mec::Kernel { n_cl: n };
            }
        }
    }
    if n_cl.is_some() && !matches!(cfg.mec, Mec::Kernel { .. }) {
        bail!("--n-cl only applies to --mec kernel");
    }
    for (flag, slot) in [
        (args.nx, &mut cfg.nx),
        (args.ny, &mut cfg.ny),
        (args.n_cp, &mut cfg.n_cp),
        (args.n_e, &mut cfg.n_e),
        (args.n_neighbors, &mut cfg.n_neighbors),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    args.ies.apply(&mut cfg.ies);
    cfg.validate()?;
    let out = args.out.or(rc.out).unwrap_or_else(|| PathBuf::from("ensda-out/da"));

    let problem = cfg.problem(seed)?;
    let z0 = cfg.initial_models(seed)?;
    log::info!(
        "da: {}x{} grid, scenario {}, correction {}, state size {}",
        cfg.nx,
        cfg.ny,
        cfg.scenario.name(),
        cfg.mec.name(),
        da::AugmentedLayout { m_z: cfg.nx * cfg.ny, n_cp: cfg.n_cp, mec: cfg.mec }.len()
    );
    let results = da::run_da(&problem, &z0, &cfg, seed)?;
    let s = results.write_outputs(&out, &problem, &cfg)?;
    println!(
        "stop {:?} after {} steps; mismatch {:.4e} +- {:.3e}; rmse {:.4} +- {:.3e}; outputs in {}",
        s.stop_reason,
        s.iterations,
        s.final_mismatch.mean,
        s.final_mismatch.std,
        s.final_rmse.mean,
        s.final_rmse.std,
        out.display()
    );
    Ok(report_audits(&s.audits))
}

fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let xs: Vec<f64> = text.lines().filter_map(|l| l.split(',').next().and_then(|v| v.trim().parse().ok())).collect();
    if xs.is_empty() {
        bail!("no numeric samples in {}", path.display());
    }
    Ok(xs)
}

fn cmd_gmm(args: GmmArgs) -> Result<ExitCode> {
    let seed = resolve_seed(args.seed, None)?;
    let samples = match (&args.input, &args.modes) {
        (Some(p), _) => read_samples(p)?,
        (None, Some(m)) => slp::gen_slp_data(&slp::parse_modes(m)?, seed)?.inputs,
        (None, None) => bail!("give --input FILE or --modes SPEC"),
    };
    let opts = GmmOptions { max_iter: args.max_iter, rel_tol: args.tol, seed, ..GmmOptions::default() };
    let fit = fit_gmm_traced(&samples, args.n_cl, &opts)?;
    let json = serde_json::to_string_pretty(&fit.model)?;
    match args.out {
        Some(p) => ensda::io::write_text(&p, &json)?,
        None => println!("{json}"),
    }
    if !fit.converged {
        log::warn!("EM hit the iteration cap before meeting the tolerance");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    run: String,
    mean_mismatch: f64,
    std_mismatch: f64,
    mean_rmse: f64,
    std_rmse: f64,
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> =
        fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "da_summary.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let mut paths = Vec::new();
    find_summaries(&args.out_dir, &mut paths)?;
    let mut rows = Vec::new();
    for p in &paths {
        let parsed = fs::read_to_string(p)
            .map_err(anyhow::Error::from)
            .and_then(|t| serde_json::from_str::<DaSummary>(&t).map_err(anyhow::Error::from));
        let s = match parsed {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping malformed summary {}: {e}", p.display());
                eprintln!("warning: skipping malformed summary {}", p.display());
                continue;
            }
        };
        let dir = p.parent().unwrap_or(Path::new("."));
        let run = dir.strip_prefix(&args.out_dir).unwrap_or(dir).display().to_string();
        let run = if run.is_empty() { format!("{}-{}", s.scenario.name(), s.mec) } else { run };
        rows.push(ReportRow {
            run,
            mean_mismatch: s.final_mismatch.mean,
            std_mismatch: s.final_mismatch.std,
            mean_rmse: s.final_rmse.mean,
            std_rmse: s.final_rmse.std,
        });
    }
    if rows.is_empty() {
        bail!("no completed runs found under {}", args.out_dir.display());
    }
    rows.sort_by(|a, b| a.mean_rmse.total_cmp(&b.mean_rmse));
    let mut csv = String::from("run,mean_mismatch,std_mismatch,mean_rmse,std_rmse\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.run, r.mean_mismatch, r.std_mismatch, r.mean_rmse, r.std_rmse
        ));
    }
    let output = args.output.unwrap_or_else(|| args.out_dir.join("report.csv"));
    ensda::io::write_text(&output, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn set_threads(n: Option<usize>) -> Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        bail!("--threads must be at least 1");
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    #[cfg(not(feature = "parallel"))]
    log::info!("built without the parallel feature; --threads {n} ignored");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = set_threads(cli.threads).and_then(|()| match cli.command {
        Command::Slp(a) => cmd_slp(a),
        Command::Da(a) => cmd_da(a),
        Command::GmmFit(a) => cmd_gmm(a),
        Command::Report(a) => cmd_report(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
