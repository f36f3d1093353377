use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use hybridrct::case_study::{self, CaseStudyConfig};
use hybridrct::config::{load_json, SimulateConfig};
use hybridrct::design_eval::{evaluate_designs, pos_json, write_curves_csv, DesignEvalConfig};
use hybridrct::map_prior::{fit_map_prior_with, HierarchicalHyperPrior, MapFitSettings};
use hybridrct::mixture::ess_elir;
use hybridrct::pool::load_pool_csv;
use hybridrct::sim::{run_grid, self_check, write_oc_csv};
use hybridrct::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "hybridrct",
    version,
    about = "Hybrid RCT simulation with selected historical controls"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, env = "HYBRIDRCT_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate marginal operating characteristics over a scenario grid.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<u64>,
        /// Skip the startup comparison of the simulation MAP preset with the fine fit.
        #[arg(long)]
        skip_self_check: bool,
    },
    /// Conditional operating characteristics and probability of success for a historical pool.
    DesignEval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Historical controls CSV with columns study,responders,size.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reanalyse the bundled ankylosing spondylitis trial under every selection rule.
    CaseStudy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replacement dataset; must match the pinned checksum.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit a robust MAP prior to a historical CSV and print it with its ESS.
    FitMap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        w_r: f64,
        /// Number of mixture components (default: chosen by AIC).
        #[arg(long)]
        components: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Error> {
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn simulate(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    replicates: Option<u64>,
    skip_self_check: bool,
    threads: usize,
) -> Result<(), Error> {
    let mut cfg: SimulateConfig = load_json(config)?;
    if let Some(s) = seed {
        cfg.settings.seed = s;
    }
    if let Some(r) = replicates {
        cfg.settings.replicates = r;
    }
    let scenarios = cfg.scenarios()?;
    log::info!(
        "{} scenario(s), {} replicates, seed {}",
        scenarios.len(),
        cfg.settings.replicates,
        cfg.settings.seed
    );
    let check = if skip_self_check {
        None
    } else {
        let d = self_check(&cfg.settings)?;
        log::info!("self-check: largest mean difference {d:.5}");
        Some(d)
    };
    let (records, runs) = run_grid(&scenarios, &cfg.settings)?;
    let mut csv = Vec::new();
    write_oc_csv(&records, &mut csv)?;
    let manifest = json!({
        "tool": "hybridrct",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "simulate",
        "config": cfg,
        "seed": cfg.settings.seed,
        "replicates": cfg.settings.replicates,
        "threads": threads,
        "timestamp_unix": timestamp(),
        "self_check_max_abs_diff": check,
        "scenarios": runs,
    });
    fs::create_dir_all(out)?;
    write_file(out, "oc_results.csv", &csv)?;
    write_file(
        out,
        "manifest.json",
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    log::info!(
        "wrote {} rows to {}",
        records.len(),
        out.join("oc_results.csv").display()
    );
    Ok(())
}

fn design_eval(config: Option<&Path>, data: &Path, out: &Path) -> Result<(), Error> {
    let cfg: DesignEvalConfig = match config {
        Some(p) => load_json(p)?,
        None => DesignEvalConfig::default(),
    };
    let pool =
        load_pool_csv(data).map_err(|e| Error::Config(format!("{}: {e}", data.display())))?;
    let report = evaluate_designs(&pool.pool, &cfg)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let mut csv = Vec::new();
    write_curves_csv(&report, &mut csv)?;
    let pos = pos_json(&report)?;
    fs::create_dir_all(out)?;
    write_file(out, "curves.csv", &csv)?;
    write_file(out, "pos.json", pos.as_bytes())?;
    Ok(())
}

fn run_case_study(out: &Path, config: Option<&Path>, data: Option<&Path>) -> Result<(), Error> {
    let cfg: CaseStudyConfig = match config {
        Some(p) => load_json(p)?,
        None => CaseStudyConfig::default(),
    };
    let bytes = match data {
        Some(p) => {
            fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => case_study::AS_CONTROLS_CSV.as_bytes().to_vec(),
    };
    let pool = case_study::load_as_controls(&bytes)?;
    case_study::check_dataset(&pool, &cfg)?;
    let report = case_study::run_case_study(&pool, &cfg)?;
    let mut bayes = Vec::new();
    case_study::write_rows(&report.bayes, &mut bayes)?;
    let mut ttp = Vec::new();
    case_study::write_rows(&report.ttp, &mut ttp)?;
    let manifest = json!({
        "tool": "hybridrct",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "case-study",
        "config": cfg,
        "dataset_sha256": case_study::sha256_hex(&bytes),
        "timestamp_unix": timestamp(),
    });
    fs::create_dir_all(out)?;
    write_file(out, "table6.csv", &bayes)?;
    write_file(out, "tableS6.csv", &ttp)?;
    write_file(
        out,
        "manifest.json",
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

fn fit_map(data: &Path, w_r: f64, components: Option<usize>) -> Result<(), Error> {
    if !(w_r > 0.0 && w_r < 1.0) {
        return Err(Error::Config(format!("--w-r must lie in (0,1), got {w_r}")));
    }
    let pool =
        load_pool_csv(data).map_err(|e| Error::Config(format!("{}: {e}", data.display())))?;
    let fit = fit_map_prior_with(
        &pool.pool,
        &HierarchicalHyperPrior::default(),
        components,
        &MapFitSettings::fine(),
    )?;
    let robust = fit.mixture.robustify(w_r)?;
    let comps = |m: &hybridrct::mixture::BetaMixture| {
        m.iter()
            .map(|(w, c)| json!({"weight": w, "a": c.a, "b": c.b}))
            .collect::<Vec<_>>()
    };
    let out = json!({
        "trials": pool.pool.len(),
        "map": comps(&fit.mixture),
        "map_mean": fit.mixture.mean(),
        "map_ess": ess_elir(&fit.mixture)?,
        "predictive_mean": fit.predictive_mean,
        "predictive_sd": fit.predictive_sd,
        "tv_distance": fit.tv_distance,
        "w_r": w_r,
        "robust_map": comps(&robust),
        "robust_map_ess": ess_elir(&robust)?,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(0);
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        log::error!("thread pool: {e}");
        return ExitCode::from(1);
    }
    let used = rayon::current_num_threads();
    let result = match &cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            replicates,
            skip_self_check,
        } => simulate(config, out, *seed, *replicates, *skip_self_check, used),
        Command::DesignEval { config, data, out } => design_eval(config.as_deref(), data, out),
        Command::CaseStudy { out, config, data } => {
            run_case_study(out, config.as_deref(), data.as_deref())
        }
        Command::FitMap {
            data,
            w_r,
            components,
        } => fit_map(data, *w_r, *components),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
