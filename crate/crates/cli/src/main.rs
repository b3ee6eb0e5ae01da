use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use road_core::harness::{
    compare_strategies, export_metrics, load_records, run_experiment, save_records, summarize,
    ExperimentConfig,
};
use road_core::nalgebra::DMatrix;
use road_core::theory::{
    bias_monte_carlo, characteristic_length, gradient_check, snr_prediction, GradientFixture,
    NoiseModel,
};
use road_core::Error;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "road",
    version,
    about = "Bandit-driven offline/online replay mixing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config over its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run N consecutive seeds starting at the first configured seed (or ROAD_SEED).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configs sharing an environment and print a comparison table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Re-export CSV/JSON artifacts from a run directory.
    Export {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Analytic mixing-ratio gradient vs central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        fixtures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo overestimation bias and signal-to-noise checks.
    BiasCheck {
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure reported as JSON on stderr.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
            code: 1,
        }
    }
}

fn check_failed(message: String) -> Failure {
    Failure {
        kind: "check_failed",
        message,
        code: 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return fail(Failure {
                kind: "usage",
                message: e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""),
                code: 2,
            })
        }
    };
    match dispatch(cli.command) {
        Ok(report) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("json value")
            );
            ExitCode::SUCCESS
        }
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let body = json!({"error": {"kind": f.kind, "message": f.message}});
    eprintln!("{body}");
    ExitCode::from(f.code)
}

fn dispatch(command: Command) -> Result<Value, Failure> {
    match command {
        Command::Run { config, seeds, out } => run(&config, seeds, out),
        Command::Compare { configs, out } => compare(&configs, out),
        Command::Theory(TheoryCommand::GradCheck { fixtures, seed }) => grad_check(fixtures, seed),
        Command::Theory(TheoryCommand::BiasCheck { draws, seed }) => bias_check(draws, seed),
        Command::Export { run } => export(&run),
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("ROAD_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure {
            kind: "config",
            message: format!("ROAD_SEED={v:?} is not an unsigned integer"),
            code: 1,
        }),
        Err(_) => Ok(None),
    }
}

fn resolve_seeds(configured: &[u64], count: Option<usize>, env: Option<u64>) -> Vec<u64> {
    let base = env.unwrap_or(configured[0]);
    match (count, env) {
        (Some(n), _) => (base..base + n as u64).collect(),
        (None, Some(s)) => vec![s],
        (None, None) => configured.to_vec(),
    }
}

fn load_config(path: &Path, count: Option<usize>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if count == Some(0) {
        return Err(Error::Config("--seeds must be positive".into()).into());
    }
    cfg.seeds = resolve_seeds(&cfg.seeds, count, env_seed()?);
    Ok(cfg)
}

fn run(config: &Path, seeds: Option<usize>, out: Option<PathBuf>) -> Result<Value, Failure> {
    let cfg = load_config(config, seeds)?;
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.label()));
    let records = run_experiment(&cfg)?;
    save_records(&records, &out)?;
    let files = export_metrics(&records, &out)?;
    Ok(json!({
        "out_dir": out,
        "curves": files.curves,
        "heatmap": files.heatmap,
        "bandit": files.bandit,
        "summary": summarize(&records),
    }))
}

fn compare(paths: &[PathBuf], out: Option<PathBuf>) -> Result<Value, Failure> {
    let env = env_seed()?;
    let cfgs = paths
        .iter()
        .map(|p| {
            let mut c = ExperimentConfig::load(p)?;
            c.seeds = resolve_seeds(&c.seeds, None, env);
            Ok(c)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let (table, records) = compare_strategies(&cfgs)?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join("comparison"));
    save_records(&records, &out)?;
    export_metrics(&records, &out)?;
    let path = out.join("comparison.json");
    let body = serde_json::to_string_pretty(&table).map_err(Error::from)?;
    std::fs::write(&path, body).map_err(|e| Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
        code: 1,
    })?;
    Ok(json!({"out_dir": out, "comparison": table}))
}

fn export(dir: &Path) -> Result<Value, Failure> {
    let records = load_records(dir)?;
    let files = export_metrics(&records, dir)?;
    Ok(json!({
        "curves": files.curves,
        "heatmap": files.heatmap,
        "bandit": files.bandit,
        "summary": files.summary,
    }))
}

const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn grad_check(fixtures: usize, seed: u64) -> Result<Value, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(fixtures);
    let mut zero_cases = Vec::with_capacity(fixtures);
    for _ in 0..fixtures {
        let fx = GradientFixture::random(&mut rng, 1e-8)?;
        rows.push(gradient_check(&fx, FD_STEP)?);
        let (equal, converged) = fx.trivial_cases()?;
        zero_cases.push(json!({"equal_sources": equal, "zero_residual": converged}));
    }
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let report = json!({
        "fd_step": FD_STEP,
        "tolerance": GRAD_TOLERANCE,
        "max_relative_error": worst,
        "pass": worst <= GRAD_TOLERANCE,
        "fixtures": rows,
        "zero_cases": zero_cases,
    });
    if worst > GRAD_TOLERANCE {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("json value")
        );
        return Err(check_failed(format!(
            "max relative error {worst:e} exceeds {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(report)
}

fn bias_check(draws: usize, seed: u64) -> Result<Value, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = [0.25; 4];
    let white = bias_monte_carlo(
        &[0.0; 4],
        &NoiseModel::white(4, 1.0)?,
        &uniform,
        0.01,
        draws,
        &mut rng,
    )?;
    let closed_form = 0.01 * (1.0 - 0.25);
    let correlated = bias_monte_carlo(
        &[0.0; 4],
        &NoiseModel::new(DMatrix::from_element(4, 4, 1.0), 1.0)?,
        &uniform,
        0.01,
        draws,
        &mut rng,
    )?;

    let n = 400;
    let h = 2.0 * PI / n as f64;
    let x: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let f: Vec<f64> = x.iter().map(|x| x.sin()).collect();
    let noise = NoiseModel::new(
        DMatrix::from_fn(n, n, |i, j| 0.5 * (10.0 * (x[i] - x[j])).cos()),
        1.0,
    )?;
    let mut base: Vec<f64> = x
        .iter()
        .map(|x| (-0.5 * ((x - PI / 4.0) / 0.03).powi(2)).exp())
        .collect();
    let z: f64 = base.iter().sum();
    base.iter_mut().for_each(|p| *p /= z);
    let predicted = snr_prediction(&f, &noise, h)?;
    let smooth = bias_monte_carlo(&f, &noise, &base, 0.01, draws, &mut rng)?;

    let white_ok = (white.empirical_bias - closed_form).abs() <= 3.0 * white.empirical_bias_stderr;
    let corr_ok =
        correlated.empirical_bias.abs() <= 3.0 * correlated.empirical_bias_stderr.max(1e-15);
    Ok(json!({
        "draws": draws,
        "white_noise": {
            "closed_form_bias": closed_form,
            "report": white,
            "within_3_stderr": white_ok,
        },
        "correlated_noise": {
            "report": correlated,
            "within_3_stderr_of_zero": corr_ok,
        },
        "signal_to_noise": {
            "lambda_f": characteristic_length(&f, h)?,
            "predicted": predicted,
            "report": smooth,
            "ratio_to_prediction": smooth.snr / predicted,
        },
    }))
}
