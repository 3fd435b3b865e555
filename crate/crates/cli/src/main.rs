mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vfem_core::datagen::generate;
use vfem_core::engine::{fit, FitConfig};
use vfem_core::inference::infer;
use vfem_core::io::{
    read_dataset, read_parameters, read_report, write_dataset, write_parameters, write_report, FitReport,
    InferenceSummary, TRUTH_FILE,
};
use vfem_core::model::ModelParameters;
use vfem_core::montecarlo::{monte_carlo, Method, MonteCarloSpec};
use vfem_core::{Result, VfemError};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "vfem", version, about = "Vertical federated EM for block-missing linear regression")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// inproc or socket.
    #[arg(long, global = true)]
    transport: Option<String>,
    /// federated or oracle.
    #[arg(long, global = true)]
    engine: Option<String>,
    /// Write the coordinator's message log here.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it as per-client CSV files.
    Generate {
        /// standard or smes-like.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// One missing rate for every client.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Fit the model on a dataset directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Standard errors at a fitted θ̂.
    Infer {
        #[arg(long)]
        data: PathBuf,
        /// fit.json or theta.json from `vfem fit`.
        #[arg(long)]
        theta: PathBuf,
    },
    /// Seeded replications of VFEM and the baselines.
    Montecarlo {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated: vfem, ols, single, complete-case, mean-impute.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        /// Also compute VFEM standard errors and coverage.
        #[arg(long)]
        inference: bool,
    },
    /// Communication and wall time per iteration across sample sizes.
    Benchmark {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_PROTOCOL: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(if e.is_protocol() { EXIT_PROTOCOL } else { EXIT_INVALID })
        }
    }
}

fn out_dir(common: &Common) -> Result<Option<&Path>> {
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
    }
    Ok(common.out.as_deref())
}

fn run(cli: Cli) -> Result<u8> {
    let rc = RunConfig::load(cli.common.config.as_deref())?;
    let seed = cli.common.seed.or(rc.seed);
    let c = &cli.common;
    match cli.command {
        Command::Generate { preset, n, rate } => cmd_generate(c, &rc, seed, preset, n, rate),
        Command::Fit { data, tolerance, max_iters } => {
            let mut cfg = fit_config(c, &rc, seed)?;
            if let Some(eps) = tolerance {
                cfg.tolerance = eps;
            }
            if let Some(t) = max_iters {
                cfg.max_iters = t;
            }
            cfg.validate()?;
            cmd_fit(c, &data, &cfg)
        }
        Command::Infer { data, theta } => cmd_infer(c, &rc, seed, &data, &theta),
        Command::Montecarlo { preset, reps, methods, inference } => {
            cmd_montecarlo(c, &rc, seed, preset, reps, methods, inference)
        }
        Command::Benchmark { sizes, iterations } => cmd_benchmark(c, &rc, seed, sizes, iterations),
    }
}

fn fit_config(c: &Common, rc: &RunConfig, seed: Option<u64>) -> Result<FitConfig> {
    let mut cfg = rc.fit_config(c.engine.as_deref(), c.transport.as_deref())?;
    if let Some(s) = seed {
        cfg.federation.seed = s;
    }
    cfg.federation.trace = c.trace.clone();
    Ok(cfg)
}

fn cmd_generate(
    c: &Common,
    rc: &RunConfig,
    seed: Option<u64>,
    preset: Option<String>,
    n: Option<usize>,
    rate: Option<f64>,
) -> Result<u8> {
    let mut cfg = rc.gen_config(preset.as_deref())?;
    if let Some(n) = n {
        cfg.n = n;
    }
    if let Some(r) = rate {
        cfg = cfg.with_rate(r);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let g = generate(&cfg)?;
    let manifest = write_dataset(&dir, &g.data)?;
    write_parameters(&dir.join(TRUTH_FILE), &g.truth)?;
    write_report(&dir.join("gen.json"), &cfg)?;
    println!("wrote {} rows for {} clients to {}", manifest.n, manifest.num_clients, dir.display());
    println!("{:<8} {:>5} {:>10} {:>10}", "client", "p_k", "target", "missing");
    for k in 0..manifest.num_clients {
        println!(
            "{:<8} {:>5} {:>10.4} {:>10.4}",
            k + 1,
            manifest.dims[k],
            cfg.missing_rates[k],
            manifest.missing_rates[k]
        );
    }
    println!("complete rows {}", g.data.complete_rows().len());
    Ok(0)
}

fn cmd_fit(c: &Common, data: &Path, cfg: &FitConfig) -> Result<u8> {
    let (dataset, _) = read_dataset(data)?;
    let result = fit(&dataset, cfg)?;
    let report = FitReport::new(&result);
    print!("{}", report.to_table());
    if let Some(dir) = out_dir(c)? {
        write_report(&dir.join("fit.json"), &report)?;
        write_parameters(&dir.join("theta.json"), &result.theta)?;
    }
    Ok(if result.converged { 0 } else { EXIT_NOT_CONVERGED })
}

/// Accepts a fit report or a bare parameter file.
fn load_theta(path: &Path) -> Result<ModelParameters> {
    match read_report::<FitReport>(path) {
        Ok(r) => r.theta.to_parameters(),
        Err(_) => read_parameters(path),
    }
}

fn cmd_infer(c: &Common, rc: &RunConfig, seed: Option<u64>, data: &Path, theta: &Path) -> Result<u8> {
    let (dataset, _) = read_dataset(data)?;
    let theta = load_theta(theta)?;
    let fit_cfg = fit_config(c, rc, seed)?;
    let cfg = rc.inference_config(&fit_cfg);
    let report = infer(&dataset, &theta, &cfg)?;
    print!("{}", report.to_table());
    println!("Γ spectral radius {:.6}", report.gamma_spectral_radius);
    println!(
        "information repaired {}  covariance repaired {}",
        report.information_repaired, report.covariance_repaired
    );
    if let Some((m, l)) = report.sketch {
        println!("sketch m = {m}, L = {l}");
    }
    if let Some(dir) = out_dir(c)? {
        write_report(&dir.join("inference.json"), &InferenceSummary::new(&report))?;
        std::fs::write(dir.join("coefficients.csv"), report.to_csv())?;
    }
    Ok(0)
}

fn cmd_montecarlo(
    c: &Common,
    rc: &RunConfig,
    seed: Option<u64>,
    preset: Option<String>,
    reps: Option<usize>,
    methods: Option<Vec<Method>>,
    inference: bool,
) -> Result<u8> {
    let s = &rc.montecarlo;
    let gen = rc.gen_config(preset.as_deref())?;
    let methods = methods.or_else(|| s.methods.clone()).unwrap_or_else(|| {
        vec![Method::Vfem, Method::Single, Method::CompleteCase, Method::MeanImpute]
    });
    let mut spec = MonteCarloSpec::new(reps.or(s.replicates).unwrap_or(50), gen, methods);
    spec.seed = seed.unwrap_or(spec.gen.seed);
    spec.fit = rc.fit_config(c.engine.as_deref(), c.transport.as_deref())?;
    if inference || s.inference == Some(true) {
        spec.inference = Some(rc.inference_config(&spec.fit));
    }
    spec.workers = s.workers.unwrap_or(0);
    let summary = monte_carlo(&spec)?;
    print!("{}", summary.to_table());
    if let Some(dir) = out_dir(c)? {
        write_report(&dir.join("montecarlo.json"), &summary)?;
        std::fs::write(dir.join("montecarlo.csv"), summary.to_csv())?;
    }
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchmarkRow {
    n: usize,
    iterations: usize,
    bytes: u64,
    messages: u64,
    bytes_per_iteration: f64,
    seconds_per_iteration: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchmarkReport {
    rows: Vec<BenchmarkRow>,
    /// Least-squares line of bytes per iteration against n.
    slope: f64,
    intercept: f64,
    r2: f64,
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

fn cmd_benchmark(
    c: &Common,
    rc: &RunConfig,
    seed: Option<u64>,
    sizes: Option<Vec<usize>>,
    iterations: Option<usize>,
) -> Result<u8> {
    let sizes = sizes.or_else(|| rc.benchmark.sizes.clone()).unwrap_or_else(|| vec![1_000, 10_000, 100_000]);
    if sizes.len() < 2 {
        return Err(VfemError::InvalidConfig("benchmark needs at least two sizes".into()));
    }
    let iters = iterations.or(rc.benchmark.iterations).unwrap_or(5);
    let mut cfg = fit_config(c, rc, seed)?;
    if cfg.engine != vfem_core::engine::Engine::Federated {
        return Err(VfemError::InvalidConfig("benchmark measures the federated engine".into()));
    }
    cfg.max_iters = iters;
    cfg.tolerance = f64::MIN_POSITIVE;
    cfg.beta_tolerance = 0.0;
    let base = rc.gen_config(None)?;
    let mut rows = Vec::new();
    for &n in &sizes {
        let mut g = base.clone().with_n(n);
        if let Some(s) = seed {
            g.seed = s;
        }
        let data = generate(&g)?.data;
        let start = Instant::now();
        let r = fit(&data, &cfg)?;
        let secs = start.elapsed().as_secs_f64();
        let t = r.traffic.unwrap_or_default();
        rows.push(BenchmarkRow {
            n,
            iterations: r.iterations,
            bytes: t.bytes(),
            messages: t.messages(),
            bytes_per_iteration: t.bytes() as f64 / r.iterations as f64,
            seconds_per_iteration: secs / r.iterations as f64,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.bytes_per_iteration).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    println!("{:>9} {:>6} {:>14} {:>10} {:>16} {:>12}", "n", "iters", "bytes", "messages", "bytes/iter", "s/iter");
    for r in &rows {
        println!(
            "{:>9} {:>6} {:>14} {:>10} {:>16.1} {:>12.5}",
            r.n, r.iterations, r.bytes, r.messages, r.bytes_per_iteration, r.seconds_per_iteration
        );
    }
    println!("bytes/iter ≈ {slope:.3}·n + {intercept:.1}  (R² = {r2:.6})");
    let report = BenchmarkReport { rows, slope, intercept, r2 };
    if let Some(dir) = out_dir(c)? {
        write_report(&dir.join("benchmark.json"), &report)?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r2() {
        let (s, i, r2) = linear_fit(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flags_parse() {
        Cli::try_parse_from(["vfem", "montecarlo", "--reps", "3", "--methods", "vfem,complete-case", "--seed", "4"]).unwrap();
        assert!(Cli::try_parse_from(["vfem", "montecarlo", "--methods", "nope"]).is_err());
    }
}
