use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use c3_core::benchmarks::{bench_projections, cost_to_go, run_closed_loop, ClosedLoopLog};
use c3_core::config::{CompareSection, Experiment, RunConfig, SystemConfig};
use c3_core::Error;
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "c3", version, about = "Consensus complementarity control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, default_value = "c3-out")]
    out: PathBuf,
    /// Worker threads for batches of trials.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop rollout of the plant under the configured inputs.
    Simulate,
    /// Closed-loop C3 runs, one per seed.
    Control {
        /// Number of trials with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        trials: u64,
    },
    /// Projection time and closed-loop cost for each projection method.
    BenchProjections,
    /// Planned, optimal and realized cost-to-go along a closed-loop run.
    CompareMiqp,
}

enum Failure {
    Config(Error),
    Solver(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse(_) | Error::Dimension(_) | Error::InvalidParameter(_) => Failure::Config(e),
            Error::Io(e) => Failure::Io(e.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

fn io<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

struct Loaded {
    config: RunConfig,
    base_dir: PathBuf,
    seed: u64,
}

fn load(cli: &Cli, required: bool) -> Result<Option<Loaded>, Failure> {
    let Some(path) = &cli.config else {
        if required {
            return Err(Failure::Config(Error::Config {
                field: "--config".into(),
                message: "a config file is required".into(),
            }));
        }
        return Ok(None);
    };
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::Config(Error::Config {
            field: "--config".into(),
            message: format!("{}: {e}", path.display()),
        })
    })?;
    let mut config = RunConfig::parse(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let SystemConfig::Lcs(file) = &mut config.system {
        if file.path.is_relative() {
            let joined = base_dir.join(&file.path);
            file.path = joined.canonicalize().unwrap_or(joined);
        }
    }
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    config.seed = Some(seed);
    Ok(Some(Loaded { config, base_dir, seed }))
}

fn write(out: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    let path = out.join(name);
    fs::write(&path, bytes).map_err(io(&path))
}

fn sidecar(out: &Path, name: &str, loaded: Option<&Loaded>, extra: Value) -> Result<(), Failure> {
    let config = match loaded {
        Some(l) => Value::String(l.config.to_toml()?),
        None => Value::Null,
    };
    let mut meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "git_hash": option_env!("C3_GIT_HASH").unwrap_or("unknown"),
        "seed": loaded.map(|l| l.seed),
        "config": config,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Failure::Io(e.to_string()))?;
    write(out, name, text.as_bytes())
}

fn simulate(cli: &Cli) -> Result<(), Failure> {
    let loaded = load(cli, true)?.expect("required");
    let exp = loaded.config.build(&loaded.base_dir, loaded.seed)?;
    let dims = exp.system.lcs_dims();
    let run = &loaded.config.run;
    let steps = run
        .steps
        .unwrap_or_else(|| (run.duration / exp.system.dt()).round() as usize);
    let rows = run.inputs.clone().unwrap_or_default();
    if rows.len() > steps {
        return Err(Failure::Config(Error::Config {
            field: "run.inputs".into(),
            message: format!("{} rows for {steps} steps", rows.len()),
        }));
    }
    let mut inputs = Vec::with_capacity(steps);
    for (k, row) in rows.iter().enumerate() {
        if row.len() != dims.n_u {
            return Err(Failure::Config(Error::Config {
                field: format!("run.inputs[{k}]"),
                message: format!("has {} entries, expected {}", row.len(), dims.n_u),
            }));
        }
        inputs.push(DVector::from_column_slice(row));
    }
    inputs.resize(steps, DVector::zeros(dims.n_u));

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((0..dims.n_x).map(|i| format!("x{i}")));
    header.extend((0..dims.n_u).map(|i| format!("u{i}")));
    header.extend((0..dims.n_lambda).map(|i| format!("lambda{i}")));
    w.write_record(&header).map_err(|e| Failure::Io(e.to_string()))?;
    let dt = exp.system.dt();
    let mut x = exp.x0.clone();
    for (k, u) in inputs.iter().enumerate() {
        let (next, lambda) = exp.system.plant_step(&x, u)?;
        let mut rec = vec![k.to_string(), format!("{:e}", k as f64 * dt)];
        rec.extend(x.iter().chain(u.iter()).chain(lambda.iter()).map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(|e| Failure::Io(e.to_string()))?;
        x = next;
    }
    let mut rec = vec![steps.to_string(), format!("{:e}", steps as f64 * dt)];
    rec.extend(x.iter().map(|v| format!("{v:e}")));
    rec.extend(std::iter::repeat(String::new()).take(dims.n_u + dims.n_lambda));
    w.write_record(&rec).map_err(|e| Failure::Io(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
    write(&cli.out, "trajectory.csv", &bytes)?;
    sidecar(&cli.out, "trajectory.json", Some(&loaded), json!({ "steps": steps }))
}

/// Task-level outcome of a closed-loop run.
fn metrics(config: &RunConfig, exp: &Experiment, log: &ClosedLoopLog) -> Value {
    let last = &log.final_state;
    match &config.system {
        SystemConfig::Pivoting(pb) => {
            let target = pb.target_state();
            json!({ "final_alpha": last[2], "alpha_error": (last[2] - target[2]).abs() })
        }
        SystemConfig::FingerGaiting(fg) => {
            let states = log.states();
            let raised = states.iter().map(|x| x[0]).fold(f64::NEG_INFINITY, f64::max) - exp.x0[0];
            let within = states.iter().all(|x| fg.within_limits(x, 1e-6));
            json!({ "raised": raised, "within_limits": within })
        }
        _ => json!({
            "final_inf_norm": last.amax(),
            "settling_time_0.05": log.settling_time(0.05),
        }),
    }
}

fn control(cli: &Cli, trials: u64) -> Result<(), Failure> {
    let loaded = load(cli, true)?.expect("required");
    if trials == 0 {
        return Err(Failure::Config(Error::Config {
            field: "--trials".into(),
            message: "need at least one trial".into(),
        }));
    }
    let seeds: Vec<u64> = (0..trials).map(|t| loaded.seed + t).collect();
    let run = |seed: u64| -> Result<(ClosedLoopLog, Value, f64), Error> {
        let exp = loaded.config.build(&loaded.base_dir, seed)?;
        let started = Instant::now();
        let log = run_closed_loop(exp.system.as_ref(), &exp.params, &exp.x0, &exp.settings, seed)?;
        let wall = started.elapsed().as_secs_f64();
        let m = metrics(&loaded.config, &exp, &log);
        Ok((log, m, wall))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.parallel.max(1))
        .build()
        .map_err(|e| Failure::Io(e.to_string()))?;
    let results: Vec<Result<(ClosedLoopLog, Value, f64), Error>> = pool.install(|| seeds.par_iter().map(|&s| run(s)).collect());

    let mut summaries = Vec::new();
    let mut failed = None;
    for (seed, res) in seeds.iter().zip(results) {
        let (log, m, wall) = res?;
        let name = if trials == 1 { "control.csv".to_string() } else { format!("control_seed{seed}.csv") };
        let mut bytes = Vec::new();
        log.write_csv(&mut bytes)?;
        write(&cli.out, &name, &bytes)?;
        if let Some(f) = &log.failure {
            failed.get_or_insert_with(|| format!("seed {seed}: step {} (t = {:.3} s): {}", f.step, f.time, f.message));
        }
        summaries.push(json!({
            "seed": seed,
            "csv": name,
            "steps": log.rows.len(),
            "final_state": log.final_state.as_slice(),
            "disturbance_magnitude": log.disturbance_magnitude,
            "contact_events": log.contact_events(),
            "failure": log.failure,
            "timing": log.timing(),
            "wall_s": wall,
            "metrics": m,
        }));
    }
    sidecar(&cli.out, "control.json", Some(&loaded), json!({ "trials": summaries }))?;
    match failed {
        Some(msg) => Err(Failure::Solver(msg)),
        None => Ok(()),
    }
}

fn bench(cli: &Cli) -> Result<(), Failure> {
    let loaded = load(cli, false)?;
    let mut suite = loaded
        .as_ref()
        .and_then(|l| l.config.bench.clone())
        .unwrap_or_default();
    if let Some(seed) = cli.seed.or(loaded.as_ref().map(|l| l.seed)) {
        suite.first_seed = seed;
    }
    let started = Instant::now();
    let rows = bench_projections(&suite)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "mean_s", "std_s", "cost"]).map_err(|e| Failure::Io(e.to_string()))?;
    for r in &rows {
        let method = serde_json::to_value(r.method).map_err(|e| Failure::Io(e.to_string()))?;
        w.write_record([
            method.as_str().unwrap_or_default().to_string(),
            format!("{:e}", r.mean_s),
            format!("{:e}", r.std_s),
            format!("{:e}", r.cost),
        ])
        .map_err(|e| Failure::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
    write(&cli.out, "projections.csv", &bytes)?;
    sidecar(
        &cli.out,
        "projections.json",
        loaded.as_ref(),
        json!({ "suite": suite, "rows": rows, "wall_s": started.elapsed().as_secs_f64() }),
    )
}

fn compare(cli: &Cli) -> Result<(), Failure> {
    let loaded = load(cli, true)?.expect("required");
    let exp = loaded.config.build(&loaded.base_dir, loaded.seed)?;
    let Some(lcs) = &exp.lcs else {
        return Err(Failure::Config(Error::Config {
            field: "system.kind".into(),
            message: "compare-miqp needs a system with a fixed LCS (cartpole or lcs)".into(),
        }));
    };
    let cmp: CompareSection = loaded.config.compare.clone().unwrap_or_default();
    let mut settings = exp.settings.clone();
    settings.record_plans = true;
    let log = run_closed_loop(exp.system.as_ref(), &exp.params, &exp.x0, &settings, loaded.seed)?;
    if let Some(f) = &log.failure {
        return Err(Failure::Solver(format!("closed loop failed at step {}: {}", f.step, f.message)));
    }
    let mut bnb = exp.params.bnb;
    bnb.node_limit = cmp.node_limit;
    let series = cost_to_go(&log, lcs, &exp.params.cost, exp.params.constraints.as_ref(), cmp.big_m, &bnb)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "c3", "miqp", "realized", "miqp_gap"]).map_err(|e| Failure::Io(e.to_string()))?;
    for s in &series {
        w.write_record([
            s.step.to_string(),
            format!("{:e}", s.c3),
            format!("{:e}", s.miqp),
            format!("{:e}", s.realized),
            s.miqp_gap.map(|g| format!("{g:e}")).unwrap_or_default(),
        ])
        .map_err(|e| Failure::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
    write(&cli.out, "cost_to_go.csv", &bytes)?;
    let above = series.iter().filter(|s| s.miqp > s.c3 + 1e-6).count();
    sidecar(
        &cli.out,
        "cost_to_go.json",
        Some(&loaded),
        json!({ "steps": series.len(), "miqp_above_c3": above, "timing": log.timing() }),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Simulate => simulate(&cli),
        Command::Control { trials } => control(&cli, *trials),
        Command::BenchProjections => bench(&cli),
        Command::CompareMiqp => compare(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
