//! Benchmark systems and the closed-loop experiment harness.

pub mod cartpole;
pub mod finger_gaiting;
pub mod pivoting;

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::c3::{c3_solve, C3Params, C3Result, Projection};
use crate::contact::{linearize_stewart_trinkle, stewart_trinkle_step, MultiContactModel};
use crate::error::{Error, Result};
use crate::lcs::{lcs_step, Lcs, LcsDims, Trajectory};
use crate::miqp::{mpc_miqp_full, BnbSettings, BnbStatus};
use crate::mpc::{rollout_cost, CostSpec, StageConstraints};

/// A plant together with the model the controller plans on.
pub trait ControlSystem: Sync {
    fn lcs_dims(&self) -> LcsDims;
    fn dt(&self) -> f64;
    /// Advances the true plant by one control step.
    fn plant_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)>;
    /// LCS for planning from `x`, given the previously applied input.
    fn controller_lcs(&self, x: &DVector<f64>, u_prev: &DVector<f64>) -> Result<Lcs>;
    /// Position coordinates, which receive the `Δt²`-scaled share of process noise.
    fn n_positions(&self) -> usize;
}

/// The plant is the LCS itself and the controller plans on it unchanged.
#[derive(Debug, Clone)]
pub struct LcsSystem {
    pub lcs: Lcs,
}

impl ControlSystem for LcsSystem {
    fn lcs_dims(&self) -> LcsDims {
        self.lcs.dims()
    }

    fn dt(&self) -> f64 {
        self.lcs.dt
    }

    fn plant_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        lcs_step(&self.lcs, x, u)
    }

    fn controller_lcs(&self, _x: &DVector<f64>, _u_prev: &DVector<f64>) -> Result<Lcs> {
        Ok(self.lcs.clone())
    }

    fn n_positions(&self) -> usize {
        self.lcs.dims().n_x / 2
    }
}

/// Nonlinear time-stepping plant, relinearized about the current state and
/// the last applied input at every control step.
#[derive(Debug, Clone)]
pub struct ContactSystem<M> {
    pub model: M,
    pub dt: f64,
}

impl<M: MultiContactModel> ControlSystem for ContactSystem<M> {
    fn lcs_dims(&self) -> LcsDims {
        let d = self.model.dims();
        let n_lambda = crate::contact::ContactLayout::of(&self.model)
            .map(|l| l.n_lambda())
            .unwrap_or(0);
        LcsDims {
            n_x: 2 * d.n_q,
            n_u: d.n_u,
            n_lambda,
        }
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn plant_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        stewart_trinkle_step(&self.model, x, u, self.dt)
    }

    fn controller_lcs(&self, x: &DVector<f64>, u_prev: &DVector<f64>) -> Result<Lcs> {
        linearize_stewart_trinkle(&self.model, x, u_prev, self.dt)
    }

    fn n_positions(&self) -> usize {
        self.model.dims().n_q
    }
}

/// Additive input disturbance of magnitude `U[low, high]`, drawn once per run
/// and applied on input `input` from `start` for `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub input: usize,
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub start: f64,
    pub duration: f64,
}

impl DisturbanceSpec {
    pub fn validate(&self, n_u: usize) -> Result<()> {
        if self.input >= n_u {
            return Err(Error::Config {
                field: "disturbance.input".into(),
                message: format!("index {} out of range for {n_u} inputs", self.input),
            });
        }
        if !(self.low <= self.high) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(Error::Config {
                field: "disturbance".into(),
                message: "need finite low <= high".into(),
            });
        }
        if !(self.start >= 0.0) || !(self.duration >= 0.0) {
            return Err(Error::Config {
                field: "disturbance".into(),
                message: "start and duration must be non-negative".into(),
            });
        }
        Ok(())
    }

    fn steps(&self, dt: f64) -> (usize, usize) {
        let first = (self.start / dt).round() as usize;
        let count = (self.duration / dt).round() as usize;
        (first, first + count)
    }
}

/// Zero-mean Gaussian process noise. Each coordinate of the generalized
/// acceleration gets `N(0, σ²)`, which enters positions as `Δt² ξ` and
/// velocities as `Δt ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopSettings {
    pub duration: f64,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    /// Seed each solve with the previous copies and multipliers shifted by
    /// one step.
    #[serde(default)]
    pub warm_start: bool,
    /// Keep every C3 plan in the log.
    #[serde(default)]
    pub record_plans: bool,
}

impl ClosedLoopSettings {
    pub fn new(duration: f64) -> Self {
        Self {
            duration,
            disturbance: None,
            noise: None,
            warm_start: false,
            record_plans: false,
        }
    }

    pub fn validate(&self, dims: LcsDims) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config {
                field: "duration".into(),
                message: format!("must be positive, got {}", self.duration),
            });
        }
        if let Some(d) = &self.disturbance {
            d.validate(dims.n_u)?;
        }
        if let Some(n) = &self.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                return Err(Error::Config {
                    field: "noise.sigma".into(),
                    message: format!("must be non-negative, got {}", n.sigma),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// Plant state at the start of the step.
    pub state: Vec<f64>,
    /// C3 output.
    pub command: Vec<f64>,
    /// Input actually applied, disturbance included.
    pub applied: Vec<f64>,
    /// Contact forces realized by the plant during the step.
    pub lambda: Vec<f64>,
    pub primal_residual: f64,
    pub complementarity: f64,
    pub solve_us: f64,
    /// Mean single-projection wall-time of each C3 iteration.
    pub projection_us: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: usize,
    pub time: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub seed: u64,
    pub dt: f64,
    pub disturbance_magnitude: Option<f64>,
    pub rows: Vec<StepRecord>,
    pub final_state: DVector<f64>,
    /// C3 plans, one per row, when recorded.
    pub plans: Vec<Trajectory>,
    pub failure: Option<RunFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub steps: usize,
    pub mean_solve_us: f64,
    pub max_solve_us: f64,
}

impl ClosedLoopLog {
    /// States `x_0 … x_T` including the final one.
    pub fn states(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.rows.iter().map(|r| DVector::from_vec(r.state.clone())).collect();
        out.push(self.final_state.clone());
        out
    }

    pub fn applied_inputs(&self) -> Vec<DVector<f64>> {
        self.rows.iter().map(|r| DVector::from_vec(r.applied.clone())).collect()
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.failure {
            None => Ok(self),
            Some(f) => Err(Error::ClosedLoop {
                time: f.time,
                source: Box::new(Error::Solver {
                    iteration: 0,
                    step: Some(f.step),
                    source: Box::new(Error::InvalidParameter(f.message.clone())),
                }),
            }),
        }
    }

    /// Any step with a strictly positive contact force.
    pub fn contact_events(&self) -> usize {
        self.rows.iter().filter(|r| r.lambda.iter().any(|&l| l > 0.0)).count()
    }

    pub fn timing(&self) -> TimingSummary {
        let n = self.rows.len();
        let total: f64 = self.rows.iter().map(|r| r.solve_us).sum();
        TimingSummary {
            steps: n,
            mean_solve_us: if n == 0 { 0.0 } else { total / n as f64 },
            max_solve_us: self.rows.iter().map(|r| r.solve_us).fold(0.0, f64::max),
        }
    }

    /// One row per control step. Wall-times are left out so equal runs give
    /// equal files; see [`ClosedLoopLog::timing`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (n_x, n_u, n_l) = match self.rows.first() {
            Some(r) => (r.state.len(), r.command.len(), r.lambda.len()),
            None => (self.final_state.len(), 0, 0),
        };
        let mut header = vec!["step".to_string(), "time".to_string()];
        header.extend((0..n_x).map(|i| format!("x{i}")));
        header.extend((0..n_u).map(|i| format!("u_cmd{i}")));
        header.extend((0..n_u).map(|i| format!("u{i}")));
        header.extend((0..n_l).map(|i| format!("lambda{i}")));
        header.push("primal_residual".into());
        header.push("complementarity".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), fmt(r.time)];
            rec.extend(r.state.iter().map(|v| fmt(*v)));
            rec.extend(r.command.iter().map(|v| fmt(*v)));
            rec.extend(r.applied.iter().map(|v| fmt(*v)));
            rec.extend(r.lambda.iter().map(|v| fmt(*v)));
            rec.push(fmt(r.primal_residual));
            rec.push(fmt(r.complementarity));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn sample_noise(rng: &mut ChaCha8Rng, normal: &Normal<f64>, n_pos: usize, n_x: usize, dt: f64) -> DVector<f64> {
    let mut out = DVector::zeros(n_x);
    for i in 0..n_x - n_pos {
        let xi = normal.sample(rng);
        if i < n_pos {
            out[i] += dt * dt * xi;
        }
        out[n_pos + i] += dt * xi;
    }
    out
}

/// Receding-horizon loop: plan with C3 from the current state, apply the
/// first input to the plant, repeat for `settings.duration` seconds.
///
/// Solver failures stop the run and are recorded in `failure`; the rows up
/// to that point are kept.
pub fn run_closed_loop<S: ControlSystem + ?Sized>(
    system: &S,
    params: &C3Params,
    x0: &DVector<f64>,
    settings: &ClosedLoopSettings,
    seed: u64,
) -> Result<ClosedLoopLog> {
    let dims = system.lcs_dims();
    settings.validate(dims)?;
    params.validate(dims)?;
    if x0.len() != dims.n_x {
        return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), dims.n_x)));
    }
    let dt = system.dt();
    let steps = (settings.duration / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disturbance = settings.disturbance.map(|d| {
        let mag = if d.high > d.low { rng.gen_range(d.low..=d.high) } else { d.low };
        (d, mag)
    });
    let normal = match settings.noise {
        Some(n) if n.sigma > 0.0 => Some(Normal::new(0.0, n.sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?),
        _ => None,
    };

    let mut log = ClosedLoopLog {
        seed,
        dt,
        disturbance_magnitude: disturbance.map(|(_, m)| m),
        rows: Vec::with_capacity(steps),
        final_state: x0.clone(),
        plans: Vec::new(),
        failure: None,
    };
    let mut x = x0.clone();
    let mut u_prev = DVector::zeros(dims.n_u);
    let mut params = params.clone();
    let mut previous: Option<C3Result> = None;

    for k in 0..steps {
        let time = k as f64 * dt;
        let fail = |log: &mut ClosedLoopLog, x: &DVector<f64>, e: Error| {
            log.failure = Some(RunFailure {
                step: k,
                time,
                message: e.to_string(),
            });
            log.final_state = x.clone();
        };
        let started = Instant::now();
        let lcs = match system.controller_lcs(&x, &u_prev) {
            Ok(l) => l,
            Err(e) => {
                fail(&mut log, &x, e);
                return Ok(log);
            }
        };
        if settings.warm_start {
            if let Some(prev) = &previous {
                let (delta, w) = prev.shifted_warm_start(params.rho);
                params.delta0 = Some(delta);
                params.w0 = Some(w);
            }
        }
        let result = match c3_solve(&lcs, &params, &x) {
            Ok(r) => r,
            Err(e) => {
                fail(&mut log, &x, e);
                return Ok(log);
            }
        };
        let solve_us = started.elapsed().as_secs_f64() * 1e6;

        let mut applied = result.u0.clone();
        if let Some((d, mag)) = &disturbance {
            let (first, last) = d.steps(dt);
            if k >= first && k < last {
                applied[d.input] += mag;
            }
        }
        let (mut next, lambda) = match system.plant_step(&x, &applied) {
            Ok(v) => v,
            Err(e) => {
                fail(&mut log, &x, e);
                return Ok(log);
            }
        };
        if let Some(normal) = &normal {
            next += sample_noise(&mut rng, normal, system.n_positions(), dims.n_x, dt);
        }
        if !next.iter().all(|v| v.is_finite()) {
            fail(&mut log, &x, Error::NonFinite("plant state".into()));
            return Ok(log);
        }
        let last = result.diagnostics.last();
        log.rows.push(StepRecord {
            step: k,
            time,
            state: x.iter().copied().collect(),
            command: result.u0.iter().copied().collect(),
            applied: applied.iter().copied().collect(),
            lambda: lambda.iter().copied().collect(),
            primal_residual: last.map_or(0.0, |d| d.primal_residual),
            complementarity: last.map_or(0.0, |d| d.complementarity),
            solve_us,
            projection_us: result
                .diagnostics
                .iter()
                .map(|d| d.projection_us / params.horizon() as f64)
                .collect(),
        });
        if settings.record_plans {
            log.plans.push(result.plan.clone());
        }
        u_prev = result.u0.clone();
        previous = Some(result);
        x = next;
    }
    log.final_state = x;
    Ok(log)
}

impl ClosedLoopLog {
    /// First time after which every logged state stays inside the
    /// `‖x‖∞ < tol` box.
    pub fn settling_time(&self, tol: f64) -> Option<f64> {
        let states = self.states();
        let outside = states.iter().rposition(|x| x.amax() >= tol);
        let k = outside.map_or(0, |k| k + 1);
        (k < states.len()).then(|| k as f64 * self.dt)
    }
}

/// Disturbed cart-pole runs used to compare projection methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSuite {
    pub cartpole: cartpole::CartpoleParams,
    pub trials: usize,
    pub first_seed: u64,
    pub duration: f64,
    pub methods: Vec<Projection>,
}

impl Default for ProjectionSuite {
    fn default() -> Self {
        Self {
            cartpole: cartpole::CartpoleParams::default(),
            trials: 10,
            first_seed: 0,
            duration: 5.0,
            methods: vec![Projection::Lcp, Projection::Miqp, Projection::Admm],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBenchRow {
    pub method: Projection,
    /// Mean and standard deviation of single-projection wall-time, seconds.
    pub mean_s: f64,
    pub std_s: f64,
    /// Realized `N`-step cost-to-go averaged over steps and trials.
    pub cost: f64,
    pub projections: usize,
    /// Trials that settle inside `‖x‖∞ < 0.05`.
    pub stabilized: usize,
    pub failures: usize,
}

/// Runs the disturbance suite once per projection method with warm-started
/// C3 and tabulates projection time and closed-loop cost.
pub fn bench_projections(suite: &ProjectionSuite) -> Result<Vec<ProjectionBenchRow>> {
    if suite.trials == 0 {
        return Err(Error::Config {
            field: "trials".into(),
            message: "need at least one trial".into(),
        });
    }
    let lcs = cartpole::build_cartpole_lcs(&suite.cartpole)?;
    let system = LcsSystem { lcs: lcs.clone() };
    let mut settings = ClosedLoopSettings::new(suite.duration);
    settings.disturbance = Some(cartpole::cartpole_disturbance());
    settings.warm_start = true;
    let x0 = DVector::zeros(lcs.dims().n_x);
    let mut rows = Vec::new();
    for &method in &suite.methods {
        let params = cartpole::cartpole_controller_params(&lcs, method)?;
        let n = params.horizon();
        let mut samples = Vec::new();
        let mut costs = Vec::new();
        let (mut stabilized, mut failures) = (0, 0);
        for t in 0..suite.trials {
            let log = run_closed_loop(&system, &params, &x0, &settings, suite.first_seed + t as u64)?;
            samples.extend(log.rows.iter().flat_map(|r| r.projection_us.iter().map(|us| us * 1e-6)));
            let realized = realized_costs(&log, &params.cost);
            if !realized.is_empty() {
                costs.push(realized.iter().sum::<f64>() / realized.len() as f64);
            }
            stabilized += log.settling_time(0.05).is_some() as usize;
            failures += log.failure.is_some() as usize;
        }
        let (mean_s, std_s) = mean_std(&samples);
        rows.push(ProjectionBenchRow {
            method,
            mean_s,
            std_s,
            cost: mean_std(&costs).0,
            projections: samples.len() * n,
            stabilized,
            failures,
        });
    }
    Ok(rows)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-step cost-to-go estimates along a logged run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostToGo {
    pub step: usize,
    /// C3 plan inputs rolled out through the LCS from the logged state.
    pub c3: f64,
    /// Optimal hybrid MPC cost from the logged state.
    pub miqp: f64,
    /// Cost of the next `N` logged states and inputs.
    pub realized: f64,
    /// Relative gap when the branch-and-bound node limit was hit.
    pub miqp_gap: Option<f64>,
}

/// Cost of the `N` logged steps following each step that has `N` steps
/// after it.
pub fn realized_costs(log: &ClosedLoopLog, cost: &CostSpec) -> Vec<f64> {
    let n = cost.horizon();
    if log.rows.len() < n {
        return Vec::new();
    }
    let states = log.states();
    let inputs = log.applied_inputs();
    (0..=log.rows.len() - n)
        .map(|k| {
            cost.evaluate(&Trajectory {
                states: states[k..=k + n].to_vec(),
                inputs: inputs[k..k + n].to_vec(),
                forces: Vec::new(),
            })
        })
        .collect()
}

/// Compares the planned, optimal and realized costs at every step that has
/// `N` logged steps after it. Needs a log recorded with plans.
pub fn cost_to_go(
    log: &ClosedLoopLog,
    lcs: &Lcs,
    cost: &CostSpec,
    constraints: Option<&StageConstraints>,
    big_m: f64,
    bnb: &BnbSettings,
) -> Result<Vec<CostToGo>> {
    let n = cost.horizon();
    if log.rows.len() < n {
        return Err(Error::InvalidParameter(format!(
            "log has {} steps, horizon is {n}",
            log.rows.len()
        )));
    }
    if log.plans.len() != log.rows.len() {
        return Err(Error::InvalidParameter("log was recorded without plans".into()));
    }
    let states = log.states();
    let realized = realized_costs(log, cost);
    let mut out = Vec::new();
    for (k, realized) in realized.into_iter().enumerate() {
        let x = &states[k];
        let (c3, _) = rollout_cost(lcs, cost, x, &log.plans[k].inputs)?;
        let miqp = mpc_miqp_full(lcs, cost, x, constraints, big_m, bnb)?;
        out.push(CostToGo {
            step: k,
            c3,
            miqp: miqp.objective,
            realized,
            miqp_gap: (miqp.status == BnbStatus::NodeLimit).then_some(miqp.gap),
        });
    }
    Ok(out)
}
