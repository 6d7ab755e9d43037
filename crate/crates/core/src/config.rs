//! Experiment configuration documents.
//!
//! A run config is TOML with a `[system]` table selecting a built-in benchmark
//! or an LCS document, an optional `[controller]` table overriding the
//! system's default C3 settings, and a `[run]` table for the closed loop.
//! Unknown keys are rejected everywhere.
//!
//! ```toml
//! seed = 3
//!
//! [system]
//! kind = "cartpole"
//! k_left = 100.0
//!
//! [controller]
//! projection = "miqp"
//! rho = 0.2
//!
//! [run]
//! duration = 2.0
//! disturbance = { input = 0, low = 10.0, high = 15.0, duration = 0.25 }
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::cartpole::{build_cartpole_lcs, cartpole_controller_params, CartpoleParams};
use crate::benchmarks::finger_gaiting::FingerGaiting;
use crate::benchmarks::pivoting::PivotingBox;
use crate::benchmarks::{ClosedLoopSettings, ContactSystem, ControlSystem, DisturbanceSpec, LcsSystem, NoiseSpec, ProjectionSuite};
use crate::c3::{AdmmProjectionSettings, C3Params, Projection};
use crate::document::parse_lcs_document;
use crate::error::{Error, Result};
use crate::lcs::{Lcs, LcsDims};
use crate::mpc::{CostSpec, StageConstraints};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub system: SystemConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<ProjectionSuite>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    Cartpole(CartpoleParams),
    FingerGaiting(FingerGaiting),
    Pivoting(PivotingBox),
    /// An LCS document; a relative path is taken from the config's directory.
    Lcs(LcsFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcsFile {
    pub path: PathBuf,
}

/// A flat list is a diagonal, a list of rows a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, field: &str, n: usize) -> Result<DMatrix<f64>> {
        let bad = |message: String| Error::Config {
            field: field.into(),
            message,
        };
        let m = match self {
            MatrixSpec::Diagonal(d) => {
                if d.len() != n {
                    return Err(bad(format!("diagonal has {} entries, expected {n}", d.len())));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(d))
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(bad(format!("expected a {n}x{n} matrix")));
                }
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
        };
        if !m.iter().all(|v| v.is_finite()) {
            return Err(bad("entries must be finite".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    /// Index into `z_k = (x_k, λ_k, u_k)`.
    pub index: usize,
    #[serde(default = "neg_inf")]
    pub lo: f64,
    #[serde(default = "pos_inf")]
    pub hi: f64,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

/// Overrides on top of the system's default controller. Every field is
/// optional for the built-in systems; an LCS system needs `q` and `r`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Projection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// ADMM iterations `s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admm_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_terminal: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ref: Option<Vec<f64>>,
    /// `G_k`, shared by every step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_weight: Option<MatrixSpec>,
    /// `U`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_metric: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admm: Option<AdmmProjectionSettings>,
    /// Replaces the system's default bounds when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<BoundSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub duration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub warm_start: bool,
    /// Open-loop inputs for `simulate`, one row per step; missing rows are zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<Vec<f64>>>,
    /// Step count for `simulate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            duration: 5.0,
            initial_state: None,
            disturbance: None,
            noise: None,
            warm_start: false,
            inputs: None,
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub big_m: f64,
    pub node_limit: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            big_m: 1000.0,
            node_limit: 200_000,
        }
    }
}

/// A config resolved into runnable pieces.
pub struct Experiment {
    pub system: Box<dyn ControlSystem>,
    /// The fixed LCS for systems that plan on one.
    pub lcs: Option<Lcs>,
    pub params: C3Params,
    pub settings: ClosedLoopSettings,
    pub x0: DVector<f64>,
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "document".into(),
            message: e.to_string(),
        })?;
        cfg.check_scalars()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Checks that do not need the system model.
    fn check_scalars(&self) -> Result<()> {
        let c = &self.controller;
        if let Some(rho) = c.rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(config_err("controller.rho", format!("must be positive, got {rho}")));
            }
        }
        if let Some(rs) = c.rho_s {
            if !(rs >= 1.0 && rs.is_finite()) {
                return Err(config_err("controller.rho_s", format!("must be at least 1, got {rs}")));
            }
        }
        if c.horizon == Some(0) {
            return Err(config_err("controller.horizon", "must be positive"));
        }
        if c.admm_steps == Some(0) {
            return Err(config_err("controller.admm_steps", "must be positive"));
        }
        if let Some(m) = c.big_m {
            if !(m > 0.0 && m.is_finite()) {
                return Err(config_err("controller.big_m", format!("must be positive, got {m}")));
            }
        }
        let r = &self.run;
        if !(r.duration > 0.0 && r.duration.is_finite()) {
            return Err(config_err("run.duration", format!("must be positive, got {}", r.duration)));
        }
        if let Some(n) = &r.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                return Err(config_err("run.noise.sigma", format!("must be non-negative, got {}", n.sigma)));
            }
        }
        Ok(())
    }

    /// Loads the LCS document of an `lcs` system, resolving the path against
    /// `base_dir`.
    pub fn load_lcs(&self, base_dir: &Path) -> Result<Option<Lcs>> {
        match &self.system {
            SystemConfig::Cartpole(p) => build_cartpole_lcs(p).map(Some),
            SystemConfig::Lcs(file) => {
                let path = if file.path.is_absolute() {
                    file.path.clone()
                } else {
                    base_dir.join(&file.path)
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| config_err("system.path", format!("{}: {e}", path.display())))?;
                parse_lcs_document(&text).map(Some)
            }
            _ => Ok(None),
        }
    }

    pub fn build(&self, base_dir: &Path, seed: u64) -> Result<Experiment> {
        let lcs = self.load_lcs(base_dir)?;
        let (system, base, default_x0): (Box<dyn ControlSystem>, Option<C3Params>, DVector<f64>) =
            match &self.system {
                SystemConfig::Cartpole(_) => {
                    let lcs = lcs.clone().expect("cart-pole builds an LCS");
                    let projection = self.controller.projection.unwrap_or(Projection::Lcp);
                    let params = cartpole_controller_params(&lcs, projection)?;
                    let n_x = lcs.dims().n_x;
                    (Box::new(LcsSystem { lcs }), Some(params), DVector::zeros(n_x))
                }
                SystemConfig::FingerGaiting(fg) => {
                    fg.validate()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(1);
                    let x0 = fg.sample_initial_state(&mut rng);
                    (
                        Box::new(ContactSystem { model: *fg, dt: fg.dt }),
                        Some(fg.controller_params()),
                        x0,
                    )
                }
                SystemConfig::Pivoting(pb) => {
                    pb.validate()?;
                    (
                        Box::new(ContactSystem { model: *pb, dt: pb.dt }),
                        Some(pb.controller_params()),
                        pb.initial_state(),
                    )
                }
                SystemConfig::Lcs(_) => {
                    let lcs = lcs.clone().expect("LCS system loads an LCS");
                    let n_x = lcs.dims().n_x;
                    (Box::new(LcsSystem { lcs }), None, DVector::zeros(n_x))
                }
            };
        let dims = system.lcs_dims();
        let params = self.controller_params(base, dims)?;

        let x0 = match &self.run.initial_state {
            Some(v) if v.len() != dims.n_x => {
                return Err(config_err("run.initial_state", format!("has {} entries, expected {}", v.len(), dims.n_x)));
            }
            Some(v) => DVector::from_column_slice(v),
            None => default_x0,
        };
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(config_err("run.initial_state", "entries must be finite"));
        }
        let mut settings = ClosedLoopSettings::new(self.run.duration);
        settings.disturbance = self.run.disturbance;
        settings.noise = self.run.noise;
        settings.warm_start = self.run.warm_start;
        settings.validate(dims).map_err(|e| match e {
            Error::Config { field, message } => config_err(&format!("run.{field}"), message),
            other => other,
        })?;
        Ok(Experiment {
            system,
            lcs,
            params,
            settings,
            x0,
        })
    }

    fn controller_params(&self, base: Option<C3Params>, dims: LcsDims) -> Result<C3Params> {
        let c = &self.controller;
        let n_x = dims.n_x;
        let mut params = match base {
            Some(p) => p,
            None => {
                let (Some(q), Some(r)) = (&c.q, &c.r) else {
                    return Err(config_err("controller", "an LCS system needs `q` and `r`"));
                };
                let q = q.to_matrix("controller.q", n_x)?;
                let r = r.to_matrix("controller.r", dims.n_u)?;
                let cost = CostSpec::uniform(q.clone(), r, q, c.horizon.unwrap_or(10));
                C3Params::new(cost, dims, c.projection.unwrap_or(Projection::Miqp))
            }
        };
        if let Some(p) = c.projection {
            params.projection = p;
        }
        let horizon = c.horizon.unwrap_or(params.horizon());
        let q = match &c.q {
            Some(q) => q.to_matrix("controller.q", n_x)?,
            None => params.cost.q[0].clone(),
        };
        let r = match &c.r {
            Some(r) => r.to_matrix("controller.r", dims.n_u)?,
            None => params.cost.r[0].clone(),
        };
        let qn = match &c.q_terminal {
            Some(m) => m.to_matrix("controller.q_terminal", n_x)?,
            None if c.q.is_some() => q.clone(),
            None => params.cost.q_terminal.clone(),
        };
        let x_ref = match &c.x_ref {
            Some(v) if v.len() != n_x => {
                return Err(config_err("controller.x_ref", format!("has {} entries, expected {n_x}", v.len())));
            }
            Some(v) => Some(DVector::from_column_slice(v)),
            None => params.cost.x_ref.as_ref().map(|r| r[0].clone()),
        };
        let mut cost = CostSpec::uniform(q, r, qn, horizon);
        if let Some(x_ref) = x_ref {
            cost = cost.with_reference(x_ref);
        }
        params.cost = cost;
        let nz = dims.n_z();
        params.g = match &c.consensus_weight {
            Some(g) => vec![g.to_matrix("controller.consensus_weight", nz)?; horizon],
            None => vec![params.g[0].clone(); horizon],
        };
        if let Some(u) = &c.projection_metric {
            params.u = u.to_matrix("controller.projection_metric", nz)?;
        }
        if let Some(s) = c.admm_steps {
            params.s = s;
        }
        if let Some(rho) = c.rho {
            params.rho = rho;
        }
        if let Some(rs) = c.rho_s {
            params.rho_s = rs;
        }
        if let Some(m) = c.big_m {
            params.big_m = m;
        }
        if let Some(a) = c.admm {
            params.admm = a;
        }
        if let Some(n) = c.node_limit {
            params.bnb.node_limit = n;
        }
        if let Some(p) = c.parallel {
            params.parallel = p;
        }
        if let Some(bounds) = &c.bounds {
            let mut sc = StageConstraints::unbounded(nz);
            for (i, b) in bounds.iter().enumerate() {
                if b.index >= nz {
                    return Err(config_err(&format!("controller.bounds[{i}].index"), format!("{} is out of range for n_z = {nz}", b.index)));
                }
                if !(b.lo <= b.hi) {
                    return Err(config_err(&format!("controller.bounds[{i}]"), "need lo <= hi"));
                }
                sc = sc.bound(b.index, b.lo, b.hi);
            }
            params.constraints = (!bounds.is_empty()).then_some(sc);
        }
        params.validate(dims).map_err(|e| config_err("controller", e.to_string()))?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_cartpole_config_uses_defaults() {
        let cfg = RunConfig::parse("[system]\nkind = \"cartpole\"\n").unwrap();
        let exp = cfg.build(Path::new("."), 0).unwrap();
        assert_eq!(exp.params.projection, Projection::Lcp);
        assert_eq!(exp.params.s, 10);
        assert_eq!(exp.params.rho_s, 2.0);
        assert_eq!(exp.x0.len(), 4);
        assert!(exp.settings.disturbance.is_none());
    }

    #[test]
    fn overrides_apply() {
        let text = r#"
[system]
kind = "cartpole"
k_left = 100.0
[controller]
projection = "miqp"
rho = 0.3
horizon = 5
q = [1.0, 2.0, 3.0, 4.0]
[run]
duration = 1.0
initial_state = [0.1, 0.0, 0.0, 0.0]
disturbance = { input = 0, low = 10.0, high = 15.0, duration = 0.25 }
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let exp = cfg.build(Path::new("."), 0).unwrap();
        assert_eq!(exp.params.projection, Projection::Miqp);
        assert_eq!(exp.params.rho, 0.3);
        assert_eq!(exp.params.horizon(), 5);
        assert_eq!(exp.params.g.len(), 5);
        assert_eq!(exp.params.cost.q[0][(3, 3)], 4.0);
        assert_eq!(exp.lcs.unwrap().f[(1, 1)], 0.01);
        assert_eq!(exp.x0[0], 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[system]\nkind = \"cartpole\"\nstiffness = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("stiffness"), "{err}");
        let err = RunConfig::parse("[system]\nkind = \"cartpole\"\n[controller]\nrhoo = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("rhoo"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::parse("[system]\nkind = \"cartpole\"\n[controller]\nrho = -1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "controller.rho"), "{err}");
        let cfg = RunConfig::parse("[system]\nkind = \"cartpole\"\n[run]\ninitial_state = [1.0]\n").unwrap();
        let err = cfg.build(Path::new("."), 0).err().unwrap();
        assert!(matches!(&err, Error::Config { field, .. } if field == "run.initial_state"), "{err}");
    }

    #[test]
    fn lcs_system_needs_cost() {
        let dir = std::env::temp_dir().join(format!("c3-config-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("sys.toml"),
            "n_x = 1\nn_u = 1\nn_lambda = 1\ndt = 0.1\nA = [[1.0]]\nB = [[0.1]]\nD = [[0.1]]\nE = [[1.0]]\nF = [[1.0]]\n",
        )
        .unwrap();
        let cfg = RunConfig::parse("[system]\nkind = \"lcs\"\npath = \"sys.toml\"\n").unwrap();
        assert!(cfg.build(&dir, 0).is_err());
        let cfg = RunConfig::parse("[system]\nkind = \"lcs\"\npath = \"sys.toml\"\n[controller]\nq = [1.0]\nr = [1.0]\n").unwrap();
        let exp = cfg.build(&dir, 0).unwrap();
        assert_eq!(exp.params.projection, Projection::Miqp);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = "seed = 4\n[system]\nkind = \"pivoting\"\n[controller]\nrho = 2.0\n[run]\nduration = 1.0\nnoise = { sigma = 0.1 }\n";
        let cfg = RunConfig::parse(text).unwrap();
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}
