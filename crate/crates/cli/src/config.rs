use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use hmpc::models::{Benchmark, DoubleIntegratorSpec, LaneChangeSpec, OcpOptions};
use hmpc::dynamics::ContinuousModel;
use hmpc::ocp::StageCost;
use hmpc::qp::QpSettings;
use hmpc::sets::Polyhedron;
use hmpc::simulator::{DisturbanceSignal, Scheme, SimConfig, WarmStartPolicy};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

/// An LTI model given inline or loaded from `model_path`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiModelSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub x_set: Polyhedron,
    pub u_set: Polyhedron,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub horizon: f64,
    pub x0: Vec<f64>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(ConfigError::Invalid(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl LtiModelSpec {
    pub fn benchmark(&self) -> Result<Benchmark, ConfigError> {
        let a = matrix(&self.a, "A")?;
        let b = matrix(&self.b, "B")?;
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(ConfigError::Invalid("A must be square with as many rows as B".into()));
        }
        let (n, m) = (a.nrows(), b.ncols());
        if self.x_set.dim() != n || self.u_set.dim() != m || self.x0.len() != n {
            return Err(ConfigError::Invalid("set or initial-state dimension does not match the model".into()));
        }
        let cost = StageCost::new(matrix(&self.q, "Q")?, matrix(&self.r, "R")?)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Benchmark {
            model: ContinuousModel::lti("custom-lti", a, b),
            x_set: self.x_set.clone(),
            u_set: self.u_set.clone(),
            cost,
            horizon: self.horizon,
            x0: DVector::from_vec(self.x0.clone()),
            linear: true,
            max_substep: f64::INFINITY,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DoubleIntegrator,
    LaneChange,
    /// LTI model given inline under `model` or read from `model_path`
    /// (relative to the config file).
    CustomLti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub name: String,
    pub t_s: f64,
    pub t_d: f64,
}

impl SchemeSpec {
    /// `MPC1`, `HMPC` and `MPC2` carry their labels' timing rules; any
    /// other name is unconstrained.
    pub fn label(&self) -> Scheme {
        match self.name.as_str() {
            "MPC1" => Scheme::Mpc1,
            "HMPC" => Scheme::Hmpc,
            "MPC2" => Scheme::Mpc2,
            _ => Scheme::Custom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssSpec {
    pub bounds: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn default_t_sim() -> f64 {
    20.0
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_converge_tol() -> f64 {
    1e-2
}

fn default_output() -> String {
    "out".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Model parameters; omitted fields take the model's defaults. Loading
    /// replaces this with the fully resolved parameter set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
    pub schemes: Vec<SchemeSpec>,
    /// Overrides the model's prediction horizon `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "default_t_sim")]
    pub t_sim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_p: Option<f64>,
    #[serde(default)]
    pub disturbance: DisturbanceSignal,
    /// Seeds substituted into a piecewise-random disturbance, one run each.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: String,
    #[serde(default)]
    pub solver: QpSettings,
    #[serde(default)]
    pub ocp: OcpOptions,
    #[serde(default)]
    pub warm_start: WarmStartPolicy,
    #[serde(default)]
    pub inject_delay: bool,
    /// Final-state norm below which a completed run counts as converged.
    #[serde(default = "default_converge_tol")]
    pub converge_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iss: Option<IssSpec>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: p.clone(), source })?;
        // A comparison report embeds its resolved config under `config`.
        if value.get("experiment").is_none() {
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|source| ConfigError::Parse { path: p, source })?;
        if let Some(rel) = cfg.model_path.take() {
            if cfg.model.is_some() {
                return Err(ConfigError::Invalid("give either model or model_path, not both".into()));
            }
            let full = path.parent().unwrap_or(std::path::Path::new(".")).join(&rel);
            let fp = full.display().to_string();
            let text = std::fs::read_to_string(&full).map_err(|source| ConfigError::Io { path: fp.clone(), source })?;
            cfg.model = Some(serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: fp, source })?);
        }
        cfg.resolve_model()?;
        Ok(cfg)
    }

    /// Replaces `model` with the complete parameter set it denotes.
    pub fn resolve_model(&mut self) -> Result<(), ConfigError> {
        let raw = self.model.clone().unwrap_or_else(|| serde_json::json!({}));
        let invalid = |e: serde_json::Error| ConfigError::Invalid(format!("model parameters: {e}"));
        let resolved = match self.experiment {
            Experiment::DoubleIntegrator => {
                serde_json::to_value(serde_json::from_value::<DoubleIntegratorSpec>(raw).map_err(invalid)?)
            }
            Experiment::LaneChange => serde_json::to_value(serde_json::from_value::<LaneChangeSpec>(raw).map_err(invalid)?),
            Experiment::CustomLti => {
                if self.model.is_none() {
                    return Err(ConfigError::Invalid("custom-lti needs model or model_path".into()));
                }
                serde_json::to_value(serde_json::from_value::<LtiModelSpec>(raw).map_err(invalid)?)
            }
        };
        self.model = Some(resolved.map_err(invalid)?);
        Ok(())
    }

    pub fn benchmark(&self) -> Result<Benchmark, ConfigError> {
        let raw = self.model.clone().unwrap_or_else(|| serde_json::json!({}));
        let invalid = |e: String| ConfigError::Invalid(e);
        let mut b = match self.experiment {
            Experiment::DoubleIntegrator => serde_json::from_value::<DoubleIntegratorSpec>(raw)
                .map_err(|e| invalid(e.to_string()))?
                .benchmark()
                .map_err(|e| invalid(e.to_string()))?,
            Experiment::LaneChange => serde_json::from_value::<LaneChangeSpec>(raw)
                .map_err(|e| invalid(e.to_string()))?
                .benchmark()
                .map_err(|e| invalid(e.to_string()))?,
            Experiment::CustomLti => serde_json::from_value::<LtiModelSpec>(raw)
                .map_err(|e| invalid(e.to_string()))?
                .benchmark()?,
        };
        if let Some(h) = self.horizon {
            b.horizon = h;
        }
        Ok(b)
    }

    /// Disturbance for one run: a piecewise-random signal takes `seed`.
    pub fn disturbance_for(&self, seed: u64) -> DisturbanceSignal {
        match &self.disturbance {
            DisturbanceSignal::PiecewiseConstantRandom { hold, amplitude, .. } => DisturbanceSignal::PiecewiseConstantRandom {
                seed,
                hold: *hold,
                amplitude: *amplitude,
            },
            d => d.clone(),
        }
    }

    pub fn sim_config(&self, scheme: &SchemeSpec, seed: u64) -> SimConfig {
        SimConfig {
            t_s: scheme.t_s,
            t_d: scheme.t_d,
            t_sim: self.t_sim,
            t_p: self.t_p,
            disturbance: self.disturbance_for(seed),
            scheme: scheme.label(),
            inject_delay: self.inject_delay,
            warm_start: self.warm_start,
        }
    }

    pub fn validate(&self) -> Result<Benchmark, ConfigError> {
        let bench = self.benchmark()?;
        if self.schemes.is_empty() {
            return Err(ConfigError::Invalid("no schemes given".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("no seeds given".into()));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 || !(self.solver.sigma > 0.0) {
            return Err(ConfigError::Invalid("solver tol, sigma and max_iter must be positive".into()));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.schemes {
            if !names.insert(s.name.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate scheme name {}", s.name)));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(ConfigError::Invalid(format!("scheme name {:?} is not a valid file stem", s.name)));
            }
            let sim = self.sim_config(s, self.seeds[0]);
            sim.validate(bench.horizon)
                .map_err(|e| ConfigError::Invalid(format!("scheme {}: {e}", s.name)))?;
            sim.disturbance
                .validate(bench.model.m())
                .map_err(|e| ConfigError::Invalid(format!("scheme {}: {e}", s.name)))?;
        }
        if let Some(iss) = &self.iss {
            if iss.bounds.iter().any(|b| !(*b >= 0.0 && b.is_finite())) || iss.seeds.is_empty() {
                return Err(ConfigError::Invalid("iss bounds must be non-negative and seeds non-empty".into()));
            }
            for s in &self.schemes {
                if 0.25 * self.t_sim < 10.0 * s.t_d {
                    return Err(ConfigError::Invalid(format!(
                        "scheme {}: ISS tail window {} s is shorter than 10 t_d",
                        s.name,
                        0.25 * self.t_sim
                    )));
                }
            }
        }
        if !(self.converge_tol > 0.0) {
            return Err(ConfigError::Invalid("converge_tol must be positive".into()));
        }
        Ok(bench)
    }
}
