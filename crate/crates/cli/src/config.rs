//! TOML run configurations and their validation.

use rareopt::model::{ModelFamily, ThetaBox};
use rareopt::optimize::StepRule;
use rareopt::{EstimatorKind, Model, SmoothingPhi, TiltableDistribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Log-domain estimates over a θ grid.
    Estimate,
    /// `θ, W̄(0,0), 2γ` rows over a θ grid.
    DecayTable,
    /// Projected stochastic gradient ascent on `g^n`.
    Ascent,
    /// Deterministic maximization of the limiting objective.
    Limit,
    /// Buffered-probability minimization.
    Buffered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Plain,
    IsX,
    IsU,
}

impl SchemeName {
    pub fn kind(self) -> EstimatorKind {
        match self {
            SchemeName::Plain => EstimatorKind::Plain,
            SchemeName::IsX => EstimatorKind::IsX,
            SchemeName::IsU => EstimatorKind::IsU,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SchemeName::Plain => "plain",
            SchemeName::IsX => "is_x",
            SchemeName::IsU => "is_u",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    HingeComponentwise {
        b: Vec<f64>,
        c: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    HingeAggregate {
        f: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Linear {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Normal { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    StandardNormal { dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiSpec {
    #[serde(default)]
    pub indicator: bool,
    pub lambda: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub scheme: SchemeName,
    pub n: usize,
    pub replications: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepName {
    Diminishing,
    FixedLength,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    pub start: Option<Vec<f64>>,
    pub step: Option<StepName>,
    pub step_size: Option<f64>,
    pub delta: Option<f64>,
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub crn: bool,
    pub rebuild_every: Option<usize>,
    pub random_starts: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferedBlock {
    pub theta_bar0: Vec<f64>,
    pub lambda0: f64,
    pub max_iters: usize,
    pub step_length: Option<f64>,
    pub rebuild_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub kind: RunKind,
    /// Declared wall-time budget; exceeding it logs a warning.
    pub budget_seconds: Option<f64>,
    pub model: ModelSpec,
    pub distribution: DistributionSpec,
    pub phi: PhiSpec,
    pub simulation: Option<SimulationBlock>,
    /// θ grid for `estimate` and `decay_table` runs.
    pub theta: Option<Vec<Vec<f64>>>,
    pub optimizer: Option<OptimizerBlock>,
    pub buffered: Option<BufferedBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

/// A validated configuration with its model, law and smoothing built.
pub struct Prepared {
    pub config: RunConfig,
    pub model: Model,
    pub dist: TiltableDistribution,
    pub phi: SmoothingPhi,
}

impl RunConfig {
    pub fn parse(source: &str) -> Result<Self, CliError> {
        toml::from_str(source).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    /// SHA-256 of the canonical serialization, so formatting and comments do
    /// not change the hash.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn step_rule(&self) -> StepRule {
        let opt = self.optimizer.as_ref();
        let size = opt.and_then(|o| o.step_size).unwrap_or(0.1);
        match opt.and_then(|o| o.step).unwrap_or(StepName::Diminishing) {
            StepName::Diminishing => StepRule::Diminishing { s0: size },
            StepName::FixedLength => StepRule::FixedLength { len: size },
        }
    }

    /// Checks the schema-level constraints and builds the model objects.
    /// `source` is the original text, used for line numbers.
    pub fn prepare(self, source: &str) -> Result<Prepared, CliError> {
        let diag = Diagnostics { source };
        let (family, lower, upper) = match &self.model {
            ModelSpec::HingeComponentwise { b, c, lower, upper } => {
                diag.same_len("model", "c", c.len(), "b", b.len())?;
                (ModelFamily::HingeComponentwise { b: b.clone(), c: c.clone() }, lower, upper)
            }
            ModelSpec::HingeAggregate { f, b, c, lower, upper } => {
                diag.same_len("model", "b", b.len(), "f", f.len())?;
                diag.same_len("model", "c", c.len(), "f", f.len())?;
                (ModelFamily::HingeAggregate { f: f.clone(), b: b.clone(), c: c.clone() }, lower, upper)
            }
            ModelSpec::Linear { lower, upper } => (ModelFamily::Linear { dim: lower.len() }, lower, upper),
        };
        diag.same_len("model", "upper", upper.len(), "lower", lower.len())?;
        let theta_box = ThetaBox::new(lower.clone(), upper.clone()).map_err(|e| diag.field("model", "lower", e))?;
        let model = Model::new(family, theta_box).map_err(|e| diag.field("model", "family", e))?;
        let dims = model.dims();

        let dist = match &self.distribution {
            DistributionSpec::Normal { mean, cov } => {
                diag.same_len("distribution", "mean", mean.len(), "model input", dims.h)?;
                if cov.len() != mean.len() || cov.iter().any(|r| r.len() != mean.len()) {
                    return Err(diag.error("distribution", "cov", format!("must be {0} × {0}", mean.len())));
                }
                TiltableDistribution::mv_normal(mean.clone(), cov.clone())
                    .map_err(|e| diag.field("distribution", "cov", e))?
            }
            DistributionSpec::StandardNormal { dim } => {
                diag.same_len("distribution", "dim", *dim, "model input", dims.h)?;
                TiltableDistribution::standard_normal(*dim)
            }
        };

        let phi = if self.phi.indicator {
            if self.phi.lambda.is_some() {
                return Err(diag.error("phi", "lambda", "not used with indicator = true"));
            }
            SmoothingPhi::indicator()
        } else {
            let lambda = self.phi.lambda.ok_or_else(|| diag.error("phi", "lambda", "required unless indicator = true"))?;
            let eps = self.phi.eps.ok_or_else(|| diag.error("phi", "eps", "required unless indicator = true"))?;
            SmoothingPhi::new(lambda, eps).map_err(|e| diag.field("phi", "lambda", e))?
        };

        if let Some(sim) = &self.simulation {
            diag.positive("simulation", "n", sim.n)?;
            diag.positive("simulation", "replications", sim.replications)?;
            diag.nonempty("simulation", "seeds", sim.seeds.len())?;
        }
        let needs_sim = matches!(self.kind, RunKind::Estimate | RunKind::Ascent | RunKind::Buffered);
        if needs_sim && self.simulation.is_none() {
            return Err(diag.error("simulation", "", format!("required for kind = \"{}\"", self.kind_label())));
        }

        if matches!(self.kind, RunKind::Estimate | RunKind::DecayTable) {
            let grid = self.theta.as_ref().ok_or_else(|| {
                diag.error("", "theta", format!("θ grid required for kind = \"{}\"", self.kind_label()))
            })?;
            diag.nonempty("", "theta", grid.len())?;
            for (i, t) in grid.iter().enumerate() {
                diag.same_len("", &format!("theta[{i}]"), t.len(), "θ", dims.d)?;
                if !model.theta_box().contains(t) {
                    return Err(diag.error("", "theta", format!("entry {i} = {t:?} lies outside the θ box")));
                }
            }
        }

        if let Some(opt) = &self.optimizer {
            if let Some(start) = &opt.start {
                diag.same_len("optimizer", "start", start.len(), "θ", dims.d)?;
                if !model.theta_box().contains(start) {
                    return Err(diag.error("optimizer", "start", "lies outside the θ box"));
                }
            }
            for (key, v) in [("step_size", opt.step_size), ("delta", opt.delta)] {
                if let Some(v) = v {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(diag.error("optimizer", key, "must be positive"));
                    }
                }
            }
            if let Some(m) = opt.max_iters {
                diag.positive("optimizer", "max_iters", m)?;
            }
            if opt.rebuild_every == Some(0) {
                return Err(diag.error("optimizer", "rebuild_every", "must be positive"));
            }
        }
        if self.kind == RunKind::Ascent && self.optimizer.as_ref().and_then(|o| o.start.as_ref()).is_none() {
            return Err(diag.error("optimizer", "start", "required for kind = \"ascent\""));
        }
        if self.kind == RunKind::Ascent && self.phi.indicator {
            return Err(diag.error("phi", "indicator", "gradient ascent needs the smooth target"));
        }

        if self.kind == RunKind::Buffered {
            let b = self.buffered.as_ref().ok_or_else(|| diag.error("buffered", "", "required for kind = \"buffered\""))?;
            if !matches!(self.model, ModelSpec::HingeAggregate { .. }) {
                return Err(diag.error("model", "family", "buffered runs need family = \"hinge_aggregate\""));
            }
            diag.same_len("buffered", "theta_bar0", b.theta_bar0.len(), "θ", dims.d)?;
            if !(b.lambda0 >= 0.0 && b.lambda0.is_finite()) {
                return Err(diag.error("buffered", "lambda0", "must be non-negative"));
            }
            diag.positive("buffered", "max_iters", b.max_iters)?;
            if let Some(s) = b.step_length {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(diag.error("buffered", "step_length", "must be positive"));
                }
            }
        }
        if let Some(budget) = self.budget_seconds {
            if !(budget > 0.0) {
                return Err(diag.error("", "budget_seconds", "must be positive"));
            }
        }

        Ok(Prepared { config: self, model, dist, phi })
    }

    pub fn kind_label(&self) -> &'static str {
        match self.kind {
            RunKind::Estimate => "estimate",
            RunKind::DecayTable => "decay_table",
            RunKind::Ascent => "ascent",
            RunKind::Limit => "limit",
            RunKind::Buffered => "buffered",
        }
    }
}

struct Diagnostics<'a> {
    source: &'a str,
}

impl Diagnostics<'_> {
    /// 1-based line of `key` inside `[section]`, or of the section header.
    fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        let key = key.split('[').next().unwrap_or(key);
        let mut current = String::new();
        let mut header = None;
        for (i, raw) in self.source.lines().enumerate() {
            let line = raw.trim();
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                if current == section {
                    header = Some(i + 1);
                }
                continue;
            }
            let in_section = current == section || (section.is_empty() && current.is_empty());
            if in_section && !key.is_empty() {
                if let Some((k, _)) = line.split_once('=') {
                    if k.trim() == key {
                        return Some(i + 1);
                    }
                }
            }
        }
        header
    }

    fn error(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> CliError {
        let path = match (section.is_empty(), key.is_empty()) {
            (true, _) => key.to_string(),
            (false, true) => section.to_string(),
            (false, false) => format!("{section}.{key}"),
        };
        let at = self.line_of(section, key).map(|l| format!("line {l}, ")).unwrap_or_default();
        CliError::Config(format!("{at}field `{path}`: {msg}"))
    }

    fn field(&self, section: &str, key: &str, err: rareopt::Error) -> CliError {
        self.error(section, key, err)
    }

    fn positive(&self, section: &str, key: &str, value: usize) -> Result<(), CliError> {
        if value == 0 {
            Err(self.error(section, key, "must be positive"))
        } else {
            Ok(())
        }
    }

    fn nonempty(&self, section: &str, key: &str, len: usize) -> Result<(), CliError> {
        if len == 0 {
            Err(self.error(section, key, "must not be empty"))
        } else {
            Ok(())
        }
    }

    fn same_len(&self, section: &str, key: &str, got: usize, what: &str, expected: usize) -> Result<(), CliError> {
        if got == expected {
            Ok(())
        } else {
            Err(self.error(section, key, format!("has length {got} but the {what} dimension is {expected}")))
        }
    }
}
