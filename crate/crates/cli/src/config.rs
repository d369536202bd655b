//! Run configuration read from a single TOML file.
//!
//! Every section is optional and filled from defaults, so the resolved
//! configuration can always be printed back in full.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latticeglm::data::{ColumnRole, Schema};
use latticeglm::fit::{Baseline, FitConfig, ModelShape, ModelSpec};
use latticeglm::glm::Family;
use latticeglm::lattice::{LatticeDim, LatticeSpec, DEFAULT_BIN_SAFETY};
use latticeglm::regularization::{BoundMode, Scheme};
use latticeglm::simulate::SimConfig;
use latticeglm::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub lattice: LatticeSection,
    pub model: ModelSection,
    pub fit: FitConfig,
    pub eval: EvalSection,
    pub select: SelectSection,
    pub bin: BinSection,
    pub stack: StackSection,
    pub simulate: SimulateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// Held-out rows scored by `eval` and `select-order`.
    pub test_path: Option<PathBuf>,
    pub intercept: bool,
    /// Z-score numeric features with statistics from the training file.
    pub standardize: bool,
    pub columns: BTreeMap<String, ColumnRole>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            test_path: None,
            intercept: true,
            standardize: true,
            columns: BTreeMap::new(),
        }
    }
}

impl DataSection {
    pub fn schema(&self) -> Schema {
        Schema {
            columns: self.columns.clone(),
            intercept: self.intercept,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSection {
    /// Lattice file written by `bin`; takes precedence over inline dims.
    pub path: Option<PathBuf>,
    pub dims: Vec<LatticeDim>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub order: usize,
    /// Truncation order of the intercept when it differs from the slopes.
    pub intercept_order: Option<usize>,
    pub scheme: Scheme,
    pub mode: BoundMode,
    pub baseline: Baseline,
    pub sigma2: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: Family::Gaussian,
            order: 1,
            intercept_order: None,
            scheme: Scheme::GeneralizationPreserving,
            mode: BoundMode::PerComponent,
            baseline: Baseline::MeanResponse,
            sigma2: None,
        }
    }
}

impl ModelSection {
    pub fn spec(&self, order: usize) -> ModelSpec {
        ModelSpec {
            shape: ModelShape {
                order,
                intercept_order: self.intercept_order,
            },
            scheme: self.scheme,
            mode: self.mode,
            baseline: self.baseline,
            sigma2: self.sigma2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub draws: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            draws: latticeglm::evaluation::DEFAULT_DRAWS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub max_order: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection { max_order: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinSection {
    /// Requested quantile bins per continuous column.
    pub levels: BTreeMap<String, usize>,
    /// Columns turned into categorical dimensions from their distinct labels.
    pub categorical: Vec<String>,
    pub safety: f64,
    /// Destination of the lattice file.
    pub output: Option<PathBuf>,
}

impl Default for BinSection {
    fn default() -> Self {
        BinSection {
            levels: BTreeMap::new(),
            categorical: Vec::new(),
            safety: DEFAULT_BIN_SAFETY,
            output: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackSection {
    /// CSV holding one logit column per base model, the response and the
    /// lattice columns.
    pub path: Option<PathBuf>,
    pub models: Vec<String>,
    pub response: String,
    pub family: Family,
    pub order: usize,
}

impl Default for StackSection {
    fn default() -> Self {
        StackSection {
            path: None,
            models: Vec::new(),
            response: "y".into(),
            family: Family::BernoulliLogit,
            order: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Comparison,
    RgFlow,
    Replica,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub experiment: Experiment,
    pub replications: usize,
    pub seed: u64,
    pub config: SimConfig,
    pub replica: ReplicaSection,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            experiment: Experiment::Comparison,
            replications: 20,
            seed: 0,
            config: SimConfig::default(),
            replica: ReplicaSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicaSection {
    pub p: usize,
    pub n: usize,
    pub lambda2: f64,
    pub sigma2: f64,
    pub draws: usize,
}

impl Default for ReplicaSection {
    fn default() -> Self {
        ReplicaSection {
            p: 50,
            n: 1000,
            lambda2: 1e-3,
            sigma2: 1.0,
            draws: 200,
        }
    }
}

impl Config {
    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.data.path);
        fix(&mut self.data.test_path);
        fix(&mut self.lattice.path);
        fix(&mut self.bin.output);
        fix(&mut self.stack.path);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# config not printable: {e}\n"))
    }

    /// Lattice from the referenced file or the inline dimensions.
    pub fn lattice(&self) -> Result<LatticeSpec, Error> {
        match &self.lattice.path {
            Some(p) => LatticeSpec::from_toml(&fs::read_to_string(p)?),
            None => LatticeSpec::new(self.lattice.dims.clone()),
        }
    }

    /// Problems shared by every data-driven command.
    fn common_problems(&self, problems: &mut Vec<String>) {
        if let Err(e) = self.fit.validate() {
            problems.push(e.to_string());
        }
        if self.eval.draws < latticeglm::evaluation::MIN_DRAWS {
            problems.push(format!(
                "eval.draws must be at least {}, got {}",
                latticeglm::evaluation::MIN_DRAWS,
                self.eval.draws
            ));
        }
        if let Some(s2) = self.model.sigma2 {
            if !(s2 > 0.0 && s2.is_finite()) {
                problems.push(format!("model.sigma2 must be positive, got {s2}"));
            }
        }
    }

    fn data_problems(&self, problems: &mut Vec<String>) {
        if self.data.path.is_none() {
            problems.push("data.path is required".into());
        }
        if let Err(e) = self.data.schema().response() {
            problems.push(e.to_string());
        }
    }

    /// Checks for `fit`, `eval` and `select-order`. Truncation against the
    /// lattice is checked first and reported on its own.
    pub fn validate_model(&self, max_order: usize) -> Result<LatticeSpec, Error> {
        let lattice = self.lattice()?;
        ModelShape {
            order: max_order,
            intercept_order: self.model.intercept_order,
        }
        .check(lattice.d())?;
        let mut problems = Vec::new();
        self.data_problems(&mut problems);
        self.common_problems(&mut problems);
        finish(problems)?;
        Ok(lattice)
    }

    pub fn validate_bin(&self) -> Result<(), Error> {
        let mut problems = Vec::new();
        if self.data.path.is_none() {
            problems.push("data.path is required".into());
        }
        if self.bin.levels.is_empty() && self.bin.categorical.is_empty() {
            problems.push("bin.levels or bin.categorical must name at least one column".into());
        }
        if !(self.bin.safety > 0.0 && self.bin.safety <= 1.0) {
            problems.push(format!("bin.safety must lie in (0, 1], got {}", self.bin.safety));
        }
        for (col, &l) in &self.bin.levels {
            if l < 2 {
                problems.push(format!("bin.levels.{col} must be at least 2, got {l}"));
            }
            if self.bin.categorical.contains(col) {
                problems.push(format!("column `{col}` is both binned and categorical"));
            }
        }
        finish(problems)
    }

    pub fn validate_stack(&self) -> Result<LatticeSpec, Error> {
        let lattice = self.lattice()?;
        let mut problems = Vec::new();
        if self.stack.path.is_none() {
            problems.push("stack.path is required".into());
        }
        if self.stack.models.is_empty() {
            problems.push("stack.models must name at least one logit column".into());
        }
        if self.stack.order > lattice.d() {
            problems.push(
                Error::InvalidTruncation {
                    order: self.stack.order,
                    d: lattice.d(),
                }
                .to_string(),
            );
        }
        if let Err(e) = self.fit.validate() {
            problems.push(e.to_string());
        }
        finish(problems)?;
        Ok(lattice)
    }

    pub fn validate_simulate(&self) -> Result<(), Error> {
        let s = &self.simulate;
        match s.experiment {
            Experiment::Replica => {
                let r = &s.replica;
                let mut problems = Vec::new();
                if r.p == 0 || r.n <= r.p {
                    problems.push(format!("simulate.replica needs n > p ≥ 1, got n = {}, p = {}", r.n, r.p));
                }
                if r.draws < 2 {
                    problems.push("simulate.replica.draws must be at least 2".into());
                }
                if !(r.lambda2 > 0.0) || !(r.sigma2 > 0.0) {
                    problems.push("simulate.replica.lambda2 and sigma2 must be positive".into());
                }
                finish(problems)
            }
            _ => s.config.validate(s.replications),
        }
    }

    /// Schema of the stacking input: logit columns as features, no intercept.
    pub fn stack_schema(&self) -> Schema {
        let mut columns: BTreeMap<String, ColumnRole> = self
            .stack
            .models
            .iter()
            .map(|m| (m.clone(), ColumnRole::Feature))
            .collect();
        columns.insert(self.stack.response.clone(), ColumnRole::Response);
        Schema {
            columns,
            intercept: false,
        }
    }
}

fn finish(problems: Vec<String>) -> Result<(), Error> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let back: Config = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("[model]\nordr = 2\n").is_err());
    }

    #[test]
    fn all_problems_listed() {
        let mut cfg = Config::default();
        cfg.fit.max_steps = 0;
        cfg.eval.draws = 3;
        let msg = cfg.validate_model(0).unwrap_err().to_string();
        assert!(msg.contains("data.path"));
        assert!(msg.contains("eval.draws"));
        assert!(msg.contains("max_steps"));
        assert!(msg.contains("response"));
    }

    #[test]
    fn truncation_checked_before_data() {
        let mut cfg = Config::default();
        cfg.lattice.dims = vec![LatticeDim::indexed("g", 3).unwrap()];
        assert!(matches!(
            cfg.validate_model(2),
            Err(Error::InvalidTruncation { order: 2, d: 1 })
        ));
    }
}
