//! TOML run files. Every section is optional; command-line flags win.
//!
//! ```toml
//! seed = 7
//! [gen]
//! preset = "standard"
//! n = 2000
//! [fit]
//! engine = "federated"
//! tolerance = 1e-10
//! [inference]
//! scope = "beta-only"
//! [montecarlo]
//! replicates = 50
//! methods = ["vfem", "complete-case", "mean-impute"]
//! ```

use std::path::Path;

use serde::Deserialize;
use vfem_core::datagen::GenConfig;
use vfem_core::engine::{Engine, FitConfig, InitStrategy, LearningRate};
use vfem_core::inference::{InferenceConfig, InferenceScope, SemConfig, SketchConfig, StatisticsSource};
use vfem_core::montecarlo::Method;
use vfem_core::protocol::{Scheduler, TransportKind};
use vfem_core::{Result, VfemError};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub gen: Option<toml::Table>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub montecarlo: MonteCarloSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub engine: Option<String>,
    pub transport: Option<String>,
    pub threaded: Option<bool>,
    pub max_iters: Option<usize>,
    pub tolerance: Option<f64>,
    /// Secondary stop on ‖Δβ‖₂.
    pub beta_tolerance: Option<f64>,
    /// "adaptive" or a positive number.
    pub learning_rate: Option<toml::Value>,
    /// "zeros" or "complete-case".
    pub init: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub scope: Option<InferenceScope>,
    pub statistics: Option<StatisticsSource>,
    pub sketch: Option<SketchConfig>,
    pub sem: Option<SemConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub replicates: Option<usize>,
    pub methods: Option<Vec<Method>>,
    /// Run VFEM inference in every replicate.
    pub inference: Option<bool>,
    pub workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub sizes: Option<Vec<usize>>,
    pub iterations: Option<usize>,
}

fn invalid(msg: impl std::fmt::Display) -> VfemError {
    VfemError::InvalidConfig(msg.to_string())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Start from the named preset (default "standard") and overlay the
    /// remaining keys of `[gen]`.
    pub fn gen_config(&self, preset: Option<&str>) -> Result<GenConfig> {
        let mut table = self.gen.clone().unwrap_or_default();
        let from_file = table.remove("preset").map(|v| v.as_str().map(str::to_string).ok_or_else(|| invalid("preset must be a string")));
        let name = match (preset, from_file) {
            (Some(p), _) => p.to_string(),
            (None, Some(p)) => p?,
            (None, None) => "standard".into(),
        };
        let base = GenConfig::preset(&name)?;
        let mut merged = toml::Table::try_from(&base).map_err(invalid)?;
        let rates_given = table.contains_key("missing_rates");
        let dims_given = table.contains_key("dims");
        merged.extend(table);
        let mut cfg: GenConfig = merged.try_into().map_err(|e: toml::de::Error| invalid(format!("[gen]: {e}")))?;
        if dims_given && !rates_given && cfg.missing_rates.len() != cfg.dims.len() {
            let rate = base.missing_rates.first().copied().unwrap_or(0.0);
            cfg = cfg.with_rate(rate);
        }
        Ok(cfg)
    }

    pub fn fit_config(&self, engine: Option<&str>, transport: Option<&str>) -> Result<FitConfig> {
        let s = &self.fit;
        let mut cfg = FitConfig::default();
        if let Some(e) = engine.or(s.engine.as_deref()) {
            cfg.engine = e.parse()?;
        }
        if let Some(t) = s.max_iters {
            cfg.max_iters = t;
        }
        if let Some(eps) = s.tolerance {
            cfg.tolerance = eps;
        }
        if let Some(eps) = s.beta_tolerance {
            cfg.beta_tolerance = eps;
        }
        cfg.learning_rate = match &s.learning_rate {
            None => LearningRate::Adaptive,
            Some(toml::Value::String(v)) if v == "adaptive" => LearningRate::Adaptive,
            Some(toml::Value::Float(v)) => LearningRate::Constant(*v),
            Some(toml::Value::Integer(v)) => LearningRate::Constant(*v as f64),
            Some(other) => return Err(invalid(format!("learning_rate must be \"adaptive\" or a number, got {other}"))),
        };
        cfg.init = match s.init.as_deref() {
            None | Some("zeros") => InitStrategy::Zeros,
            Some("complete-case") => InitStrategy::CompleteCaseOls,
            Some(other) => return Err(invalid(format!("unknown init {other:?}"))),
        };
        let transport: TransportKind = transport.or(s.transport.as_deref()).unwrap_or("inproc").parse()?;
        if transport == TransportKind::Socket || s.threaded == Some(true) {
            if cfg.engine == Engine::Oracle {
                return Err(invalid("the oracle engine runs on pooled data and takes no transport"));
            }
            cfg.federation = cfg.federation.threaded(transport);
        }
        debug_assert!(transport == TransportKind::InProcess || cfg.federation.scheduler == Scheduler::Threaded);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn inference_config(&self, fit: &FitConfig) -> InferenceConfig {
        let s = &self.inference;
        InferenceConfig {
            scope: s.scope.unwrap_or_default(),
            statistics: s.statistics.unwrap_or_default(),
            sketch: s.sketch.unwrap_or_default(),
            sem: s.sem.unwrap_or_default(),
            engine: fit.engine,
            federation: fit.federation.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> RunConfig {
        toml::from_str(s).unwrap()
    }

    #[test]
    fn gen_overlays_the_preset() {
        let cfg = parse("[gen]\npreset = \"smes-like\"\nn = 500\n").gen_config(None).unwrap();
        assert_eq!(cfg.n, 500);
        assert_eq!(cfg.dims, vec![12, 3, 6, 9, 5]);
    }

    #[test]
    fn new_dims_get_matching_rates() {
        let cfg = parse("[gen]\ndims = [1, 1, 1, 1]\n").gen_config(None).unwrap();
        assert_eq!(cfg.missing_rates.len(), 4);
    }

    #[test]
    fn typos_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[fit]\ntolerence = 1e-3\n").is_err());
        assert!(parse("[gen]\nnn = 3\n").gen_config(None).is_err());
    }

    #[test]
    fn oracle_over_sockets_is_rejected() {
        let r = RunConfig::default().fit_config(Some("oracle"), Some("socket"));
        assert!(matches!(r, Err(VfemError::InvalidConfig(_))));
    }
}
