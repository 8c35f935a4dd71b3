//! Run configuration: a strict JSON schema (unknown keys rejected) with
//! every knob overridable from the command line; the flag wins.

use anyhow::{bail, Context, Result};
use qliom_core::model::{Caps, Overrides, PerturbationSpec};
use qliom_core::ChainParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const OUTPUT_DIR_ENV: &str = "QLIOM_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub n_sites: usize,
    pub range: usize,
    pub coupling: f64,
    pub beta: f64,
    pub epsilon: f64,
    #[serde(default = "default_perturbation")]
    pub perturbation: String,
    #[serde(default)]
    pub n_star: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
    #[serde(default = "default_enum_cap")]
    pub enum_cap: usize,
    #[serde(default = "default_dense_cap")]
    pub support_cap: usize,
}

fn default_perturbation() -> String {
    "transverse-mixed".into()
}
fn default_dense_cap() -> usize {
    14
}
fn default_enum_cap() -> usize {
    16
}

impl ParamsConfig {
    pub fn to_chain_params(&self) -> Result<ChainParams> {
        let perturbation = PerturbationSpec::from_name(&self.perturbation)
            .with_context(|| format!("unknown perturbation preset '{}'", self.perturbation))?;
        let params = ChainParams {
            n_sites: self.n_sites,
            range: self.range,
            coupling: self.coupling,
            beta: self.beta,
            epsilon: self.epsilon,
            perturbation,
            overrides: Overrides { n_star: self.n_star, delta: self.delta },
            caps: Caps {
                dense_cap: self.dense_cap,
                enum_cap: self.enum_cap,
                support_cap: self.support_cap,
            },
        };
        params.validate().map_err(|e| anyhow::anyhow!("invalid params: {e}"))?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    Range { seed0: u64, count: usize },
    List { list: Vec<u64> },
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec::Range { seed0: 1, count: 1 }
    }
}

impl SeedSpec {
    /// Per-realization seeds derive as `seed0 + index` so that serial and
    /// parallel runs agree.
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::Range { seed0, count } => {
                (0..*count as u64).map(|k| seed0.wrapping_add(k)).collect()
            }
            SeedSpec::List { list } => list.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatFlags {
    #[serde(default = "yes")]
    pub json: bool,
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default = "yes")]
    pub junit: bool,
}

fn yes() -> bool {
    true
}

impl Default for FormatFlags {
    fn default() -> Self {
        Self { json: true, csv: true, junit: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_delta_samples")]
    pub delta_samples: usize,
}

fn default_samples() -> usize {
    10_000
}
fn default_delta_samples() -> usize {
    10_000
}
fn default_deltas() -> Vec<f64> {
    vec![0.04, 0.02, 0.01, 0.005]
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            deltas: default_deltas(),
            delta_samples: default_delta_samples(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    /// Fiducial site; defaults to the middle of the chain.
    #[serde(default)]
    pub i_star: Option<usize>,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { i_star: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default)]
    pub i_star: Option<usize>,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// "domain-wall" or "random-product".
    #[serde(default = "default_state")]
    pub initial_state: String,
    #[serde(default)]
    pub state_seed: u64,
}

fn default_t_max() -> f64 {
    1000.0
}
fn default_steps() -> usize {
    20_000
}
fn default_state() -> String {
    "domain-wall".into()
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            i_star: None,
            t_max: default_t_max(),
            steps: default_steps(),
            initial_state: default_state(),
            state_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ParamsConfig,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub formats: FormatFlags,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
}

fn default_parallelism() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("config {} does not match the schema", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.to_chain_params()?;
        if self.seeds.seeds().is_empty() {
            bail!("seed specification produced no seeds");
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.dynamics.steps < 2 {
            bail!("dynamics needs at least 2 grid points");
        }
        if !matches!(self.dynamics.initial_state.as_str(), "domain-wall" | "random-product") {
            bail!("initial_state must be 'domain-wall' or 'random-product'");
        }
        if self.ensemble.samples < 100 {
            bail!("ensemble statistics need at least 100 samples");
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("qliom-out"))
    }
}

/// A documented template of the schema, printed by the `schema` subcommand.
pub fn schema_template() -> serde_json::Value {
    serde_json::json!({
        "params": {
            "n_sites": 10,
            "range": 2,
            "coupling": 0.02,
            "beta": 0.5,
            "epsilon": 0.5,
            "perturbation": "transverse-mixed | transverse | hopping",
            "n_star": null,
            "delta": null,
            "dense_cap": 14,
            "enum_cap": 16,
            "support_cap": 14
        },
        "seeds": { "seed0": 1, "count": 20 },
        "output_dir": "qliom-out (or env QLIOM_OUT)",
        "parallelism": 1,
        "formats": { "json": true, "csv": true, "junit": true },
        "ensemble": { "samples": 10000, "deltas": [0.04, 0.02, 0.01, 0.005], "delta_samples": 10000 },
        "transport": { "i_star": null },
        "dynamics": {
            "i_star": null,
            "t_max": 1000.0,
            "steps": 20000,
            "initial_state": "domain-wall | random-product",
            "state_seed": 0
        }
    })
}
