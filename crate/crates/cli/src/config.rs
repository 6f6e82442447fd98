//! Run configuration: JSON file values overlaid by command-line flags,
//! resolved against defaults into an experiment plan.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semibandit::harness::ExperimentPlan;
use semibandit::instances::{InstanceKind, InstanceSpec};
use semibandit::{PolicyConfig, PolicyKind, TieBreak};

pub const CONFIG_ECHO: &str = "config.json";

/// Every field is optional so a file, flags and defaults can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<InstanceKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_products: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_spread: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policies: Option<Vec<PolicyKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tie_break: Option<TieBreak>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            format!("{}: field '{field}': {}", path.display(), e.inner())
        })
    }

    /// Values set in `top` win.
    pub fn overlay(mut self, top: &RunConfig) -> Self {
        overlay!(self, top;
            instance, n_products, dim, k, cluster_count, cluster_spread, instance_seed,
            catalog, horizon, replicates, policies, alpha, alphas, regularizer, tie_break,
            seed, output,
        );
        self
    }

    /// Fills every unset field from `defaults`, then applies the
    /// lower-bound size rule so the echo shows the effective `N`.
    pub fn with_defaults(self, defaults: &RunConfig) -> Self {
        let mut cfg = defaults.clone().overlay(&self);
        if let (Some(InstanceKind::LowerBound), Some(d), Some(k)) = (cfg.instance, cfg.dim, cfg.k) {
            cfg.n_products = Some(d * k);
        }
        cfg
    }

    pub fn simulate_defaults() -> Self {
        Self {
            instance: Some(InstanceKind::ClusteredGaussian),
            n_products: Some(2000),
            dim: Some(20),
            k: Some(200),
            cluster_count: Some(8),
            cluster_spread: Some(0.05),
            instance_seed: Some(0),
            catalog: None,
            horizon: Some(26),
            replicates: Some(10),
            policies: Some(vec![PolicyKind::SemiUcb, PolicyKind::ConsUcb]),
            alpha: Some(0.1),
            alphas: Some(vec![0.02, 0.10, 0.50, 1.00]),
            regularizer: Some(1.0),
            tie_break: Some(TieBreak::LowestIndex),
            seed: Some(0),
            output: Some(PathBuf::from("results")),
        }
    }

    pub fn lowerbound_defaults() -> Self {
        Self {
            instance: Some(InstanceKind::LowerBound),
            dim: Some(10),
            k: Some(100),
            replicates: Some(1),
            alpha: Some(1.0),
            output: Some(PathBuf::from("lowerbound")),
            ..Self::simulate_defaults()
        }
    }

    fn need<T: Clone>(value: &Option<T>, name: &str) -> Result<T, String> {
        value.clone().ok_or_else(|| format!("config field '{name}' is not set"))
    }

    pub fn instance_spec(&self) -> Result<InstanceSpec, String> {
        let kind = Self::need(&self.instance, "instance")?;
        let dim = Self::need(&self.dim, "dim")?;
        let k = Self::need(&self.k, "k")?;
        let spec = InstanceSpec {
            kind,
            n_products: Self::need(&self.n_products, "n_products")?,
            dim,
            k_select: k,
            cluster_count: Self::need(&self.cluster_count, "cluster_count")?,
            cluster_spread: Self::need(&self.cluster_spread, "cluster_spread")?,
            seed: Self::need(&self.instance_seed, "instance_seed")?,
            path: self.catalog.clone(),
        };
        if kind == InstanceKind::FromFile && spec.path.is_none() {
            return Err("config field 'catalog' is required for from_file instances".into());
        }
        Ok(spec.normalized())
    }

    pub fn plan(&self) -> Result<ExperimentPlan, String> {
        let k = Self::need(&self.k, "k")?;
        let alpha = Self::need(&self.alpha, "alpha")?;
        let omega = Self::need(&self.regularizer, "regularizer")?;
        let tie = Self::need(&self.tie_break, "tie_break")?;
        let policies = Self::need(&self.policies, "policies")?
            .into_iter()
            .map(|kind| {
                PolicyConfig::new(kind, k, alpha)
                    .with_regularizer(omega)
                    .with_tie_break(tie)
            })
            .collect();
        Ok(ExperimentPlan {
            instance: self.instance_spec()?,
            horizon: Self::need(&self.horizon, "horizon")?,
            replicates: Self::need(&self.replicates, "replicates")?,
            policies,
            base_seed: Self::need(&self.seed, "seed")?,
            output_path: self.output.clone(),
        })
    }

    /// Writes the effective configuration next to the results.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, String> {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let path = dir.join(CONFIG_ECHO);
        let text = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        fs::write(&path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(path)
    }
}
