//! Parameter resolution: command-line flags, then the TOML file, then defaults.

use std::path::Path;

use aaams::baselines::{StandardMsConfig, VariableMsConfig};
use aaams::postprocess::PostprocessConfig;
use aaams::RunConfig;
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

/// Default image parameters, squared: `⟨σ_r², σ_s², ε_r², ε_s²⟩`.
pub const IMAGE_DEFAULTS: [f64; 4] = [15.0, 16.0, 1.0, 81.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Aaams,
    Ms,
    Vms,
}

/// Algorithm parameters shared by `cluster` and `sweep`. Scale parameters are
/// squared, one value per domain block.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Params {
    #[arg(long, value_enum)]
    pub algo: Option<Algo>,
    /// Squared base bandwidth per domain block, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sigma_base: Option<Vec<f64>>,
    /// Squared merge vicinity per domain block, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub epsilon: Option<Vec<f64>>,
    /// Image shorthand `σ_r²,σ_s²,ε_r²,ε_s²`.
    #[arg(long, value_delimiter = ',')]
    pub params: Option<Vec<f64>>,
    /// Minimum effective sample size for a trusted bandwidth.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Convergence threshold on the shift length.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Eigenvalue floor per domain block.
    #[arg(long, value_delimiter = ',')]
    pub xi: Option<Vec<f64>>,
    /// Neighbor count for unstructured data.
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Bhattacharyya merge threshold.
    #[arg(long)]
    pub db: Option<f64>,
    #[arg(long)]
    pub min_size: Option<usize>,
    /// Repeat divergence merging with refreshed statistics until stable.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fixpoint: Option<bool>,
    /// Skip post-processing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub raw: Option<bool>,
    /// Perturb converged clusters.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub perturb: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Block sizes of the feature vector for point input, e.g. `3,2`.
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<usize>>,
    /// Neighbor rank of the variable-bandwidth baseline.
    #[arg(long)]
    pub knn: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Params {
    /// Fills unset fields from `other`.
    pub fn or(mut self, other: &Params) -> Self {
        overlay!(
            self, other, algo, sigma_base, epsilon, params, lambda, delta, xi, neighbors, max_iterations, db,
            min_size, fixpoint, raw, perturb, seed, domains, knn
        );
        self
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn algo(&self) -> Algo {
        self.algo.unwrap_or(Algo::Aaams)
    }

    /// Squared `(σ_base², ε²)` per block.
    pub fn squared_scales(&self, blocks: usize, image: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut sigma, mut eps) = (self.sigma_base.clone(), self.epsilon.clone());
        if let Some(p) = &self.params {
            if blocks != 2 {
                bail!("--params needs joint range/spatial data");
            }
            if p.len() != 4 {
                bail!("--params takes four values, got {}", p.len());
            }
            sigma.get_or_insert_with(|| vec![p[0], p[1]]);
            eps.get_or_insert_with(|| vec![p[2], p[3]]);
        }
        if image {
            sigma.get_or_insert_with(|| IMAGE_DEFAULTS[..2].to_vec());
            eps.get_or_insert_with(|| IMAGE_DEFAULTS[2..].to_vec());
        }
        let sigma = sigma.context("--sigma-base is required for point data")?;
        let eps = eps.unwrap_or_else(|| sigma.clone());
        for (name, v) in [("--sigma-base", &sigma), ("--epsilon", &eps)] {
            if v.len() != blocks {
                bail!("{name} needs {blocks} value(s), got {}", v.len());
            }
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                bail!("{name} values must be positive");
            }
        }
        Ok((sigma, eps))
    }

    pub fn run_config(&self, blocks: usize, image: bool) -> Result<RunConfig> {
        let (sigma2, eps2) = self.squared_scales(blocks, image)?;
        let mut cfg = RunConfig::with_blocks(
            sigma2.iter().map(|v| v.sqrt()).collect(),
            eps2.iter().map(|v| v.sqrt()).collect(),
        );
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = &self.xi {
            cfg.xi = Some(v.clone());
        }
        if let Some(v) = self.neighbors {
            cfg.neighbors = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.perturb {
            cfg.perturbation.enabled = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }

    pub fn postprocess_config(&self, run: &RunConfig, image: bool) -> PostprocessConfig {
        let xi = run.xi_values();
        let mut pp = if image { PostprocessConfig::for_image(xi) } else { PostprocessConfig::new(xi) };
        if let Some(v) = self.db {
            pp.db_threshold = v;
        }
        if let Some(v) = self.min_size {
            pp.min_size = v;
        }
        if let Some(v) = self.fixpoint {
            pp.fixpoint = v;
        }
        pp
    }

    pub fn standard_config(&self, run: &RunConfig) -> StandardMsConfig {
        let mut ms = StandardMsConfig::new(run.sigma_base.clone());
        if let Some(v) = self.delta {
            ms.delta = v;
        }
        if let Some(v) = self.max_iterations {
            ms.max_iterations = v;
        }
        ms
    }

    pub fn variable_config(&self) -> VariableMsConfig {
        let mut vms = VariableMsConfig { k: self.knn, ..Default::default() };
        if let Some(v) = self.max_iterations {
            vms.max_iterations = v;
        }
        vms
    }
}
