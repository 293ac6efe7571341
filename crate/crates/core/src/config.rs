//! Experiment configuration: a TOML file with nested sections. Every field
//! of the run is reachable from here; unknown keys are a hard error.

use crate::control::SimOptions;
use crate::error::{Error, Result};
use crate::grid::{SpaceBox, SpaceTimeGrid};
use crate::model::FactorModel;
use crate::params::RobustParams;
use crate::pde::SolverOptions;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 = library default. Recorded in outputs.
    #[serde(default)]
    pub threads: usize,
    pub params: ParamsSection,
    pub model: ModelSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub assumptions: AssumptionsSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub asymptotics: AsymptoticsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub p: f64,
    pub m: f64,
    pub horizon: f64,
    pub theta: f64,
}

/// Model registry selector. `constant` and `ou_liquidity` cover the shipped
/// models; `custom` embeds a full coefficient specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Constant {
        #[serde(default = "one")]
        dim: usize,
        eta: f64,
        lambda: f64,
        #[serde(default = "onef")]
        vol: f64,
    },
    OuLiquidity {
        #[serde(default)]
        mu: f64,
        #[serde(default = "onef")]
        sigma: f64,
        lambda_base: f64,
        lambda_amp: f64,
    },
    Custom {
        model: FactorModel,
    },
}

fn one() -> usize {
    1
}

fn onef() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub n_space: Vec<usize>,
    pub n_time: usize,
    /// Terminal standoff as a fraction of the horizon.
    #[serde(default = "default_tau_min_frac")]
    pub tau_min_frac: f64,
}

fn default_tau_min_frac() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionsSection {
    pub n_samples: usize,
}

impl Default for AssumptionsSection {
    fn default() -> Self {
        AssumptionsSection { n_samples: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub t0: f64,
    pub y0: Vec<f64>,
    pub x0: f64,
    /// Simulation stops at `T - h_end_frac * T`.
    pub h_end_frac: f64,
    /// Write full per-step paths (large files).
    pub dump_paths: bool,
    pub xi_scales: Vec<f64>,
    pub vartheta_scales: Vec<f64>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            n_paths: 10_000,
            n_steps: 400,
            t0: 0.0,
            y0: vec![0.0, 0.0],
            x0: 1.0,
            h_end_frac: 1e-4,
            dump_paths: false,
            xi_scales: vec![0.8, 1.25],
            vartheta_scales: vec![0.5, 1.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Sandwich slack = `slack_factor` x the solver's error estimate.
    pub slack_factor: f64,
    /// Safety inflation on sampled sup norms.
    pub sup_inflation: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { slack_factor: 3.0, sup_inflation: 1.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsymptoticsSection {
    pub thetas: Vec<f64>,
    pub fk_enable: bool,
    pub fk_paths: usize,
    pub fk_steps: usize,
    pub fk_points: usize,
}

impl Default for AsymptoticsSection {
    fn default() -> Self {
        AsymptoticsSection {
            thetas: vec![0.2, 0.1, 0.05],
            fk_enable: true,
            fk_paths: 100_000,
            fk_steps: 256,
            fk_points: 20,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
}

impl ExperimentConfig {
    pub fn from_str_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_str_toml(&text)?;
        Ok((cfg, text))
    }

    fn validate(&self) -> Result<()> {
        let dim = self.grid.n_space.len();
        if self.grid.y_min.len() < dim || self.grid.y_max.len() < dim {
            return Err(Error::Config(
                "grid.y_min / grid.y_max must cover every spatial dimension".into(),
            ));
        }
        if !(self.grid.tau_min_frac > 0.0 && self.grid.tau_min_frac < 1.0) {
            return Err(Error::Config("grid.tau_min_frac must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn build_params(&self) -> Result<RobustParams> {
        RobustParams::new(
            self.params.p,
            self.params.m,
            self.params.horizon,
            self.params.theta,
        )
    }

    pub fn build_model(&self) -> Result<FactorModel> {
        let model = match &self.model {
            ModelSection::Constant { dim, eta, lambda, vol } => {
                FactorModel::constant(*dim, *eta, *lambda, *vol)
            }
            ModelSection::OuLiquidity { mu, sigma, lambda_base, lambda_amp } => {
                FactorModel::ou_liquidity(*mu, *sigma, *lambda_base, *lambda_amp)?
            }
            ModelSection::Custom { model } => model.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn space_box(&self) -> SpaceBox {
        let mut lo = [0.0, 0.0];
        let mut hi = [0.0, 0.0];
        for d in 0..self.grid.n_space.len().min(2) {
            lo[d] = self.grid.y_min[d];
            hi[d] = self.grid.y_max[d];
        }
        SpaceBox::new(lo, hi)
    }

    pub fn build_grid(&self) -> Result<SpaceTimeGrid> {
        SpaceTimeGrid::new(
            self.params.horizon,
            self.grid.tau_min_frac * self.params.horizon,
            self.grid.n_time,
            &self.space_box(),
            &self.grid.n_space,
        )
    }

    pub fn sim_options(&self) -> Result<SimOptions> {
        let s = &self.simulation;
        let mut y0 = [0.0, 0.0];
        for d in 0..self.grid.n_space.len().min(2) {
            y0[d] = *s
                .y0
                .get(d)
                .ok_or_else(|| Error::Config("simulation.y0 must cover every dimension".into()))?;
        }
        let mut opts = SimOptions::new(s.t0, y0, s.x0, s.n_paths, s.n_steps, self.seed);
        opts.h_end = s.h_end_frac * self.params.horizon;
        opts.store_paths = s.dump_paths;
        Ok(opts)
    }
}
