//! JSON run configuration: one file drives simulate, train-dynamics and fuse.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rfusion_core::distributed::{EngineConfig, EnginePath, DEFAULT_N_SAMPLES};
use rfusion_core::sensor::Preset;
use rfusion_core::sim::ScenarioConfig;
use rfusion_core::vbkf::VBConfig;

use crate::error::{validation, CliResult};

/// Dynamics model variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynVariant {
    RandomWalk,
    Nn,
}

/// Dynamics/training section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsSection {
    pub variant: DynVariant,
    pub lr: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Seed for the network weight initialization.
    pub init_seed: u64,
    /// Acquisition days of the generated historical dataset.
    pub history_days: Vec<i32>,
    /// Default weights file used by `fuse` when `--weights` is absent.
    pub weights: Option<PathBuf>,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection {
            variant: DynVariant::RandomWalk,
            lr: 0.05,
            epochs: 200,
            lambda1: 0.1,
            lambda2: 0.001,
            init_seed: 42,
            history_days: (0..20).map(|k| -80 + 4 * k).collect(),
            weights: None,
        }
    }
}

/// Variational filter section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSection {
    pub robust: bool,
    pub e0: f64,
    pub f0: f64,
    pub max_iters: usize,
    pub rel_change_threshold: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection { robust: true, e0: 0.5, f0: 0.5, max_iters: 20, rel_change_threshold: 0.10 }
    }
}

/// Seeds for the independent random streams of a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Scene texture / ground truth generation (also the historical dataset).
    pub scene: u64,
    /// Observation noise sampling.
    pub noise: u64,
    /// Complement sampling inside the engine.
    pub engine: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { scene: 1, noise: 2, engine: 3 }
    }
}

/// Distributed-engine section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSection {
    pub n_samples: usize,
    pub seeds: Seeds,
    pub path: EnginePath,
    /// Force full-complement sampling (the engine already samples the full
    /// state; kept for config compatibility).
    pub full_state_sampling: bool,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            n_samples: DEFAULT_N_SAMPLES,
            seeds: Seeds::default(),
            path: EnginePath::Distributed,
            full_state_sampling: true,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub engine: EngineSection,
}

impl RunConfig {
    /// Ready-to-run desk-scale configuration for a preset.
    pub fn desk(preset: Preset) -> Self {
        let filter = match preset {
            Preset::ElephantButte => FilterSection { e0: 0.98, f0: 0.02, ..FilterSection::default() },
            Preset::Oroville => FilterSection::default(),
        };
        RunConfig {
            scenario: ScenarioConfig::desk(preset),
            dynamics: DynamicsSection::default(),
            filter,
            engine: EngineSection::default(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| validation(format!("malformed config {}: {e}", path.display())))?;
        cfg.scenario
            .validate()
            .map_err(|e| validation(format!("invalid scenario: {e}")))?;
        Ok(cfg)
    }

    pub fn vb_config(&self) -> VBConfig {
        let mut vb = VBConfig::new(self.filter.e0, self.filter.f0);
        vb.robust = self.filter.robust;
        vb.max_iters = self.filter.max_iters;
        vb.rel_change_threshold = self.filter.rel_change_threshold;
        vb
    }

    pub fn engine_config(&self) -> EngineConfig {
        let mut cfg = EngineConfig::new(
            self.vb_config(),
            self.scenario.preset.p0_block(self.scenario.bands),
        );
        cfg.n_samples = self.engine.n_samples;
        cfg.seed = self.engine.seeds.engine;
        cfg.full_state_sampling = self.engine.full_state_sampling;
        cfg.path = self.engine.path;
        cfg
    }
}
