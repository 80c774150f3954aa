//! Experiment configuration, scenario presets and seed derivation.

use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtslam::{
    enumerate_vts, Agent, Birth, Config, Env, MapConfig, Motion, Reflector, Sensor, Vt, VtMatchConfig, WeightStrategy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectorSpec {
    /// Any point on the wall line.
    pub point: [f64; 2],
    /// Normal direction; need not be unit length.
    pub normal: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub anchor: [f64; 2],
    pub reflectors: Vec<ReflectorSpec>,
    pub scatterers: Vec<[f64; 2]>,
    /// Highest number of propagation interactions per path.
    pub max_order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub bias: f64,
}

impl InitialState {
    pub fn agent(&self) -> Agent {
        Agent::new(Vector2::from(self.position), Vector2::from(self.velocity), self.bias)
    }
}

/// Sensor settings as written in a config file. A missing `range_max` is
/// derived from the scenario (see [`ExperimentConfig::sensor`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSettings {
    pub sigma_d: f64,
    pub sigma_theta: f64,
    pub sigma_d0: f64,
    pub sigma_theta0: f64,
    pub p_detect: f64,
    pub lambda_clutter: f64,
    pub fov_radius: f64,
    #[serde(default)]
    pub range_max: Option<f64>,
    pub los_end_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    pub num_particles: usize,
    pub strategy: WeightStrategy,
    pub ess_threshold: f64,
    pub extraction_threshold: f64,
    pub association_budget: usize,
    pub truncation_terms: usize,
    #[serde(default)]
    pub initial_spread: Option<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvironmentSpec,
    pub initial_state: InitialState,
    pub steps: usize,
    pub trajectories: usize,
    pub repetitions: usize,
    pub motion: Motion,
    pub sensor: SensorSettings,
    pub birth: Birth,
    pub map: MapConfig<f64>,
    pub filter: FilterSettings,
    pub evaluation: VtMatchConfig,
    pub seed: u64,
}

pub const PRESETS: [&str; 2] = ["scenario1", "scenario2"];

fn defaults(
    name: &str,
    environment: EnvironmentSpec,
    initial_state: InitialState,
    fov: f64,
    trajectories: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        environment,
        initial_state,
        steps: 375,
        trajectories,
        repetitions: 10,
        motion: Motion {
            sigma_x: 0.5,
            sigma_y: 0.5,
            sigma_b: 0.01,
            dt: 0.08,
        },
        sensor: SensorSettings {
            sigma_d: 0.3,
            sigma_theta: 4f64.to_radians(),
            sigma_d0: 0.05,
            sigma_theta0: 2f64.to_radians(),
            p_detect: 0.95,
            lambda_clutter: 0.02,
            fov_radius: fov,
            range_max: None,
            los_end_time: 6.0,
        },
        birth: Birth {
            gamma: 0.7,
            zeta: 0.1,
            iota: 0.5,
            xi: 0.3,
            alpha_birth: 0.01,
        },
        map: MapConfig::default(),
        filter: FilterSettings {
            num_particles: 1000,
            strategy: WeightStrategy::MultiFeature,
            ess_threshold: 0.5,
            extraction_threshold: 0.5,
            association_budget: 10_000,
            truncation_terms: 100,
            initial_spread: None,
        },
        evaluation: VtMatchConfig::default(),
        seed: 0,
    }
}

pub fn preset(name: &str) -> anyhow::Result<ExperimentConfig> {
    let horizontal = |c: f64| ReflectorSpec {
        point: [0.0, c],
        normal: [0.0, 1.0],
    };
    let vertical = |c: f64| ReflectorSpec {
        point: [c, 0.0],
        normal: [1.0, 0.0],
    };
    match name {
        "scenario1" => Ok(defaults(
            name,
            EnvironmentSpec {
                anchor: [0.0, 0.0],
                reflectors: vec![horizontal(10.0)],
                scatterers: vec![[10.0, -5.0]],
                max_order: 2,
            },
            InitialState {
                position: [0.0, 0.0],
                velocity: [1.0, 0.0],
                bias: 0.3,
            },
            35.0,
            10,
        )),
        "scenario2" => Ok(defaults(
            name,
            EnvironmentSpec {
                anchor: [0.0, 0.0],
                reflectors: vec![horizontal(5.0), vertical(10.0)],
                scatterers: vec![[5.0, -5.0]],
                max_order: 2,
            },
            InitialState {
                position: [8.0, -10.0],
                velocity: [0.0, 1.0],
                bias: 0.3,
            },
            25.0,
            5,
        )),
        other => bail!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.steps == 0 || self.trajectories == 0 || self.repetitions == 0 {
            bail!("steps, trajectories and repetitions must all be at least 1");
        }
        let vts = self.ground_truth()?;
        self.filter_config(&vts)?.validate()?;
        self.sensor(&vts).validate()?;
        Ok(())
    }

    pub fn environment(&self) -> anyhow::Result<Env> {
        let e = &self.environment;
        let reflectors = e
            .reflectors
            .iter()
            .map(|r| Reflector::new(Vector2::from(r.point), Vector2::from(r.normal)))
            .collect::<Result<Vec<_>, _>>()?;
        let scatterers = e.scatterers.iter().map(|s| Vector2::from(*s)).collect();
        Ok(Env::new(Vector2::from(e.anchor), reflectors, scatterers)?)
    }

    pub fn ground_truth(&self) -> anyhow::Result<Vec<Vt>> {
        Ok(enumerate_vts(&self.environment()?, self.environment.max_order)?)
    }

    /// Sensor parameters; without an explicit `range_max` the clutter support
    /// extends to the FOV radius plus the largest VT bias and the initial
    /// agent bias, so it covers every VT measurement the simulator can emit.
    pub fn sensor(&self, vts: &[Vt]) -> Sensor {
        let s = &self.sensor;
        let max_bias = vts.iter().map(|v| v.bias).fold(0.0, f64::max);
        Sensor {
            sigma_d: s.sigma_d,
            sigma_theta: s.sigma_theta,
            sigma_d0: s.sigma_d0,
            sigma_theta0: s.sigma_theta0,
            p_detect: s.p_detect,
            lambda_clutter: s.lambda_clutter,
            fov_radius: s.fov_radius,
            range_max: s
                .range_max
                .unwrap_or(s.fov_radius + max_bias + self.initial_state.bias.max(0.0)),
            los_end_time: s.los_end_time,
        }
    }

    pub fn filter_config(&self, vts: &[Vt]) -> anyhow::Result<Config> {
        let f = &self.filter;
        Ok(Config {
            num_particles: f.num_particles,
            motion: self.motion,
            sensor: self.sensor(vts),
            birth: self.birth,
            map: self.map,
            strategy: f.strategy,
            ess_threshold: f.ess_threshold,
            extraction_threshold: f.extraction_threshold,
            association_budget: f.association_budget,
            truncation_terms: f.truncation_terms,
            initial_spread: f.initial_spread,
        })
    }

    /// Canonical JSON (field order is fixed by the struct definition).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Child seed for a named stream, derived by hashing the master seed with the
/// stream label and indices.
pub fn derive_seed(master: u64, label: &str, indices: &[usize]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update((*i as u64).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seeds for one (trajectory, repetition) run. Repetitions of a trajectory
/// share the trajectory seed and differ in measurement and filter seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub trajectory: u64,
    pub measurements: u64,
    pub filter: u64,
}

impl RunSeeds {
    pub fn derive(master: u64, trajectory: usize, repetition: usize) -> Self {
        Self {
            trajectory: derive_seed(master, "trajectory", &[trajectory]),
            measurements: derive_seed(master, "measurements", &[trajectory, repetition]),
            filter: derive_seed(master, "filter", &[trajectory, repetition]),
        }
    }
}
