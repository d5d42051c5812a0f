//! Ground-truth data factories: three confounded dynamical systems with
//! irregular pre-treatment sampling, sigmoid treatment assignment, both
//! potential-outcome trajectories recorded on a dense grid, and a
//! line-delimited dataset format with a split/standardization manifest.

pub mod rk4;
pub mod systems;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use rk4::{integrate_checkpoints, rk4_integrate, SimError, Trajectory};
use systems::{check_state, derivative, observe, sample_unit, treatment_probability};

use crate::util::{self, salt};

/// Which generating system a dataset comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Oscillator,
    Cardio,
    Dexa,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Option<DatasetKind> {
        match name {
            "oscillator" => Some(DatasetKind::Oscillator),
            "cardio" => Some(DatasetKind::Cardio),
            "dexa" => Some(DatasetKind::Dexa),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Oscillator => "oscillator",
            DatasetKind::Cardio => "cardio",
            DatasetKind::Dexa => "dexa",
        }
    }

    pub fn t_star(&self) -> f64 {
        match self {
            DatasetKind::Oscillator => systems::oscillator::T_STAR,
            DatasetKind::Cardio => systems::cardio::T_STAR,
            DatasetKind::Dexa => systems::dexa::T_STAR,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            DatasetKind::Oscillator => systems::oscillator::HORIZON,
            DatasetKind::Cardio => systems::cardio::HORIZON,
            DatasetKind::Dexa => systems::dexa::HORIZON,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DatasetKind::Oscillator => 2,
            DatasetKind::Cardio => 4,
            DatasetKind::Dexa => 5,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            DatasetKind::Oscillator => 1,
            DatasetKind::Cardio | DatasetKind::Dexa => 2,
        }
    }

    /// Observed dimension used for scalar treatment-effect readouts.
    pub fn interest_dim(&self) -> usize {
        0
    }

    /// Default additive observation noise (per observed dimension).
    pub fn default_noise_std(&self) -> f64 {
        match self {
            DatasetKind::Oscillator | DatasetKind::Dexa => 0.01,
            DatasetKind::Cardio => 1.0,
        }
    }

    /// Default offset after the treatment instant at which scalar effects
    /// are read out for decision experiments.
    pub fn default_decision_offset(&self) -> f64 {
        match self {
            DatasetKind::Oscillator => 5.0,
            DatasetKind::Cardio => 10.0,
            DatasetKind::Dexa => 5.0,
        }
    }

    /// Default latent width for models trained on this dataset.
    pub fn default_latent_dim(&self) -> usize {
        match self {
            DatasetKind::Oscillator => 8,
            DatasetKind::Cardio | DatasetKind::Dexa => 12,
        }
    }
}

/// Generation settings. `(config, seed)` fully determines every byte of the
/// dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub kind: DatasetKind,
    /// Confounding strength for the sigmoid assignment model (ignored by
    /// the drug dataset, whose coupling is fixed).
    pub gamma: f64,
    pub n_episodes: usize,
    /// Integrator step for the ground-truth trajectories.
    pub rk4_dt: f64,
    /// Mean of the Poisson pre-treatment observation count (floor 3).
    pub obs_count_mean: f64,
    /// Additive Gaussian observation noise, applied to observations only.
    pub obs_noise_std: f64,
    /// Evaluation-grid step; the grid spans treatment time to horizon.
    pub eval_grid_dt: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(kind: DatasetKind) -> Self {
        let span = kind.horizon() - kind.t_star();
        SimConfig {
            kind,
            gamma: 0.0,
            n_episodes: 1000,
            rk4_dt: 0.005,
            obs_count_mean: 20.0,
            obs_noise_std: kind.default_noise_std(),
            eval_grid_dt: span / 100.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.rk4_dt > 0.0) || !(self.eval_grid_dt > 0.0) {
            return Err(SimError::BadWindow {
                t0: 0.0,
                t1: self.kind.horizon(),
                dt: self.rk4_dt.min(self.eval_grid_dt),
            });
        }
        if self.gamma < 0.0 {
            return Err(SimError::Sampling("gamma must be >= 0".into()));
        }
        Ok(())
    }

    /// Dense post-treatment grid, endpoints exact.
    pub fn eval_times(&self) -> Vec<f64> {
        let t_star = self.kind.t_star();
        let span = self.kind.horizon() - t_star;
        let n = (span / self.eval_grid_dt).round().max(1.0) as usize;
        (0..=n)
            .map(|i| t_star + span * i as f64 / n as f64)
            .collect()
    }
}

/// One simulated unit: irregular pre-treatment observations, the factual
/// assignment, and both potential-outcome trajectories on the dense grid.
/// Post-treatment observations are the factual outcome at the grid times
/// plus seeded noise, so the noise draws can be reconstructed exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub t_star: f64,
    pub treatment: u8,
    /// True P(T = 1 | history).
    pub propensity: f64,
    /// Pre-treatment (irregular) then post-treatment (grid) times, ascending.
    pub obs_times: Vec<f64>,
    /// Noisy observed vectors at `obs_times`.
    pub obs_values: Vec<Vec<f64>>,
    /// Dense evaluation grid from the treatment time to the horizon.
    pub eval_times: Vec<f64>,
    /// Noise-free potential outcome under no treatment, on `eval_times`.
    pub outcome_0: Vec<Vec<f64>>,
    /// Noise-free potential outcome under treatment, on `eval_times`.
    pub outcome_1: Vec<Vec<f64>>,
    /// Latent simulator parameters of this unit.
    pub sim_params: BTreeMap<String, f64>,
}

impl Episode {
    pub fn n_pre_obs(&self) -> usize {
        self.obs_times.iter().filter(|&&t| t < self.t_star).count()
    }

    pub fn factual_outcome(&self) -> &[Vec<f64>] {
        if self.treatment == 1 {
            &self.outcome_1
        } else {
            &self.outcome_0
        }
    }

    pub fn counterfactual_outcome(&self) -> &[Vec<f64>] {
        if self.treatment == 1 {
            &self.outcome_0
        } else {
            &self.outcome_1
        }
    }
}

/// Draws the irregular pre-treatment observation times: a Poisson count
/// (redrawn until >= 3), times uniform on (0, t_star), sorted, deduplicated.
pub fn sample_observation_times(
    config: &SimConfig,
    t_star: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>, SimError> {
    let poisson = Poisson::new(config.obs_count_mean)
        .map_err(|e| SimError::Sampling(format!("bad observation-count mean: {e}")))?;
    for _ in 0..1000 {
        let n = poisson.sample(rng) as usize;
        if n < 3 {
            continue;
        }
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..t_star)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        if times.len() >= 3 {
            return Ok(times);
        }
    }
    Err(SimError::Sampling(
        "could not draw >= 3 pre-treatment observation times".into(),
    ))
}

fn simulate_episode(config: &SimConfig, id: u64) -> Result<Episode, SimError> {
    let kind = config.kind;
    let t_star = kind.t_star();
    let mut unit_rng = util::rng_from(config.seed, &[id, salt::UNIT]);
    let unit = sample_unit(kind, &mut unit_rng);

    let mut obs_rng = util::rng_from(config.seed, &[id, salt::OBS_TIMES]);
    let pre_times = sample_observation_times(config, t_star, &mut obs_rng)?;

    // all arms share the pre-treatment segment: exogenous input is zero there
    let mut pre_checkpoints = pre_times.clone();
    pre_checkpoints.push(t_star);
    let mut deriv_untreated =
        |t: f64, s: &[f64], out: &mut [f64]| derivative(kind, &unit, false, t_star, t, s, out);
    let pre_states =
        integrate_checkpoints(&mut deriv_untreated, &unit.state0, 0.0, &pre_checkpoints, config.rk4_dt)?;
    for (t, s) in pre_checkpoints.iter().zip(&pre_states) {
        check_state(kind, *t, s)?;
    }
    let state_star = pre_states.last().unwrap().clone();

    let propensity = treatment_probability(kind, &unit, &state_star, config.gamma);
    let mut treat_rng = util::rng_from(config.seed, &[id, salt::TREATMENT]);
    let treatment = u8::from(treat_rng.random_range(0.0..1.0) < propensity);

    let eval_times = config.eval_times();
    let grid_after_tstar: Vec<f64> = eval_times[1..].to_vec();
    let mut arm = |treated: bool| -> Result<Vec<Vec<f64>>, SimError> {
        let mut deriv =
            |t: f64, s: &[f64], out: &mut [f64]| derivative(kind, &unit, treated, t_star, t, s, out);
        let mut states = vec![state_star.clone()];
        states.extend(integrate_checkpoints(
            &mut deriv,
            &state_star,
            t_star,
            &grid_after_tstar,
            config.rk4_dt,
        )?);
        for (t, s) in eval_times.iter().zip(&states) {
            check_state(kind, *t, s)?;
        }
        Ok(states)
    };
    let states_0 = arm(false)?;
    let states_1 = arm(true)?;

    let obs_dim = kind.obs_dim();
    let project = |states: &[Vec<f64>]| -> Vec<Vec<f64>> {
        states
            .iter()
            .map(|s| {
                let mut o = vec![0.0; obs_dim];
                observe(kind, s, &mut o);
                o
            })
            .collect()
    };
    let outcome_0 = project(&states_0);
    let outcome_1 = project(&states_1);

    // observations: irregular pre-treatment samples plus the factual
    // post-treatment outcome on the grid, with seeded additive noise
    let factual = if treatment == 1 { &outcome_1 } else { &outcome_0 };
    let mut obs_times = pre_times.clone();
    obs_times.extend_from_slice(&eval_times);
    let mut obs_values: Vec<Vec<f64>> = project(&pre_states[..pre_times.len()]);
    obs_values.extend(factual.iter().cloned());

    let mut noise_rng = util::rng_from(config.seed, &[id, salt::NOISE]);
    for v in obs_values.iter_mut() {
        for x in v.iter_mut() {
            let draw: f64 = StandardNormal.sample(&mut noise_rng);
            *x += config.obs_noise_std * draw;
        }
    }

    Ok(Episode {
        id,
        t_star,
        treatment,
        propensity,
        obs_times,
        obs_values,
        eval_times,
        outcome_0,
        outcome_1,
        sim_params: unit.params,
    })
}

/// Regenerates the noise that was added to an episode's observations;
/// used to verify factual consistency without persisting the draws.
pub fn regenerate_noise(config: &SimConfig, id: u64, n_obs: usize) -> Vec<Vec<f64>> {
    let mut noise_rng = util::rng_from(config.seed, &[id, salt::NOISE]);
    (0..n_obs)
        .map(|_| {
            (0..config.kind.obs_dim())
                .map(|_| {
                    let draw: f64 = StandardNormal.sample(&mut noise_rng);
                    config.obs_noise_std * draw
                })
                .collect()
        })
        .collect()
}

/// Per-dimension affine normalization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(d, x)| (x - self.mean[d]) / self.std[d])
            .collect()
    }

    fn fit(episodes: &[Episode], train_ids: &[u64], obs_dim: usize) -> Standardization {
        let train: Vec<&Episode> = episodes
            .iter()
            .filter(|e| train_ids.binary_search(&e.id).is_ok())
            .collect();
        let mut mean = vec![0.0; obs_dim];
        let mut count = 0usize;
        for e in &train {
            for v in &e.obs_values {
                for d in 0..obs_dim {
                    mean[d] += v[d];
                }
            }
            count += e.obs_values.len();
        }
        for m in mean.iter_mut() {
            *m /= count.max(1) as f64;
        }
        let mut var = vec![0.0; obs_dim];
        for e in &train {
            for v in &e.obs_values {
                for d in 0..obs_dim {
                    let c = v[d] - mean[d];
                    var[d] += c * c;
                }
            }
        }
        let std = var
            .iter()
            .map(|s| (s / count.max(1) as f64).sqrt().max(1e-12))
            .collect();
        Standardization { mean, std }
    }
}

/// Episode ids per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Sidecar metadata for a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SimConfig,
    pub config_hash: String,
    pub t_star: f64,
    pub horizon: f64,
    pub obs_dim: usize,
    pub split: SplitIds,
    pub standardization: Standardization,
}

/// A generated dataset plus its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub manifest: Manifest,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Stable hash of a serializable config, used to stamp every derived file.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let text = util::to_json_string(cfg).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Simulates every episode (in parallel, deterministically: each episode has
/// its own seed-derived streams) and assembles the 60/20/20 split manifest.
pub fn generate_dataset(config: &SimConfig) -> Result<Dataset, SimError> {
    config.validate()?;
    let episodes: Vec<Episode> = (0..config.n_episodes as u64)
        .into_par_iter()
        .map(|id| simulate_episode(config, id))
        .collect::<Result<_, _>>()?;

    let n = config.n_episodes;
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let ids: Vec<u64> = (0..n as u64).collect();
    let split = SplitIds {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    let standardization = Standardization::fit(&episodes, &split.train, config.kind.obs_dim());
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        config: config.clone(),
        config_hash: config_hash(config),
        t_star: config.kind.t_star(),
        horizon: config.kind.horizon(),
        obs_dim: config.kind.obs_dim(),
        split,
        standardization,
    };
    Ok(Dataset { episodes, manifest })
}

/// Writes `dataset.jsonl` (one episode per line) and `manifest.json` into
/// `dir`. All floats carry 17 significant digits, so identical configs
/// produce byte-identical files.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SimError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source| SimError::Io { path: p.clone(), source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let data_path = dir.join("dataset.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&data_path).map_err(io_err(&data_path))?);
    for e in &dataset.episodes {
        let line = util::to_json_string(e).expect("episode serializes");
        f.write_all(line.as_bytes()).map_err(io_err(&data_path))?;
        f.write_all(b"\n").map_err(io_err(&data_path))?;
    }
    f.flush().map_err(io_err(&data_path))?;
    let manifest_path = dir.join("manifest.json");
    let text = util::to_json_string(&dataset.manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(())
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, SimError> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| SimError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| SimError::Parse { line: 0, msg: e.to_string() })?;
    let data_path = dir.join("dataset.jsonl");
    let file = std::fs::File::open(&data_path).map_err(|source| SimError::Io {
        path: data_path.display().to_string(),
        source,
    })?;
    let mut episodes = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| SimError::Io {
            path: data_path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode = serde_json::from_str(&line).map_err(|e| SimError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        episodes.push(e);
    }
    Ok(Dataset { episodes, manifest })
}
