//! The outcome-prediction architecture: a gated recurrent encoder maps the
//! irregular pre-treatment history to a latent state, a latent stochastic
//! differential equation with a learned drift and fixed isotropic diffusion
//! carries it forward under a learned treatment-specific exogenous input,
//! and a pointwise emission net maps latent states to outcome means.
//!
//! Sampling uses fixed-grid Euler-Maruyama steps recorded on the autodiff
//! tape, so training backpropagates through the unrolled solver. Alongside
//! each step the squared drift norm is recorded; scaled by the inverse
//! diffusion variance it is the integrand of the path-space divergence
//! between the sampled process and a zero-drift prior with the same
//! diffusion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{DiffError, Shape, Tape, Tensor};
use crate::nets::{
    self, gru_step, mlp_forward, BoundParams, GruSpec, MlpSpec, NetError, ParamStore, SpecEntry,
};
use crate::util::{self, salt};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("encoder needs at least one observation")]
    EmptyHistory,
    #[error("observation times must be strictly increasing (index {0})")]
    NonIncreasingTimes(usize),
    #[error("non-finite latent state at step {step}")]
    NonFiniteState { step: usize },
    #[error("evaluation time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("noise draws have wrong extent: expected {expected} steps x {dim}, got {got_steps} x {got_dim}")]
    NoiseShape {
        expected: usize,
        dim: usize,
        got_steps: usize,
        got_dim: usize,
    },
    #[error("learnable output scale is disabled for this model")]
    LearnableStdDisabled,
    #[error("learnable output scale is enabled; use the mean-and-scale decoder")]
    LearnableStdEnabled,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// All architecture and integration hyperparameters. Stored verbatim in
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub outcome_dim: usize,
    pub latent_dim: usize,
    /// Output width of the treatment-input net.
    pub treat_dim: usize,
    /// Hidden layers in each MLP; hidden width equals the latent width.
    pub hidden_layers: usize,
    /// Diffusion scale of the latent SDE; 0 turns the model into a
    /// deterministic latent ODE.
    pub sigma_sde: f64,
    /// Fixed emission standard deviation (ignored when `learnable_std`).
    pub sigma_y: f64,
    /// Euler-Maruyama grid step.
    pub delta_tau: f64,
    pub t_star: f64,
    pub horizon: f64,
    /// When set, the emission net outputs mean and a positive scale.
    pub learnable_std: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sigma_y <= 0.0 {
            return Err(ModelError::InvalidConfig("sigma_y must be > 0".into()));
        }
        if self.sigma_sde < 0.0 {
            return Err(ModelError::InvalidConfig("sigma_sde must be >= 0".into()));
        }
        if !(self.delta_tau > 0.0) {
            return Err(ModelError::InvalidConfig("delta_tau must be > 0".into()));
        }
        if self.horizon <= self.t_star {
            return Err(ModelError::InvalidConfig(
                "horizon must exceed the treatment time".into(),
            ));
        }
        Ok(())
    }

    /// Number of Euler steps covering (t_star, horizon].
    pub fn n_steps(&self) -> usize {
        (((self.horizon - self.t_star) / self.delta_tau).round() as usize).max(1)
    }

    /// Grid time of step index m.
    pub fn grid_time(&self, m: usize) -> f64 {
        let n = self.n_steps();
        self.t_star + (self.horizon - self.t_star) * m as f64 / n as f64
    }
}

/// Name prefixes of the four parameter groups.
mod prefix {
    pub const ENCODER: &str = "encoder";
    pub const DRIFT: &str = "drift";
    pub const TREAT: &str = "treat";
    pub const EMISSION: &str = "emission";
}

/// The assembled architecture: encoder cell plus the three MLPs.
#[derive(Clone, Debug)]
pub struct CfOde {
    pub cfg: ModelConfig,
    pub encoder: GruSpec,
    pub drift: MlpSpec,
    pub treat_net: MlpSpec,
    pub emission: MlpSpec,
}

impl CfOde {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let hidden = vec![cfg.latent_dim; cfg.hidden_layers];
        // encoder input: observation vector, presence mask, time gap
        let encoder = GruSpec::new(cfg.obs_dim + 2, cfg.latent_dim)?;
        let drift = MlpSpec::new(cfg.latent_dim + cfg.treat_dim, &hidden, cfg.latent_dim)?;
        // treatment net input: scaled time since treatment + one-hot arm
        let treat_net = MlpSpec::new(3, &hidden, cfg.treat_dim)?;
        let emission_out = if cfg.learnable_std {
            2 * cfg.outcome_dim
        } else {
            cfg.outcome_dim
        };
        let emission = MlpSpec::new(cfg.latent_dim, &hidden, emission_out)?;
        Ok(CfOde {
            cfg,
            encoder,
            drift,
            treat_net,
            emission,
        })
    }

    /// Fresh Glorot-initialized parameters, reproducible from the seed.
    pub fn init_store(&self, seed: u64) -> Result<ParamStore, ModelError> {
        Ok(nets::init_params(
            &[
                (prefix::ENCODER, SpecEntry::Gru(&self.encoder)),
                (prefix::DRIFT, SpecEntry::Mlp(&self.drift)),
                (prefix::TREAT, SpecEntry::Mlp(&self.treat_net)),
                (prefix::EMISSION, SpecEntry::Mlp(&self.emission)),
            ],
            seed,
        )?)
    }

    /// Scans the pre-treatment history from a zero hidden state. Each step
    /// consumes the observation vector, its presence mask, and the gap since
    /// the previous observation (scaled by the pre-treatment span).
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        history: &EncoderInput,
    ) -> Result<Tensor, ModelError> {
        if history.times.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        for i in 1..history.times.len() {
            if history.times[i] <= history.times[i - 1] {
                return Err(ModelError::NonIncreasingTimes(i));
            }
        }
        let gap_scale = 1.0 / self.cfg.t_star.max(1e-12);
        let mut h = tape.zeros(self.cfg.latent_dim);
        let mut prev_t = 0.0;
        for (i, t) in history.times.iter().enumerate() {
            let gap = (t - prev_t) * gap_scale;
            prev_t = *t;
            let mut x = Vec::with_capacity(self.cfg.obs_dim + 2);
            x.extend_from_slice(&history.values[i]);
            x.push(history.masks[i]);
            x.push(gap);
            let xt = tape.vector(&x);
            h = gru_step(tape, &self.encoder, bound, prefix::ENCODER, xt, h)?;
        }
        Ok(h)
    }

    fn treat_input(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        s_since_treatment: f64,
        treatment: u8,
    ) -> Result<Tensor, ModelError> {
        // temporal causal structure: no exogenous input at or before the
        // treatment instant
        if s_since_treatment <= 0.0 {
            return Ok(tape.zeros(self.cfg.treat_dim));
        }
        let span = self.cfg.horizon - self.cfg.t_star;
        let one_hot = if treatment == 1 { [0.0, 1.0] } else { [1.0, 0.0] };
        let x = tape.vector(&[s_since_treatment / span, one_hot[0], one_hot[1]]);
        Ok(mlp_forward(tape, &self.treat_net, bound, prefix::TREAT, x)?)
    }

    /// Unrolls the Euler-Maruyama scheme on the tape:
    ///
    /// ```text
    /// h_{m+1} = h_m + f(h_m, u_T(tau_m - t*)) dtau + sigma_sde sqrt(dtau) xi_m
    /// ```
    ///
    /// Returns the taped states plus the squared drift norm per step.
    pub fn sample_path_taped(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        h_tstar: Tensor,
        treatment: u8,
        noise: &PathNoise,
    ) -> Result<TapedPath, ModelError> {
        let n_steps = self.cfg.n_steps();
        if noise.draws.len() != n_steps
            || noise.draws.iter().any(|d| d.len() != self.cfg.latent_dim)
        {
            return Err(ModelError::NoiseShape {
                expected: n_steps,
                dim: self.cfg.latent_dim,
                got_steps: noise.draws.len(),
                got_dim: noise.draws.first().map_or(0, |d| d.len()),
            });
        }
        let dtau = (self.cfg.horizon - self.cfg.t_star) / n_steps as f64;
        let noise_scale = self.cfg.sigma_sde * dtau.sqrt();

        let mut states = Vec::with_capacity(n_steps + 1);
        let mut drift_sq = Vec::with_capacity(n_steps);
        let mut h = h_tstar;
        states.push(h);
        for m in 0..n_steps {
            let tau = self.cfg.grid_time(m);
            let u = self.treat_input(tape, bound, tau - self.cfg.t_star, treatment)?;
            let drift_in = tape.concat(&[h, u])?;
            let f = mlp_forward(tape, &self.drift, bound, prefix::DRIFT, drift_in)?;
            let sq = tape.square(f);
            drift_sq.push(tape.sum(sq)?);
            let step = tape.scale(f, dtau);
            h = tape.add(h, step)?;
            if noise_scale != 0.0 {
                let kick: Vec<f64> = noise.draws[m].iter().map(|x| noise_scale * x).collect();
                let kick_t = tape.vector(&kick);
                h = tape.add(h, kick_t)?;
            }
            if tape.value(h).iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteState { step: m });
            }
            states.push(h);
        }
        Ok(TapedPath {
            states,
            drift_sq,
            dtau,
        })
    }

    /// Nearest grid index for an evaluation time.
    fn grid_index(&self, t: f64) -> Result<usize, ModelError> {
        let (lo, hi) = (self.cfg.t_star, self.cfg.horizon);
        if t < lo - 1e-9 || t > hi + 1e-9 {
            return Err(ModelError::TimeOutOfRange { t, lo, hi });
        }
        let n = self.cfg.n_steps();
        let idx = ((t - lo) / (hi - lo) * n as f64).round() as usize;
        Ok(idx.min(n))
    }

    /// Applies the emission net at the grid state nearest each evaluation
    /// time; the grid is chosen fine enough that nearest-neighbor lookup
    /// stays within one step of the requested time.
    pub fn decode_taped(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        path: &TapedPath,
        eval_times: &[f64],
    ) -> Result<Vec<Tensor>, ModelError> {
        if self.cfg.learnable_std {
            return Err(ModelError::LearnableStdEnabled);
        }
        let mut out = Vec::with_capacity(eval_times.len());
        for &t in eval_times {
            let idx = self.grid_index(t)?;
            let mu = mlp_forward(tape, &self.emission, bound, prefix::EMISSION, path.states[idx])?;
            out.push(mu);
        }
        Ok(out)
    }

    /// Emission with a learned positive scale: the net's doubled output is
    /// split into a mean and `softplus(raw) + 1e-3`.
    pub fn decode_with_std_taped(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        path: &TapedPath,
        eval_times: &[f64],
    ) -> Result<Vec<(Tensor, Tensor)>, ModelError> {
        if !self.cfg.learnable_std {
            return Err(ModelError::LearnableStdDisabled);
        }
        let d = self.cfg.outcome_dim;
        let floor = vec![1e-3; d];
        let mut out = Vec::with_capacity(eval_times.len());
        for &t in eval_times {
            let idx = self.grid_index(t)?;
            let both = mlp_forward(tape, &self.emission, bound, prefix::EMISSION, path.states[idx])?;
            let mu = tape.slice(both, 0, d)?;
            let raw = tape.slice(both, d, d)?;
            let sp = tape.softplus_t(raw);
            let floor_t = tape.vector(&floor);
            let sigma = tape.add(sp, floor_t)?;
            out.push((mu, sigma));
        }
        Ok(out)
    }

    /// Value-level path sampling on a private tape; keeps the noise draws so
    /// any sample is reproducible in isolation.
    pub fn sample_path(
        &self,
        store: &ParamStore,
        h_tstar: &[f64],
        treatment: u8,
        noise: PathNoise,
    ) -> Result<LatentPath, ModelError> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.leaf(h_tstar, Shape::Vector(self.cfg.latent_dim))?;
        let path = self.sample_path_taped(&mut tape, &bound, h0, treatment, &noise)?;
        let times: Vec<f64> = (0..=self.cfg.n_steps()).map(|m| self.cfg.grid_time(m)).collect();
        let states = path.states.iter().map(|t| tape.value(*t).to_vec()).collect();
        let kl_integrand = if self.cfg.sigma_sde > 0.0 {
            let inv_var = 1.0 / (self.cfg.sigma_sde * self.cfg.sigma_sde);
            path.drift_sq
                .iter()
                .map(|t| tape.value(*t)[0] * inv_var)
                .collect()
        } else {
            Vec::new()
        };
        Ok(LatentPath {
            times,
            states,
            kl_integrand,
            noise: noise.draws,
        })
    }

    /// Full prediction for one unit and arm: encode once, then `n_mc`
    /// independent path samples decoded to outcome means, each sample's
    /// noise derived from (master seed, episode, sample, step).
    pub fn predict_outcomes(
        &self,
        store: &ParamStore,
        history: &EncoderInput,
        treatment: u8,
        eval_times: &[f64],
        n_mc: usize,
        master_seed: u64,
        episode_id: u64,
    ) -> Result<OutcomePrediction, ModelError> {
        assert!(n_mc >= 1, "n_mc must be >= 1");
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = self.encode(&mut tape, &bound, history)?;
        let h0_values = tape.value(h0).to_vec();

        let n_steps = self.cfg.n_steps();
        let mut samples = Vec::with_capacity(n_mc);
        for s in 0..n_mc {
            tape.clear();
            let bound = store.bind(&mut tape);
            let h0 = tape.leaf(&h0_values, Shape::Vector(self.cfg.latent_dim))?;
            let noise = if self.cfg.sigma_sde > 0.0 {
                PathNoise::derive(master_seed, episode_id, s as u64, n_steps, self.cfg.latent_dim)
            } else {
                PathNoise::zeros(n_steps, self.cfg.latent_dim)
            };
            let path = self.sample_path_taped(&mut tape, &bound, h0, treatment, &noise)?;
            let mus: Vec<Vec<f64>> = if self.cfg.learnable_std {
                self.decode_with_std_taped(&mut tape, &bound, &path, eval_times)?
                    .iter()
                    .map(|(mu, _)| tape.value(*mu).to_vec())
                    .collect()
            } else {
                self.decode_taped(&mut tape, &bound, &path, eval_times)?
                    .iter()
                    .map(|mu| tape.value(*mu).to_vec())
                    .collect()
            };
            samples.push(mus);
        }
        Ok(OutcomePrediction::from_samples(eval_times.to_vec(), samples))
    }
}

/// Pre-treatment history prepared for the encoder: strictly increasing
/// times, standardized observation vectors, presence masks.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub masks: Vec<f64>,
}

/// Taped Euler-Maruyama rollout.
pub struct TapedPath {
    /// Latent state at each grid time (n_steps + 1 entries).
    pub states: Vec<Tensor>,
    /// Squared drift norm recorded at each step (n_steps entries).
    pub drift_sq: Vec<Tensor>,
    /// Realized grid step.
    pub dtau: f64,
}

/// One Monte-Carlo realization of the latent path with the divergence
/// integrand and the noise that produced it.
#[derive(Clone, Debug)]
pub struct LatentPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// ||drift||^2 / sigma_sde^2 per step; empty when sigma_sde = 0, where
    /// the path divergence is undefined.
    pub kl_integrand: Vec<f64>,
    pub noise: Vec<Vec<f64>>,
}

/// Standard-normal kicks for one path, derived per step so any draw is
/// reproducible from (master seed, episode, sample, step).
#[derive(Clone, Debug)]
pub struct PathNoise {
    pub draws: Vec<Vec<f64>>,
}

impl PathNoise {
    pub fn derive(master_seed: u64, episode_id: u64, sample_idx: u64, n_steps: usize, dim: usize) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let draws = (0..n_steps as u64)
            .map(|step| {
                let mut rng =
                    util::rng_from(master_seed, &[salt::PATH, episode_id, sample_idx, step]);
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .collect();
        PathNoise { draws }
    }

    pub fn zeros(n_steps: usize, dim: usize) -> Self {
        PathNoise {
            draws: vec![vec![0.0; dim]; n_steps],
        }
    }

    pub fn explicit(draws: Vec<Vec<f64>>) -> Self {
        PathNoise { draws }
    }
}

/// Monte-Carlo summary of decoded outcome means for one unit and arm.
#[derive(Clone, Debug)]
pub struct OutcomePrediction {
    pub eval_times: Vec<f64>,
    /// Per-sample decoded means: `samples[s][time][dim]`.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// Mean over samples per time and dimension.
    pub mean: Vec<Vec<f64>>,
    /// Sample standard deviation (n-1 denominator; zero for one sample).
    pub std: Vec<Vec<f64>>,
}

impl OutcomePrediction {
    pub fn from_samples(eval_times: Vec<f64>, samples: Vec<Vec<Vec<f64>>>) -> Self {
        let n = samples.len();
        let n_times = eval_times.len();
        let dim = samples[0].first().map_or(0, |v| v.len());
        let mut mean = vec![vec![0.0; dim]; n_times];
        let mut std = vec![vec![0.0; dim]; n_times];
        // statistics shifted around the first sample: exact zeros when all
        // samples coincide (e.g. a deterministic latent ODE)
        for t in 0..n_times {
            for d in 0..dim {
                let base = samples[0][t][d];
                let shifted_sum: f64 = samples.iter().map(|s| s[t][d] - base).sum();
                let shifted_mean = shifted_sum / n as f64;
                mean[t][d] = base + shifted_mean;
                if n > 1 {
                    let ss: f64 = samples
                        .iter()
                        .map(|s| {
                            let c = (s[t][d] - base) - shifted_mean;
                            c * c
                        })
                        .sum();
                    std[t][d] = (ss / (n - 1) as f64).sqrt();
                }
            }
        }
        OutcomePrediction {
            eval_times,
            samples,
            mean,
            std,
        }
    }

    pub fn n_mc(&self) -> usize {
        self.samples.len()
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// Everything a checkpoint header carries besides the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelConfig,
    /// Standardization of the dataset the model was trained on.
    pub standardization: crate::sim::Standardization,
    pub dataset_kind: crate::sim::DatasetKind,
    pub dataset_config_hash: String,
}

pub fn save_model(
    path: &std::path::Path,
    header: &CheckpointHeader,
    store: &ParamStore,
) -> Result<(), nets::CheckpointError> {
    let value = serde_json::to_value(header)?;
    nets::save_checkpoint(path, &value, store)
}

pub fn load_model(
    path: &std::path::Path,
) -> Result<(CheckpointHeader, CfOde, ParamStore), Box<dyn std::error::Error + Send + Sync>> {
    let (value, store) = nets::load_checkpoint(path)?;
    let header: CheckpointHeader = serde_json::from_value(value)?;
    let model = CfOde::new(header.model.clone())?;
    Ok((header, model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            obs_dim: 1,
            outcome_dim: 1,
            latent_dim: 4,
            treat_dim: 2,
            hidden_layers: 2,
            sigma_sde: 0.1,
            sigma_y: 0.05,
            delta_tau: 0.1,
            t_star: 5.0,
            horizon: 15.0,
            learnable_std: false,
        }
    }

    fn tiny_history() -> EncoderInput {
        EncoderInput {
            times: vec![0.5, 1.5, 3.0, 4.5],
            values: vec![vec![0.3], vec![-0.2], vec![0.8], vec![0.1]],
            masks: vec![1.0; 4],
        }
    }

    fn zero_weights(store: &mut ParamStore, prefix: &str) {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(|s| s.to_string())
            .collect();
        for n in names {
            store.values_mut(&n).unwrap().fill(0.0);
        }
    }

    #[test]
    fn zero_weight_encoder_yields_zero_state() {
        let model = CfOde::new(tiny_config()).unwrap();
        let mut store = model.init_store(1).unwrap();
        zero_weights(&mut store, "encoder");
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h = model.encode(&mut tape, &bound, &tiny_history()).unwrap();
        assert_eq!(tape.value(h), &[0.0; 4]);
    }

    #[test]
    fn encoder_rejects_bad_histories() {
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(1).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let empty = EncoderInput {
            times: vec![],
            values: vec![],
            masks: vec![],
        };
        assert!(matches!(
            model.encode(&mut tape, &bound, &empty),
            Err(ModelError::EmptyHistory)
        ));
        let mut shuffled = tiny_history();
        shuffled.times.swap(1, 2);
        assert!(matches!(
            model.encode(&mut tape, &bound, &shuffled),
            Err(ModelError::NonIncreasingTimes(_))
        ));
    }

    #[test]
    fn encoder_depends_on_observation_count() {
        // feeding the same observation twice with zero gap differs from
        // feeding it once: the recurrence is count-sensitive
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(3).unwrap();
        let once = EncoderInput {
            times: vec![1.0],
            values: vec![vec![0.7]],
            masks: vec![1.0],
        };
        let twice = EncoderInput {
            times: vec![1.0, 1.0 + 1e-12],
            values: vec![vec![0.7], vec![0.7]],
            masks: vec![1.0, 1.0],
        };
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let a = model.encode(&mut tape, &bound, &once).unwrap();
        let b = model.encode(&mut tape, &bound, &twice).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn zero_drift_zero_noise_keeps_state_constant() {
        let mut cfg = tiny_config();
        cfg.sigma_sde = 0.0;
        let model = CfOde::new(cfg).unwrap();
        let mut store = model.init_store(1).unwrap();
        zero_weights(&mut store, "drift");
        let h0 = vec![0.3, -0.7, 0.2, 0.9];
        let noise = PathNoise::zeros(model.cfg.n_steps(), 4);
        let path = model.sample_path(&store, &h0, 1, noise).unwrap();
        for s in &path.states {
            assert_eq!(s, &h0);
        }
        assert!(path.kl_integrand.is_empty());
    }

    #[test]
    fn pure_diffusion_matches_brownian_variance_law() {
        // zero drift, sigma = s: Var[h_i(t)] ~ s^2 (t - t*) across paths
        let mut cfg = tiny_config();
        cfg.sigma_sde = 0.3;
        cfg.latent_dim = 2;
        let model = CfOde::new(cfg).unwrap();
        let mut store = model.init_store(2).unwrap();
        zero_weights(&mut store, "drift");
        let n_paths = 10_000;
        let n_steps = model.cfg.n_steps();
        // variance at the horizon, first coordinate
        let mut sum_sq = 0.0;
        for p in 0..n_paths {
            let noise = PathNoise::derive(99, 0, p as u64, n_steps, 2);
            let path = model.sample_path(&store, &[0.0, 0.0], 0, noise).unwrap();
            let x = path.states.last().unwrap()[0];
            sum_sq += x * x;
        }
        let var = sum_sq / n_paths as f64;
        let expect = 0.3 * 0.3 * (model.cfg.horizon - model.cfg.t_star);
        assert!(
            (var - expect).abs() / expect < 0.05,
            "var {var} vs {expect}"
        );
    }

    #[test]
    fn same_noise_seed_reproduces_paths_bitwise() {
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(5).unwrap();
        let h0 = vec![0.1, 0.2, -0.3, 0.4];
        let n = model.cfg.n_steps();
        let a = model
            .sample_path(&store, &h0, 1, PathNoise::derive(7, 3, 0, n, 4))
            .unwrap();
        let b = model
            .sample_path(&store, &h0, 1, PathNoise::derive(7, 3, 0, n, 4))
            .unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            for (xa, xb) in sa.iter().zip(sb) {
                assert_eq!(xa.to_bits(), xb.to_bits());
            }
        }
    }

    #[test]
    fn zero_weight_emission_decodes_to_zero() {
        let model = CfOde::new(tiny_config()).unwrap();
        let mut store = model.init_store(1).unwrap();
        zero_weights(&mut store, "emission");
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.vector(&[0.5, 0.5, 0.5, 0.5]);
        let noise = PathNoise::zeros(model.cfg.n_steps(), 4);
        let path = model
            .sample_path_taped(&mut tape, &bound, h0, 0, &noise)
            .unwrap();
        let mus = model
            .decode_taped(&mut tape, &bound, &path, &[5.0, 10.0, 15.0])
            .unwrap();
        for mu in mus {
            assert_eq!(tape.value(mu), &[0.0]);
        }
    }

    #[test]
    fn identity_emission_reads_latent_coordinate() {
        // emission with one hidden layer can't be an exact identity, so wire
        // the net by hand: hidden tanh layer ~ identity for small inputs is
        // not exact; instead check the on-grid lookup by comparing against a
        // manual forward of the same emission net at the grid state
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(9).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.vector(&[0.2, -0.1, 0.4, 0.0]);
        let noise = PathNoise::derive(1, 1, 1, model.cfg.n_steps(), 4);
        let path = model
            .sample_path_taped(&mut tape, &bound, h0, 1, &noise)
            .unwrap();
        // eval time exactly on grid point 37
        let t = model.cfg.grid_time(37);
        let mu = model.decode_taped(&mut tape, &bound, &path, &[t]).unwrap()[0];
        let direct = mlp_forward(&mut tape, &model.emission, &bound, "emission", path.states[37]).unwrap();
        assert_eq!(tape.value(mu), tape.value(direct));
    }

    #[test]
    fn decode_rejects_out_of_range_times() {
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(1).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.vector(&[0.0; 4]);
        let noise = PathNoise::zeros(model.cfg.n_steps(), 4);
        let path = model
            .sample_path_taped(&mut tape, &bound, h0, 0, &noise)
            .unwrap();
        assert!(matches!(
            model.decode_taped(&mut tape, &bound, &path, &[16.0]),
            Err(ModelError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            model.decode_taped(&mut tape, &bound, &path, &[4.0]),
            Err(ModelError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn single_sample_and_deterministic_models_have_zero_spread() {
        let history = tiny_history();
        let eval_times = [5.0, 7.5, 10.0];
        // n_mc = 1
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(4).unwrap();
        let p = model
            .predict_outcomes(&store, &history, 1, &eval_times, 1, 11, 0)
            .unwrap();
        assert!(p.std.iter().all(|row| row.iter().all(|&s| s == 0.0)));
        // sigma_sde = 0 with many samples
        let mut cfg = tiny_config();
        cfg.sigma_sde = 0.0;
        let model = CfOde::new(cfg).unwrap();
        let store = model.init_store(4).unwrap();
        let p = model
            .predict_outcomes(&store, &history, 1, &eval_times, 10, 11, 0)
            .unwrap();
        assert!(p.std.iter().all(|row| row.iter().all(|&s| s == 0.0)));
    }

    #[test]
    fn treatment_label_only_acts_through_treatment_net() {
        // zeroing the treatment net makes both arms identical paths
        let model = CfOde::new(tiny_config()).unwrap();
        let mut store = model.init_store(6).unwrap();
        zero_weights(&mut store, "treat");
        let h0 = vec![0.3, 0.1, -0.2, 0.5];
        let n = model.cfg.n_steps();
        let a = model
            .sample_path(&store, &h0, 0, PathNoise::derive(3, 0, 0, n, 4))
            .unwrap();
        let b = model
            .sample_path(&store, &h0, 1, PathNoise::derive(3, 0, 0, n, 4))
            .unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn learnable_std_gates_both_decoders() {
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(1).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.vector(&[0.0; 4]);
        let noise = PathNoise::zeros(model.cfg.n_steps(), 4);
        let path = model
            .sample_path_taped(&mut tape, &bound, h0, 0, &noise)
            .unwrap();
        assert!(matches!(
            model.decode_with_std_taped(&mut tape, &bound, &path, &[6.0]),
            Err(ModelError::LearnableStdDisabled)
        ));

        let mut cfg = tiny_config();
        cfg.learnable_std = true;
        let model2 = CfOde::new(cfg).unwrap();
        let mut store2 = model2.init_store(1).unwrap();
        zero_weights(&mut store2, "emission");
        let mut tape2 = Tape::new();
        let bound2 = store2.bind(&mut tape2);
        let h0 = tape2.vector(&[0.4; 4]);
        let noise = PathNoise::zeros(model2.cfg.n_steps(), 4);
        let path2 = model2
            .sample_path_taped(&mut tape2, &bound2, h0, 0, &noise)
            .unwrap();
        assert!(matches!(
            model2.decode_taped(&mut tape2, &bound2, &path2, &[6.0]),
            Err(ModelError::LearnableStdEnabled)
        ));
        let pairs = model2
            .decode_with_std_taped(&mut tape2, &bound2, &path2, &[6.0, 9.0])
            .unwrap();
        for (_, sigma) in pairs {
            // zero raw output: softplus(0) + 1e-3 = ln 2 + 1e-3
            let expect = 2.0f64.ln() + 1e-3;
            for &s in tape2.value(sigma) {
                assert!((s - expect).abs() < 1e-12);
                assert!((s - 0.694).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn halving_grid_step_converges_first_order() {
        // deterministic rollout: Euler error vs a reference at dtau/64 should
        // roughly halve when the step halves
        let mut cfg = tiny_config();
        cfg.sigma_sde = 0.0;
        let eval_times: Vec<f64> = (0..=10).map(|i| 5.0 + i as f64).collect();
        let run = |dtau: f64| -> Vec<f64> {
            let mut cfg = cfg.clone();
            cfg.delta_tau = dtau;
            let model = CfOde::new(cfg).unwrap();
            let store = model.init_store(13).unwrap();
            let p = model
                .predict_outcomes(&store, &tiny_history(), 1, &eval_times, 1, 0, 0)
                .unwrap();
            p.mean.iter().map(|v| v[0]).collect()
        };
        let reference = run(0.1 / 64.0);
        let err = |xs: &[f64]| -> f64 {
            xs.iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(&run(0.1));
        let e2 = err(&run(0.05));
        let ratio = e1 / e2;
        assert!(
            (1.5..=2.5).contains(&ratio),
            "convergence ratio {ratio} (e1 {e1}, e2 {e2})"
        );
    }

    #[test]
    fn doubling_mc_samples_moves_means_within_monte_carlo_error() {
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(21).unwrap();
        let eval_times: Vec<f64> = (0..=20).map(|i| 5.0 + 0.5 * i as f64).collect();
        let p50 = model
            .predict_outcomes(&store, &tiny_history(), 1, &eval_times, 50, 77, 0)
            .unwrap();
        let p100 = model
            .predict_outcomes(&store, &tiny_history(), 1, &eval_times, 100, 78, 0)
            .unwrap();
        let mut within = 0;
        let mut total = 0;
        for t in 0..eval_times.len() {
            let se = (p50.std[t][0] * p50.std[t][0] / 50.0
                + p100.std[t][0] * p100.std[t][0] / 100.0)
                .sqrt();
            total += 1;
            if (p50.mean[t][0] - p100.mean[t][0]).abs() <= 2.0 * se.max(1e-12) {
                within += 1;
            }
        }
        assert!(
            within as f64 >= 0.95 * total as f64,
            "only {within}/{total} within 2 MC standard errors"
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = CfOde::new(tiny_config()).unwrap();
        let store = model.init_store(31).unwrap();
        let header = CheckpointHeader {
            format: "cfode-model".into(),
            model: model.cfg.clone(),
            standardization: crate::sim::Standardization {
                mean: vec![0.0],
                std: vec![1.0],
            },
            dataset_kind: crate::sim::DatasetKind::Oscillator,
            dataset_config_hash: "deadbeef".into(),
        };
        let path = dir.path().join("model.ckpt");
        save_model(&path, &header, &store).unwrap();
        let (header2, model2, store2) = load_model(&path).unwrap();
        assert_eq!(header2, header);
        let eval_times = [5.0, 9.0, 13.0];
        let a = model
            .predict_outcomes(&store, &tiny_history(), 1, &eval_times, 5, 3, 2)
            .unwrap();
        let b = model2
            .predict_outcomes(&store2, &tiny_history(), 1, &eval_times, 5, 3, 2)
            .unwrap();
        for (ra, rb) in a.mean.iter().zip(&b.mean) {
            for (xa, xb) in ra.iter().zip(rb) {
                assert_eq!(xa.to_bits(), xb.to_bits());
            }
        }
    }
}
