//! End-to-end optimization of the variational objective: Monte-Carlo
//! Gaussian log-likelihood of the factual post-treatment observations minus
//! a scaled path-space KL penalty, backpropagated through the unrolled
//! stochastic solver. Includes minibatch Adam training with validation-based
//! early stopping and a finite-difference gradient gate on a frozen-noise
//! miniature instance.
//!
//! Only factual arms ever contribute to the loss; counterfactual ground
//! truth stays invisible to training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Shape, Tape, Tensor};
use crate::model::{CfOde, CfOdeError, EncoderInput, LatentPath, ModelConfig, PathNoise};
use crate::nets::{AdamConfig, BoundParams, NetError, ParamStore};
use crate::sim::{Dataset, DatasetKind, Standardization};
use crate::util::{self, salt};

pub use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("dataset has an empty {0} split")]
    EmptySplit(&'static str),
    #[error("prediction and factual record have mismatched times at index {0}")]
    TimeMisalignment(usize),
    #[error("path divergence undefined: sigma_sde = 0 (train with kl_scale = 0 instead)")]
    KlUndefined,
    #[error("gradient check requires frozen noise")]
    UnfrozenNoise,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint retained")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        last_good: Box<TrainResult>,
    },
    #[error(transparent)]
    Model(#[from] CfOdeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

// `ModelError` is the canonical name used across this crate; re-exported
// above so both spellings resolve.
type _Check = ModelError;

/// Decomposed objective for one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct ElboTerms {
    /// Mean per-observation Gaussian log-density, averaged over Monte-Carlo
    /// samples then episodes.
    pub loglik: f64,
    /// Path divergence (Riemann sum), averaged over samples then episodes.
    pub kl: f64,
    /// `loglik - kl_scale * kl`.
    pub elbo: f64,
}

/// Optimization settings and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Monte-Carlo paths per episode per training step.
    pub n_mc: usize,
    pub sigma_sde: f64,
    pub sigma_y: f64,
    pub kl_scale: f64,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
    /// Latent width; 0 picks the dataset default.
    pub latent_dim: usize,
    pub treat_dim: usize,
    pub hidden_layers: usize,
    /// Euler grid step; 0 picks (horizon - t_star) / 100.
    pub delta_tau: f64,
    /// Turns off diffusion: a deterministic latent ODE trained by maximum
    /// likelihood (kl_scale is forced to 0).
    pub no_diffusion: bool,
    /// Emission predicts a per-point scale as well as a mean.
    pub learnable_std: bool,
    /// Monte-Carlo samples for the per-epoch validation score.
    pub val_n_mc: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            lr: 1e-3,
            n_mc: 3,
            sigma_sde: 0.1,
            sigma_y: 0.05,
            kl_scale: 1e-4,
            patience: 10,
            seed: 0,
            latent_dim: 0,
            treat_dim: 4,
            hidden_layers: 2,
            delta_tau: 0.0,
            no_diffusion: false,
            learnable_std: false,
            val_n_mc: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_mc < 1 {
            return Err(TrainError::InvalidConfig("n_mc must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Resolves dataset-dependent defaults into a concrete model config.
    pub fn model_config(&self, kind: DatasetKind) -> ModelConfig {
        let t_star = kind.t_star();
        let horizon = kind.horizon();
        ModelConfig {
            obs_dim: kind.obs_dim(),
            outcome_dim: kind.obs_dim(),
            latent_dim: if self.latent_dim == 0 {
                kind.default_latent_dim()
            } else {
                self.latent_dim
            },
            treat_dim: self.treat_dim,
            hidden_layers: self.hidden_layers,
            sigma_sde: if self.no_diffusion { 0.0 } else { self.sigma_sde },
            sigma_y: self.sigma_y,
            delta_tau: if self.delta_tau > 0.0 {
                self.delta_tau
            } else {
                (horizon - t_star) / 100.0
            },
            t_star,
            horizon,
            learnable_std: self.learnable_std,
        }
    }

    pub fn effective_kl_scale(&self) -> f64 {
        if self.no_diffusion {
            0.0
        } else {
            self.kl_scale
        }
    }
}

/// An episode preprocessed for the model: standardized values, encoder
/// history split from the post-treatment record.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub id: u64,
    pub treatment: u8,
    pub propensity: f64,
    pub history: EncoderInput,
    /// Post-treatment observation times (the dense grid).
    pub post_times: Vec<f64>,
    /// Standardized noisy factual observations at `post_times`.
    pub post_values: Vec<Vec<f64>>,
    pub eval_times: Vec<f64>,
    /// Standardized noise-free potential outcomes on `eval_times`.
    pub outcome_0: Vec<Vec<f64>>,
    pub outcome_1: Vec<Vec<f64>>,
    pub sim_params: BTreeMap<String, f64>,
}

impl PreparedEpisode {
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

/// A standardized dataset with split indices resolved.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub kind: DatasetKind,
    pub t_star: f64,
    pub horizon: f64,
    pub obs_dim: usize,
    pub interest_dim: usize,
    pub decision_time: f64,
    pub standardization: Standardization,
    pub dataset_config_hash: String,
    pub episodes: Vec<PreparedEpisode>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl PreparedDataset {
    /// Standardizes every episode with the manifest statistics and resolves
    /// split membership to indices.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let st = &ds.manifest.standardization;
        let kind = ds.manifest.config.kind;
        let t_star = ds.manifest.t_star;
        let episodes: Vec<PreparedEpisode> = ds
            .episodes
            .iter()
            .map(|e| {
                let n_pre = e.n_pre_obs();
                let history = EncoderInput {
                    times: e.obs_times[..n_pre].to_vec(),
                    values: e.obs_values[..n_pre].iter().map(|v| st.apply(v)).collect(),
                    masks: vec![1.0; n_pre],
                };
                PreparedEpisode {
                    id: e.id,
                    treatment: e.treatment,
                    propensity: e.propensity,
                    history,
                    post_times: e.obs_times[n_pre..].to_vec(),
                    post_values: e.obs_values[n_pre..].iter().map(|v| st.apply(v)).collect(),
                    eval_times: e.eval_times.clone(),
                    outcome_0: e.outcome_0.iter().map(|v| st.apply(v)).collect(),
                    outcome_1: e.outcome_1.iter().map(|v| st.apply(v)).collect(),
                    sim_params: e.sim_params.clone(),
                }
            })
            .collect();
        let resolve = |ids: &[u64]| -> Vec<usize> {
            episodes
                .iter()
                .enumerate()
                .filter(|(_, e)| ids.binary_search(&e.id).is_ok())
                .map(|(i, _)| i)
                .collect()
        };
        PreparedDataset {
            kind,
            t_star,
            horizon: ds.manifest.horizon,
            obs_dim: ds.manifest.obs_dim,
            interest_dim: kind.interest_dim(),
            decision_time: t_star + kind.default_decision_offset(),
            standardization: st.clone(),
            dataset_config_hash: ds.manifest.config_hash.clone(),
            train_idx: resolve(&ds.manifest.split.train),
            val_idx: resolve(&ds.manifest.split.val),
            test_idx: resolve(&ds.manifest.split.test),
            episodes,
        }
    }

    /// Keeps only the listed episode indices in the training split; used for
    /// held-out-region experiments.
    pub fn retain_train(&mut self, keep: &dyn Fn(&PreparedEpisode) -> bool) {
        self.train_idx = self
            .train_idx
            .iter()
            .copied()
            .filter(|&i| keep(&self.episodes[i]))
            .collect();
    }
}

/// Mean per-observation Gaussian log-density of the factual record under
/// per-sample predicted means with a fixed scale: summed over observations,
/// averaged over Monte-Carlo samples, then divided by the observation count.
pub fn gaussian_loglik(
    pred_times: &[f64],
    pred_means_per_sample: &[Vec<Vec<f64>>],
    sigma_y: f64,
    obs_times: &[f64],
    obs_values: &[Vec<f64>],
) -> Result<f64, TrainError> {
    check_alignment(pred_times, obs_times)?;
    let n_samples = pred_means_per_sample.len();
    let dim = obs_values.first().map_or(0, |v| v.len());
    let n_points = obs_values.len() * dim;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * sigma_y * sigma_y).ln();
    let inv_two_var = 1.0 / (2.0 * sigma_y * sigma_y);
    let mut total = 0.0;
    for sample in pred_means_per_sample {
        for (t, obs) in obs_values.iter().enumerate() {
            for d in 0..dim {
                let r = obs[d] - sample[t][d];
                total += norm - r * r * inv_two_var;
            }
        }
    }
    Ok(total / n_samples as f64 / n_points as f64)
}

fn check_alignment(pred_times: &[f64], obs_times: &[f64]) -> Result<(), TrainError> {
    if pred_times.len() != obs_times.len() {
        return Err(TrainError::TimeMisalignment(
            pred_times.len().min(obs_times.len()),
        ));
    }
    for (i, (a, b)) in pred_times.iter().zip(obs_times).enumerate() {
        if (a - b).abs() > 1e-9 {
            return Err(TrainError::TimeMisalignment(i));
        }
    }
    Ok(())
}

/// Riemann-sum path divergence, averaged over Monte-Carlo sample paths.
/// Undefined for a deterministic model (empty integrands).
pub fn path_kl(paths: &[LatentPath], delta_tau: f64) -> Result<f64, TrainError> {
    if paths.iter().any(|p| p.kl_integrand.is_empty()) {
        return Err(TrainError::KlUndefined);
    }
    let total: f64 = paths
        .iter()
        .map(|p| delta_tau * p.kl_integrand.iter().sum::<f64>())
        .sum();
    Ok(total / paths.len() as f64)
}

/// Per-epoch record of the training-curve log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loglik: f64,
    pub train_kl: f64,
    pub val_rmse: f64,
    pub wall_secs: f64,
}

/// Best-validation parameters plus the model and curve that produced them.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub store: ParamStore,
    pub model_cfg: ModelConfig,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub stopped_early: bool,
}

struct BatchGraph {
    loglik: Tensor,
    kl: Option<Tensor>,
}

/// Builds the taped objective for one episode: encode, roll `n_mc` paths
/// under the factual arm, decode at the factual observation times, and
/// accumulate the log-density and divergence terms.
fn episode_graph(
    model: &CfOde,
    tape: &mut Tape,
    bound: &BoundParams,
    ep: &PreparedEpisode,
    cfg: &TrainConfig,
    sample_base: u64,
) -> Result<BatchGraph, TrainError> {
    let n_steps = model.cfg.n_steps();
    let dim = model.cfg.outcome_dim;
    let n_points = (ep.post_times.len() * dim) as f64;
    let h0 = model.encode(tape, bound, &ep.history)?;

    let y_flat: Vec<f64> = ep.post_values.iter().flatten().copied().collect();
    let y_const = tape.vector(&y_flat);

    let mut ll_terms = Vec::with_capacity(cfg.n_mc);
    let mut kl_terms = Vec::with_capacity(cfg.n_mc);
    for s in 0..cfg.n_mc {
        let noise = if model.cfg.sigma_sde > 0.0 {
            PathNoise::derive(cfg.seed, ep.id, sample_base + s as u64, n_steps, model.cfg.latent_dim)
        } else {
            PathNoise::zeros(n_steps, model.cfg.latent_dim)
        };
        let path = model.sample_path_taped(tape, bound, h0, ep.treatment, &noise)?;

        let ll = if model.cfg.learnable_std {
            let pairs = model.decode_with_std_taped(tape, bound, &path, &ep.post_times)?;
            let mus: Vec<Tensor> = pairs.iter().map(|(m, _)| *m).collect();
            let sigmas: Vec<Tensor> = pairs.iter().map(|(_, s)| *s).collect();
            let mu_cat = tape.concat(&mus)?;
            let sigma_cat = tape.concat(&sigmas)?;
            // sum over points of [-0.5 ln 2pi - ln sigma - (y - mu)^2 / (2 sigma^2)]
            let diff = tape.sub(y_const, mu_cat)?;
            let sq = tape.square(diff);
            let var = tape.square(sigma_cat);
            let inv_var = tape.recip(var);
            let weighted = tape.mul(sq, inv_var)?;
            let quad_sum = tape.sum(weighted)?;
            let quad = tape.scale(quad_sum, -0.5);
            let log_sigma = tape.ln(sigma_cat);
            let log_sigma_sum = tape.sum(log_sigma)?;
            let neg_log_sigma = tape.scale(log_sigma_sum, -1.0);
            let norm = tape.scalar(-0.5 * (2.0 * std::f64::consts::PI).ln() * n_points);
            let a = tape.add(quad, neg_log_sigma)?;
            tape.add(a, norm)?
        } else {
            let mus = model.decode_taped(tape, bound, &path, &ep.post_times)?;
            let mu_cat = tape.concat(&mus)?;
            let diff = tape.sub(y_const, mu_cat)?;
            let sq = tape.square(diff);
            let sq_sum = tape.sum(sq)?;
            let sigma = model.cfg.sigma_y;
            let quad = tape.scale(sq_sum, -1.0 / (2.0 * sigma * sigma));
            let norm = tape.scalar(-0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() * n_points);
            tape.add(quad, norm)?
        };
        ll_terms.push(ll);

        if model.cfg.sigma_sde > 0.0 {
            let mut acc = path.drift_sq[0];
            for t in &path.drift_sq[1..] {
                acc = tape.add(acc, *t)?;
            }
            let inv_var = 1.0 / (model.cfg.sigma_sde * model.cfg.sigma_sde);
            kl_terms.push(tape.scale(acc, path.dtau * inv_var));
        }
    }

    let mut ll_acc = ll_terms[0];
    for t in &ll_terms[1..] {
        ll_acc = tape.add(ll_acc, *t)?;
    }
    // averaged over samples, then over observation points
    let loglik = tape.scale(ll_acc, 1.0 / (cfg.n_mc as f64 * n_points));

    let kl = if kl_terms.is_empty() {
        None
    } else {
        let mut acc = kl_terms[0];
        for t in &kl_terms[1..] {
            acc = tape.add(acc, *t)?;
        }
        Some(tape.scale(acc, 1.0 / cfg.n_mc as f64))
    };
    Ok(BatchGraph { loglik, kl })
}

/// Factual validation RMSE of the predicted mean against the noisy factual
/// post-treatment record, with fixed per-episode noise so the score is a
/// deterministic function of the parameters.
fn validation_rmse(
    model: &CfOde,
    store: &ParamStore,
    ds: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut se = 0.0;
    let mut count = 0usize;
    let val_seed = util::derive_seed(cfg.seed, &[salt::VALIDATION]);
    for &i in &ds.val_idx {
        let ep = &ds.episodes[i];
        let pred = model.predict_outcomes(
            store,
            &ep.history,
            ep.treatment,
            &ep.post_times,
            cfg.val_n_mc,
            val_seed,
            ep.id,
        )?;
        for (t, obs) in ep.post_values.iter().enumerate() {
            for d in 0..obs.len() {
                let r = obs[d] - pred.mean[t][d];
                se += r * r;
                count += 1;
            }
        }
    }
    Ok((se / count.max(1) as f64).sqrt())
}

/// Minibatch training with per-epoch validation and early stopping. The
/// best-validation parameters are returned; a non-finite loss aborts with
/// diagnostics and the last good checkpoint.
pub fn train(ds: &PreparedDataset, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if ds.train_idx.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if ds.val_idx.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let model = CfOde::new(cfg.model_config(ds.kind))?;
    let mut store = model.init_store(cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let kl_scale = cfg.effective_kl_scale();

    let mut tape = Tape::new();
    let mut curve: Vec<EpochRecord> = Vec::new();
    let mut best_store = store.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let started = std::time::Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = ds.train_idx.clone();
        let mut shuffle_rng = util::rng_from(cfg.seed, &[salt::SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_ll = 0.0;
        let mut epoch_kl = 0.0;
        let mut n_batches = 0usize;
        // fresh noise per epoch: sample indices advance with the epoch
        let sample_base = (epoch * cfg.n_mc) as u64;

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            tape.clear();
            let bound = store.bind(&mut tape);
            let mut ll_terms = Vec::with_capacity(batch.len());
            let mut kl_terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let g = episode_graph(&model, &mut tape, &bound, &ds.episodes[i], cfg, sample_base)?;
                ll_terms.push(g.loglik);
                if let Some(k) = g.kl {
                    kl_terms.push(k);
                }
            }
            let mut ll = ll_terms[0];
            for t in &ll_terms[1..] {
                ll = tape.add(ll, *t)?;
            }
            let batch_ll = tape.scale(ll, 1.0 / batch.len() as f64);
            let batch_kl = if kl_terms.is_empty() {
                None
            } else {
                let mut k = kl_terms[0];
                for t in &kl_terms[1..] {
                    k = tape.add(k, *t)?;
                }
                Some(tape.scale(k, 1.0 / batch.len() as f64))
            };
            let elbo = match batch_kl {
                Some(k) if kl_scale != 0.0 => {
                    let pen = tape.scale(k, kl_scale);
                    tape.sub(batch_ll, pen)?
                }
                _ => batch_ll,
            };
            let loss = tape.scale(elbo, -1.0);
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    last_good: Box::new(TrainResult {
                        store: best_store,
                        model_cfg: model.cfg.clone(),
                        curve,
                        best_epoch,
                        best_val_rmse: best_val,
                        stopped_early: false,
                    }),
                });
            }
            epoch_ll += tape.value(batch_ll)[0];
            epoch_kl += batch_kl.map_or(0.0, |k| tape.value(k)[0]);
            n_batches += 1;

            let grads = tape.backward(loss)?;
            let grad_map = store.extract_grads(&grads, &bound);
            store.adam_step(&grad_map, &adam)?;
        }

        let val_rmse = validation_rmse(&model, &store, ds, cfg)?;
        curve.push(EpochRecord {
            epoch,
            train_loglik: epoch_ll / n_batches.max(1) as f64,
            train_kl: epoch_kl / n_batches.max(1) as f64,
            val_rmse,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        if val_rmse < best_val {
            best_val = val_rmse;
            best_epoch = epoch;
            best_store = store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainResult {
        store: best_store,
        model_cfg: model.cfg.clone(),
        curve,
        best_epoch,
        best_val_rmse: best_val,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// Gradient gate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Must be true: the objective is only differentiable-for-checking with
    /// the noise realization pinned.
    pub frozen_noise: bool,
    pub seed: u64,
    /// Central-difference step.
    pub fd_step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            frozen_noise: true,
            seed: 1234,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Max relative error per parameter group.
    pub per_group: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub note: Option<String>,
}

fn grad_check_model() -> (CfOde, PreparedEpisode, TrainConfig) {
    // miniature instance: latent 3, five solver steps, one episode
    let cfg = TrainConfig {
        latent_dim: 3,
        treat_dim: 2,
        hidden_layers: 2,
        n_mc: 2,
        sigma_sde: 0.2,
        sigma_y: 0.1,
        kl_scale: 0.5,
        delta_tau: 0.2,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig {
        obs_dim: 1,
        outcome_dim: 1,
        latent_dim: 3,
        treat_dim: 2,
        hidden_layers: 2,
        sigma_sde: 0.2,
        sigma_y: 0.1,
        delta_tau: 0.2,
        t_star: 1.0,
        horizon: 2.0,
        learnable_std: false,
    };
    let model = CfOde::new(model_cfg).unwrap();
    let ep = PreparedEpisode {
        id: 0,
        treatment: 1,
        propensity: 0.5,
        history: EncoderInput {
            times: vec![0.2, 0.5, 0.8],
            values: vec![vec![0.4], vec![-0.3], vec![0.9]],
            masks: vec![1.0; 3],
        },
        post_times: vec![1.2, 1.4, 1.6, 1.8, 2.0],
        post_values: vec![vec![0.5], vec![0.2], vec![-0.1], vec![0.0], vec![0.3]],
        eval_times: vec![],
        outcome_0: vec![],
        outcome_1: vec![],
        sim_params: BTreeMap::new(),
    };
    (model, ep, cfg)
}

fn elbo_value(
    model: &CfOde,
    store: &ParamStore,
    ep: &PreparedEpisode,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let g = episode_graph(model, &mut tape, &bound, ep, cfg, 0)?;
    let elbo = match g.kl {
        Some(k) => {
            let pen = tape.scale(k, cfg.effective_kl_scale());
            tape.sub(g.loglik, pen)?
        }
        None => g.loglik,
    };
    Ok(tape.value(elbo)[0])
}

/// Compares the backpropagated gradient of the objective against central
/// finite differences, coordinate by coordinate, under frozen noise.
/// Reports the max relative error per parameter group.
pub fn grad_check(gc: &GradCheckConfig) -> Result<GradCheckReport, TrainError> {
    if !gc.frozen_noise {
        return Err(TrainError::UnfrozenNoise);
    }
    let (model, ep, mut cfg) = grad_check_model();
    cfg.seed = gc.seed;
    let store = model.init_store(gc.seed)?;
    grad_check_store(&model, store, &ep, &cfg, gc.fd_step)
}

/// Gradient check against an explicit store; an empty store passes
/// trivially with a note.
pub fn grad_check_store(
    model: &CfOde,
    mut store: ParamStore,
    ep: &PreparedEpisode,
    cfg: &TrainConfig,
    fd_step: f64,
) -> Result<GradCheckReport, TrainError> {
    if store.is_empty() {
        return Ok(GradCheckReport {
            per_group: BTreeMap::new(),
            max_rel_err: 0.0,
            note: Some("no parameters to check".into()),
        });
    }

    // analytic gradient
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let g = episode_graph(model, &mut tape, &bound, ep, cfg, 0)?;
    let elbo = match g.kl {
        Some(k) => {
            let pen = tape.scale(k, cfg.effective_kl_scale());
            tape.sub(g.loglik, pen)?
        }
        None => g.loglik,
    };
    let grads = tape.backward(elbo)?;
    let analytic = store.extract_grads(&grads, &bound);

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut per_group: BTreeMap<String, f64> = BTreeMap::new();
    for name in &names {
        let n = store.shape(name)?.len();
        let group = name.split('.').next().unwrap_or(name).to_string();
        for i in 0..n {
            let orig = store.values(name)?[i];
            store.values_mut(name)?[i] = orig + fd_step;
            let plus = elbo_value(model, &store, ep, cfg)?;
            store.values_mut(name)?[i] = orig - fd_step;
            let minus = elbo_value(model, &store, ep, cfg)?;
            store.values_mut(name)?[i] = orig;
            let fd = (plus - minus) / (2.0 * fd_step);
            let a = analytic[name][i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            let rel = (a - fd).abs() / denom;
            let entry = per_group.entry(group.clone()).or_insert(0.0);
            *entry = entry.max(rel);
        }
    }
    let max_rel_err = per_group.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_group,
        max_rel_err,
        note: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, SimConfig};

    #[test]
    fn loglik_at_mode_is_normalization_only() {
        // y = mu everywhere, sigma = 1: per-point value -0.5 ln(2 pi)
        let times = vec![1.0, 2.0];
        let values = vec![vec![0.3, -0.2], vec![0.1, 0.0]];
        let samples = vec![values.clone(), values.clone()];
        let ll = gaussian_loglik(&times, &samples, 1.0, &times, &values).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ll - expect).abs() < 1e-12);
        assert!((ll + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn doubling_sigma_at_mode_costs_ln_two() {
        let times = vec![0.5];
        let values = vec![vec![1.0]];
        let samples = vec![values.clone()];
        let a = gaussian_loglik(&times, &samples, 0.3, &times, &values).unwrap();
        let b = gaussian_loglik(&times, &samples, 0.6, &times, &values).unwrap();
        assert!((a - b - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_closed_form_sum() {
        // random small case against an independent sum of density values
        let times = vec![1.0, 2.0, 3.0];
        let obs = vec![vec![0.5], vec![-0.7], vec![0.2]];
        let s1 = vec![vec![0.1], vec![-0.4], vec![0.4]];
        let s2 = vec![vec![0.7], vec![-1.0], vec![0.0]];
        let sigma = 0.25;
        let ll = gaussian_loglik(&times, &[s1.clone(), s2.clone()], sigma, &times, &obs).unwrap();
        let density = |y: f64, mu: f64| {
            (-((y - mu) * (y - mu)) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut expect = 0.0;
        for s in [&s1, &s2] {
            for t in 0..3 {
                expect += density(obs[t][0], s[t][0]).ln();
            }
        }
        expect /= 2.0 * 3.0;
        assert!((ll - expect).abs() < 1e-12, "{ll} vs {expect}");
    }

    #[test]
    fn loglik_rejects_time_misalignment() {
        let pred_times = vec![1.0, 2.0];
        let obs_times = vec![1.0, 2.5];
        let values = vec![vec![0.0], vec![0.0]];
        let samples = vec![values.clone()];
        assert!(matches!(
            gaussian_loglik(&pred_times, &samples, 1.0, &obs_times, &values),
            Err(TrainError::TimeMisalignment(1))
        ));
    }

    #[test]
    fn zero_drift_has_zero_divergence() {
        let path = LatentPath {
            times: vec![0.0, 0.1],
            states: vec![vec![0.0], vec![0.0]],
            kl_integrand: vec![0.0; 10],
            noise: vec![],
        };
        assert_eq!(path_kl(&[path], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn constant_drift_divergence_matches_integral() {
        // drift c, scale s over a horizon h: divergence = h ||c||^2 / s^2
        let (c, s, h) = ([0.7, -0.4], 0.3, 10.0);
        let n_steps = 100;
        let dtau = h / n_steps as f64;
        let c_sq = c[0] * c[0] + c[1] * c[1];
        let integrand = vec![c_sq / (s * s); n_steps];
        let path = LatentPath {
            times: vec![],
            states: vec![],
            kl_integrand: integrand,
            noise: vec![],
        };
        let kl = path_kl(&[path], dtau).unwrap();
        let expect = h * c_sq / (s * s);
        // constant integrand: the Riemann sum is exact up to one step of slack
        assert!((kl - expect).abs() <= dtau * c_sq / (s * s) + 1e-12);
    }

    #[test]
    fn divergence_undefined_without_diffusion() {
        let path = LatentPath {
            times: vec![],
            states: vec![],
            kl_integrand: vec![],
            noise: vec![],
        };
        assert!(matches!(
            path_kl(&[path], 0.1),
            Err(TrainError::KlUndefined)
        ));
    }

    #[test]
    fn taped_objective_matches_value_level_loglik() {
        // the taped batch graph and the value-level op agree on the same inputs
        let (model, ep, cfg) = grad_check_model();
        let store = model.init_store(5).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = episode_graph(&model, &mut tape, &bound, &ep, &cfg, 0).unwrap();
        let taped_ll = tape.value(g.loglik)[0];

        // reproduce the per-sample decoded means at the post times
        let mut tape2 = Tape::new();
        let bound2 = store.bind(&mut tape2);
        let h0 = model.encode(&mut tape2, &bound2, &ep.history).unwrap();
        let h0v = tape2.value(h0).to_vec();
        let mut samples = Vec::new();
        for s in 0..cfg.n_mc {
            let noise = PathNoise::derive(
                cfg.seed,
                ep.id,
                s as u64,
                model.cfg.n_steps(),
                model.cfg.latent_dim,
            );
            let mut t3 = Tape::new();
            let b3 = store.bind(&mut t3);
            let h0t = t3.leaf(&h0v, Shape::Vector(model.cfg.latent_dim)).unwrap();
            let path = model
                .sample_path_taped(&mut t3, &b3, h0t, ep.treatment, &noise)
                .unwrap();
            let mus = model
                .decode_taped(&mut t3, &b3, &path, &ep.post_times)
                .unwrap();
            samples.push(mus.iter().map(|m| t3.value(*m).to_vec()).collect::<Vec<_>>());
        }
        let value_ll = gaussian_loglik(
            &ep.post_times,
            &samples,
            model.cfg.sigma_y,
            &ep.post_times,
            &ep.post_values,
        )
        .unwrap();
        assert!(
            (taped_ll - value_ll).abs() < 1e-10,
            "{taped_ll} vs {value_ll}"
        );
    }

    #[test]
    fn divergence_has_no_emission_gradient() {
        // kl is a function of the drift path only
        let (model, ep, cfg) = grad_check_model();
        let store = model.init_store(8).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = episode_graph(&model, &mut tape, &bound, &ep, &cfg, 0).unwrap();
        let grads = tape.backward(g.kl.unwrap()).unwrap();
        let gm = store.extract_grads(&grads, &bound);
        for (name, g) in &gm {
            if name.starts_with("emission") {
                assert!(g.iter().all(|&x| x == 0.0), "{name} has divergence gradient");
            }
        }
        // sanity: the drift itself does get gradient
        assert!(gm["drift.w0"].iter().any(|&x| x != 0.0));
    }

    fn tiny_dataset(seed: u64) -> PreparedDataset {
        let cfg = SimConfig {
            n_episodes: 20,
            seed,
            gamma: 2.0,
            obs_count_mean: 6.0,
            eval_grid_dt: 0.5,
            ..SimConfig::new(DatasetKind::Oscillator)
        };
        PreparedDataset::from_dataset(&generate_dataset(&cfg).unwrap())
    }

    fn fast_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            n_mc: 2,
            val_n_mc: 2,
            latent_dim: 4,
            delta_tau: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let ds = tiny_dataset(3);
        let cfg = TrainConfig {
            lr: 0.0,
            ..fast_train_config()
        };
        let model = CfOde::new(cfg.model_config(ds.kind)).unwrap();
        let init = model.init_store(cfg.seed).unwrap();
        let result = train(&ds, &cfg).unwrap();
        for name in init.names() {
            let a = init.values(name).unwrap();
            let b = result.store.values(name).unwrap();
            for i in 0..a.len() {
                assert_eq!(a[i].to_bits(), b[i].to_bits(), "{name}[{i}] moved");
            }
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let ds = tiny_dataset(4);
        let cfg = fast_train_config();
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.curve.len(), b.curve.len());
        for (ra, rb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(ra.train_loglik.to_bits(), rb.train_loglik.to_bits());
            assert_eq!(ra.val_rmse.to_bits(), rb.val_rmse.to_bits());
        }
        for name in a.store.names() {
            assert_eq!(a.store.values(name).unwrap(), b.store.values(name).unwrap());
        }
    }

    #[test]
    fn fits_constant_outcomes_to_the_noise_floor() {
        // two episodes with constant outcomes: 200 steps should reach the
        // per-point log-density ceiling -0.5 ln(2 pi sigma_y^2) within 0.1
        let sigma_y = 0.1;
        let mk_ep = |id: u64, c: f64| PreparedEpisode {
            id,
            treatment: 0,
            propensity: 0.5,
            history: EncoderInput {
                times: vec![0.3, 0.6],
                values: vec![vec![c], vec![c]],
                masks: vec![1.0; 2],
            },
            post_times: (1..=5).map(|i| 1.0 + 0.2 * i as f64).collect(),
            post_values: vec![vec![c]; 5],
            eval_times: vec![],
            outcome_0: vec![],
            outcome_1: vec![],
            sim_params: BTreeMap::new(),
        };
        let model_cfg = ModelConfig {
            obs_dim: 1,
            outcome_dim: 1,
            latent_dim: 3,
            treat_dim: 2,
            hidden_layers: 2,
            sigma_sde: 0.0,
            sigma_y,
            delta_tau: 0.2,
            t_star: 1.0,
            horizon: 2.0,
            learnable_std: false,
        };
        let model = CfOde::new(model_cfg).unwrap();
        let mut store = model.init_store(2).unwrap();
        let cfg = TrainConfig {
            n_mc: 1,
            sigma_y,
            no_diffusion: true,
            lr: 0.02,
            seed: 2,
            ..TrainConfig::default()
        };
        let eps = [mk_ep(0, 0.25), mk_ep(1, -0.15)];
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut tape = Tape::new();
        let mut last_ll = f64::NEG_INFINITY;
        for _ in 0..200 {
            tape.clear();
            let bound = store.bind(&mut tape);
            let g0 = episode_graph(&model, &mut tape, &bound, &eps[0], &cfg, 0).unwrap();
            let g1 = episode_graph(&model, &mut tape, &bound, &eps[1], &cfg, 0).unwrap();
            let s = tape.add(g0.loglik, g1.loglik).unwrap();
            let ll = tape.scale(s, 0.5);
            let loss = tape.scale(ll, -1.0);
            last_ll = tape.value(ll)[0];
            let grads = tape.backward(loss).unwrap();
            let gm = store.extract_grads(&grads, &bound);
            store.adam_step(&gm, &adam).unwrap();
        }
        let floor = -0.5 * (2.0 * std::f64::consts::PI * sigma_y * sigma_y).ln();
        assert!(
            last_ll > floor - 0.1,
            "loglik {last_ll} vs noise floor {floor}"
        );
    }

    #[test]
    fn nan_loss_aborts_with_last_good_checkpoint() {
        let ds = tiny_dataset(5);
        let cfg = TrainConfig {
            lr: 1e18,
            epochs: 30,
            ..fast_train_config()
        };
        match train(&ds, &cfg) {
            Err(TrainError::NonFiniteLoss { last_good, .. }) => {
                assert!(last_good.store.all_finite());
            }
            Ok(r) => {
                // an absurd learning rate may still survive by luck on a tiny
                // run; accept but require finite parameters
                assert!(r.store.all_finite());
            }
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn gradient_check_passes_on_frozen_noise() {
        let report = grad_check(&GradCheckConfig::default()).unwrap();
        assert!(report.note.is_none());
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} (groups: {:?})",
            report.max_rel_err,
            report.per_group
        );
        // all four parameter groups covered
        for g in ["encoder", "drift", "treat", "emission"] {
            assert!(report.per_group.contains_key(g), "missing group {g}");
        }
    }

    #[test]
    fn gradient_check_refuses_unfrozen_noise() {
        let gc = GradCheckConfig {
            frozen_noise: false,
            ..GradCheckConfig::default()
        };
        assert!(matches!(grad_check(&gc), Err(TrainError::UnfrozenNoise)));
    }

    #[test]
    fn gradient_check_of_empty_store_passes_with_note() {
        let (model, ep, cfg) = grad_check_model();
        let report =
            grad_check_store(&model, ParamStore::new(), &ep, &cfg, 1e-5).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.note.is_some());
    }

    #[test]
    fn no_diffusion_objective_is_pure_likelihood() {
        // kl_scale = 0 and sigma_sde = 0 reduce the objective to maximum
        // likelihood of a deterministic latent ODE: no divergence term at all
        let (_, ep, _) = grad_check_model();
        let cfg = TrainConfig {
            no_diffusion: true,
            kl_scale: 123.0,
            n_mc: 2,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_kl_scale(), 0.0);
        let model_cfg = ModelConfig {
            obs_dim: 1,
            outcome_dim: 1,
            latent_dim: 3,
            treat_dim: 2,
            hidden_layers: 2,
            sigma_sde: 0.0,
            sigma_y: 0.1,
            delta_tau: 0.2,
            t_star: 1.0,
            horizon: 2.0,
            learnable_std: false,
        };
        let model = CfOde::new(model_cfg).unwrap();
        let store = model.init_store(3).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = episode_graph(&model, &mut tape, &bound, &ep, &cfg, 0).unwrap();
        assert!(g.kl.is_none());
    }
}
