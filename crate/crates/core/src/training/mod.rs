//! Optimization loop: combined loss, AdamW, schedule, upcycling, checkpoints.

pub mod checkpoint;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use optim::{clip_global_norm, lr_at, AdamW};

use crate::error::{Error, Result};
use crate::moe::MoEConfig;
use crate::numerics::{Scalar, Tape};
use crate::transformer::{expert_dec, expert_enc, ForwardOptions, MlpKind, Model, ModelConfig, RoutingStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d::init_lr")]
    pub init_lr: f64,
    #[serde(default = "d::min_lr")]
    pub min_lr: f64,
    #[serde(default = "d::warmup_iters")]
    pub warmup_iters: u64,
    #[serde(default = "d::max_iters")]
    pub max_iters: u64,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::grad_clip")]
    pub grad_clip: f64,
    /// Weight of the summed balance losses. Unset means the MoE layer's own
    /// `balance_lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance_lambda: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::betas")]
    pub betas: (f64, f64),
    #[serde(default = "d::eps")]
    pub eps: f64,
    #[serde(default = "d::weight_decay")]
    pub weight_decay: f64,
    /// Iterations between validation evaluations; 0 disables them.
    #[serde(default = "d::eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "d::eval_batches")]
    pub eval_batches: usize,
    /// Iterations between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_interval: u64,
}

mod d {
    pub fn init_lr() -> f64 {
        3e-4
    }
    pub fn min_lr() -> f64 {
        3e-5
    }
    pub fn warmup_iters() -> u64 {
        2000
    }
    pub fn max_iters() -> u64 {
        600_000
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn betas() -> (f64, f64) {
        (0.9, 0.95)
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
    pub fn eval_interval() -> u64 {
        100
    }
    pub fn eval_batches() -> usize {
        4
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_lr: d::init_lr(),
            min_lr: d::min_lr(),
            warmup_iters: d::warmup_iters(),
            max_iters: d::max_iters(),
            batch_size: d::batch_size(),
            grad_clip: d::grad_clip(),
            balance_lambda: None,
            seed: 0,
            betas: d::betas(),
            eps: d::eps(),
            weight_decay: d::weight_decay(),
            eval_interval: d::eval_interval(),
            eval_batches: d::eval_batches(),
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.init_lr) {
            return Err(Error::Config(format!(
                "need 0 < min_lr <= init_lr, got {} and {}",
                self.min_lr, self.init_lr
            )));
        }
        if self.warmup_iters >= self.max_iters {
            return Err(Error::Config(format!(
                "warmup_iters {} must be below max_iters {}",
                self.warmup_iters, self.max_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.balance_lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("balance_lambda must be >= 0".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        Ok(())
    }

    /// λ actually applied to the balance term for `model`.
    pub fn lambda_for(&self, model: &ModelConfig) -> f64 {
        self.balance_lambda
            .or_else(|| model.moe().map(|m| m.balance_lambda))
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_lm: f64,
    /// Unweighted sum of the per-layer balance losses.
    pub loss_balance: f64,
    pub grad_norm: f64,
    pub routing: Vec<RoutingStats>,
}

impl StepReport {
    /// Per MoE layer, the fraction of tokens whose top expert is each expert.
    pub fn expert_fractions(&self, experts: usize) -> Vec<Vec<f64>> {
        self.routing
            .iter()
            .map(|r| {
                let mut f = vec![0.0; experts];
                for &a in &r.argmax {
                    f[a] += 1.0 / r.argmax.len() as f64;
                }
                f
            })
            .collect()
    }

    /// Mean `‖z‖₀` over every evaluated (token, expert) pair.
    pub fn mean_expert_l0(&self) -> Option<f64> {
        let all: Vec<usize> = self
            .routing
            .iter()
            .flat_map(|r| r.expert_l0.iter().map(|&(_, _, l0)| l0))
            .collect();
        (!all.is_empty()).then(|| all.iter().sum::<usize>() as f64 / all.len() as f64)
    }
}

/// Split each window into inputs (all but last) and next-token targets.
fn inputs_targets(batch: &[Vec<u8>]) -> Result<(Vec<&[u8]>, Vec<usize>)> {
    if batch.iter().any(|s| s.len() < 2) {
        return Err(Error::Data("training windows need at least 2 tokens".into()));
    }
    let inputs = batch.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets = batch.iter().flat_map(|s| s[1..].iter().map(|&c| c as usize)).collect();
    Ok((inputs, targets))
}

/// Forward, backward, clip and update on one batch of token windows.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[Vec<u8>],
    iter: u64,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let (inputs, targets) = inputs_targets(batch)?;
    let mut tape = Tape::new();
    let out = model.forward(
        &mut tape,
        &inputs,
        ForwardOptions {
            trainable: true,
            harvest_layer: None,
        },
    )?;
    let lm = tape.cross_entropy(out.logits, &targets)?;
    let lambda = cfg.lambda_for(&model.config);
    let mut total = lm;
    let mut balance = 0.0;
    for &b in &out.balance_losses {
        balance += tape.value(b).data()[0].as_f64();
        if lambda > 0.0 {
            let w = tape.scale(b, lambda);
            total = tape.add(total, w)?;
        }
    }
    let loss = tape.value(total).data()[0].as_f64();
    let loss_lm = tape.value(lm).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at iteration {iter}")));
    }
    let grads = tape.backward(total)?;
    let mut g: Vec<_> = out.params.iter().map(|&v| grads.get(v)).collect();
    drop(grads);
    drop(tape);
    let grad_norm = clip_global_norm(&mut g, cfg.grad_clip);
    let lr = lr_at(iter, cfg);
    opt.update(&mut model.params, &g, lr, cfg)?;
    Ok(StepReport {
        iter,
        lr,
        loss,
        loss_lm,
        loss_balance: balance,
        grad_norm,
        routing: out.routing,
    })
}

/// Mean next-token loss over fixed, evenly spaced windows of `stream`.
pub fn eval_loss<T: Scalar>(model: &Model<T>, stream: &[u8], windows: usize) -> Result<f64> {
    let len = (model.config.ctx_len + 1).min(stream.len());
    if len < 2 || windows == 0 {
        return Err(Error::Data("evaluation stream too short".into()));
    }
    let span = stream.len() - len;
    let mut total = 0.0;
    for w in 0..windows {
        let start = if windows == 1 { 0 } else { span * w / (windows - 1) };
        let win = &stream[start..start + len];
        let logits = model.logits(&win[..len - 1])?;
        let targets: Vec<usize> = win[1..].iter().map(|&c| c as usize).collect();
        total += crate::numerics::cross_entropy(&logits, &targets)?.as_f64();
    }
    Ok(total / windows as f64)
}

/// `batch` random windows of `len` tokens from `stream`.
pub fn sample_windows(rng: &mut impl Rng, stream: &[u8], batch: usize, len: usize) -> Result<Vec<Vec<u8>>> {
    let len = len.min(stream.len());
    if len < 2 {
        return Err(Error::Data(format!("token stream of {} is too short to train on", stream.len())));
    }
    Ok((0..batch)
        .map(|_| {
            let start = rng.gen_range(0..=stream.len() - len);
            stream[start..start + len].to_vec()
        })
        .collect())
}

/// Model, optimizer, schedule position and data RNG.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            opt,
            cfg,
            iter: 0,
            rng,
        })
    }

    /// Sample a batch from `stream` and take one optimizer step.
    pub fn step(&mut self, stream: &[u8]) -> Result<StepReport> {
        let batch = sample_windows(
            &mut self.rng,
            stream,
            self.cfg.batch_size,
            self.model.config.ctx_len + 1,
        )?;
        let report = train_step(&mut self.model, &mut self.opt, &batch, self.iter, &self.cfg)?;
        self.iter += 1;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            iter: self.iter,
            opt: self.opt.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        ck.train.validate()?;
        Ok(Self {
            model: ck.model,
            opt: ck.opt,
            cfg: ck.train,
            iter: ck.iter,
            rng: ck.rng.restore(),
        })
    }
}

/// Build a MoE model whose experts all start as copies of `dense`'s MLPs.
///
/// Biases of the dense MLP are dropped. Every non-MLP tensor is copied
/// verbatim; a linear router gets fresh N(0, 0.02²) weights from `rng`.
pub fn upcycle_from_dense<T: Scalar>(dense: &Model<T>, moe: MoEConfig, rng: &mut impl Rng) -> Result<Model<T>> {
    if !matches!(dense.config.mlp, MlpKind::Dense { .. }) {
        return Err(Error::Config("upcycling needs a dense source model".into()));
    }
    let hidden = dense.config.mlp_hidden();
    if hidden != moe.expert_hidden {
        return Err(Error::Config(format!(
            "dense hidden size {hidden} does not match expert hidden size {}",
            moe.expert_hidden
        )));
    }
    let config = ModelConfig {
        mlp: MlpKind::Moe(moe.clone()),
        ..dense.config.clone()
    };
    let mut out = Model::<T>::init(config, rng)?;
    for (name, t) in dense.params.iter() {
        if let Some(dst) = out.params.get_mut(name) {
            *dst = t.clone();
        }
    }
    for l in 0..dense.config.n_layer {
        let fc = dense.params.get(&format!("h{l}.mlp.w_fc")).expect("dense layer");
        let proj = dense.params.get(&format!("h{l}.mlp.w_proj")).expect("dense layer");
        for j in 0..moe.experts {
            *out.params.get_mut(&expert_enc(l, j)).expect("moe layer") = fc.clone();
            *out.params.get_mut(&expert_dec(l, j)).expect("moe layer") = proj.clone();
        }
    }
    Ok(out)
}
