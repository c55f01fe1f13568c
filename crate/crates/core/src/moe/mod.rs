//! Mixture-of-experts layer: ReLU experts, top-k and sparsity-aware gating,
//! the flattened sparse-MLP view, and the load-balance loss.
//!
//! The functions here work on single tokens and never touch a tape; they
//! are the reference semantics. [`layer`] runs the same computation over a
//! batch of tokens on a [`crate::numerics::Tape`] for training.

pub mod bench;
pub mod cost;
pub mod layer;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{erf, kernels, normal_cdf, softmax, topk_indices, Activation, Scalar, Tensor};

pub use cost::router_cost_model;

/// Variance floor under `σ_h` for degenerate experts.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    TopkLinear,
    SparsityAware,
    BruteforceL0,
}

impl RouterKind {
    pub const ALL: [RouterKind; 3] = [
        RouterKind::TopkLinear,
        RouterKind::SparsityAware,
        RouterKind::BruteforceL0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::TopkLinear => "topk_linear",
            RouterKind::SparsityAware => "sparsity_aware",
            RouterKind::BruteforceL0 => "bruteforce_l0",
        }
    }
}

impl std::str::FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouterKind::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown router '{s}'")))
    }
}

/// How the spread term inside the sparsity score is formed from `varᵀx²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_h = sqrt(varᵀx²)`, the standard deviation of the pre-activation.
    #[default]
    StdDev,
    /// `σ_h = varᵀx²` used directly, for comparison runs.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub experts: usize,
    pub k: usize,
    pub expert_hidden: usize,
    pub width: usize,
    pub router: RouterKind,
    pub activation: Activation,
    pub balance_lambda: f64,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    /// Cut the gradient from the router statistics back into `W_enc`.
    #[serde(default)]
    pub detach_router_stats: bool,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.k == 0 || self.k > self.experts {
            return Err(Error::Config(format!(
                "need 1 <= k <= M, got k = {}, M = {}",
                self.k, self.experts
            )));
        }
        if self.expert_hidden == 0 || self.width == 0 {
            return Err(Error::Config("expert dimensions must be positive".into()));
        }
        if !(self.balance_lambda >= 0.0) {
            return Err(Error::Config(format!(
                "balance_lambda must be >= 0, got {}",
                self.balance_lambda
            )));
        }
        Ok(())
    }
}

/// Encoder `[D×d]` and decoder `[d×D]` of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T> {
    pub w_enc: Tensor<T>,
    pub w_dec: Tensor<T>,
}

impl<T: Scalar> ExpertParams<T> {
    pub fn new(w_enc: Tensor<T>, w_dec: Tensor<T>) -> Result<Self> {
        let (hidden, width) = w_enc.dims2();
        if w_enc.shape().len() != 2 || w_dec.shape() != [width, hidden] {
            return Err(Error::dim("expert", w_enc.shape(), w_dec.shape()));
        }
        Ok(Self { w_enc, w_dec })
    }

    pub fn hidden(&self) -> usize {
        self.w_enc.dims2().0
    }

    pub fn width(&self) -> usize {
        self.w_enc.dims2().1
    }
}

/// Column-wise mean and population variance of an encoder matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterStats<T> {
    pub mu: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision<T> {
    /// Nonzero only at `selected`; those entries sum to one.
    pub weights: Vec<T>,
    /// Selected experts in descending score order.
    pub selected: Vec<usize>,
    pub raw_scores: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput<T> {
    pub h: Vec<T>,
    pub z: Vec<T>,
    pub y: Vec<T>,
}

thread_local! {
    static EXPERT_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`expert_forward`] evaluations on this thread so far.
pub fn expert_forward_calls() -> usize {
    EXPERT_CALLS.with(Cell::get)
}

pub fn expert_forward<T: Scalar>(
    x: &[T],
    e: &ExpertParams<T>,
    activation: Activation,
) -> Result<ExpertOutput<T>> {
    EXPERT_CALLS.with(|c| c.set(c.get() + 1));
    let h = e.w_enc.matvec(x)?;
    let z: Vec<T> = h.iter().map(|&v| activation.apply(v)).collect();
    let y = e.w_dec.matvec(&z)?;
    Ok(ExpertOutput { h, z, y })
}

/// Keep the top `k` of `raw_scores` and softmax over them.
pub fn gate_from_scores<T: Scalar>(raw_scores: Vec<T>, k: usize) -> Result<GateDecision<T>> {
    let selected = topk_indices(&raw_scores, k)?;
    let chosen: Vec<T> = selected.iter().map(|&j| raw_scores[j]).collect();
    let probs = softmax(&chosen);
    let mut weights = vec![T::zero(); raw_scores.len()];
    for (&j, &p) in selected.iter().zip(&probs) {
        weights[j] = p;
    }
    Ok(GateDecision {
        weights,
        selected,
        raw_scores,
    })
}

/// Baseline router: `softmax(topk(W_g·x))`.
pub fn topk_linear_gate<T: Scalar>(x: &[T], w_g: &Tensor<T>, k: usize) -> Result<GateDecision<T>> {
    gate_from_scores(w_g.matvec(x)?, k)
}

pub fn compute_router_stats<T: Scalar>(e: &ExpertParams<T>) -> RouterStats<T> {
    let (rows, cols) = e.w_enc.dims2();
    let n = T::from_f64(rows as f64);
    let mut mu = vec![T::zero(); cols];
    for i in 0..rows {
        for (m, &w) in mu.iter_mut().zip(e.w_enc.row(i)) {
            *m = *m + w;
        }
    }
    mu.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); cols];
    for i in 0..rows {
        for ((v, &w), &m) in var.iter_mut().zip(e.w_enc.row(i)).zip(&mu) {
            *v = *v + (w - m) * (w - m);
        }
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    RouterStats { mu, var }
}

/// `(μ_h, varᵀx²)` for the pre-activation of an expert with these stats.
pub fn pre_activation_moments<T: Scalar>(x: &[T], stats: &RouterStats<T>) -> (f64, f64) {
    let mu_h = kernels::dot(&stats.mu, x).as_f64();
    let var_h: f64 = stats
        .var
        .iter()
        .zip(x)
        .map(|(&v, &xi)| v.as_f64() * xi.as_f64() * xi.as_f64())
        .sum();
    (mu_h, var_h)
}

fn sigma_h(var_h: f64, mode: SigmaMode) -> f64 {
    match mode {
        SigmaMode::StdDev => var_h.max(VAR_FLOOR).sqrt(),
        SigmaMode::Variance => var_h.max(VAR_FLOOR.sqrt()),
    }
}

/// Expected number of positive pre-activations, `D·Φ(μ_h/σ_h)`.
pub fn estimate_expected_l0<T: Scalar>(x: &[T], stats: &RouterStats<T>, hidden: usize) -> f64 {
    let (mu_h, var_h) = pre_activation_moments(x, stats);
    hidden as f64 * normal_cdf(mu_h / sigma_h(var_h, SigmaMode::StdDev))
}

/// `−erf(μ_h / (√2·σ_h))`: higher means a sparser expected activation.
pub fn sparsity_score<T: Scalar>(x: &[T], stats: &RouterStats<T>, mode: SigmaMode) -> T {
    let (mu_h, var_h) = pre_activation_moments(x, stats);
    T::from_f64(-erf(mu_h / (SQRT_2 * sigma_h(var_h, mode))))
}

pub fn sparsity_aware_gate<T: Scalar>(
    x: &[T],
    all_stats: &[RouterStats<T>],
    k: usize,
) -> Result<GateDecision<T>> {
    sparsity_aware_gate_with(x, all_stats, k, SigmaMode::StdDev)
}

pub fn sparsity_aware_gate_with<T: Scalar>(
    x: &[T],
    all_stats: &[RouterStats<T>],
    k: usize,
    mode: SigmaMode,
) -> Result<GateDecision<T>> {
    let scores = all_stats.iter().map(|s| sparsity_score(x, s, mode)).collect();
    gate_from_scores(scores, k)
}

/// Exact number of positive entries of `W_enc·x`.
pub fn exact_l0<T: Scalar>(x: &[T], e: &ExpertParams<T>) -> Result<usize> {
    Ok(e.w_enc.matvec(x)?.iter().filter(|&&h| h > T::zero()).count())
}

/// Scores every expert by `−‖relu(W_enc·x)‖₀`; evaluates all encoders.
pub fn bruteforce_l0_gate<T: Scalar>(
    x: &[T],
    experts: &[ExpertParams<T>],
    k: usize,
) -> Result<GateDecision<T>> {
    let scores = experts
        .iter()
        .map(|e| exact_l0(x, e).map(|n| T::from_f64(-(n as f64))))
        .collect::<Result<Vec<T>>>()?;
    gate_from_scores(scores, k)
}

/// `ŷ = Σ ω_j f_j(x)` over the selected experts only.
pub fn moe_forward<T: Scalar>(
    x: &[T],
    experts: &[ExpertParams<T>],
    gate: &GateDecision<T>,
    activation: Activation,
) -> Result<(Vec<T>, BTreeMap<usize, Vec<T>>)> {
    if gate.weights.len() != experts.len() {
        return Err(Error::dim("moe_forward", &[gate.weights.len()], &[experts.len()]));
    }
    let width = experts[0].width();
    let mut y = vec![T::zero(); width];
    let mut per_expert_z = BTreeMap::new();
    for &j in &gate.selected {
        let out = expert_forward(x, &experts[j], activation)?;
        let w = gate.weights[j];
        for (acc, &v) in y.iter_mut().zip(&out.y) {
            *acc = *acc + w * v;
        }
        per_expert_z.insert(j, out.z);
    }
    Ok((y, per_expert_z))
}

/// The concatenated `[ω_1 z_1, …, ω_M z_M]`; unselected blocks are exact zeros.
pub fn scaled_hidden_code<T: Scalar>(
    per_expert_z: &BTreeMap<usize, Vec<T>>,
    gate: &GateDecision<T>,
    hidden: usize,
) -> Vec<T> {
    let mut code = vec![T::zero(); gate.weights.len() * hidden];
    for (&j, z) in per_expert_z {
        let w = gate.weights[j];
        for (dst, &v) in code[j * hidden..(j + 1) * hidden].iter_mut().zip(z) {
            *dst = w * v;
        }
    }
    code
}

/// One MoE layer rewritten as a single wide MLP.
#[derive(Debug, Clone)]
pub struct SparseMlp<T> {
    /// All decoders side by side, `[d × M·D]`.
    pub w_dec_concat: Tensor<T>,
    pub z_concat: Vec<T>,
    pub y: Vec<T>,
}

pub fn flatten_to_sparse_mlp<T: Scalar>(
    experts: &[ExpertParams<T>],
    gate: &GateDecision<T>,
    x: &[T],
    activation: Activation,
) -> Result<SparseMlp<T>> {
    let width = experts[0].width();
    let hidden = experts[0].hidden();
    let m = experts.len();
    let mut dec = vec![T::zero(); width * m * hidden];
    for (j, e) in experts.iter().enumerate() {
        for r in 0..width {
            let dst = &mut dec[r * m * hidden + j * hidden..r * m * hidden + (j + 1) * hidden];
            dst.copy_from_slice(e.w_dec.row(r));
        }
    }
    let w_dec_concat = Tensor::new(&[width, m * hidden], dec)?;
    let mut per_expert_z = BTreeMap::new();
    for &j in &gate.selected {
        per_expert_z.insert(j, expert_forward(x, &experts[j], activation)?.z);
    }
    let z_concat = scaled_hidden_code(&per_expert_z, gate, hidden);
    let y = w_dec_concat.matvec(&z_concat)?;
    Ok(SparseMlp {
        w_dec_concat,
        z_concat,
        y,
    })
}

/// `M · Σ_i f_i·P_i` with `f_i` the fraction of tokens whose hard assignment
/// is `i` and `P_i` the mean router probability on `i`. The overall scale
/// factor is left to the caller's loss weight.
pub fn load_balance_loss<T: Scalar>(router_probs: &Tensor<T>, hard_assignments: &[usize]) -> Result<f64> {
    let (tokens, m) = router_probs.dims2();
    if hard_assignments.len() != tokens {
        return Err(Error::dim(
            "load_balance_loss",
            router_probs.shape(),
            &[hard_assignments.len()],
        ));
    }
    let mut f = vec![0.0; m];
    for &a in hard_assignments {
        if a >= m {
            return Err(Error::TargetOutOfRange {
                id: a,
                classes: m,
                position: 0,
            });
        }
        f[a] += 1.0;
    }
    let mut p = vec![0.0; m];
    for t in 0..tokens {
        for (pi, &v) in p.iter_mut().zip(router_probs.row(t)) {
            *pi += v.as_f64();
        }
    }
    let n = tokens as f64;
    Ok(m as f64 * f.iter().zip(&p).map(|(fi, pi)| (fi / n) * (pi / n)).sum::<f64>())
}
