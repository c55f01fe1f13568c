//! GPT-2-style causal transformer with a pluggable MLP slot.

mod params;

use serde::{Deserialize, Serialize};

pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::moe::{layer as moe_layer, MoEConfig, RouterKind};
use crate::numerics::{topk_indices, Activation, Scalar, Tape, Tensor, Var};
use rand::Rng;

/// What sits in each block's MLP slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MlpKind {
    /// Two-layer MLP with hidden width `hidden_mult · d_model`. With
    /// `topk_activation = Some(k)` only the `k` largest post-activation
    /// values per token survive.
    Dense {
        hidden_mult: f64,
        activation: Activation,
        #[serde(default)]
        topk_activation: Option<usize>,
    },
    Moe(MoEConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub ctx_len: usize,
    pub mlp: MlpKind,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model = {} is not divisible by n_head = {}",
                self.d_model, self.n_head
            )));
        }
        if self.ctx_len == 0 {
            return Err(Error::Config("ctx_len must be >= 1".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config(format!("dropout must be 0, got {}", self.dropout)));
        }
        match &self.mlp {
            MlpKind::Dense {
                hidden_mult,
                topk_activation,
                ..
            } => {
                if !(*hidden_mult > 0.0) || self.mlp_hidden() == 0 {
                    return Err(Error::Config(format!("hidden_mult = {hidden_mult} gives no hidden units")));
                }
                if let Some(k) = topk_activation {
                    if *k == 0 || *k > self.mlp_hidden() {
                        return Err(Error::TopK {
                            k: *k,
                            n: self.mlp_hidden(),
                        });
                    }
                }
            }
            MlpKind::Moe(m) => {
                m.validate()?;
                if m.width != self.d_model {
                    return Err(Error::Config(format!(
                        "expert width {} differs from d_model {}",
                        m.width, self.d_model
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dense hidden width, or one expert's hidden width.
    pub fn mlp_hidden(&self) -> usize {
        match &self.mlp {
            MlpKind::Dense { hidden_mult, .. } => (hidden_mult * self.d_model as f64).round() as usize,
            MlpKind::Moe(m) => m.expert_hidden,
        }
    }

    /// Width of a harvested feature row.
    pub fn trace_width(&self) -> usize {
        match &self.mlp {
            MlpKind::Dense { .. } => self.mlp_hidden(),
            MlpKind::Moe(m) => m.experts * m.expert_hidden,
        }
    }

    /// MLP weight-matrix entries touched per token in one block. Biases and
    /// router weights are not counted.
    pub fn activated_mlp_params(&self) -> usize {
        match &self.mlp {
            MlpKind::Dense { .. } => 2 * self.d_model * self.mlp_hidden(),
            MlpKind::Moe(m) => m.k * 2 * self.d_model * m.expert_hidden,
        }
    }

    pub fn moe(&self) -> Option<&MoEConfig> {
        match &self.mlp {
            MlpKind::Moe(m) => Some(m),
            MlpKind::Dense { .. } => None,
        }
    }
}

/// Routing statistics of one MoE block for one forward pass.
#[derive(Debug, Clone)]
pub struct RoutingStats {
    pub layer: usize,
    pub raw_scores: Tensor<f64>,
    pub selected: Vec<Vec<usize>>,
    pub argmax: Vec<usize>,
    pub expert_l0: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record parameters as differentiable leaves.
    pub trainable: bool,
    /// Layer whose MLP hidden code is captured.
    pub harvest_layer: Option<usize>,
}

pub struct ForwardOutput {
    /// `[Σ T_s × V]`, sequences stacked in batch order.
    pub logits: Var,
    /// One tape handle per parameter, in store order.
    pub params: Vec<Var>,
    /// Unweighted balance loss of every MoE block.
    pub balance_losses: Vec<Var>,
    pub routing: Vec<RoutingStats>,
    /// Hidden code rows `[Σ T_s × trace_width]` of the harvested layer.
    pub trace: Option<Tensor<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> Model<T> {
    /// GPT-2 initialization: N(0, 0.02²) weights, residual projections scaled
    /// by `1/√(2·n_layer)`, unit gains and zero biases.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let resid_std = INIT_STD / (2.0 * config.n_layer as f64).sqrt();
        let mut p = ParamStore::new();
        for spec in param_specs(&config) {
            let t = match spec.init {
                Init::Normal => Tensor::randn(&spec.shape, INIT_STD, rng),
                Init::Residual => Tensor::randn(&spec.shape, resid_std, rng),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
                Init::Zeros => Tensor::zeros(&spec.shape),
            };
            p.push(spec.name, t);
        }
        Ok(Self { config, params: p })
    }

    /// Wrap existing parameters, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name {
                return Err(Error::Config(format!("expected parameter {}, found {name}", spec.name)));
            }
            if spec.shape != t.shape() {
                return Err(Error::dim("parameter shape", t.shape(), &spec.shape));
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Run every sequence in `batch` through the model on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &[&[u8]], opts: ForwardOptions) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if let Some(l) = opts.harvest_layer {
            if l >= cfg.n_layer {
                return Err(Error::Config(format!("layer {l} out of range for {} layers", cfg.n_layer)));
            }
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| {
                if opts.trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let p = |name: &str| vars[self.params.index(name).expect("known parameter")];

        let mut lens = Vec::with_capacity(batch.len());
        let mut embedded = Vec::with_capacity(batch.len());
        for seq in batch {
            let t = seq.len();
            if t == 0 || t > cfg.ctx_len {
                return Err(Error::Config(format!("sequence length {t} outside 1..={}", cfg.ctx_len)));
            }
            let ids: Vec<usize> = seq.iter().map(|&c| c as usize).collect();
            if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(Error::TargetOutOfRange {
                    id: bad,
                    classes: cfg.vocab_size,
                    position: ids.iter().position(|&i| i == bad).unwrap_or(0),
                });
            }
            let tok = tape.gather_rows(p("wte"), &ids)?;
            let pos = tape.slice_rows(p("wpe"), 0, t)?;
            embedded.push(tape.add(tok, pos)?);
            lens.push(t);
        }
        let mut x = tape.concat_rows(&embedded)?;

        let mut balance_losses = Vec::new();
        let mut routing = Vec::new();
        let mut trace = None;
        for l in 0..cfg.n_layer {
            let h = tape.layer_norm(x, p(&format!("h{l}.ln1.g")), p(&format!("h{l}.ln1.b")))?;
            let a = self.attention(tape, h, &lens, &p, l)?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, p(&format!("h{l}.ln2.g")), p(&format!("h{l}.ln2.b")))?;
            let harvest = opts.harvest_layer == Some(l);
            let m = match &cfg.mlp {
                MlpKind::Dense {
                    activation,
                    topk_activation,
                    ..
                } => {
                    let pre = tape.matmul_nt(h, p(&format!("h{l}.mlp.w_fc")))?;
                    let pre = tape.add_row(pre, p(&format!("h{l}.mlp.b_fc")))?;
                    let mut z = activation.on_tape(tape, pre);
                    if let Some(k) = topk_activation {
                        z = keep_topk_rows(tape, z, *k)?;
                    }
                    if harvest {
                        trace = Some(tape.value(z).cast());
                    }
                    let y = tape.matmul_nt(z, p(&format!("h{l}.mlp.w_proj")))?;
                    tape.add_row(y, p(&format!("h{l}.mlp.b_proj")))?
                }
                MlpKind::Moe(mc) => {
                    let experts: Vec<moe_layer::ExpertVars> = (0..mc.experts)
                        .map(|j| moe_layer::ExpertVars {
                            w_enc: p(&expert_enc(l, j)),
                            w_dec: p(&expert_dec(l, j)),
                        })
                        .collect();
                    let gate = (mc.router == RouterKind::TopkLinear).then(|| p(&gate_name(l)));
                    let out = moe_layer::forward(tape, h, &experts, gate, mc, harvest)?;
                    if harvest {
                        trace = out.code;
                    }
                    balance_losses.push(out.balance_loss);
                    routing.push(RoutingStats {
                        layer: l,
                        raw_scores: out.raw_scores,
                        selected: out.selected,
                        argmax: out.argmax,
                        expert_l0: out.expert_l0,
                    });
                    out.y
                }
            };
            x = tape.add(x, m)?;
        }
        let x = tape.layer_norm(x, p("ln_f.g"), p("ln_f.b"))?;
        let logits = tape.matmul_nt(x, p("head"))?;
        Ok(ForwardOutput {
            logits,
            params: vars,
            balance_losses,
            routing,
            trace,
        })
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        lens: &[usize],
        p: &dyn Fn(&str) -> Var,
        l: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let nh = self.config.n_head;
        let hd = d / nh;
        let qkv = tape.matmul_nt(h, p(&format!("h{l}.attn.w_qkv")))?;
        let qkv = tape.add_row(qkv, p(&format!("h{l}.attn.b_qkv")))?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut seqs = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &t in lens {
            let rows = tape.slice_rows(qkv, start, t)?;
            let mut heads = Vec::with_capacity(nh);
            for i in 0..nh {
                let q = tape.slice_cols(rows, i * hd, hd)?;
                let k = tape.slice_cols(rows, d + i * hd, hd)?;
                let v = tape.slice_cols(rows, 2 * d + i * hd, hd)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, scale);
                let w = tape.causal_softmax(s)?;
                heads.push(tape.matmul(w, v)?);
            }
            seqs.push(tape.concat_cols(&heads)?);
            start += t;
        }
        let y = tape.concat_rows(&seqs)?;
        let y = tape.matmul_nt(y, p(&format!("h{l}.attn.w_proj")))?;
        tape.add_row(y, p(&format!("h{l}.attn.b_proj")))
    }

    /// Logits `[T×V]` for one sequence, evaluation mode.
    pub fn logits(&self, seq: &[u8]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[seq], ForwardOptions::default())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Greedy continuation of `prompt` by `n` tokens, keeping the last
    /// `ctx_len` tokens as context.
    pub fn generate_greedy(&self, prompt: &[u8], n: usize) -> Result<Vec<u8>> {
        let mut seq = prompt.to_vec();
        for _ in 0..n {
            let start = seq.len().saturating_sub(self.config.ctx_len);
            let logits = self.logits(&seq[start..])?;
            let (rows, _) = logits.dims2();
            let next = topk_indices(logits.row(rows - 1), 1)?[0];
            seq.push(next as u8);
        }
        Ok(seq)
    }
}

/// Feature rows of `layer`'s MLP hidden code at the requested positions,
/// evaluation mode. Rows come out batch-major, then in position order.
pub fn harvest_hidden<T: Scalar>(
    model: &Model<T>,
    batch: &[&[u8]],
    layer: usize,
    positions: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    if positions.len() != batch.len() {
        return Err(Error::dim("harvest positions", &[positions.len()], &[batch.len()]));
    }
    let mut tape = Tape::new();
    let out = model.forward(
        &mut tape,
        batch,
        ForwardOptions {
            trainable: false,
            harvest_layer: Some(layer),
        },
    )?;
    let trace = out.trace.expect("harvest layer requested");
    let mut rows = Vec::new();
    let mut offset = 0;
    for (seq, pos) in batch.iter().zip(positions) {
        for &t in pos {
            if t >= seq.len() {
                return Err(Error::Config(format!("position {t} outside sequence of {}", seq.len())));
            }
            rows.push(trace.row(offset + t).to_vec());
        }
        offset += seq.len();
    }
    Ok(rows)
}

/// Zero all but the `k` largest entries of each row.
fn keep_topk_rows<T: Scalar>(tape: &mut Tape<T>, z: Var, k: usize) -> Result<Var> {
    let (r, c) = tape.value(z).dims2();
    let mut keep = vec![false; r * c];
    for i in 0..r {
        for j in topk_indices(tape.value(z).row(i), k)? {
            keep[i * c + j] = true;
        }
    }
    tape.keep(z, keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Residual,
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.d_model;
    let v = config.vocab_size;
    let mut out = Vec::new();
    let mut add = |name: String, shape: &[usize], init: Init| {
        out.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        })
    };
    add("wte".into(), &[v, d], Init::Normal);
    add("wpe".into(), &[config.ctx_len, d], Init::Normal);
    for l in 0..config.n_layer {
        add(format!("h{l}.ln1.g"), &[d], Init::Ones);
        add(format!("h{l}.ln1.b"), &[d], Init::Zeros);
        add(format!("h{l}.attn.w_qkv"), &[3 * d, d], Init::Normal);
        add(format!("h{l}.attn.b_qkv"), &[3 * d], Init::Zeros);
        add(format!("h{l}.attn.w_proj"), &[d, d], Init::Residual);
        add(format!("h{l}.attn.b_proj"), &[d], Init::Zeros);
        add(format!("h{l}.ln2.g"), &[d], Init::Ones);
        add(format!("h{l}.ln2.b"), &[d], Init::Zeros);
        match &config.mlp {
            MlpKind::Dense { .. } => {
                let h = config.mlp_hidden();
                add(format!("h{l}.mlp.w_fc"), &[h, d], Init::Normal);
                add(format!("h{l}.mlp.b_fc"), &[h], Init::Zeros);
                add(format!("h{l}.mlp.w_proj"), &[d, h], Init::Residual);
                add(format!("h{l}.mlp.b_proj"), &[d], Init::Zeros);
            }
            MlpKind::Moe(m) => {
                let h = m.expert_hidden;
                for j in 0..m.experts {
                    add(expert_enc(l, j), &[h, d], Init::Normal);
                    add(expert_dec(l, j), &[d, h], Init::Residual);
                }
                if m.router == RouterKind::TopkLinear {
                    add(gate_name(l), &[m.experts, d], Init::Normal);
                }
            }
        }
    }
    add("ln_f.g".into(), &[d], Init::Ones);
    add("ln_f.b".into(), &[d], Init::Zeros);
    add("head".into(), &[v, d], Init::Normal);
    out
}

pub fn expert_enc(layer: usize, expert: usize) -> String {
    format!("h{layer}.moe.e{expert}.w_enc")
}

pub fn expert_dec(layer: usize, expert: usize) -> String {
    format!("h{layer}.moe.e{expert}.w_dec")
}

pub fn gate_name(layer: usize) -> String {
    format!("h{layer}.moe.w_gate")
}

#[cfg(test)]
mod tests;
