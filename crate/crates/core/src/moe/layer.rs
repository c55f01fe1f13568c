//! Batched MoE layer on the tape.

use std::f64::consts::FRAC_1_SQRT_2;

use super::{MoEConfig, RouterKind, SigmaMode, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::{kernels, topk_indices, Scalar, Tape, Tensor, Var};

/// Tape handles for one expert's weights.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w_enc: Var,
    pub w_dec: Var,
}

/// Everything a batched layer forward produces besides its output.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub y: Var,
    /// `M · Σ f_i P_i` for this batch (unweighted by λ).
    pub balance_loss: Var,
    /// Router scores before selection, `[N×M]`.
    pub raw_scores: Tensor<f64>,
    pub selected: Vec<Vec<usize>>,
    /// Highest-scoring expert per token.
    pub argmax: Vec<usize>,
    /// `(token, expert, ‖z‖₀)` for every evaluated pair.
    pub expert_l0: Vec<(usize, usize, usize)>,
    /// Scaled hidden code `[N × M·D]`, when requested.
    pub code: Option<Tensor<f64>>,
}

/// Route `x: [N×d]` through the experts and recombine.
///
/// `w_gate` is required for [`RouterKind::TopkLinear`] and ignored otherwise.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    experts: &[ExpertVars],
    w_gate: Option<Var>,
    cfg: &MoEConfig,
    collect_code: bool,
) -> Result<LayerOutput> {
    let (n, _) = tape.value(x).dims2();
    let m = experts.len();
    if m != cfg.experts {
        return Err(Error::dim("moe layer", &[m], &[cfg.experts]));
    }
    let scores = router_scores(tape, x, experts, w_gate, cfg)?;

    let raw = tape.value(scores).clone();
    let mut selected = Vec::with_capacity(n);
    let mut mask = vec![false; n * m];
    for t in 0..n {
        let sel = topk_indices(raw.row(t), cfg.k)?;
        for &j in &sel {
            mask[t * m + j] = true;
        }
        selected.push(sel);
    }
    let argmax: Vec<usize> = (0..n).map(|t| topk_indices(raw.row(t), 1).unwrap()[0]).collect();
    let weights = tape.masked_softmax_rows(scores, mask)?;

    let probs = tape.softmax_rows(scores);
    let p_mean = tape.col_mean(probs);
    let mut frac = vec![0.0; m];
    for &a in &argmax {
        frac[a] += 1.0 / n as f64;
    }
    let frac = tape.constant(Tensor::from_f64(&[1, m], &frac)?);
    let fp = tape.mul(p_mean, frac)?;
    let dot = tape.sum(fp);
    let balance_loss = tape.scale(dot, m as f64);

    let hidden = tape.value(experts[0].w_enc).dims2().0;
    let mut code = collect_code.then(|| Tensor::<f64>::zeros(&[n, m * hidden]));
    let mut expert_l0 = Vec::new();
    let mut y: Option<Var> = None;
    for (j, e) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&t| selected[t].contains(&j)).collect();
        if rows.is_empty() {
            continue;
        }
        let xj = tape.gather_rows(x, &rows)?;
        let h = tape.matmul_nt(xj, e.w_enc)?;
        let z = cfg.activation.on_tape(tape, h);
        let wcol = tape.slice_cols(weights, j, 1)?;
        let wj = tape.gather_rows(wcol, &rows)?;
        let zs = tape.scale_rows(z, wj)?;
        {
            let zv = tape.value(z);
            for (r, &t) in rows.iter().enumerate() {
                let l0 = zv.row(r).iter().filter(|&&v| v != T::zero()).count();
                expert_l0.push((t, j, l0));
            }
        }
        if let Some(code) = code.as_mut() {
            let zsv = tape.value(zs);
            for (r, &t) in rows.iter().enumerate() {
                let dst = &mut code.row_mut(t)[j * hidden..(j + 1) * hidden];
                for (d, &v) in dst.iter_mut().zip(zsv.row(r)) {
                    *d = v.as_f64();
                }
            }
        }
        let yj = tape.matmul_nt(zs, e.w_dec)?;
        let full = tape.scatter_add_rows(yj, &rows, n)?;
        y = Some(match y {
            Some(acc) => tape.add(acc, full)?,
            None => full,
        });
    }

    Ok(LayerOutput {
        y: y.expect("k >= 1 selects at least one expert"),
        balance_loss,
        raw_scores: raw.cast(),
        selected,
        argmax,
        expert_l0,
        code,
    })
}

/// Raw router scores `[N×M]`.
pub fn router_scores<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    experts: &[ExpertVars],
    w_gate: Option<Var>,
    cfg: &MoEConfig,
) -> Result<Var> {
    match cfg.router {
        RouterKind::TopkLinear => {
            let w_g = w_gate.ok_or_else(|| Error::Config("top-k router needs W_g".into()))?;
            tape.matmul_nt(x, w_g)
        }
        RouterKind::SparsityAware => {
            let x2 = tape.square(x);
            let mut cols = Vec::with_capacity(experts.len());
            for e in experts {
                let w = if cfg.detach_router_stats {
                    tape.detach(e.w_enc)
                } else {
                    e.w_enc
                };
                let mu = tape.col_mean(w);
                let var = tape.col_var(w);
                let mu_h = tape.matmul_nt(x, mu)?;
                let var_h = tape.matmul_nt(x2, var)?;
                let sigma = match cfg.sigma_mode {
                    SigmaMode::StdDev => tape.sqrt_clamp(var_h, VAR_FLOOR),
                    SigmaMode::Variance => {
                        let sq = tape.square(var_h);
                        tape.sqrt_clamp(sq, VAR_FLOOR)
                    }
                };
                let ratio = tape.div(mu_h, sigma)?;
                let arg = tape.scale(ratio, FRAC_1_SQRT_2);
                let e = tape.erf(arg);
                cols.push(tape.scale(e, -1.0));
            }
            tape.concat_cols(&cols)
        }
        RouterKind::BruteforceL0 => {
            let (n, d) = tape.value(x).dims2();
            let mut scores = vec![T::zero(); n * experts.len()];
            for (j, e) in experts.iter().enumerate() {
                let w = tape.value(e.w_enc);
                let (hidden, _) = w.dims2();
                let h = kernels::matmul_nt(tape.value(x).data(), w.data(), n, d, hidden);
                for t in 0..n {
                    let l0 = h[t * hidden..(t + 1) * hidden]
                        .iter()
                        .filter(|&&v| v > T::zero())
                        .count();
                    scores[t * experts.len() + j] = T::from_f64(-(l0 as f64));
                }
            }
            Ok(tape.constant(Tensor::new(&[n, experts.len()], scores)?))
        }
    }
}
