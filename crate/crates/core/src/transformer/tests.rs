use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::moe::SigmaMode;
use crate::numerics::{layer_norm, special};

fn dense_cfg(n_layer: usize, d: usize, activation: Activation) -> ModelConfig {
    ModelConfig {
        n_layer,
        n_head: 2,
        d_model: d,
        vocab_size: 11,
        ctx_len: 12,
        mlp: MlpKind::Dense {
            hidden_mult: 2.0,
            activation,
            topk_activation: None,
        },
        dropout: 0.0,
    }
}

fn moe_cfg(n_layer: usize, d: usize, m: usize, k: usize, hidden: usize, router: RouterKind) -> ModelConfig {
    ModelConfig {
        mlp: MlpKind::Moe(MoEConfig {
            experts: m,
            k,
            expert_hidden: hidden,
            width: d,
            router,
            activation: Activation::Relu,
            balance_lambda: 0.001,
            sigma_mode: SigmaMode::StdDev,
            detach_router_stats: false,
        }),
        ..dense_cfg(n_layer, d, Activation::Relu)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(0..vocab) as u8).collect()
}

/// Scale every parameter so activations are not all near zero.
fn bump(model: &mut Model<f64>, factor: f64) {
    for t in model.params.tensors_mut() {
        if t.shape().len() == 2 {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[test]
fn validation() {
    let mut c = dense_cfg(1, 10, Activation::Gelu);
    c.n_head = 3;
    assert!(c.validate().is_err());
    let mut c = dense_cfg(1, 8, Activation::Gelu);
    c.ctx_len = 0;
    assert!(c.validate().is_err());
    let mut c = moe_cfg(1, 8, 2, 1, 4, RouterKind::TopkLinear);
    if let MlpKind::Moe(m) = &mut c.mlp {
        m.width = 4;
    }
    assert!(c.validate().is_err());
}

#[test]
fn logits_shape_and_errors() {
    let m = Model::<f64>::init(dense_cfg(2, 8, Activation::Gelu), &mut rng(0)).unwrap();
    let l = m.logits(&tokens(5, 11, 1)).unwrap();
    assert_eq!(l.shape(), &[5, 11]);
    assert!(m.logits(&[11]).is_err());
    assert!(m.logits(&tokens(13, 11, 1)).is_err());
}

#[test]
fn causal_prefix_is_bitwise_stable() {
    for cfg in [
        dense_cfg(2, 8, Activation::Gelu),
        moe_cfg(2, 8, 4, 2, 8, RouterKind::SparsityAware),
    ] {
        let m = Model::<f64>::init(cfg, &mut rng(2)).unwrap();
        let a = tokens(10, 11, 3);
        let base = m.logits(&a).unwrap();
        for t in 0..9 {
            let mut b = a.clone();
            b[t + 1] = (b[t + 1] + 1) % 11;
            let edited = m.logits(&b).unwrap();
            for r in 0..=t {
                assert_eq!(base.row(r), edited.row(r), "row {r} changed after editing {}", t + 1);
            }
        }
    }
}

/// Straight-line re-implementation of a dense model forward for one sequence.
fn naive_logits(m: &Model<f64>, seq: &[u8]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let d = c.d_model;
    let hd = d / c.n_head;
    let p = |n: &str| m.params.get(n).unwrap();
    let lin = |x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>| -> Vec<f64> {
        let (o, i) = w.dims2();
        (0..o)
            .map(|r| {
                let mut s = b.map_or(0.0, |b| b.data()[r]);
                for j in 0..i {
                    s += w.get2(r, j) * x[j];
                }
                s
            })
            .collect()
    };
    let ln = |x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
            .collect()
    };
    let mut xs: Vec<Vec<f64>> = seq
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|j| p("wte").get2(id as usize, j) + p("wpe").get2(t, j))
                .collect()
        })
        .collect();
    for l in 0..c.n_layer {
        let g = |s: &str| p(&format!("h{l}.{s}"));
        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| lin(&ln(x, g("ln1.g"), g("ln1.b")), g("attn.w_qkv"), Some(g("attn.b_qkv"))))
            .collect();
        let mut attn_out = vec![vec![0.0; d]; xs.len()];
        for t in 0..xs.len() {
            for h in 0..c.n_head {
                let q = &qkv[t][h * hd..(h + 1) * hd];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        let k = &qkv[s][d + h * hd..d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for s in 0..=t {
                    for j in 0..hd {
                        attn_out[t][h * hd + j] += e[s] / z * qkv[s][2 * d + h * hd + j];
                    }
                }
            }
        }
        for t in 0..xs.len() {
            let a = lin(&attn_out[t], g("attn.w_proj"), Some(g("attn.b_proj")));
            for j in 0..d {
                xs[t][j] += a[j];
            }
            let h = lin(&ln(&xs[t], g("ln2.g"), g("ln2.b")), g("mlp.w_fc"), Some(g("mlp.b_fc")));
            let h: Vec<f64> = h.iter().map(|&v| v * 0.5 * (1.0 + special::erf(v / 2f64.sqrt()))).collect();
            let y = lin(&h, g("mlp.w_proj"), Some(g("mlp.b_proj")));
            for j in 0..d {
                xs[t][j] += y[j];
            }
        }
    }
    xs.iter()
        .map(|x| lin(&ln(x, p("ln_f.g"), p("ln_f.b")), p("head"), None))
        .collect()
}

#[test]
fn matches_naive_oracle() {
    let mut m = Model::<f64>::init(dense_cfg(2, 8, Activation::Gelu), &mut rng(4)).unwrap();
    bump(&mut m, 20.0);
    let seq = tokens(9, 11, 5);
    let got = m.logits(&seq).unwrap();
    let want = naive_logits(&m, &seq);
    for (t, row) in want.iter().enumerate() {
        for (a, b) in got.row(t).iter().zip(row) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut m = Model::<f64>::init(dense_cfg(1, 8, Activation::Gelu), &mut rng(6)).unwrap();
    bump(&mut m, 10.0);
    let got = m.logits(&[3]).unwrap();
    let want = naive_logits(&m, &[3]);
    for (a, b) in got.row(0).iter().zip(&want[0]) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn zero_blocks_are_identity() {
    let mut m = Model::<f64>::init(dense_cfg(2, 8, Activation::Gelu), &mut rng(7)).unwrap();
    let names: Vec<String> = m.params.names().to_vec();
    for n in names.iter().filter(|n| n.starts_with('h')) {
        let t = m.params.get_mut(n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let seq = tokens(6, 11, 8);
    let got = m.logits(&seq).unwrap();
    let ids: Vec<usize> = seq.iter().map(|&c| c as usize).collect();
    let wte = m.params.get("wte").unwrap();
    let wpe = m.params.get("wpe").unwrap();
    let x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| wte.row(id).iter().zip(wpe.row(t)).map(|(a, b)| a + b).collect())
        .collect();
    let x = Tensor::from_rows(&x).unwrap();
    let h = layer_norm(&x, m.params.get("ln_f.g").unwrap(), m.params.get("ln_f.b").unwrap()).unwrap();
    let want = h.matmul(&m.params.get("head").unwrap().transpose()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn full_topk_activation_is_plain_activation() {
    let base = dense_cfg(2, 8, Activation::Relu);
    let mut cfg = base.clone();
    if let MlpKind::Dense { topk_activation, .. } = &mut cfg.mlp {
        *topk_activation = Some(16);
    }
    let a = Model::<f64>::init(base, &mut rng(9)).unwrap();
    let b = Model::from_parts(cfg, a.params.clone()).unwrap();
    let seq = tokens(7, 11, 10);
    assert_eq!(a.logits(&seq).unwrap(), b.logits(&seq).unwrap());
}

#[test]
fn topk_activation_limits_active_units() {
    let mut cfg = dense_cfg(1, 8, Activation::Gelu);
    if let MlpKind::Dense { topk_activation, .. } = &mut cfg.mlp {
        *topk_activation = Some(3);
    }
    let m = Model::<f64>::init(cfg, &mut rng(11)).unwrap();
    let seq = tokens(6, 11, 12);
    let rows = harvest_hidden(&m, &[&seq], 0, &[(0..6).collect()]).unwrap();
    for r in rows {
        assert!(r.iter().filter(|&&v| v != 0.0).count() <= 3);
    }
}

#[test]
fn single_expert_moe_equals_dense() {
    for router in [RouterKind::TopkLinear, RouterKind::SparsityAware, RouterKind::BruteforceL0] {
        let dense = dense_cfg(2, 8, Activation::Relu);
        let mut d = Model::<f64>::init(dense.clone(), &mut rng(13)).unwrap();
        bump(&mut d, 10.0);
        let names: Vec<String> = d.params.names().to_vec();
        for n in names.iter().filter(|n| n.contains("mlp.b_")) {
            d.params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let moe = moe_cfg(2, 8, 1, 1, 16, router);
        let mut m = Model::<f64>::init(moe, &mut rng(14)).unwrap();
        for (name, t) in d.params.iter() {
            if let Some(dst) = m.params.get_mut(name) {
                *dst = t.clone();
            }
        }
        for l in 0..2 {
            *m.params.get_mut(&expert_enc(l, 0)).unwrap() = d.params.get(&format!("h{l}.mlp.w_fc")).unwrap().clone();
            *m.params.get_mut(&expert_dec(l, 0)).unwrap() = d.params.get(&format!("h{l}.mlp.w_proj")).unwrap().clone();
        }
        let seq = tokens(8, 11, 15);
        let a = d.logits(&seq).unwrap();
        let b = m.logits(&seq).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{router:?}: {x} vs {y}");
        }
    }
}

#[test]
fn activated_params_match_dense_with_k_times_hidden() {
    for (m, k, hidden) in [(8, 2, 64), (4, 1, 32), (16, 4, 8)] {
        let moe = moe_cfg(1, 16, m, k, hidden, RouterKind::SparsityAware);
        let mut dense = dense_cfg(1, 16, Activation::Relu);
        dense.mlp = MlpKind::Dense {
            hidden_mult: (k * hidden) as f64 / 16.0,
            activation: Activation::Relu,
            topk_activation: None,
        };
        assert_eq!(moe.activated_mlp_params(), dense.activated_mlp_params());
    }
}

#[test]
fn random_init_loss_is_near_ln_v() {
    let cfg = ModelConfig {
        vocab_size: 32,
        ctx_len: 64,
        ..dense_cfg(2, 16, Activation::Gelu)
    };
    let m = Model::<f64>::init(cfg, &mut rng(16)).unwrap();
    let mut total = 0.0;
    for s in 0..4 {
        let seq = tokens(64, 32, 100 + s);
        let logits = m.logits(&seq[..63]).unwrap();
        let targets: Vec<usize> = seq[1..].iter().map(|&c| c as usize).collect();
        total += crate::numerics::cross_entropy(&logits, &targets).unwrap();
    }
    let loss = total / 4.0;
    assert!((loss - 32f64.ln()).abs() < 0.1, "{loss}");
}

#[test]
fn harvest_shapes_and_structured_zeros() {
    let m = Model::<f64>::init(moe_cfg(2, 8, 4, 2, 6, RouterKind::SparsityAware), &mut rng(17)).unwrap();
    let a = tokens(7, 11, 18);
    let b = tokens(5, 11, 19);
    let pos = vec![(0..7).collect(), vec![1, 4]];
    let rows = harvest_hidden(&m, &[&a, &b], 1, &pos).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.len() == 24));
    let mut tape = Tape::new();
    let out = m
        .forward(&mut tape, &[&a, &b], ForwardOptions { trainable: false, harvest_layer: Some(1) })
        .unwrap();
    let sel = &out.routing[1].selected;
    for (i, row) in rows.iter().take(7).enumerate() {
        for j in 0..4 {
            if !sel[i].contains(&j) {
                assert!(row[j * 6..(j + 1) * 6].iter().all(|&v| v == 0.0));
            }
        }
    }
    assert!(harvest_hidden(&m, &[&a], 2, &[vec![0]]).is_err());
}

#[test]
fn full_size_config_trace_width() {
    let cfg = ModelConfig {
        n_layer: 8,
        n_head: 8,
        d_model: 512,
        vocab_size: 32,
        ctx_len: 1023,
        ..moe_cfg(8, 512, 8, 2, 2048, RouterKind::SparsityAware)
    };
    cfg.validate().unwrap();
    assert_eq!(cfg.trace_width(), 16384);
}

#[test]
fn deterministic_forward() {
    let cfg = moe_cfg(2, 8, 4, 2, 8, RouterKind::TopkLinear);
    let a = Model::<f32>::init(cfg.clone(), &mut rng(20)).unwrap();
    let b = Model::<f32>::init(cfg, &mut rng(20)).unwrap();
    let seq = tokens(10, 11, 21);
    let la = a.logits(&seq).unwrap();
    let lb = b.logits(&seq).unwrap();
    assert_eq!(la.data(), lb.data());
    assert_eq!(la.data(), a.logits(&seq).unwrap().data());
}

/// Loss of the model on `seq` with parameter `idx` replaced by `value`.
fn loss_with(m: &Model<f64>, batch: &[Vec<u8>], lambda: f64) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let inputs: Vec<&[u8]> = batch.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().map(|&c| c as usize)).collect();
    let out = m.forward(&mut tape, &inputs, ForwardOptions { trainable: true, harvest_layer: None }).unwrap();
    let mut loss = tape.cross_entropy(out.logits, &targets).unwrap();
    for b in &out.balance_losses {
        let s = tape.scale(*b, lambda);
        loss = tape.add(loss, s).unwrap();
    }
    let g = tape.backward(loss).unwrap();
    let value = tape.value(loss).data()[0];
    (value, out.params.iter().map(|&v| g.get(v)).collect())
}

fn end_to_end_fd(mut m: Model<f64>, lambda: f64, seed: u64) -> f64 {
    bump(&mut m, 15.0);
    let batch = vec![tokens(7, 11, seed), tokens(5, 11, seed + 1)];
    let (_, grads) = loss_with(&m, &batch, lambda);
    let mut r = rng(seed + 2);
    let mut worst: f64 = 0.0;
    let eps = 1e-5;
    for pi in 0..m.params.len() {
        let n = m.params.tensors()[pi].numel();
        for _ in 0..4 {
            let i = r.gen_range(0..n);
            let orig = m.params.tensors()[pi].data()[i];
            m.params.tensors_mut()[pi].data_mut()[i] = orig + eps;
            let (up, _) = loss_with(&m, &batch, lambda);
            m.params.tensors_mut()[pi].data_mut()[i] = orig - eps;
            let (down, _) = loss_with(&m, &batch, lambda);
            m.params.tensors_mut()[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let g = grads[pi].data()[i];
            let d = m.config.d_model;
            if m.params.names()[pi].ends_with("attn.b_qkv") && (d..2 * d).contains(&i) {
                // Key biases shift every score in a softmax row equally.
                assert!(g.abs() < 1e-14 && fd.abs() < 1e-9, "key bias: tape {g:e}, fd {fd:e}");
                continue;
            }
            let rel = (fd - g).abs() / g.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn end_to_end_gradient_dense() {
    let m = Model::<f64>::init(dense_cfg(2, 16, Activation::Gelu), &mut rng(22)).unwrap();
    let worst = end_to_end_fd(m, 0.0, 23);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn end_to_end_gradient_moe() {
    let mut cfg = moe_cfg(2, 16, 3, 3, 8, RouterKind::SparsityAware);
    if let MlpKind::Moe(m) = &mut cfg.mlp {
        m.activation = Activation::Gelu;
    }
    let m = Model::<f64>::init(cfg, &mut rng(24)).unwrap();
    let worst = end_to_end_fd(m, 0.5, 25);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn greedy_generation_extends_prompt() {
    let m = Model::<f32>::init(dense_cfg(1, 8, Activation::Gelu), &mut rng(26)).unwrap();
    let out = m.generate_greedy(&[1, 2], 15).unwrap();
    assert_eq!(out.len(), 17);
    assert_eq!(&out[..2], &[1, 2]);
}
