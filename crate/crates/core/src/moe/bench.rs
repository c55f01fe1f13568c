//! Batched router scoring and wall-clock measurement against
//! [`router_cost_model`].

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{router_cost_model, ExpertParams, RouterKind};
use crate::error::{Error, Result};
use crate::numerics::{erf, topk_indices, Scalar, Tensor};

/// Dot product over eight fixed lanes, summed in lane order. Deterministic,
/// and independent lanes let the compiler vectorize.
#[inline]
pub fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// Router scores `[N×M]` for a batch `x: [N×d]`.
pub fn batch_scores<T: Scalar>(
    kind: RouterKind,
    x: &Tensor<T>,
    experts: &[ExpertParams<T>],
    w_gate: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2();
    let m = experts.len();
    if experts.iter().any(|e| e.width() != d) {
        return Err(Error::dim("batch_scores", &[d], &[experts[0].width()]));
    }
    let mut out = Tensor::zeros(&[n, m]);
    match kind {
        RouterKind::TopkLinear => {
            let g = w_gate.ok_or_else(|| Error::Config("top-k linear routing needs a gate matrix".into()))?;
            if g.dims2() != (m, d) {
                return Err(Error::dim("gate", g.shape(), &[m, d]));
            }
            for t in 0..n {
                for j in 0..m {
                    out.set2(t, j, dot_lanes(x.row(t), g.row(j)));
                }
            }
        }
        RouterKind::SparsityAware => {
            let stats: Vec<_> = experts.iter().map(super::compute_router_stats).collect();
            let mut xsq = vec![T::zero(); d];
            for t in 0..n {
                let xt = x.row(t);
                for (q, &v) in xsq.iter_mut().zip(xt) {
                    *q = v * v;
                }
                for (j, s) in stats.iter().enumerate() {
                    let mu_h = dot_lanes(&s.mu, xt).as_f64();
                    let var_h = dot_lanes(&s.var, &xsq).as_f64();
                    let sigma = var_h.max(super::VAR_FLOOR).sqrt();
                    out.set2(t, j, T::from_f64(-erf(mu_h / (std::f64::consts::SQRT_2 * sigma))));
                }
            }
        }
        RouterKind::BruteforceL0 => {
            for (j, e) in experts.iter().enumerate() {
                let (rows, _) = e.w_enc.dims2();
                for t in 0..n {
                    let xt = x.row(t);
                    let active = (0..rows).filter(|&i| dot_lanes(e.w_enc.row(i), xt) > T::zero()).count();
                    out.set2(t, j, T::from_f64(-(active as f64)));
                }
            }
        }
    }
    Ok(out)
}

/// Top-`k` expert ids per token.
pub fn batch_route<T: Scalar>(
    kind: RouterKind,
    x: &Tensor<T>,
    experts: &[ExpertParams<T>],
    w_gate: Option<&Tensor<T>>,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let scores = batch_scores(kind, x, experts, w_gate)?;
    (0..x.dims2().0).map(|t| topk_indices(scores.row(t), k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub tokens: usize,
    pub experts: usize,
    pub hidden: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub router: RouterKind,
    pub shape: BenchShape,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Random experts and tokens for one benchmark shape.
pub fn bench_inputs(
    shape: BenchShape,
    rng: &mut impl Rng,
) -> (Tensor<f32>, Vec<ExpertParams<f32>>, Tensor<f32>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |shape: &[usize], std: f64| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| (normal.sample(rng) * std) as f32).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    let BenchShape {
        tokens,
        experts,
        hidden,
        width,
    } = shape;
    let scale = 1.0 / (width as f64).sqrt();
    let x = draw(&[tokens, width], 1.0);
    let ex = (0..experts)
        .map(|_| {
            ExpertParams::new(draw(&[hidden, width], scale), draw(&[width, hidden], scale)).expect("expert shapes")
        })
        .collect();
    let g = draw(&[experts, width], scale);
    (x, ex, g)
}

/// Time `reps` routing passes, including any per-call weight statistics.
pub fn bench_router(kind: RouterKind, shape: BenchShape, reps: usize, rng: &mut impl Rng) -> Result<BenchResult> {
    let (x, experts, g) = bench_inputs(shape, rng);
    let k = 2.min(shape.experts);
    // untimed pass so page faults and cold caches don't land in the first rep
    std::hint::black_box(batch_route(kind, &x, &experts, Some(&g), k)?);
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let sel = batch_route(kind, &x, &experts, Some(&g), k)?;
        std::hint::black_box(&sel);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let n = times.len() as f64;
    let mean_ms = times.iter().sum::<f64>() / n;
    let std_ms = if times.len() > 1 {
        (times.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BenchResult {
        router: kind,
        shape,
        mean_ms,
        std_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    /// Milliseconds per predicted operation.
    pub slope: f64,
    pub intercept_ms: f64,
    pub r2: f64,
}

/// Least-squares `time = slope · cost + intercept` over the results of one
/// router, with `cost` from [`router_cost_model`].
pub fn fit_cost_model(results: &[BenchResult]) -> Result<CostFit> {
    if results.len() < 2 {
        return Err(Error::Data("a cost fit needs at least two shapes".into()));
    }
    let pts: Vec<(f64, f64)> = results
        .iter()
        .map(|r| {
            let s = r.shape;
            (router_cost_model(s.tokens, s.experts, s.hidden, s.width, r.router), r.mean_ms)
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("all shapes have the same predicted cost".into()));
    }
    let slope = sxy / sxx;
    let intercept_ms = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - slope * p.0 - intercept_ms).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(CostFit {
        slope,
        intercept_ms,
        r2,
    })
}

/// Parse `N=256,512;M=8;D=256,1024;d=64` into the cross product of shapes.
pub fn parse_shapes(spec: &str) -> Result<Vec<BenchShape>> {
    let mut dims: [Option<Vec<usize>>; 4] = Default::default();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("shape part '{part}' is not key=values")))?;
        let slot = match key.trim() {
            "N" => 0,
            "M" => 1,
            "D" => 2,
            "d" => 3,
            other => return Err(Error::Config(format!("unknown shape key '{other}' (expected N, M, D, d)"))),
        };
        let vals = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&x| x > 0)
                    .ok_or_else(|| Error::Config(format!("bad size '{v}' for {key}")))
            })
            .collect::<Result<Vec<_>>>()?;
        dims[slot] = Some(vals);
    }
    let get = |i: usize, name: &str| {
        dims[i]
            .clone()
            .ok_or_else(|| Error::Config(format!("shape spec is missing {name}")))
    };
    let (ns, ms, hs, ds) = (get(0, "N")?, get(1, "M")?, get(2, "D")?, get(3, "d")?);
    let mut out = Vec::new();
    for &tokens in &ns {
        for &experts in &ms {
            for &hidden in &hs {
                for &width in &ds {
                    out.push(BenchShape {
                        tokens,
                        experts,
                        hidden,
                        width,
                    });
                }
            }
        }
    }
    Ok(out)
}
