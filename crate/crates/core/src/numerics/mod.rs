//! Dense tensor kernels and reverse-mode differentiation.

pub mod kernels;
pub mod special;
mod tape;
mod tensor;

use serde::{Deserialize, Serialize};

pub use special::{erf, gelu, normal_cdf, relu};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => special::relu(x),
            Activation::Gelu => special::gelu(x),
        }
    }

    pub fn on_tape<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// The `k` largest entries in descending order with their indices; ties go
/// to the lower index.
pub fn topk_values<T: Scalar>(x: &[T], k: usize) -> Result<(Vec<T>, Vec<usize>)> {
    let idx = topk_indices(x, k)?;
    Ok((idx.iter().map(|&i| x[i]).collect(), idx))
}

pub fn topk_indices<T: Scalar>(x: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > x.len() {
        return Err(Error::TopK { k, n: x.len() });
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    Ok(idx)
}

pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    kernels::softmax_into(x, &mut out);
    out
}

pub fn erf_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(erf)
}

/// Standardize over the last axis (ε = 1e-5 on the variance), then apply `gain`/`bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.layer_norm(xv, g, b)?;
    Ok(tape.value(y).clone())
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).data()[0])
}

/// Compare tape gradients of `f` at `point` with central differences.
///
/// Returns the largest per-coordinate relative error, using
/// `max(|g_tape|, 1e-8)` as the denominator.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    let grad = tape.backward(out)?.get(x);

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let out = f(&mut tape, x)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("f at perturbed point".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let g = grad.data()[i];
        let rel = (g - fd).abs() / g.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.dims2();
        let (_, n) = b.dims2();
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a.get2(i, t) * b.get2(t, j);
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_pick() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = Tensor::<f64>::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn relu_and_unknown_activation() {
        let x = Tensor::<f64>::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert!("swish".parse::<Activation>().is_err());
    }

    #[test]
    fn topk_cases() {
        assert_eq!(topk_values(&[3.0, 1.0, 2.0], 2).unwrap(), (vec![3.0, 2.0], vec![0, 2]));
        assert_eq!(topk_values(&[5.0, 5.0, 1.0], 1).unwrap(), (vec![5.0], vec![0]));
        let (v, _) = topk_values(&[0.3, -1.0, 2.0, 0.7], 4).unwrap();
        assert_eq!(v, vec![2.0, 0.7, 0.3, -1.0]);
        assert!(topk_values(&[1.0], 0).is_err());
        assert!(topk_values(&[1.0], 2).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[2.0f64, 2.0, 2.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1000.0f64, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    }

    #[test]
    fn layer_norm_constant_input_gives_bias() {
        let x = Tensor::<f64>::from_vec(vec![3.0; 4]);
        let g = Tensor::from_vec(vec![2.0; 4]);
        let b = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(layer_norm(&x, &g, &b).unwrap(), b);

        let x = Tensor::<f64>::from_vec(vec![1.0, 4.0, -2.0, 7.0]);
        let y = layer_norm(&x, &Tensor::from_vec(vec![1.0; 4]), &Tensor::zeros(&[4])).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut logits = Tensor::<f64>::zeros(&[2, 32]);
        logits.set2(0, 3, 1e4);
        logits.set2(1, 7, 1e4);
        assert!(cross_entropy(&logits, &[3, 7]).unwrap() < 1e-12);
        let uniform = Tensor::<f64>::zeros(&[4, 32]);
        let l = cross_entropy(&uniform, &[0, 1, 2, 31]).unwrap();
        assert!((l - 32f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 1, 2, 32]),
            Err(Error::TargetOutOfRange { id: 32, .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::randn(&[6, 5], 2.0, &mut rng);
        let targets = [0, 4, 2, 2, 1, 3];
        let mut naive = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            naive -= (logits.get2(i, t).exp() / z).ln();
        }
        naive /= 6.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn backward_analytic_and_detach() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[2.0, -4.0, 6.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let d = tape.detach(x);
        let y = tape.mul(d, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 2.0]);
        assert_eq!(grads.get(d).data(), &[0.0, 0.0]);

        let unreachable = tape.leaf(Tensor::from_vec(vec![9.0]));
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unreachable).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::SeedNotOnTape)));
        assert!(matches!(tape.backward(Var::from_raw(99)), Err(Error::SeedNotOnTape)));
    }

    #[test]
    fn relu_gradient_vs_finite_differences() {
        for (x0, expect) in [(3.0, 1.0), (-3.0, 0.0)] {
            let p = Tensor::from_vec(vec![x0]);
            let mut tape = Tape::new();
            let x = tape.leaf(p.clone());
            let r = tape.relu(x);
            let s = tape.sum(r);
            assert_eq!(tape.backward(s).unwrap().get(x).data()[0], expect);
            let err = finite_difference_check(
                |t, x| {
                    let r = t.relu(x);
                    Ok(t.sum(r))
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8);
        }
    }

    #[test]
    fn fd_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let err = finite_difference_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");

        let err = finite_difference_check(
            |t, x| {
                let z = t.scale(x, 0.0);
                Ok(t.sum(z))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_caught_in_verification_mode() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        let z = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.div(x, z).unwrap();
        let s = tape.sum(y);
        assert!(matches!(tape.backward(s), Err(Error::NonFinite(_))));
    }
}
