//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every operation appends a node and returns a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in reverse recording
//! order and accumulates gradients into every leaf that requires them.
//! Named parameter sets ([`ParamStore`]) are bound onto a tape per forward
//! pass, so one store can serve many graphs.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, run_gradcheck_suite, GradCheckReport, GRAD_FLOOR};
pub use params::{BoundParams, ParamStore};
pub use tape::{Gradients, SegmentKind, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Multi-head scaled dot-product attention over the rows of `[L, d]`
/// inputs that are already projected. Each head attends with
/// `softmax(Q Kᵀ / √d_head) V`; head outputs are concatenated column-wise.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (lq, d) = tape.value(q).dims2()?;
    let (lk, dk) = tape.value(k).dims2()?;
    let (lv, dv) = tape.value(v).dims2()?;
    if dk != d || dv != d || lk != lv {
        return Err(Error::shape(format!(
            "attention: q [{lq}, {d}], k [{lk}, {dk}], v [{lv}, {dv}]"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_row(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    fn rand_tensor(rng: &mut Pcg32, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = Pcg32::from_seed(1);
        let mut tape = Tape::new();
        let a = rand_tensor(&mut rng, &[3, 4]);
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Pcg32::from_seed(2);
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(va, vb).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((tape.value(out).data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        let v = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, v), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0]));
        let y = tape.param(Tensor::vector(vec![-2.0]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-2.0]);
        assert_eq!(g.get(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.0, 2.0, 3.5];
        let x = tape.param(Tensor::vector(data.clone()));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(data.clone()));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), data.as_slice());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-3.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[2, 5], 3.7));
        let y = tape.softmax(x, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_normalize_is_unit() {
        let mut rng = Pcg32::from_seed(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[6, 7]));
        let y = tape.softmax(x, 1).unwrap();
        for r in tape.value(y).rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let n = tape.l2_normalize(x, 1, 1e-12).unwrap();
        for r in tape.value(n).rows() {
            assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_small_vector_uses_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = tape.l2_normalize(x, 1, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_single_frame_returns_values() {
        let mut rng = Pcg32::from_seed(4);
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[1, 8]));
        let k = tape.constant(rand_tensor(&mut rng, &[1, 8]));
        let vt = rand_tensor(&mut rng, &[1, 8]);
        let v = tape.constant(vt.clone());
        let out = attention(&mut tape, q, k, v, 2).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(vt.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = Pcg32::from_seed(5);
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let row = rand_tensor(&mut rng, &[1, 4]);
        let keys = Tensor::from_rows(&vec![row.data().to_vec(); 3]).unwrap();
        let k = tape.constant(keys);
        let vt = rand_tensor(&mut rng, &[3, 4]);
        let v = tape.constant(vt.clone());
        let out = attention(&mut tape, q, k, v, 1).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                let mean = (0..3).map(|i| vt.data()[i * 4 + j]).sum::<f64>() / 3.0;
                assert!((tape.value(out).data()[r * 4 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(attention(&mut tape, x, x, x, 4), Err(Error::Config(_))));
    }

    #[test]
    fn backward_requires_gradient_path() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_output_is_numeric_failure() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1e300]));
        assert!(matches!(tape.scale(x, 1e300), Err(Error::Numeric(_))));
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut rng = Pcg32::from_seed(6);
        let mut tape = Tape::new();
        let w = tape.param(rand_tensor(&mut rng, &[4, 4]));
        let x = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.softmax(y, 1).unwrap();
        let y = tape.max_pool(y, 0).unwrap();
        let s = tape.sum(y).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(w), g2.get(w));
    }

    #[test]
    fn segment_reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![4, 2], vec![1.0, 5.0, 3.0, 2.0, 7.0, 7.0, -1.0, 0.0]).unwrap(),
        );
        let m = tape.segment(x, &[2, 0, 2], SegmentKind::Mean).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.5, 0.0, 0.0, 3.0, 3.5]);
        let mx = tape.segment(x, &[2, 0, 2], SegmentKind::Max).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, 5.0, 0.0, 0.0, 7.0, 7.0]);
        let v = tape.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let l = tape.segment(v, &[2, 1], SegmentKind::LogSumExp).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((tape.value(l).data()[1] - 1.0).abs() < 1e-15);
    }
}
