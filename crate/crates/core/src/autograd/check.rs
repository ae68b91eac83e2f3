//! Central finite-difference gradient checks.

use super::tape::{SegmentKind, Tape, Var};
use super::tensor::Tensor;
use super::{attention, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::Pcg32;

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on absolute error instead.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

/// Max relative error between the backward pass of `f` at `x` and central
/// differences `(f(x+h) - f(x-h)) / 2h`, taken over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
}

fn random(rng: &mut Pcg32, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .expect("shape matches data")
}

/// Contracts an output with a fixed random tensor so every output element
/// carries a distinct weight into the scalar being checked.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Pcg32::from_seed(seed);
    let w = random(&mut rng, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Checks every differentiable tape operation on small random inputs.
pub fn run_gradcheck_suite(h: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Pcg32::from_seed(0x6772_6164);
    let mut reports = Vec::new();
    let mut check = |name: &str,
                     x: Tensor,
                     f: &dyn Fn(&mut Tape, Var) -> Result<Var>|
     -> Result<()> {
        let err = grad_check(|t, v| f(t, v), &x, h)?;
        reports.push(GradCheckReport {
            name: name.to_string(),
            max_rel_error: err,
        });
        Ok(())
    };

    let other = random(&mut rng, &[3, 4]);
    let rhs = random(&mut rng, &[4, 5]);
    let gain = random(&mut rng, &[4]);
    let bias = random(&mut rng, &[4]);

    check("add", random(&mut rng, &[3, 4]), &|t, x| {
        let o = t.constant(other.clone());
        let y = t.add(x, o)?;
        contract(t, y, 1)
    })?;
    check("sub", random(&mut rng, &[3, 4]), &|t, x| {
        let o = t.constant(other.clone());
        let y = t.sub(o, x)?;
        contract(t, y, 2)
    })?;
    check("mul", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.mul(x, x)?;
        contract(t, y, 3)
    })?;
    check("scale", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.scale(x, -2.5)?;
        contract(t, y, 4)
    })?;
    check("add_row", random(&mut rng, &[4]), &|t, b| {
        let o = t.constant(other.clone());
        let y = t.add_row(o, b)?;
        contract(t, y, 5)
    })?;
    check("matmul_lhs", random(&mut rng, &[3, 4]), &|t, x| {
        let r = t.constant(rhs.clone());
        let y = t.matmul(x, r)?;
        contract(t, y, 6)
    })?;
    check("matmul_rhs", random(&mut rng, &[4, 5]), &|t, w| {
        let o = t.constant(other.clone());
        let y = t.matmul(o, w)?;
        contract(t, y, 7)
    })?;
    check("transpose", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.transpose(x)?;
        contract(t, y, 8)
    })?;
    check("reshape", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.reshape(x, &[2, 6])?;
        contract(t, y, 9)
    })?;
    check("concat", random(&mut rng, &[3, 4]), &|t, x| {
        let o = t.constant(other.clone());
        let a = t.concat(&[x, o, x], 0)?;
        let b = t.concat(&[o, x], 1)?;
        let ca = contract(t, a, 10)?;
        let cb = contract(t, b, 11)?;
        t.add(ca, cb)
    })?;
    check("gather_rows", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.gather_rows(x, &[2, 0, 2, 1])?;
        contract(t, y, 12)
    })?;
    check("narrow", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.narrow(x, 1, 1, 2)?;
        contract(t, y, 13)
    })?;
    check("pick", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.pick(x, &[0, 5, 5, 11])?;
        contract(t, y, 14)
    })?;
    check("relu", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.relu(x)?;
        contract(t, y, 15)
    })?;
    check("layer_norm", random(&mut rng, &[3, 4]), &|t, x| {
        let (g, b) = (t.constant(gain.clone()), t.constant(bias.clone()));
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        contract(t, y, 16)
    })?;
    check("layer_norm_gain", random(&mut rng, &[4]), &|t, g| {
        let (x, b) = (t.constant(other.clone()), t.constant(bias.clone()));
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        contract(t, y, 17)
    })?;
    check("layer_norm_bias", random(&mut rng, &[4]), &|t, b| {
        let (x, g) = (t.constant(other.clone()), t.constant(gain.clone()));
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        contract(t, y, 18)
    })?;
    check("softmax", random(&mut rng, &[3, 4]), &|t, x| {
        let a = t.softmax(x, 1)?;
        let b = t.softmax(x, 0)?;
        let ca = contract(t, a, 19)?;
        let cb = contract(t, b, 20)?;
        t.add(ca, cb)
    })?;
    check("l2_normalize", random(&mut rng, &[3, 4]), &|t, x| {
        let y = t.l2_normalize(x, 1, 1e-12)?;
        contract(t, y, 21)
    })?;
    check("max_pool", random(&mut rng, &[2, 3, 4]), &|t, x| {
        let y = t.max_pool(x, 1)?;
        contract(t, y, 22)
    })?;
    check("mean", random(&mut rng, &[2, 3, 4]), &|t, x| {
        let y = t.mean(x, 2)?;
        contract(t, y, 23)
    })?;
    check("sum", random(&mut rng, &[3, 4]), &|t, x| {
        let s = t.sum(x)?;
        t.mul(s, s)
    })?;
    check("segment_mean", random(&mut rng, &[5, 3]), &|t, x| {
        let y = t.segment(x, &[2, 0, 3], SegmentKind::Mean)?;
        contract(t, y, 24)
    })?;
    check("segment_max", random(&mut rng, &[5, 3]), &|t, x| {
        let y = t.segment(x, &[2, 0, 3], SegmentKind::Max)?;
        contract(t, y, 25)
    })?;
    check("segment_logsumexp", random(&mut rng, &[6]), &|t, x| {
        let y = t.segment(x, &[2, 3, 1], SegmentKind::LogSumExp)?;
        contract(t, y, 26)
    })?;
    let kv = random(&mut rng, &[4, 8]);
    check("attention", random(&mut rng, &[4, 8]), &|t, x| {
        let c = t.constant(kv.clone());
        let y = attention(t, x, c, x, 2)?;
        contract(t, y, 27)
    })?;
    Ok(reports)
}
