//! Central finite-difference verification of tape gradients at `f64`.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Worst coordinate of a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the worst coordinate, `name[index]`.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
        }
    }

    fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = e.max(self.max_rel_err);
            self.worst = at();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// Check the gradient of the scalar `f(inputs)` with respect to every input
/// coordinate.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let y = f(&mut tape, &vars)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = f(&mut tape, &vars)?;
    let grads = tape.backward(y)?;
    let mut report = GradReport::new();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).ok_or(Error::Backward("input without gradient"))?.data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + step;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - step;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            report.record(|| format!("input{i}[{j}]"), a, (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Check the training loss of a model with respect to every parameter
/// coordinate on one batch.
pub fn check_model(model: &Model, params: &ParamStore<f64>, ids: &[u32], labels: &[f64], step: f64) -> Result<GradReport> {
    let rows = labels.len();
    let loss_of = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(p, false);
        let out = model.forward(&mut g, ids, rows)?;
        let loss = model.loss(&mut g, &out, labels)?;
        Ok(g.tape.value(loss).item())
    };
    let analytic = {
        let mut g = Graph::new(params, true);
        let out = model.forward(&mut g, ids, rows)?;
        let loss = model.loss(&mut g, &out, labels)?;
        g.param_grads(loss)?
    };
    let mut report = GradReport::new();
    let mut work = params.clone();
    for ((id, p), grad) in params.iter().zip(&analytic) {
        for (j, &a) in grad.data().iter().enumerate() {
            let x0 = p.value.data()[j];
            work.get_mut(id).value.data_mut()[j] = x0 + step;
            let up = loss_of(&work)?;
            work.get_mut(id).value.data_mut()[j] = x0 - step;
            let down = loss_of(&work)?;
            work.get_mut(id).value.data_mut()[j] = x0;
            report.record(|| format!("{}[{j}]", p.name), a, (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// `sum(y * w)` with a fixed random `w`, so the upstream gradient is not
/// uniform.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = crate::init::rng(rng_seed);
    let w = randn(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Recipe = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Gradient check of every differentiable primitive on random inputs.
/// `fp8_round_trip` (straight-through) and `detach` (cut) are excluded by
/// design since their gradients are not the derivative of the forward map.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = crate::init::rng(seed);
    let mut out = Vec::new();
    let step = DEFAULT_STEP;
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor<f64>>,
                   f: &Recipe|
     -> Result<()> {
        out.push((name, grad_check(&inputs, step, |t, v| f(t, v))?));
        Ok(())
    };
    let r = &mut rng;
    run("matmul", vec![randn(&[3, 4], r), randn(&[4, 5], r)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 1)
    })?;
    run("add", vec![randn(&[2, 3], r), randn(&[2, 3], r)], &|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 2)
    })?;
    run("mul", vec![randn(&[2, 3], r), randn(&[2, 3], r)], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    })?;
    run("scale", vec![randn(&[5], r)], &|t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted_sum(t, y, 4)
    })?;
    run("add_bias", vec![randn(&[2, 3, 4], r), randn(&[4], r)], &|t, v| {
        let y = t.add_bias(v[0], v[1])?;
        weighted_sum(t, y, 5)
    })?;
    run("row_scale", vec![randn(&[4, 3], r), randn(&[4], r)], &|t, v| {
        let y = t.row_scale(v[0], v[1])?;
        weighted_sum(t, y, 6)
    })?;
    run("concat", vec![randn(&[2, 3], r), randn(&[2, 2], r)], &|t, v| {
        let y = t.concat(v, 1)?;
        weighted_sum(t, y, 7)
    })?;
    run("slice", vec![randn(&[3, 5], r)], &|t, v| {
        let y = t.slice(v[0], 1, 1, 3)?;
        weighted_sum(t, y, 8)
    })?;
    run("reshape", vec![randn(&[2, 6], r)], &|t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        weighted_sum(t, y, 9)
    })?;
    run("permute", vec![randn(&[2, 3, 4], r)], &|t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        weighted_sum(t, y, 10)
    })?;
    run("sigmoid", vec![randn(&[6], r)], &|t, v| {
        let y = t.sigmoid(v[0])?;
        weighted_sum(t, y, 11)
    })?;
    run("swish", vec![randn(&[6], r)], &|t, v| {
        let y = t.swish(v[0])?;
        weighted_sum(t, y, 12)
    })?;
    // keep inputs away from the kink
    let away = randn(&[6], r).map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    run("relu", vec![away], &|t, v| {
        let y = t.relu(v[0])?;
        weighted_sum(t, y, 13)
    })?;
    run("softmax", vec![randn(&[3, 4], r)], &|t, v| {
        let y = t.softmax(v[0])?;
        weighted_sum(t, y, 14)
    })?;
    // distinct, well separated scores so the selection is locally constant
    let scores = Tensor::from_fn([2, 5], |i| ((i * 7) % 10) as f64 * 0.5 + 0.01 * i as f64);
    run("topk", vec![scores], &|t, v| {
        let (y, _) = t.topk(v[0], 2)?;
        weighted_sum(t, y, 15)
    })?;
    run("gather", vec![randn(&[6], r)], &|t, v| {
        let y = t.gather(v[0], Arc::from([4, 0, 4, 2]), &[2, 2])?;
        weighted_sum(t, y, 16)
    })?;
    run("gather_rows", vec![randn(&[4, 3], r)], &|t, v| {
        let y = t.gather_rows(v[0], Arc::from([3, 1, 3]))?;
        weighted_sum(t, y, 17)
    })?;
    run("scatter_rows", vec![randn(&[3, 2], r)], &|t, v| {
        let y = t.scatter_rows(v[0], Arc::from([2, 0, 2]), 4)?;
        weighted_sum(t, y, 18)
    })?;
    run("mean_axis", vec![randn(&[2, 3, 4], r)], &|t, v| {
        let y = t.mean_axis(v[0], 1)?;
        weighted_sum(t, y, 19)
    })?;
    run("sum", vec![randn(&[3, 3], r)], &|t, v| t.sum(v[0]))?;
    run("rmsnorm", vec![randn(&[3, 5], r), randn(&[5], r)], &|t, v| {
        let y = t.rmsnorm(v[0], v[1], 1e-6)?;
        weighted_sum(t, y, 20)
    })?;
    run("bce", vec![randn(&[6], r)], &|t, v| {
        t.bce(v[0], Arc::from([1.0, 0.0, 0.0, 1.0, 1.0, 0.0]))
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum() {
        let mut rng = crate::init::rng(3);
        let x = randn(&[7], &mut rng);
        let r = grad_check(&[x], DEFAULT_STEP, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.checked, 7);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(&[x], DEFAULT_STEP, |t, v| {
            let z = t.scale(v[0], 0.0)?;
            t.sum(z)
        })
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.5), 0.5);
    }
}
