use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::init::{xavier_normal, InitScales};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bias-free `down(swish(x gate) * (x up))` with its own kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct SwiGlu {
    pub up: ParamId,
    pub gate: ParamId,
    pub down: ParamId,
    pub width: usize,
    pub hidden: usize,
}

impl SwiGlu {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        prefix: &str,
        width: usize,
        hidden: usize,
        scales: InitScales,
    ) -> Self {
        let up = store.push(
            format!("{prefix}.up"),
            ParamRole::Up,
            xavier_normal(rng, width, hidden, scales.up),
        );
        let gate = store.push(
            format!("{prefix}.gate"),
            ParamRole::Gate,
            xavier_normal(rng, width, hidden, scales.gate),
        );
        let down = store.push(
            format!("{prefix}.down"),
            ParamRole::Down,
            xavier_normal(rng, hidden, width, scales.down),
        );
        SwiGlu {
            up,
            gate,
            down,
            width,
            hidden,
        }
    }

    /// `x: [m, width] -> [m, width]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let (up, gate, down) = (g.param(self.up)?, g.param(self.gate)?, g.param(self.down)?);
        let gated = g.tape.matmul(x, gate)?;
        let gated = g.tape.swish(gated)?;
        let lifted = g.tape.matmul(x, up)?;
        let hidden = g.tape.mul(gated, lifted)?;
        let hidden = g.quant_point(hidden)?;
        g.tape.matmul(hidden, down)
    }

    pub fn param_count(&self) -> usize {
        3 * self.width * self.hidden
    }

    pub fn macs_per_row(&self) -> usize {
        3 * self.width * self.hidden
    }
}

/// Bias-free `down(relu(x up))`, the pre-SwiGLU per-token FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub up: ParamId,
    pub down: ParamId,
    pub width: usize,
    pub hidden: usize,
}

impl Ffn {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        prefix: &str,
        width: usize,
        hidden: usize,
        scales: InitScales,
    ) -> Self {
        let up = store.push(
            format!("{prefix}.up"),
            ParamRole::Up,
            xavier_normal(rng, width, hidden, scales.up),
        );
        let down = store.push(
            format!("{prefix}.down"),
            ParamRole::Down,
            xavier_normal(rng, hidden, width, scales.down),
        );
        Ffn {
            up,
            down,
            width,
            hidden,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let (up, down) = (g.param(self.up)?, g.param(self.down)?);
        let h = g.tape.matmul(x, up)?;
        let h = g.tape.relu(h)?;
        let h = g.quant_point(h)?;
        g.tape.matmul(h, down)
    }

    pub fn param_count(&self) -> usize {
        2 * self.width * self.hidden
    }

    pub fn macs_per_row(&self) -> usize {
        2 * self.width * self.hidden
    }
}

/// Evaluate one SwiGLU on plain tensors: `x: [m, W]`, `up`/`gate: [W, h]`,
/// `down: [h, W]`.
pub fn pswiglu<R: Real>(x: &Tensor<R>, up: &Tensor<R>, gate: &Tensor<R>, down: &Tensor<R>) -> Result<Tensor<R>> {
    let mut tape = Tape::new();
    let (x, up, gate, down) = (
        tape.constant(x.clone()),
        tape.constant(up.clone()),
        tape.constant(gate.clone()),
        tape.constant(down.clone()),
    );
    let gated = tape.matmul(x, gate)?;
    let gated = tape.swish(gated)?;
    let lifted = tape.matmul(x, up)?;
    let hidden = tape.mul(gated, lifted)?;
    let out = tape.matmul(hidden, down)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero() {
        let x = Tensor::<f64>::from_fn([3, 4], |i| i as f64 - 5.0);
        let z = Tensor::zeros([4, 8]);
        let out = pswiglu(&x, &z, &z, &Tensor::zeros([8, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_unit_weights() {
        let one = Tensor::<f64>::full([1, 1], 1.0);
        let out = pswiglu(&one, &one, &one, &one).unwrap();
        assert!((out.item() - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn distinct_positions_distinct_outputs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::init::rng(3);
        let a = SwiGlu::init(&mut store, &mut rng, "a", 4, 8, InitScales::BASE);
        let b = SwiGlu::init(&mut store, &mut rng, "b", 4, 8, InitScales::BASE);
        let mut g = Graph::new(&store, false);
        let x = g.tape.constant(Tensor::from_fn([2, 4], |i| 0.3 * i as f64 - 1.0));
        let ya = a.forward(&mut g, x).unwrap();
        let yb = b.forward(&mut g, x).unwrap();
        assert!(g.tape.value(ya).max_abs_diff(g.tape.value(yb)) > 1e-6);
    }
}
