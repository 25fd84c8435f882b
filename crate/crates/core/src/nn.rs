//! Parameter containers shared by the encoder stacks and heads.
//!
//! Each container knows how to bind itself onto a tape (producing a mirror of
//! `TensorId`s for one forward pass) and how to enumerate its tensors in a
//! fixed order for the optimizer, checkpointing and gradient absorption.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Visitor over named parameter tensors in registration order.
pub trait ParamVisitor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    /// Attention projections run bias-free (a key bias is a null direction
    /// of softmax attention); MLPs and heads keep theirs.
    pub b: Option<Tensor>,
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: TensorId,
    pub b: Option<TensorId>,
}

impl Linear {
    /// Scaled uniform init with gain 1/sqrt(fan_in); zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: Tensor::uniform(&[fan_in, fan_out], bound, rng).param(),
            b: Some(Tensor::zeros(&[fan_out]).param()),
        }
    }

    /// Bias-free projection.
    pub fn init_no_bias(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear { w: Tensor::uniform(&[fan_in, fan_out], bound, rng).param(), b: None }
    }

    /// All-zero init (used where training should start from a neutral output).
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[fan_in, fan_out]).param(),
            b: Some(Tensor::zeros(&[fan_out]).param()),
        }
    }

    pub fn bias(&self) -> &Tensor {
        self.b.as_ref().expect("layer has no bias")
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        self.b.as_mut().expect("layer has no bias")
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear { w: tape.leaf(&self.w), b: self.b.as_ref().map(|b| tape.leaf(b)) }
    }
}

impl ParamVisitor for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.b"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), b);
        }
    }
}

impl BoundLinear {
    /// `x @ w (+ b)` with the bias broadcast over leading axes.
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let y = tape.matmul(x, self.w)?;
        match self.b {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: TensorId,
    pub beta: TensorId,
}

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], 1.0).param(),
            beta: Tensor::zeros(&[dim]).param(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayerNorm {
        BoundLayerNorm { gamma: tape.leaf(&self.gamma), beta: tape.leaf(&self.beta) }
    }
}

impl ParamVisitor for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl BoundLayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        tape.layernorm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Evaluation/training context for one forward pass. Dropout masks are drawn
/// from the carried stream so replays with the same seed are bit-identical.
pub struct ForwardCtx<'r, R: Rng> {
    pub train: bool,
    pub dropout: f64,
    pub rng: &'r mut R,
}

impl<'r, R: Rng> ForwardCtx<'r, R> {
    pub fn new(train: bool, dropout: f64, rng: &'r mut R) -> Self {
        ForwardCtx { train, dropout, rng }
    }

    /// Inverted dropout as multiplication by a constant mask.
    pub fn dropout(&mut self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data: Vec<f64> =
            (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mask = tape.constant_from(&shape, data)?;
        tape.mul(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_bias_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::init(3, 2, &mut rng);
        lin.b = Some(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap().param());
        let mut tape = Tape::new();
        let bound = lin.bind(&mut tape);
        let x = tape.leaf(&Tensor::zeros(&[2, 4, 3]));
        let y = bound.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 2]);
        for row in tape.data(y).chunks(2) {
            assert_eq!(row, &[1.0, -1.0]);
        }
    }

    #[test]
    fn dropout_off_in_eval_and_scales_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1000], 1.0));
        let mut ctx = ForwardCtx::new(false, 0.5, &mut rng);
        let y = ctx.dropout(&mut tape, x).unwrap();
        assert_eq!(y, x);
        let mut ctx = ForwardCtx::new(true, 0.5, &mut rng);
        let y = ctx.dropout(&mut tape, x).unwrap();
        let mean: f64 = tape.data(y).iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15, "inverted dropout keeps the scale, mean {mean}");
    }
}
