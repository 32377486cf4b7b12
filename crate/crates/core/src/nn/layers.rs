use rand::Rng;

use super::graph::Graph;
use super::init::glorot_uniform;
use crate::autodiff::{ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Fully-connected layer `y = W·x + b` on vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(&[output, input], input, output, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).numel() != self.input {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: vec![self.output, self.input],
                rhs: g.shape(x).to_vec(),
            });
        }
        let w = g.p(self.weight);
        let b = g.p(self.bias);
        let col = g.reshape(x, &[self.input, 1])?;
        let y = g.matmul(w, col)?;
        let y = g.reshape(y, &[self.output])?;
        g.add(y, b)
    }
}

/// Square-kernel convolution with per-output-channel bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let area = size * size;
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot_uniform(
                &[out_channels, in_channels, size, size],
                in_channels * area,
                out_channels * area,
                rng,
            ),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Conv2d {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.p(self.kernel);
        let b = g.p(self.bias);
        g.conv2d(x, k, b, self.stride, self.padding)
    }
}

/// Parameters `{M, b}` of one LSTM unit.
///
/// `M` is `(4H)×(D+H)` acting on `[x; h_prev]`. Gate rows are packed in the
/// fixed order input, forget, output, candidate, each block `H` rows tall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Hidden and cell state leaving an LSTM unit.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    /// The all-zero state fed to a first unit.
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        let h = g.constant(Tensor::zeros(&[hidden]));
        let c = g.constant(Tensor::zeros(&[hidden]));
        LstmState { h, c }
    }
}

impl LstmUnit {
    pub const GATES: usize = 4;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rows = Self::GATES * hidden;
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(&[rows, input + hidden], input + hidden, rows, rng),
        )?;
        let mut b = Tensor::zeros(&[rows]);
        b.values_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), b)?;
        Ok(LstmUnit {
            weight,
            bias,
            input,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, prev: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        for (what, v, len) in [("x", x, self.input), ("h", prev.h, h), ("c", prev.c, h)] {
            if g.shape(v) != [len] {
                return Err(TensorError::invalid(
                    "lstm_unit",
                    format!("{what} has shape {:?}, expected [{len}]", g.shape(v)),
                ));
            }
        }
        let z = g.concat(&[x, prev.h])?;
        let w = g.p(self.weight);
        let b = g.p(self.bias);
        let z = g.reshape(z, &[self.input + h, 1])?;
        let pre = g.matmul(w, z)?;
        let pre = g.reshape(pre, &[Self::GATES * h])?;
        let pre = g.add(pre, b)?;
        let i = g.narrow(pre, 0, h)?;
        let f = g.narrow(pre, h, h)?;
        let o = g.narrow(pre, 2 * h, h)?;
        let cand = g.narrow(pre, 3 * h, h)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let squashed = g.tanh(c);
        let h = g.mul(o, squashed)?;
        Ok(LstmState { h, c })
    }
}

/// Integer nearest-neighbour scale between two spatial sizes.
pub fn upsample_factor(from: usize, to: usize) -> Result<usize> {
    if from == 0 || to < from || !to.is_multiple_of(from) {
        return Err(TensorError::invalid(
            "upsample_nearest",
            format!("size {from} does not scale to {to} by an integer factor"),
        ));
    }
    Ok(to / from)
}
