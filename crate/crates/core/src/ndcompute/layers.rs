//! Layer vocabulary: dense stacks and a four-gate recurrent cell.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{ParamStore, ParamTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Sigmoid,
    Relu,
    LeakyRelu,
    Tanh,
    Softmax,
    RecurrentCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::field("layer dims", format!("{in_dim}x{out_dim} must be >= 1")));
        }
        if kind != LayerKind::Linear && kind != LayerKind::RecurrentCell && in_dim != out_dim {
            return Err(Error::field("layer dims", "activations preserve width"));
        }
        Ok(Self { kind, in_dim, out_dim })
    }
}

/// Negative slope used by [`LayerKind::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `(weight, bias)` indices into the owning store, for linear layers.
    pub params: Option<(usize, usize)>,
}

/// Activation used between dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Relu,
    LeakyRelu,
    Tanh,
    Softmax,
}

impl Activation {
    fn kind(self) -> Option<LayerKind> {
        match self {
            Activation::Identity => None,
            Activation::Sigmoid => Some(LayerKind::Sigmoid),
            Activation::Relu => Some(LayerKind::Relu),
            Activation::LeakyRelu => Some(LayerKind::LeakyRelu),
            Activation::Tanh => Some(LayerKind::Tanh),
            Activation::Softmax => Some(LayerKind::Softmax),
        }
    }
}

/// A feed-forward stack of linear layers and activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Registers a stack `dims[0] -> dims[1] -> ... -> dims[n]` in `store`.
    /// `hidden` follows every linear layer but the last, `output` follows the last.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::field("mlp dims", "need at least input and output width"));
        }
        let mut layers = Vec::new();
        for (i, win) in dims.windows(2).enumerate() {
            let (inp, out) = (win[0], win[1]);
            let spec = LayerSpec::new(LayerKind::Linear, inp, out)?;
            let w = store.push(format!("{prefix}.{i}.w"), ParamTensor::glorot(out, inp, rng));
            let b = store.push(format!("{prefix}.{i}.b"), ParamTensor::zeros(&[out]));
            layers.push(Layer {
                spec,
                params: Some((w, b)),
            });
            let act = if i + 2 == dims.len() { output } else { hidden };
            if let Some(kind) = act.kind() {
                layers.push(Layer {
                    spec: LayerSpec::new(kind, out, out)?,
                    params: None,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        if tape.dim(x) != self.in_dim() {
            return Err(Error::shape("mlp forward", &[self.in_dim()], &[tape.dim(x)]));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match (layer.spec.kind, layer.params) {
                (LayerKind::Linear, Some((w, b))) => tape.linear(store, w, b, h)?,
                (LayerKind::Sigmoid, _) => tape.sigmoid(h),
                (LayerKind::Relu, _) => tape.relu(h),
                (LayerKind::LeakyRelu, _) => tape.leaky_relu(h, LEAKY_SLOPE),
                (LayerKind::Tanh, _) => tape.tanh(h),
                (LayerKind::Softmax, _) => tape.softmax(h),
                (kind, _) => return Err(Error::Invalid(format!("layer {kind:?} not valid inside an mlp"))),
            };
        }
        Ok(h)
    }

    /// Forward pass without keeping a tape around.
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_vec());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).to_vec())
    }

    /// Sets every weight and bias of the stack to zero.
    pub fn zero_params(&self, store: &mut ParamStore) {
        for (w, b) in self.layers.iter().filter_map(|l| l.params) {
            store.get_mut(w).values.iter_mut().for_each(|v| *v = 0.0);
            store.get_mut(b).values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// `W x + b` on plain slices.
pub fn linear_forward(w: &ParamTensor, b: &ParamTensor, x: &[f64]) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let wi = store.push("w", w.clone());
    let bi = store.push("b", b.clone());
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_vec());
    let y = tape.linear(&store, wi, bi, xv)?;
    Ok(tape.value(y).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(width: usize) -> Self {
        Self {
            hidden: vec![0.0; width],
            cell: vec![0.0; width],
        }
    }
}

/// Classical four-gate recurrent cell. Gate pre-activations are stacked as
/// `[input, forget, candidate, output]` and computed from `[x; h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub spec: LayerSpec,
    pub w: usize,
    pub b: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let spec = LayerSpec::new(LayerKind::RecurrentCell, in_dim, hidden)?;
        let w = store.push(
            format!("{prefix}.w"),
            ParamTensor::glorot(4 * hidden, in_dim + hidden, rng),
        );
        let mut bias = ParamTensor::zeros(&[4 * hidden]);
        bias.values[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.push(format!("{prefix}.b"), bias);
        Ok(Self { spec, w, b })
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn initial_state<'a>(&self, tape: &mut Tape<'a>) -> (Var, Var) {
        let h = tape.constant(vec![0.0; self.hidden_dim()]);
        let c = tape.constant(vec![0.0; self.hidden_dim()]);
        (h, c)
    }

    /// One step; returns the new `(hidden, cell)` pair. The output is `hidden`.
    pub fn step<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        state: (Var, Var),
        x: Var,
    ) -> Result<(Var, Var)> {
        let n = self.hidden_dim();
        if tape.dim(x) != self.spec.in_dim {
            return Err(Error::shape("recurrent_step", &[self.spec.in_dim], &[tape.dim(x)]));
        }
        if tape.dim(state.0) != n || tape.dim(state.1) != n {
            return Err(Error::shape("recurrent_step state", &[n], &[tape.dim(state.0)]));
        }
        let xh = tape.concat(&[x, state.0]);
        let z = tape.linear(store, self.w, self.b, xh)?;
        let zi = tape.slice(z, 0, n)?;
        let zf = tape.slice(z, n, n)?;
        let zg = tape.slice(z, 2 * n, n)?;
        let zo = tape.slice(z, 3 * n, n)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let keep = tape.mul(f, state.1)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }
}

/// Plain-value recurrent step.
pub fn recurrent_step(
    cell: &LstmCell,
    store: &ParamStore,
    state: &RecurrentState,
    input: &[f64],
) -> Result<(RecurrentState, Vec<f64>)> {
    let mut tape = Tape::new();
    let h = tape.constant(state.hidden.clone());
    let c = tape.constant(state.cell.clone());
    let x = tape.constant(input.to_vec());
    let (h2, c2) = cell.step(&mut tape, store, (h, c), x)?;
    let out = tape.value(h2).to_vec();
    Ok((
        RecurrentState {
            hidden: out.clone(),
            cell: tape.value(c2).to_vec(),
        },
        out,
    ))
}
