use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{IcesError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), in_dim, out_dim, in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim {
            return Err(IcesError::Dimension(format!(
                "linear layer expects {} inputs, got {}",
                self.in_dim, cols
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    }
}

/// Stack of linear layers with a hidden activation and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{name}.{k}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        mlp_forward(tape, store, &self.layers, self.activation, x)
    }
}

/// Applies `layers` in order with `activation` between them (none after the last).
pub fn mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[Linear],
    activation: Activation,
    input: Var,
) -> Result<Var> {
    let mut h = input;
    for (k, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, store, h)?;
        if k + 1 < layers.len() {
            h = activation.apply(tape, h);
        }
    }
    Ok(h)
}

/// Gated recurrent unit with the reset gate applied to the recurrent
/// candidate term:
///
/// ```text
/// r  = σ(x W_r + b_r + h U_r + c_r)
/// z  = σ(x W_z + b_z + h U_z + c_z)
/// n  = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let h3 = 3 * hidden_dim;
        Self {
            w_ih: store.add_uniform(format!("{name}.w_ih"), input_dim, h3, hidden_dim, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), hidden_dim, h3, hidden_dim, rng),
            b_ih: store.add_uniform(format!("{name}.b_ih"), 1, h3, hidden_dim, rng),
            b_hh: store.add_uniform(format!("{name}.b_hh"), 1, h3, hidden_dim, rng),
            input_dim,
            hidden_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        gru_cell(tape, store, self, x, h)
    }
}

/// One recurrent step over a batch of rows.
pub fn gru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &GruCell,
    input: Var,
    hidden: Var,
) -> Result<Var> {
    let (xr, xc) = tape.shape(input);
    let (hr, hc) = tape.shape(hidden);
    if xc != cell.input_dim {
        return Err(IcesError::Dimension(format!(
            "GRU expects input width {}, got {}",
            cell.input_dim, xc
        )));
    }
    if hc != cell.hidden_dim || hr != xr {
        return Err(IcesError::Dimension(format!(
            "GRU expects hidden [{xr}, {}], got [{hr}, {hc}]",
            cell.hidden_dim
        )));
    }
    let hd = cell.hidden_dim;
    let w_ih = tape.param(store, cell.w_ih);
    let w_hh = tape.param(store, cell.w_hh);
    let b_ih = tape.param(store, cell.b_ih);
    let b_hh = tape.param(store, cell.b_hh);
    let gi = tape.matmul(input, w_ih);
    let gi = tape.add_row(gi, b_ih);
    let gh = tape.matmul(hidden, w_hh);
    let gh = tape.add_row(gh, b_hh);

    let gi_rz = tape.slice_cols(gi, 0, 2 * hd);
    let gh_rz = tape.slice_cols(gh, 0, 2 * hd);
    let rz = tape.add(gi_rz, gh_rz);
    let rz = tape.sigmoid(rz);
    let r = tape.slice_cols(rz, 0, hd);
    let z = tape.slice_cols(rz, hd, hd);

    let gi_n = tape.slice_cols(gi, 2 * hd, hd);
    let gh_n = tape.slice_cols(gh, 2 * hd, hd);
    let rn = tape.mul(r, gh_n);
    let n = tape.add(gi_n, rn);
    let n = tape.tanh(n);

    // h' = n + z ⊙ (h − n)
    let diff = tape.sub(hidden, n);
    let zd = tape.mul(z, diff);
    Ok(tape.add(n, zd))
}

/// Lookup table with one row per token.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        // N(0, 1)-like spread keeps embeddings distinguishable at init.
        let table = store.add_uniform(format!("{name}.table"), vocab, dim, 1, rng);
        Self { table, vocab, dim }
    }

    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, idx: &[usize]) -> Result<Var> {
        if let Some(bad) = idx.iter().find(|&&i| i >= self.vocab) {
            return Err(IcesError::Dimension(format!(
                "embedding index {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let t = tape.param(store, self.table);
        Ok(tape.gather_rows(t, idx))
    }
}

/// One-hot rows: `[idx.len(), width]`.
pub fn one_hot_rows(idx: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; idx.len() * width];
    for (r, &i) in idx.iter().enumerate() {
        out[r * width + i] = 1.0;
    }
    out
}
