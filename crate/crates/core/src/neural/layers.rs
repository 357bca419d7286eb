//! Parameter initialization and forward helpers for the basic layers.
//!
//! Each layer owns a name prefix in the [`ParamStore`]: `<name>.w` and
//! `<name>.b`, or `<name>.w_ih`, `<name>.w_hh`, `<name>.b` for the LSTM.

use rand::Rng;

use super::autodiff::{AutodiffError, Graph, Var};
use super::params::{ParamStore, Tensor};

pub fn init_linear<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) {
    store.insert(
        format!("{name}.w"),
        Tensor::glorot(vec![output, input], input, output, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(vec![output]));
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var, AutodiffError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.linear(x, w, b))
}

pub fn init_conv<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rng: &mut R,
) {
    let k2 = kernel * kernel;
    store.insert(
        format!("{name}.w"),
        Tensor::glorot(
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * k2,
            out_channels * k2,
            rng,
        ),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(vec![out_channels]));
}

pub fn conv(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var, AutodiffError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, b, stride, pad))
}

pub fn init_conv_transpose<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rng: &mut R,
) {
    let k2 = kernel * kernel;
    store.insert(
        format!("{name}.w"),
        Tensor::glorot(
            vec![in_channels, out_channels, kernel, kernel],
            in_channels * k2,
            out_channels * k2,
            rng,
        ),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(vec![out_channels]));
}

pub fn conv_transpose(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var, AutodiffError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.conv_transpose2d(x, w, b, stride, pad))
}

pub fn init_lstm<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) {
    store.insert(
        format!("{name}.w_ih"),
        Tensor::glorot(vec![4 * hidden, input], input, 4 * hidden, rng),
    );
    store.insert(
        format!("{name}.w_hh"),
        Tensor::glorot(vec![4 * hidden, hidden], hidden, 4 * hidden, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(vec![4 * hidden]));
}

/// One LSTM step with gate order input, forget, cell, output:
///
/// ```text
/// z  = W_ih x + W_hh h + b
/// c' = sigmoid(z_f) * c + sigmoid(z_i) * tanh(z_g)
/// h' = sigmoid(z_o) * tanh(c')
/// ```
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var), AutodiffError> {
    let w_ih = g.param(store, &format!("{name}.w_ih"))?;
    let w_hh = g.param(store, &format!("{name}.w_hh"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let hidden = g.len_of(h);
    let no_bias = g.constant(vec![4 * hidden], vec![0.0; 4 * hidden]);
    let zx = g.linear(x, w_ih, b);
    let zh = g.linear(h, w_hh, no_bias);
    let z = g.add(zx, zh);
    let zi = g.slice(z, 0, hidden);
    let zf = g.slice(z, hidden, hidden);
    let zg = g.slice(z, 2 * hidden, hidden);
    let zo = g.slice(z, 3 * hidden, hidden);
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_next = g.add(keep, write);
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed);
    Ok((h_next, c_next))
}
