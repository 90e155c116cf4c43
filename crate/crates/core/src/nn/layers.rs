//! Layer building blocks composed from graph operations.

use crate::error::Result;
use crate::graph::{Graph, Var};

/// `x W^T + b` with `W` stored as `[out, in]`.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul_t(x, weight)?;
    g.add(y, bias)
}

/// conv 3x3 -> ReLU, optionally followed by a 2x2 max pool.
pub fn conv_block(g: &mut Graph, x: Var, kernel: Var, bias: Var, pool: bool) -> Result<Var> {
    let y = g.conv2d(x, kernel, bias)?;
    let y = g.relu(y);
    if pool {
        g.maxpool2d(y)
    } else {
        Ok(y)
    }
}

/// Weights of one direction of one recurrent layer. Gate blocks along the
/// leading axis are ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[4H, input_dim]`
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

/// Run one direction of a 4-gate recurrent cell over `inputs` (each
/// `[N, input_dim]`). The returned hidden states are indexed like `inputs`:
/// with `reverse`, the sequence is consumed from the end, and entry `t` is the
/// state after reading `inputs[t]`.
pub fn lstm_direction(
    g: &mut Graph,
    inputs: &[Var],
    w: &LstmWeights,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let steps = inputs.len();
    let mut out: Vec<Option<Var>> = vec![None; steps];
    let mut state: Option<(Var, Var)> = None;
    for step in 0..steps {
        let t = if reverse { steps - 1 - step } else { step };
        let mut gates = g.matmul_t(inputs[t], w.w_ih)?;
        if let Some((h, _)) = state {
            let rec = g.matmul_t(h, w.w_hh)?;
            gates = g.add(gates, rec)?;
        }
        gates = g.add(gates, w.bias)?;
        let i = g.narrow(gates, 1, 0, hidden)?;
        let i = g.sigmoid(i);
        let f = g.narrow(gates, 1, hidden, hidden)?;
        let f = g.sigmoid(f);
        let cand = g.narrow(gates, 1, 2 * hidden, hidden)?;
        let cand = g.tanh(cand);
        let o = g.narrow(gates, 1, 3 * hidden, hidden)?;
        let o = g.sigmoid(o);
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            let keep = g.mul(f, c_prev)?;
            c = g.add(keep, c)?;
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        out[t] = Some(h);
        state = Some((h, c));
    }
    Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
}

/// One bidirectional layer; output `t` is `[h_fwd(t), h_bwd(t)]`, `[N, 2H]`.
pub fn bilstm_layer(
    g: &mut Graph,
    inputs: &[Var],
    forward: &LstmWeights,
    backward: &LstmWeights,
    hidden: usize,
) -> Result<Vec<Var>> {
    let fw = lstm_direction(g, inputs, forward, hidden, false)?;
    let bw = lstm_direction(g, inputs, backward, hidden, true)?;
    fw.iter().zip(&bw).map(|(&f, &b)| g.concat(&[f, b], 1)).collect()
}
