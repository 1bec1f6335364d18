use rand_chacha::ChaCha8Rng;

use super::{conv2d, Conv2dLayer};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Hidden and cell maps of a recurrent branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchState {
    pub h: Var,
    pub c: Var,
}

/// Convolutional LSTM cell without peephole terms.
///
/// Gate channels are laid out as `(i, f, g, o)`, each `hidden` wide. The forget
/// slice of the bias starts at 1.0.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub input: Conv2dLayer,
    pub recurrent: ParamId,
    pub in_ch: usize,
    pub hidden: usize,
    pub kernel_size: usize,
}

impl ConvLstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        const K: usize = 3;
        let gates = 4 * hidden;
        let input = Conv2dLayer::new(
            store,
            &format!("{name}.input"),
            in_ch,
            gates,
            K,
            1,
            K / 2,
            rng,
        )?;
        let bias = input.bias.expect("conv layers carry a bias");
        let mut b = vec![0.0; gates];
        b[hidden..2 * hidden].fill(1.0);
        store.get_mut(bias).value = Tensor::new([gates], b)?;
        let recurrent = store.add_glorot(
            format!("{name}.recurrent.kernel"),
            &[gates, hidden, K, K],
            hidden * K * K,
            gates * K * K,
            rng,
        )?;
        Ok(ConvLstmCell {
            input,
            recurrent,
            in_ch,
            hidden,
            kernel_size: K,
        })
    }
}

/// One ConvLSTM update; `state == None` means zero hidden and cell maps.
pub fn convlstm_step(
    g: &mut Graph<'_>,
    x: Var,
    state: Option<BranchState>,
    cell: &ConvLstmCell,
) -> Result<BranchState> {
    let xs = g.tape.shape(x).to_vec();
    if xs.len() != 3 || xs[0] != cell.in_ch {
        return Err(Error::shape("convlstm input", &xs, &[cell.in_ch]));
    }
    let expected = [cell.hidden, xs[1], xs[2]];
    if let Some(s) = state {
        for v in [s.h, s.c] {
            if g.tape.shape(v) != expected {
                return Err(Error::shape("convlstm state", g.tape.shape(v), &expected));
            }
        }
    }
    let mut gates = conv2d(g, x, &cell.input)?;
    if let Some(s) = state {
        let w = g.param(cell.recurrent);
        let pad = cell.kernel_size / 2;
        let rec = g.tape.conv2d(s.h, w, None, 1, pad)?;
        gates = g.tape.add(gates, rec)?;
    }
    let n = cell.hidden;
    let i = g.tape.slice_channels(gates, 0, n)?;
    let f = g.tape.slice_channels(gates, n, n)?;
    let cand = g.tape.slice_channels(gates, 2 * n, n)?;
    let o = g.tape.slice_channels(gates, 3 * n, n)?;
    let i = g.tape.sigmoid(i);
    let f = g.tape.sigmoid(f);
    let cand = g.tape.tanh(cand);
    let o = g.tape.sigmoid(o);

    let write = g.tape.mul(i, cand)?;
    let c = match state {
        Some(s) => {
            let keep = g.tape.mul(f, s.c)?;
            g.tape.add(keep, write)?
        }
        None => write,
    };
    let squashed = g.tape.tanh(c);
    let h = g.tape.mul(o, squashed)?;
    Ok(BranchState { h, c })
}

/// Runs the cell over `frames` from a zero state and returns the final state.
pub fn encode_sequence(
    g: &mut Graph<'_>,
    frames: &[Var],
    cell: &ConvLstmCell,
) -> Result<BranchState> {
    if frames.is_empty() {
        return Err(Error::EmptySequence("encode_sequence"));
    }
    let mut state = None;
    for &x in frames {
        state = Some(convlstm_step(g, x, state, cell)?);
    }
    Ok(state.expect("non-empty"))
}
