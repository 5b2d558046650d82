//! LSTM encoder-decoder with TimeDistributed output layers and the
//! day-of-week / holiday embedding branches.
//!
//! The encoder compresses the projected input sequence into its final
//! (hidden, cell) state; that hidden vector is repeated once per output step
//! as the decoder's input while the decoder starts from the encoder state.
//! Gate kernels are packed (input, forget, cell, output) along columns.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};

/// Tape-bound LSTM kernels: input kernel D x 4H, recurrent kernel H x 4H,
/// bias 1 x 4H.
#[derive(Debug, Clone, Copy)]
pub struct LstmKernel {
    pub wx: NodeId,
    pub wh: NodeId,
    pub bias: NodeId,
}

/// Per-sequence dropout masks, fixed across time steps (variational style).
/// `input` multiplies the step input, `recurrent` the previous hidden state.
#[derive(Debug, Clone)]
pub struct SeqMasks {
    pub input: Matrix,
    pub recurrent: Matrix,
}

fn gate_width(tape: &Tape, kernel: &LstmKernel) -> Result<usize> {
    let four_h = tape.value(kernel.wx).cols();
    if four_h % 4 != 0 || tape.value(kernel.wh).cols() != four_h {
        return Err(CoreError::Shape {
            op: "lstm_step",
            detail: format!(
                "packed kernels must share a 4H column count, got wx {} wh {}",
                tape.value(kernel.wx).shape_str(),
                tape.value(kernel.wh).shape_str()
            ),
        });
    }
    Ok(four_h / 4)
}

/// One LSTM cell update. Inputs are row vectors: x is 1 x D, h and c are
/// 1 x H. Returns (h', c').
pub fn lstm_step(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    kernel: &LstmKernel,
    masks: Option<&SeqMasks>,
) -> Result<(NodeId, NodeId)> {
    let hidden = gate_width(tape, kernel)?;
    let (x, h_in) = match masks {
        Some(m) => (
            tape.soft_select(x, m.input.clone())?,
            tape.soft_select(h, m.recurrent.clone())?,
        ),
        None => (x, h),
    };
    let zx = tape.matmul(x, kernel.wx)?;
    let zh = tape.matmul(h_in, kernel.wh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, kernel.bias)?;

    let i_lin = tape.slice_cols(z, 0, hidden)?;
    let f_lin = tape.slice_cols(z, hidden, 2 * hidden)?;
    let g_lin = tape.slice_cols(z, 2 * hidden, 3 * hidden)?;
    let o_lin = tape.slice_cols(z, 3 * hidden, 4 * hidden)?;

    let i = tape.sigmoid(i_lin);
    let f = tape.sigmoid(f_lin);
    let g = tape.tanh(g_lin);
    let o = tape.sigmoid(o_lin);

    let fc = tape.hadamard(f, c)?;
    let ig = tape.hadamard(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_next);
    let h_next = tape.hadamard(o, c_act)?;

    if !tape.value(h_next).all_finite() {
        return Err(CoreError::Numeric("non-finite hidden state in lstm_step".into()));
    }
    Ok((h_next, c_next))
}

/// Runs the encoder over the whole input sequence from a zero state and
/// returns the final (hidden, cell) representation.
pub fn encode(tape: &mut Tape, xs: &[NodeId], kernel: &LstmKernel) -> Result<(NodeId, NodeId)> {
    if xs.is_empty() {
        return Err(CoreError::Contract("encoder requires a nonempty input sequence".into()));
    }
    let hidden = gate_width(tape, kernel)?;
    let mut h = tape.leaf(Matrix::zeros(1, hidden));
    let mut c = tape.leaf(Matrix::zeros(1, hidden));
    for (step, &x) in xs.iter().enumerate() {
        let (h2, c2) = lstm_step(tape, x, h, c, kernel, None).map_err(|e| match e {
            CoreError::Numeric(msg) => CoreError::Numeric(format!("{msg} (encoder step {step})")),
            other => other,
        })?;
        h = h2;
        c = c2;
    }
    Ok((h, c))
}

/// Decodes `p` steps: the encoder's final hidden state is the input at every
/// step, and the decoder LSTM starts from the encoder representation.
pub fn decode(
    tape: &mut Tape,
    representation: (NodeId, NodeId),
    p: usize,
    kernel: &LstmKernel,
    masks: Option<&SeqMasks>,
) -> Result<Vec<NodeId>> {
    if p == 0 {
        return Err(CoreError::Contract("decoder horizon must be at least 1".into()));
    }
    let (enc_h, enc_c) = representation;
    let mut h = enc_h;
    let mut c = enc_c;
    let mut hiddens = Vec::with_capacity(p);
    for step in 0..p {
        let (h2, c2) = lstm_step(tape, enc_h, h, c, kernel, masks).map_err(|e| match e {
            CoreError::Numeric(msg) => CoreError::Numeric(format!("{msg} (decoder step {step})")),
            other => other,
        })?;
        h = h2;
        c = c2;
        hiddens.push(h);
    }
    Ok(hiddens)
}

/// Shared interpretation + output layers applied to each decoder hidden
/// state: relu dense H -> H, then linear dense H -> N*S.
pub fn time_distributed_output(
    tape: &mut Tape,
    hiddens: &[NodeId],
    interp_w: NodeId,
    interp_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
) -> Result<Vec<NodeId>> {
    let mut outs = Vec::with_capacity(hiddens.len());
    for &h in hiddens {
        let z = tape.matmul(h, interp_w)?;
        let z = tape.add_row(z, interp_b)?;
        let a = tape.relu(z);
        let y = tape.matmul(a, out_w)?;
        let y = tape.add_row(y, out_b)?;
        outs.push(y);
    }
    Ok(outs)
}

/// Tape-bound exogenous branch parameters.
#[derive(Debug, Clone, Copy)]
pub struct ExoKernel {
    /// 7 x E day-of-week embedding table.
    pub embed_day: NodeId,
    /// 2 x E holiday embedding table.
    pub embed_holiday: NodeId,
    /// E x (N*S) dense per branch.
    pub dense_day: NodeId,
    pub dense_holiday: NodeId,
}

/// Additive offsets for the target slots: each (day-of-week, holiday) code
/// pair is embedded, mapped through its dense layer, and the two branch
/// outputs summed.
pub fn exogenous_offsets(
    tape: &mut Tape,
    codes: &[(u8, bool)],
    kernel: &ExoKernel,
) -> Result<Vec<NodeId>> {
    let mut offsets = Vec::with_capacity(codes.len());
    for &(dow, holiday) in codes {
        if !(1..=7).contains(&dow) {
            return Err(CoreError::Contract(format!(
                "day-of-week code must be in 1..=7, got {dow}"
            )));
        }
        let d_idx = (dow - 1) as usize;
        let h_idx = holiday as usize;
        let d_vec = tape.slice_rows(kernel.embed_day, d_idx, d_idx + 1)?;
        let h_vec = tape.slice_rows(kernel.embed_holiday, h_idx, h_idx + 1)?;
        let d_out = tape.matmul(d_vec, kernel.dense_day)?;
        let h_out = tape.matmul(h_vec, kernel.dense_holiday)?;
        offsets.push(tape.add(d_out, h_out)?);
    }
    Ok(offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn bind_kernel(tape: &mut Tape, d: usize, h: usize, fill: f64) -> LstmKernel {
        LstmKernel {
            wx: tape.leaf(Matrix::filled(d, 4 * h, fill)),
            wh: tape.leaf(Matrix::filled(h, 4 * h, fill)),
            bias: tape.leaf(Matrix::zeros(1, 4 * h)),
        }
    }

    #[test]
    fn all_zero_step_stays_zero() {
        let mut tape = Tape::new();
        let kernel = bind_kernel(&mut tape, 3, 2, 0.0);
        let x = tape.leaf(Matrix::zeros(1, 3));
        let h = tape.leaf(Matrix::zeros(1, 2));
        let c = tape.leaf(Matrix::zeros(1, 2));
        let (h2, c2) = lstm_step(&mut tape, x, h, c, &kernel, None).unwrap();
        assert_eq!(tape.value(h2).max_abs(), 0.0);
        assert_eq!(tape.value(c2).max_abs(), 0.0);
    }

    #[test]
    fn zero_params_halve_the_cell_state() {
        // all gates sit at sigmoid(0) = 0.5, candidate at tanh(0) = 0:
        // c' = 0.5 c0, h' = 0.5 tanh(0.5 c0)
        let mut tape = Tape::new();
        let kernel = bind_kernel(&mut tape, 2, 2, 0.0);
        let x = tape.leaf(Matrix::filled(1, 2, 3.0));
        let h = tape.leaf(Matrix::filled(1, 2, -1.0));
        let c0 = 0.8;
        let c = tape.leaf(Matrix::filled(1, 2, c0));
        let (h2, c2) = lstm_step(&mut tape, x, h, c, &kernel, None).unwrap();
        for e in 0..2 {
            assert!((tape.value(c2).at(0, e) - 0.5 * c0).abs() < 1e-12);
            assert!((tape.value(h2).at(0, e) - 0.5 * (0.5f64 * c0).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_order_sensitive_and_deterministic() {
        let build = |order: &[usize]| {
            let mut tape = Tape::new();
            let kernel = LstmKernel {
                wx: tape.leaf(Matrix::from_fn(2, 12, |r, c| ((r * 12 + c) as f64 * 0.13).sin() * 0.5)),
                wh: tape.leaf(Matrix::from_fn(3, 12, |r, c| ((r * 12 + c) as f64 * 0.29).cos() * 0.5)),
                bias: tape.leaf(Matrix::zeros(1, 12)),
            };
            let steps: Vec<NodeId> = order
                .iter()
                .map(|&i| tape.leaf(Matrix::from_fn(1, 2, |_, c| (i * 2 + c) as f64 * 0.4 - 0.3)))
                .collect();
            let (h, _) = encode(&mut tape, &steps, &kernel).unwrap();
            tape.value(h).data().to_vec()
        };
        let fwd = build(&[0, 1, 2]);
        let fwd2 = build(&[0, 1, 2]);
        let rev = build(&[2, 1, 0]);
        assert_eq!(fwd, fwd2);
        assert_ne!(fwd, rev);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut tape = Tape::new();
        let kernel = bind_kernel(&mut tape, 2, 2, 0.1);
        assert!(encode(&mut tape, &[], &kernel).is_err());
    }

    #[test]
    fn single_step_encode_equals_lstm_step() {
        let mut tape = Tape::new();
        let kernel = bind_kernel(&mut tape, 2, 3, 0.2);
        let x = tape.leaf(Matrix::from_vec(1, 2, vec![0.5, -0.7]).unwrap());
        let (h_enc, _) = encode(&mut tape, &[x], &kernel).unwrap();
        let h0 = tape.leaf(Matrix::zeros(1, 3));
        let c0 = tape.leaf(Matrix::zeros(1, 3));
        let (h_manual, _) = lstm_step(&mut tape, x, h0, c0, &kernel, None).unwrap();
        assert_eq!(tape.value(h_enc), tape.value(h_manual));
    }

    #[test]
    fn decode_matches_manual_unroll() {
        let mut tape = Tape::new();
        let kernel = LstmKernel {
            wx: tape.leaf(Matrix::from_fn(2, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin() * 0.4)),
            wh: tape.leaf(Matrix::from_fn(2, 8, |r, c| ((r * 8 + c) as f64 * 0.53).cos() * 0.4)),
            bias: tape.leaf(Matrix::from_fn(1, 8, |_, c| c as f64 * 0.01)),
        };
        let h_enc = tape.leaf(Matrix::from_vec(1, 2, vec![0.3, -0.2]).unwrap());
        let c_enc = tape.leaf(Matrix::from_vec(1, 2, vec![0.1, 0.4]).unwrap());
        let hs = decode(&mut tape, (h_enc, c_enc), 2, &kernel, None).unwrap();
        assert_eq!(hs.len(), 2);
        // manual two-call unroll with the repeated encoder hidden as input
        let (h1, c1) = lstm_step(&mut tape, h_enc, h_enc, c_enc, &kernel, None).unwrap();
        let (h2, _) = lstm_step(&mut tape, h_enc, h1, c1, &kernel, None).unwrap();
        assert_eq!(tape.value(hs[0]), tape.value(h1));
        assert_eq!(tape.value(hs[1]), tape.value(h2));
        assert!(decode(&mut tape, (h_enc, c_enc), 0, &kernel, None).is_err());
    }

    #[test]
    fn time_distributed_shares_weights() {
        let mut tape = Tape::new();
        let interp_w = tape.leaf(Matrix::from_fn(3, 3, |r, c| ((r + c) as f64 * 0.5).sin()));
        let interp_b = tape.leaf(Matrix::filled(1, 3, 0.1));
        let out_w = tape.leaf(Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.05));
        let out_b = tape.leaf(Matrix::zeros(1, 4));
        let h_val = Matrix::from_vec(1, 3, vec![0.4, -0.6, 1.1]).unwrap();
        let h1 = tape.leaf(h_val.clone());
        let h2 = tape.leaf(Matrix::from_vec(1, 3, vec![9.0, 0.0, -3.0]).unwrap());
        let h3 = tape.leaf(h_val);
        let outs =
            time_distributed_output(&mut tape, &[h1, h2, h3], interp_w, interp_b, out_w, out_b)
                .unwrap();
        assert_eq!(tape.value(outs[0]), tape.value(outs[2]));
        assert_ne!(tape.value(outs[0]), tape.value(outs[1]));
        // zero hidden with zero biases gives zero output
        let mut t2 = Tape::new();
        let iw = t2.leaf(Matrix::from_fn(3, 3, |r, c| (r + c) as f64));
        let ib = t2.leaf(Matrix::zeros(1, 3));
        let ow = t2.leaf(Matrix::from_fn(3, 4, |r, c| (r + c) as f64));
        let ob = t2.leaf(Matrix::zeros(1, 4));
        let hz = t2.leaf(Matrix::zeros(1, 3));
        let outs = time_distributed_output(&mut t2, &[hz], iw, ib, ow, ob).unwrap();
        assert_eq!(t2.value(outs[0]).max_abs(), 0.0);
    }

    #[test]
    fn exogenous_offsets_lookup() {
        let mut tape = Tape::new();
        let kernel = ExoKernel {
            embed_day: tape.leaf(Matrix::from_fn(7, 2, |r, c| (r * 2 + c) as f64)),
            embed_holiday: tape.leaf(Matrix::from_fn(2, 2, |r, c| (r * 10 + c) as f64 * 0.1)),
            dense_day: tape.leaf(Matrix::from_fn(2, 3, |r, c| ((r + c) as f64 * 0.4).sin())),
            dense_holiday: tape.leaf(Matrix::from_fn(2, 3, |r, c| ((r * 3 + c) as f64 * 0.2).cos())),
        };
        let offs = exogenous_offsets(&mut tape, &[(2, false), (2, false), (5, true)], &kernel).unwrap();
        // identical codes give identical offsets
        assert_eq!(tape.value(offs[0]), tape.value(offs[1]));
        assert_ne!(tape.value(offs[0]), tape.value(offs[2]));
        // out-of-range code errors
        assert!(exogenous_offsets(&mut tape, &[(0, false)], &kernel).is_err());
        assert!(exogenous_offsets(&mut tape, &[(8, false)], &kernel).is_err());
    }

    #[test]
    fn zero_embedding_tables_give_zero_offsets() {
        let mut tape = Tape::new();
        let kernel = ExoKernel {
            embed_day: tape.leaf(Matrix::zeros(7, 3)),
            embed_holiday: tape.leaf(Matrix::zeros(2, 3)),
            dense_day: tape.leaf(Matrix::from_fn(3, 4, |r, c| (r + c) as f64)),
            dense_holiday: tape.leaf(Matrix::from_fn(3, 4, |r, c| (r * c) as f64)),
        };
        let offs = exogenous_offsets(&mut tape, &[(3, true)], &kernel).unwrap();
        assert_eq!(tape.value(offs[0]).max_abs(), 0.0);
    }
}
