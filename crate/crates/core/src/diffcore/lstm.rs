use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Weights of one LSTM layer with a single bias vector.
///
/// Gate blocks are stacked in the order input, forget, cell, output, so
/// `w_ih` is `4H × in`, `w_hh` is `4H × H` and `bias` is `1 × 4H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h4 = 4 * hidden_size;
        let w_ih = store.add_uniform(format!("{prefix}.w_ih"), h4, input_size, input_size, rng)?;
        let w_hh =
            store.add_uniform(format!("{prefix}.w_hh"), h4, hidden_size, hidden_size, rng)?;
        let bias = store.add_zeros(format!("{prefix}.bias"), 1, h4)?;
        Ok(LstmParams {
            w_ih,
            w_hh,
            bias,
            input_size,
            hidden_size,
        })
    }

    /// Looks up an existing layer by name prefix.
    pub fn find(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |suffix: &str| {
            store
                .id(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::InvalidArgument(format!("missing {prefix}.{suffix}")))
        };
        let (w_ih, w_hh, bias) = (get("w_ih")?, get("w_hh")?, get("bias")?);
        let (rows, input_size) = store.value(w_ih).dim();
        Ok(LstmParams {
            w_ih,
            w_hh,
            bias,
            input_size,
            hidden_size: rows / 4,
        })
    }

    /// Scalar parameter count: `4H(in + H) + 4H`.
    pub fn num_params(input_size: usize, hidden_size: usize) -> usize {
        4 * hidden_size * (input_size + hidden_size) + 4 * hidden_size
    }

    /// `x W_ihᵀ + b`; may be computed once and reused when the input is the
    /// same at every step.
    pub fn project_input(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w_ih), tape.param(self.bias));
        tape.affine(x, w, Some(b))
    }

    /// One step from a projected input.
    pub fn step(&self, tape: &mut Tape<'_>, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden_size;
        if tape.value(h).ncols() != hd || tape.value(c).shape() != tape.value(h).shape() {
            return Err(Error::Shape {
                op: "lstm state",
                lhs: tape.value(h).shape().to_vec(),
                rhs: tape.value(c).shape().to_vec(),
            });
        }
        let w_hh = tape.param(self.w_hh);
        let rec = tape.affine(h, w_hh, None)?;
        let gates = tape.add(x_proj, rec)?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let f = tape.slice_cols(gates, hd, hd)?;
        let g = tape.slice_cols(gates, 2 * hd, hd)?;
        let o = tape.slice_cols(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// One LSTM step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    x: Var,
    h: Var,
    c: Var,
    params: &LstmParams,
) -> Result<(Var, Var)> {
    if tape.value(x).ncols() != params.input_size {
        return Err(Error::Shape {
            op: "lstm input",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![params.input_size],
        });
    }
    let proj = params.project_input(tape, x)?;
    params.step(tape, proj, h, c)
}
