use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Var};

/// Long short-term memory cell with gates laid out `[input | forget | cell | output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    w_x: String,
    b: String,
    u: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_dim;
        let cell = LstmCell {
            w_x: format!("{prefix}.w_x"),
            b: format!("{prefix}.b"),
            u: format!("{prefix}.u"),
            input_dim,
            hidden_dim,
        };
        store.insert_uniform(&cell.w_x, &[input_dim, 4 * h], h, rng)?;
        store.insert_uniform(&cell.b, &[1, 4 * h], h, rng)?;
        store.insert_uniform(&cell.u, &[h, 4 * h], h, rng)?;
        Ok(cell)
    }

    pub fn project_input(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim {
            return Err(Error::shape(format!(
                "lstm expects {} input columns, got {:?}",
                self.input_dim,
                tape.shape(x)
            )));
        }
        let w = tape.param(store, &self.w_x)?;
        let b = tape.param(store, &self.b)?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// One step from projected input; returns `(h', c')`.
    pub fn step_projected(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        xp: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden_dim;
        if tape.value(h).cols() != hd || tape.value(c).cols() != hd {
            return Err(Error::shape(format!("lstm state does not match hidden {hd}")));
        }
        let u = tape.param(store, &self.u)?;
        let hu = tape.matmul(h, u)?;
        let pre = tape.add(xp, hu)?;
        let ifo_i = tape.slice_cols(pre, 0, 2 * hd)?;
        let g_pre = tape.slice_cols(pre, 2 * hd, 3 * hd)?;
        let o_pre = tape.slice_cols(pre, 3 * hd, 4 * hd)?;
        let if_gates = tape.sigmoid(ifo_i);
        let i = tape.slice_cols(if_gates, 0, hd)?;
        let f = tape.slice_cols(if_gates, hd, 2 * hd)?;
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}
