use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Var};

/// Gated recurrent unit. Rows of the input and state are independent batch entries.
///
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `c = tanh(x Wc + (r * h) Uc + bc)`, `h' = (1 - z) * h + z * c`.
#[derive(Clone, Debug)]
pub struct GruCell {
    w_x: String,
    b: String,
    u_zr: String,
    u_c: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_dim;
        let cell = GruCell {
            w_x: format!("{prefix}.w_x"),
            b: format!("{prefix}.b"),
            u_zr: format!("{prefix}.u_zr"),
            u_c: format!("{prefix}.u_c"),
            input_dim,
            hidden_dim,
        };
        store.insert_uniform(&cell.w_x, &[input_dim, 3 * h], h, rng)?;
        store.insert_uniform(&cell.b, &[1, 3 * h], h, rng)?;
        store.insert_uniform(&cell.u_zr, &[h, 2 * h], h, rng)?;
        store.insert_uniform(&cell.u_c, &[h, h], h, rng)?;
        Ok(cell)
    }

    /// Names of the bias entries, laid out as `[update | reset | candidate]`.
    pub fn bias_name(&self) -> &str {
        &self.b
    }

    /// Input half of the gate pre-activations, `x W + b`. Can be computed for a
    /// whole sequence at once and sliced per step.
    pub fn project_input(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim {
            return Err(Error::shape(format!(
                "gru expects {} input columns, got {:?}",
                self.input_dim,
                tape.shape(x)
            )));
        }
        let w = tape.param(store, &self.w_x)?;
        let b = tape.param(store, &self.b)?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// One step from projected input `xp` (rows x 3H) and state `h` (rows x H).
    pub fn step_projected(&self, tape: &mut Tape, store: &ParameterStore, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        if tape.value(h).cols() != hd || tape.value(xp).rows() != tape.value(h).rows() {
            return Err(Error::shape(format!(
                "gru state {:?} does not match hidden {hd} / input {:?}",
                tape.shape(h),
                tape.shape(xp)
            )));
        }
        let u_zr = tape.param(store, &self.u_zr)?;
        let u_c = tape.param(store, &self.u_c)?;
        let hzr = tape.matmul(h, u_zr)?;
        let x_zr = tape.slice_cols(xp, 0, 2 * hd)?;
        let x_c = tape.slice_cols(xp, 2 * hd, 3 * hd)?;
        let pre = tape.add(x_zr, hzr)?;
        let gates = tape.sigmoid(pre);
        let z = tape.slice_cols(gates, 0, hd)?;
        let r = tape.slice_cols(gates, hd, 2 * hd)?;
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, u_c)?;
        let cpre = tape.add(x_c, rhu)?;
        let c = tape.tanh(cpre);
        let diff = tape.sub(c, h)?;
        let step = tape.mul(z, diff)?;
        tape.add(h, step)
    }

    pub fn step(&self, tape: &mut Tape, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        let xp = self.project_input(tape, store, x)?;
        self.step_projected(tape, store, xp, h)
    }
}
