use super::ActivationStats;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{random_gaussian, Matrix, RngState};

/// Hidden width multiplier: each of the three hidden layers is
/// `factor * d_h` wide.
pub const DEFAULT_HIDDEN_FACTOR: usize = 4;

const N_HIDDEN: usize = 3;
const HEAD_INIT_SCALE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct HiddenLayer {
    pub w: Matrix,
    pub b: Matrix,
    pub ln_gain: Matrix,
    pub ln_offset: Matrix,
}

/// MLP mapping activation statistics to a pre-orthonormalization matrix:
/// three GELU(LayerNorm(linear)) hidden layers and a linear head whose
/// output reshapes row-major to d_h x d_h.
#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub d_h: usize,
    pub hidden_width: usize,
    pub hidden: Vec<HiddenLayer>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl PredictorParams {
    /// Hidden layers start Gaussian 1/sqrt(fan_in); the head starts at the
    /// warm-start basis (its flattening becomes the head bias) plus small
    /// noise, so the first predicted matrix sits at the warm start.
    pub fn init(
        d_h: usize,
        hidden_width: usize,
        warm_start: &Matrix,
        rng: &mut RngState,
    ) -> Result<Self> {
        if warm_start.shape() != (d_h, d_h) {
            return Err(Error::dimension(
                "predictor_init",
                format!("warm start must be {d_h}x{d_h}, got {:?}", warm_start.shape()),
            ));
        }
        let mut hidden = Vec::with_capacity(N_HIDDEN);
        let mut fan_in = 2 * d_h;
        for _ in 0..N_HIDDEN {
            hidden.push(HiddenLayer {
                w: random_gaussian(fan_in, hidden_width, rng).scale(1.0 / (fan_in as f64).sqrt()),
                b: Matrix::zeros(1, hidden_width),
                ln_gain: Matrix::from_vec(1, hidden_width, vec![1.0; hidden_width])?,
                ln_offset: Matrix::zeros(1, hidden_width),
            });
            fan_in = hidden_width;
        }
        let head_w = random_gaussian(hidden_width, d_h * d_h, rng)
            .scale(HEAD_INIT_SCALE / (hidden_width as f64).sqrt());
        let head_b = warm_start.reshape(1, d_h * d_h)?;
        Ok(PredictorParams {
            d_h,
            hidden_width,
            hidden,
            head_w,
            head_b,
        })
    }

    /// Parameter matrices in the fixed order the optimizer walks them.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(N_HIDDEN * 4 + 2);
        for h in &self.hidden {
            out.push(&h.w);
            out.push(&h.b);
            out.push(&h.ln_gain);
            out.push(&h.ln_offset);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(N_HIDDEN * 4 + 2);
        for h in &mut self.hidden {
            out.push(&mut h.w);
            out.push(&mut h.b);
            out.push(&mut h.ln_gain);
            out.push(&mut h.ln_offset);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Records the forward pass on a tape with every parameter as a gradient
    /// leaf; returns the d_h x d_h output and the leaves in `params()` order.
    pub fn taped_forward(&self, tape: &mut Tape, s: Var) -> Result<(Var, Vec<Var>)> {
        let sv = tape.value(s);
        if sv.shape() != (1, 2 * self.d_h) {
            return Err(Error::dimension(
                "predictor_forward",
                format!("features must be 1x{}, got {:?}", 2 * self.d_h, sv.shape()),
            ));
        }
        let mut leaves = Vec::with_capacity(N_HIDDEN * 4 + 2);
        let mut h = s;
        for layer in &self.hidden {
            let w = tape.leaf(layer.w.clone());
            let b = tape.leaf(layer.b.clone());
            let gain = tape.leaf(layer.ln_gain.clone());
            let offset = tape.leaf(layer.ln_offset.clone());
            leaves.extend([w, b, gain, offset]);
            let lin = tape.matmul(h, w)?;
            let pre = tape.add(lin, b)?;
            let normed = tape.layer_norm(pre, gain, offset)?;
            h = tape.gelu(normed);
        }
        let head_w = tape.leaf(self.head_w.clone());
        let head_b = tape.leaf(self.head_b.clone());
        leaves.extend([head_w, head_b]);
        let lin = tape.matmul(h, head_w)?;
        let flat = tape.add(lin, head_b)?;
        let a = tape.reshape(flat, self.d_h, self.d_h)?;
        Ok((a, leaves))
    }

    /// Plain forward pass; runs the identical op sequence on a throwaway
    /// tape so evaluation and training agree bit for bit.
    pub fn forward(&self, stats: &ActivationStats) -> Result<Matrix> {
        let mut tape = Tape::new();
        let s = tape.constant(stats.feature_row());
        let (a, _) = self.taped_forward(&mut tape, s)?;
        Ok(tape.value(a).clone())
    }
}
