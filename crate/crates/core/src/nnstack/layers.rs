//! GRU cell and depthwise temporal convolution parameters.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::graph::{Graph, Var};

/// Validity mask of a right-padded, time-major batch.
///
/// Frame `t` of sequence `b` is valid iff `t < lengths[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMask {
    t_max: usize,
    lengths: Arc<[usize]>,
}

impl SeqMask {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::Input("sequence with zero frames".into()));
        }
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        Ok(SeqMask {
            t_max,
            lengths: lengths.into(),
        })
    }

    /// Mask padded out to `t_max` frames (must be at least the longest sequence).
    pub fn with_t_max(lengths: Vec<usize>, t_max: usize) -> Result<Self> {
        let mut m = SeqMask::new(lengths)?;
        if t_max < m.t_max {
            return Err(Error::Input(format!("t_max {t_max} shorter than longest sequence {}", m.t_max)));
        }
        m.t_max = t_max;
        Ok(m)
    }

    pub fn single(frames: usize) -> Result<Self> {
        SeqMask::new(alloc::vec![frames])
    }

    #[inline]
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    #[inline]
    pub fn length(&self, b: usize) -> usize {
        self.lengths[b]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    #[inline]
    pub fn is_valid(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }

    pub fn padded_frames(&self) -> usize {
        self.lengths.iter().map(|&l| self.t_max - l).sum()
    }
}

/// Uniform in `±sqrt(1/fan_in)`.
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = libm::sqrt(1.0 / fan_in.max(1) as f64);
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// GRU weights. Gate blocks along the columns are ordered update, reset, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    /// `D_in x 3H`
    pub w: Matrix,
    /// `H x 3H`
    pub u: Matrix,
    /// `1 x 3H`
    pub b: Matrix,
}

impl GruCellParams {
    pub fn new(w: Matrix, u: Matrix, b: Matrix) -> Result<Self> {
        let h = u.rows();
        if h == 0 || u.cols() != 3 * h || w.cols() != 3 * h || b.shape() != (1, 3 * h) || w.rows() == 0 {
            return Err(Error::shape(
                "GruCellParams",
                format!("w {:?}, u {:?}, b {:?}", w.shape(), u.shape(), b.shape()),
            ));
        }
        Ok(GruCellParams { w, u, b })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCellParams {
            w: Matrix::zeros(input, 3 * hidden),
            u: Matrix::zeros(hidden, 3 * hidden),
            b: Matrix::zeros(1, 3 * hidden),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruCellParams {
            w: init_uniform(input, 3 * hidden, input, rng),
            u: init_uniform(hidden, 3 * hidden, hidden, rng),
            b: Matrix::zeros(1, 3 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn hidden(&self) -> usize {
        self.u.rows()
    }
}

/// One GRU step built from primitive tape ops.
///
/// `x` is `B x D_in`, `h` is `B x H`; `w`, `u`, `b` are leaves holding
/// [`GruCellParams`]. Returns `B x H`:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
pub fn gru_cell(g: &mut Graph, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let hidden = g.value(u).rows();
    let d_in = g.value(w).rows();
    if g.value(x).cols() != d_in || g.value(h).cols() != hidden || g.value(x).rows() != g.value(h).rows() {
        return Err(Error::shape(
            "gru_cell",
            format!(
                "x {:?}, h {:?}, w {:?}, u {:?}",
                g.value(x).shape(),
                g.value(h).shape(),
                g.value(w).shape(),
                g.value(u).shape()
            ),
        ));
    }
    let split = |g: &mut Graph, m: Var, k: usize| -> Result<Var> {
        // column block k of a 3H-wide matrix, via a constant selector matmul
        let cols = g.value(m).cols();
        let mut sel = Matrix::zeros(cols, hidden);
        for j in 0..hidden {
            sel.set(k * hidden + j, j, 1.0);
        }
        let s = g.constant(sel);
        g.matmul(m, s)
    };
    let wz = split(g, w, 0)?;
    let wr = split(g, w, 1)?;
    let wh = split(g, w, 2)?;
    let uz = split(g, u, 0)?;
    let ur = split(g, u, 1)?;
    let uh = split(g, u, 2)?;
    let bz = split(g, b, 0)?;
    let br = split(g, b, 1)?;
    let bh = split(g, b, 2)?;

    let gate = |g: &mut Graph, wk: Var, hin: Var, uk: Var, bk: Var| -> Result<Var> {
        let xw = g.matmul(x, wk)?;
        let hu = g.matmul(hin, uk)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, bk)
    };
    let z_pre = gate(g, wz, h, uz, bz)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, wr, h, ur, br)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let c_pre = gate(g, wh, rh, uh, bh)?;
    let c = g.tanh(c_pre);

    let ones = g.constant(Matrix::filled(g.value(z).rows(), hidden, 1.0));
    let one_minus_z = g.sub(ones, z)?;
    let keep = g.mul(one_minus_z, h)?;
    let take = g.mul(z, c)?;
    g.add(keep, take)
}

/// Evaluate one GRU step on plain vectors.
pub fn gru_cell_forward(params: &GruCellParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() || h.len() != params.hidden() {
        return Err(Error::shape(
            "gru_cell_forward",
            format!("x {} (want {}), h {} (want {})", x.len(), params.input_dim(), h.len(), params.hidden()),
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(Matrix::row_vector(x));
    let hv = g.constant(Matrix::row_vector(h));
    let w = g.constant(params.w.clone());
    let u = g.constant(params.u.clone());
    let b = g.constant(params.b.clone());
    let out = gru_cell(&mut g, xv, hv, w, u, b)?;
    Ok(g.value(out).as_slice().to_vec())
}

/// Per-channel width-3 kernels and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseTConvParams {
    /// `D x 3`, taps for frames `t-1, t, t+1`.
    pub kernel: Matrix,
    /// `1 x D`
    pub bias: Matrix,
}

impl DepthwiseTConvParams {
    pub fn new(kernel: Matrix, bias: Matrix) -> Result<Self> {
        if kernel.cols() != 3 || kernel.rows() == 0 || bias.shape() != (1, kernel.rows()) {
            return Err(Error::shape(
                "DepthwiseTConvParams",
                format!("kernel {:?}, bias {:?}", kernel.shape(), bias.shape()),
            ));
        }
        Ok(DepthwiseTConvParams { kernel, bias })
    }

    /// Every channel passes its input through unchanged.
    pub fn identity(channels: usize) -> Self {
        let mut kernel = Matrix::zeros(channels, 3);
        for c in 0..channels {
            kernel.set(c, 1, 1.0);
        }
        DepthwiseTConvParams {
            kernel,
            bias: Matrix::zeros(1, channels),
        }
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        DepthwiseTConvParams {
            kernel: init_uniform(channels, 3, 3, rng),
            bias: Matrix::zeros(1, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.kernel.rows()
    }
}

/// Convolve a single `T x D` sequence.
pub fn tconv_forward(params: &DepthwiseTConvParams, seq: &Matrix) -> Result<Matrix> {
    if seq.cols() != params.channels() {
        return Err(Error::shape(
            "tconv_forward",
            format!("{} channels, kernels for {}", seq.cols(), params.channels()),
        ));
    }
    let mask = SeqMask::single(seq.rows())?;
    let mut g = Graph::new();
    let x = g.constant(seq.clone());
    let k = g.constant(params.kernel.clone());
    let b = g.constant(params.bias.clone());
    let y = g.tconv(x, k, b, &mask)?;
    Ok(g.value(y).clone())
}
