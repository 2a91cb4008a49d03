//! Joint multi-head self-attention over the concatenated text + image sequence.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(mut m: ArrayViewMut2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        let inv = 1.0 / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

fn head_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mut probs: ArrayViewMut2<f64>,
    out: ArrayViewMut2<f64>,
) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    general_mat_mul(scale, &q, &k.t(), 0.0, &mut probs);
    softmax_rows(probs.view_mut());
    let mut out = out;
    general_mat_mul(1.0, &probs, &v, 0.0, &mut out);
}

/// Multi-head attention on `N × D` projections split into `heads` column groups.
///
/// Returns the `N × D` output and the `H × N × N` post-softmax scores.
pub(crate) fn mha_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, Array3<f64>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let mut out = Array2::zeros((n, d));
    let mut probs = Array3::zeros((heads, n, n));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        head_forward(
            q.slice(cols),
            k.slice(cols),
            v.slice(cols),
            probs.index_axis_mut(Axis(0), h),
            out.slice_mut(cols),
        );
    }
    (out, probs)
}

/// Extra loss gradient on the post-softmax scores, added before the softmax Jacobian.
pub(crate) trait ScoreGradient {
    fn add(&self, head: usize, d_probs: &mut Array2<f64>);
}

/// Backward pass of [`mha_forward`]; returns `(dQ, dK, dV)`.
pub(crate) fn mha_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &Array3<f64>,
    d_out: &Array2<f64>,
    heads: usize,
    extra: Option<&dyn ScoreGradient>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    let mut dp = Array2::zeros((n, n));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = probs.index_axis(Axis(0), h);
        let d_o = d_out.slice(cols);
        general_mat_mul(1.0, &p.t(), &d_o, 0.0, &mut dv.slice_mut(cols));
        general_mat_mul(1.0, &d_o, &v.slice(cols).t(), 0.0, &mut dp);
        if let Some(extra) = extra {
            extra.add(h, &mut dp);
        }
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for (mut dp_row, p_row) in dp.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = dp_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
            dp_row.zip_mut_with(&p_row, |g, &pv| *g = pv * (*g - dot));
        }
        general_mat_mul(scale, &dp, &k.slice(cols), 0.0, &mut dq.slice_mut(cols));
        general_mat_mul(scale, &dp.t(), &q.slice(cols), 0.0, &mut dk.slice_mut(cols));
    }
    (dq, dk, dv)
}

/// Scaled dot-product attention on per-head tensors shaped `H × N × d_head`.
///
/// When `capture` is set, the untruncated post-softmax scores (`H × N × N`) are returned.
pub fn joint_attention(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
    capture: bool,
) -> Result<(Array3<f64>, Option<Array3<f64>>)> {
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return Err(Error::Shape(format!(
            "attention inputs Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let (heads, n, dh) = q.dim();
    if heads == 0 || n == 0 || dh == 0 {
        return Err(Error::Shape("attention inputs must be non-empty".into()));
    }
    let mut out = Array3::zeros((heads, n, dh));
    let mut probs = Array3::zeros((heads, n, n));
    for h in 0..heads {
        head_forward(
            q.index_axis(Axis(0), h),
            k.index_axis(Axis(0), h),
            v.index_axis(Axis(0), h),
            probs.index_axis_mut(Axis(0), h),
            out.index_axis_mut(Axis(0), h),
        );
    }
    Ok((out, capture.then_some(probs)))
}
