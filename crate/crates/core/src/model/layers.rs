//! Dense building blocks with hand-written backward passes.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::lora::LoraPair;
use crate::seed::derive_seed;

/// `y = x·Wᵀ + b` over row-vector tokens; `weight` is `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients of a [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraGrad {
    pub fn zeros_like(pair: &LoraPair) -> Self {
        Self {
            a: Array2::zeros(pair.a.dim()),
            b: Array2::zeros(pair.b.dim()),
        }
    }
}

pub(crate) fn gaussian(seed: u64, name: &str, shape: (usize, usize), std: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name, 0));
    Array2::from_shape_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

impl Linear {
    /// Gaussian init with variance `1 / d_in`, zero bias; stream keyed by `name`.
    pub fn init(seed: u64, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: gaussian(seed, name, (d_out, d_in), 1.0 / (d_in as f64).sqrt()),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_out, d_in)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns the output and, when an adapter is active, the rank-space activations `x·Aᵀ`.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        lora: Option<(&LoraPair, f64)>,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        let u = lora.map(|(pair, scale)| {
            let u = x.dot(&pair.a.t());
            let delta = u.dot(&pair.b.t());
            y.scaled_add(scale, &delta);
            u
        });
        (y, u)
    }

    /// Returns `dx`; accumulates into `lora_grad` and `base_grad` when provided.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        u: Option<&Array2<f64>>,
        dy: ArrayView2<f64>,
        lora: Option<(&LoraPair, f64)>,
        lora_grad: Option<&mut LoraGrad>,
        base_grad: Option<&mut LinearGrad>,
    ) -> Array2<f64> {
        let mut dx = dy.dot(&self.weight);
        if let Some((pair, scale)) = lora {
            let dyb = dy.dot(&pair.b);
            dx.scaled_add(scale, &dyb.dot(&pair.a));
            if let Some(g) = lora_grad {
                let u = u.expect("adapter activations cached");
                g.b.scaled_add(scale, &dy.t().dot(u));
                g.a.scaled_add(scale, &dyb.t().dot(&x));
            }
        }
        if let Some(g) = base_grad {
            g.weight += &dy.t().dot(&x);
            g.bias += &dy.sum_axis(Axis(0));
        }
        dx
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Parameter-free layer norm cache: normalized output and per-row `1/σ`.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub y: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>) -> LnCache {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in y.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    LnCache { y, inv_std }
}

pub fn layer_norm_backward(cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = dy.clone();
    for ((mut dxr, yr), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.y.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_dy = dxr.sum() / d;
        let mean_dyy = dxr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        dxr.zip_mut_with(&yr, |g, &yv| *g = inv * (*g - mean_dy - yv * mean_dyy));
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// `H × W × C` → `(H/p · W/p) × (p·p·C)`, row-major over the patch grid.
pub fn patchify(img: &Array3<f64>, p: usize) -> Array2<f64> {
    let (h, w, c) = img.dim();
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, p * p * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut i = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        row[i] = img[[gy * p + y, gx * p + x, ch]];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &Array2<f64>, grid: (usize, usize), p: usize, c: usize) -> Array3<f64> {
    let (gh, gw) = grid;
    let mut out = Array3::zeros((gh * p, gw * p, c));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = tokens.row(gy * gw + gx);
            let mut i = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        out[[gy * p + y, gx * p + x, ch]] = row[i];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

fn sincos_fill(mut row: ndarray::ArrayViewMut1<f64>, pos: f64) {
    let d = row.len();
    let half = d / 2;
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        row[i] = (pos * freq).sin();
        row[half + i] = (pos * freq).cos();
    }
}

/// 2-D sinusoidal embedding: first half of the width encodes the row, second half the column.
pub fn grid_position_embedding(grid: (usize, usize), dim: usize) -> Array2<f64> {
    let (gh, gw) = grid;
    let mut out = Array2::zeros((gh * gw, dim));
    let half = dim / 2;
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            sincos_fill(row.slice_mut(s![..half]), gy as f64);
            sincos_fill(row.slice_mut(s![half..]), gx as f64);
        }
    }
    out
}

pub fn sequence_position_embedding(len: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, dim));
    for i in 0..len {
        sincos_fill(out.row_mut(i), i as f64);
    }
    out
}

pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    sincos_fill(out.view_mut(), t as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand2(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic[idx];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "{idx:?}: {fd} vs {a}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand2(&mut rng, (3, 5));
        let w = rand2(&mut rng, (3, 5));
        let f = |x: &Array2<f64>| (&layer_norm(x).y * &w).sum();
        let dx = layer_norm_backward(&layer_norm(&x), &w);
        fd_check(f, &x, &dx);
    }

    #[test]
    fn silu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand2(&mut rng, (2, 4)) * 3.0;
        let w = rand2(&mut rng, (2, 4));
        let f = |x: &Array2<f64>| (&silu(x) * &w).sum();
        fd_check(f, &x, &silu_backward(&x, &w));
    }

    #[test]
    fn linear_with_adapter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear {
            weight: rand2(&mut rng, (3, 4)),
            bias: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        };
        let pair = LoraPair {
            a: rand2(&mut rng, (2, 4)),
            b: rand2(&mut rng, (3, 2)),
        };
        let x = rand2(&mut rng, (5, 4));
        let w = rand2(&mut rng, (5, 3));
        let scale = 0.5;
        let (_, u) = lin.forward(x.view(), Some((&pair, scale)));
        let mut lg = LoraGrad::zeros_like(&pair);
        let mut bg = LinearGrad {
            weight: Array2::zeros((3, 4)),
            bias: Array1::zeros(3),
        };
        let dx = lin.backward(x.view(), u.as_ref(), w.view(), Some((&pair, scale)), Some(&mut lg), Some(&mut bg));
        fd_check(|x| (&lin.forward(x.view(), Some((&pair, scale))).0 * &w).sum(), &x, &dx);
        fd_check(
            |a| {
                let p = LoraPair { a: a.clone(), b: pair.b.clone() };
                (&lin.forward(x.view(), Some((&p, scale))).0 * &w).sum()
            },
            &pair.a,
            &lg.a,
        );
        fd_check(
            |b| {
                let p = LoraPair { a: pair.a.clone(), b: b.clone() };
                (&lin.forward(x.view(), Some((&p, scale))).0 * &w).sum()
            },
            &pair.b,
            &lg.b,
        );
        fd_check(
            |wt| {
                let l = Linear { weight: wt.clone(), bias: lin.bias.clone() };
                (&l.forward(x.view(), Some((&pair, scale))).0 * &w).sum()
            },
            &lin.weight,
            &bg.weight,
        );
    }

    #[test]
    fn patchify_round_trip() {
        let img = Array3::from_shape_fn((8, 12, 3), |(y, x, c)| (y * 100 + x * 3 + c) as f64);
        let t = patchify(&img, 4);
        assert_eq!(t.dim(), (6, 48));
        assert_eq!(unpatchify(&t, (2, 3), 4, 3), img);
    }
}
