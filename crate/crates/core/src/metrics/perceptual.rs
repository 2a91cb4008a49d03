use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::seed::rng_for;

pub const SCALES: [usize; 3] = [1, 2, 4];
pub const FILTERS_PER_SCALE: usize = 8;

/// Frozen seeded 3×3 filter bank applied at three average-pooled scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualFeatureBank {
    pub seed: u64,
    pub channels: usize,
    /// `[scale][filter]` → `3 × 3 × channels` weights, row-major (dy, dx, c).
    filters: Vec<Vec<Vec<f64>>>,
    /// Per-filter normalization (inverse filter L2 norm).
    norms: Vec<Vec<f64>>,
}

impl PerceptualFeatureBank {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut filters = Vec::new();
        let mut norms = Vec::new();
        for (si, _) in SCALES.iter().enumerate() {
            let mut fs = Vec::new();
            let mut ns = Vec::new();
            for f in 0..FILTERS_PER_SCALE {
                let mut rng = rng_for(seed, "perceptual-filter", (si * FILTERS_PER_SCALE + f) as u64);
                let w: Vec<f64> = (0..9 * channels).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                ns.push(1.0 / norm);
                fs.push(w);
            }
            filters.push(fs);
            norms.push(ns);
        }
        Self {
            seed,
            channels,
            filters,
            norms,
        }
    }

    /// Chebyshev distance beyond which a pixel change cannot affect a feature.
    pub fn receptive_radius(&self) -> usize {
        2 * SCALES[SCALES.len() - 1] - 1
    }

    fn features(&self, image: &Image, si: usize) -> (usize, usize, Vec<f64>) {
        let k = SCALES[si];
        let (h, w, c) = image.shape();
        let (ph, pw) = (h.div_ceil(k), w.div_ceil(k));
        let mut pooled = vec![0.0; ph * pw * c];
        for py in 0..ph {
            for px in 0..pw {
                let ys = py * k..((py + 1) * k).min(h);
                let xs = px * k..((px + 1) * k).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for ch in 0..c {
                    let mut s = 0.0;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            s += image.get(y, x, ch);
                        }
                    }
                    pooled[(py * pw + px) * c + ch] = s / n;
                }
            }
        }
        let nf = FILTERS_PER_SCALE;
        let mut out = vec![0.0; ph * pw * nf];
        for py in 0..ph {
            for px in 0..pw {
                for (f, (wts, norm)) in self.filters[si].iter().zip(&self.norms[si]).enumerate() {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        let yy = (py + dy).saturating_sub(1).min(ph - 1);
                        for dx in 0..3 {
                            let xx = (px + dx).saturating_sub(1).min(pw - 1);
                            let base = (yy * pw + xx) * c;
                            for ch in 0..c {
                                acc += wts[(dy * 3 + dx) * c + ch] * pooled[base + ch];
                            }
                        }
                    }
                    out[(py * pw + px) * nf + f] = acc * norm;
                }
            }
        }
        (ph, pw, out)
    }

    /// Per-pixel `Σ_scales ‖φ(a) − φ(b)‖²` with nearest upsampling, row-major `H × W`.
    pub fn distance_map(&self, a: &Image, b: &Image) -> Result<Vec<f64>> {
        a.check_same_shape(b, "perceptual inputs")?;
        if a.channels() != self.channels {
            return Err(Error::Shape(format!(
                "bank expects {} channels, image has {}",
                self.channels,
                a.channels()
            )));
        }
        let (h, w, _) = a.shape();
        let mut d = vec![0.0; h * w];
        for (si, &k) in SCALES.iter().enumerate() {
            let (_, pw, fa) = self.features(a, si);
            let (_, _, fb) = self.features(b, si);
            let nf = FILTERS_PER_SCALE;
            for y in 0..h {
                for x in 0..w {
                    let cell = (y / k) * pw + x / k;
                    let s: f64 = (0..nf)
                        .map(|f| {
                            let diff = fa[cell * nf + f] - fb[cell * nf + f];
                            diff * diff
                        })
                        .sum();
                    d[y * w + x] += s;
                }
            }
        }
        Ok(d)
    }
}

fn background_count(mask: &Mask) -> Result<f64> {
    let bg = mask.height() * mask.width() - mask.count();
    if bg == 0 {
        return Err(Error::EmptyRegion("mask leaves no background".into()));
    }
    Ok(bg as f64)
}

/// Background average of the perceptual distance map, plus the map itself.
pub fn masked_perceptual_distance_map(
    edited: &Image,
    original: &Image,
    mask: &Mask,
    bank: &PerceptualFeatureBank,
) -> Result<(f64, Vec<f64>)> {
    check_mask(edited, mask)?;
    let n = background_count(mask)?;
    let d = bank.distance_map(edited, original)?;
    let s: f64 = d
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| !m)
        .map(|(v, _)| v)
        .sum();
    Ok((s / n, d))
}

pub fn masked_perceptual_distance(
    edited: &Image,
    original: &Image,
    mask: &Mask,
    bank: &PerceptualFeatureBank,
) -> Result<f64> {
    Ok(masked_perceptual_distance_map(edited, original, mask, bank)?.0)
}

fn check_mask(image: &Image, mask: &Mask) -> Result<()> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// `Σ_bg Σ_c (x̂ − x)² / |bg|`.
pub fn masked_mse(edited: &Image, original: &Image, mask: &Mask) -> Result<f64> {
    edited.check_same_shape(original, "masked MSE inputs")?;
    check_mask(edited, mask)?;
    let n = background_count(mask)?;
    let c = edited.channels();
    let mut s = 0.0;
    for (p, &m) in mask.data().iter().enumerate() {
        if !m {
            for ch in 0..c {
                let d = edited.data()[p * c + ch] - original.data()[p * c + ch];
                s += d * d;
            }
        }
    }
    Ok(s / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.random())
    }

    #[test]
    fn mse_hand_enumeration() {
        let a = Image::new(2, 2, 1, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut m = Mask::empty(2, 2);
        m.set(1, 1, true);
        assert!((masked_mse(&a, &b, &m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(masked_mse(&a, &a, &m).unwrap(), 0.0);
        assert!(masked_mse(&a, &b, &Mask::full(2, 2)).is_err());
    }

    #[test]
    fn mse_is_symmetric_and_complementary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 9, 7, 3);
        let b = random_image(&mut rng, 9, 7, 3);
        let m = Mask::from_fn(9, 7, |_, _| rng.random::<f64>() < 0.3);
        assert_eq!(masked_mse(&a, &b, &m).unwrap(), masked_mse(&b, &a, &m).unwrap());
        let inv = Mask::from_fn(9, 7, |y, x| !m.get(y, x));
        let nb = (63 - m.count()) as f64;
        let nf = m.count() as f64;
        let global = masked_mse(&a, &b, &Mask::empty(9, 7)).unwrap();
        let split = (masked_mse(&a, &b, &m).unwrap() * nb + masked_mse(&a, &b, &inv).unwrap() * nf) / 63.0;
        assert!((global - split).abs() <= 1e-10);
    }

    #[test]
    fn perceptual_zero_for_identical_and_far_edits() {
        let bank = PerceptualFeatureBank::new(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 40, 40, 3);
        let mut mask = Mask::empty(40, 40);
        for y in 9..33 {
            for x in 9..33 {
                mask.set(y, x, true);
            }
        }
        assert_eq!(masked_perceptual_distance(&a, &a, &mask, &bank).unwrap(), 0.0);
        let r = bank.receptive_radius();
        let mut b = a.clone();
        for y in 9 + r..33 - r {
            for x in 9 + r..33 - r {
                for c in 0..3 {
                    b.set(y, x, c, rng.random());
                }
            }
        }
        assert_eq!(masked_perceptual_distance(&b, &a, &mask, &bank).unwrap(), 0.0);
        // At the worst-case alignment, one pixel closer reaches the background.
        let mut c = a.clone();
        c.set(9 + r - 1, 20, 0, 1.0 - a.get(9 + r - 1, 20, 0));
        let (_, map) = masked_perceptual_distance_map(&c, &a, &mask, &bank).unwrap();
        assert!(map.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn bank_is_seed_deterministic() {
        assert_eq!(PerceptualFeatureBank::new(9, 3), PerceptualFeatureBank::new(9, 3));
        assert_ne!(PerceptualFeatureBank::new(9, 3), PerceptualFeatureBank::new(10, 3));
    }
}
