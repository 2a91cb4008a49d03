use ndarray::Array3;

use crate::error::{Error, Result};

/// Cumulative signal coefficients ᾱ_t for t ∈ [1, T] from the cosine schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        let s = 0.008;
        let f = |t: f64| {
            let x = (t / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for t in 1..=timesteps {
            let beta = (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999);
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(Self { alpha_bar })
    }

    /// Builds a schedule from explicit ᾱ values (index 0 is t = 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alpha_bar values must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.alpha_bar.len() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside [1, {}]",
                self.alpha_bar.len()
            )));
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn signal(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    pub fn noise(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε
    pub fn add_noise(&self, x0: &Array3<f64>, eps: &Array3<f64>, t: usize) -> Result<Array3<f64>> {
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let (a, b) = (self.signal(t)?, self.noise(t)?);
        let mut out = x0.clone();
        out.zip_mut_with(eps, |x, e| *x = a * *x + b * *e);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn cosine_endpoints_and_monotone() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        assert!(s.alpha_bar(1).unwrap() > 0.999);
        assert!(s.alpha_bar(100).unwrap() < 1e-3);
        assert!(s.alpha_bar(100).unwrap() > 0.0);
        for t in 2..=100 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn unit_alpha_bar_is_identity() {
        let s = DiffusionSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let x0 = Array3::from_shape_fn((2, 2, 3), |(a, b, c)| (a + 2 * b + c) as f64);
        let eps = Array3::from_elem((2, 2, 3), 7.0);
        assert_eq!(s.add_noise(&x0, &eps, 1).unwrap(), x0);
    }

    #[test]
    fn zero_signal_quarter_alpha() {
        let s = DiffusionSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let x0 = Array3::zeros((2, 2, 1));
        let eps = Array3::from_shape_fn((2, 2, 1), |(a, b, _)| a as f64 - b as f64 + 0.5);
        let xt = s.add_noise(&x0, &eps, 2).unwrap();
        for (x, e) in xt.iter().zip(eps.iter()) {
            assert_eq!(*x, 0.75f64.sqrt() * e);
        }
    }

    #[test]
    fn matches_direct_reevaluation() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let t = rng.random_range(1..=100);
            let x0 = Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(-1.0..1.0));
            let eps = Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(-3.0..3.0));
            let xt = s.add_noise(&x0, &eps, t).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            for ((x, a), e) in xt.iter().zip(x0.iter()).zip(eps.iter()) {
                let direct = ab.sqrt() * a + (1.0 - ab).sqrt() * e;
                assert!((x - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_step_errors() {
        let s = DiffusionSchedule::cosine(10).unwrap();
        let z = Array3::zeros((1, 1, 1));
        assert!(s.add_noise(&z, &z, 0).is_err());
        assert!(s.add_noise(&z, &z, 11).is_err());
    }
}
