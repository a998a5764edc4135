//! Input perturbations: horizontal flip, integer translation with zero
//! fill and additive Gaussian pixel noise, clamped to [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::Slice;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub flip_prob: f64,
    /// Maximum |shift| as a fraction of the image side.
    pub max_shift_frac: f64,
    pub noise_sigma: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            flip_prob: 0.5,
            max_shift_frac: 0.1,
            noise_sigma: 0.05,
        }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        PerturbConfig {
            flip_prob: 0.0,
            max_shift_frac: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(0.0..=0.1).contains(&self.max_shift_frac)
            || !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
        {
            return Err(Error::Config(format!("invalid perturbation config {self:?}")));
        }
        Ok(())
    }

    pub fn max_shift(&self, side: usize) -> i32 {
        (self.max_shift_frac * side as f64).floor() as i32
    }
}

/// One realized perturbation draw. Applying it is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub flip: bool,
    /// (rows, cols) shift in pixels.
    pub translation: (i32, i32),
    /// Noise standard deviation, stored as f64 bits so the draw is `Eq`.
    noise_sigma_bits: u64,
    pub noise_seed: u64,
}

impl Perturbation {
    pub fn new(flip: bool, translation: (i32, i32), noise_sigma: f64, noise_seed: u64) -> Self {
        Perturbation {
            flip,
            translation,
            noise_sigma_bits: noise_sigma.max(0.0).to_bits(),
            noise_seed,
        }
    }

    pub fn identity() -> Self {
        Perturbation::new(false, (0, 0), 0.0, 0)
    }

    pub fn noise_sigma(&self) -> f64 {
        f64::from_bits(self.noise_sigma_bits)
    }

    pub fn draw(side: usize, config: &PerturbConfig, rng: &mut impl Rng) -> Self {
        let flip = config.flip_prob > 0.0 && rng.random_bool(config.flip_prob);
        let m = config.max_shift(side);
        let translation = if m > 0 {
            (rng.random_range(-m..=m), rng.random_range(-m..=m))
        } else {
            (0, 0)
        };
        Perturbation::new(flip, translation, config.noise_sigma, rng.random())
    }

    pub fn apply(&self, pixels: &Grid<f32>) -> Grid<f32> {
        let (rows, cols) = pixels.shape();
        let (dr, dc) = self.translation;
        let mut out = Grid::from_fn(rows, cols, |r, c| {
            let sr = r as i64 - dr as i64;
            let sc = c as i64 - dc as i64;
            if sr < 0 || sc < 0 || sr >= rows as i64 || sc >= cols as i64 {
                return 0.0;
            }
            let sc = if self.flip { cols as i64 - 1 - sc } else { sc };
            *pixels.get(sr as usize, sc as usize)
        });
        let sigma = self.noise_sigma();
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            let normal = Normal::new(0.0, sigma).unwrap();
            for v in out.as_mut_slice() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        for v in out.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// Draws a perturbation and applies it to `slice`.
pub fn perturb(slice: &Slice, config: &PerturbConfig, rng: &mut impl Rng) -> (Slice, Perturbation) {
    let p = Perturbation::draw(slice.pixels.rows(), config, rng);
    let pixels = p.apply(&slice.pixels);
    (
        Slice {
            pixels,
            stack_id: slice.stack_id.clone(),
            slice_index: slice.slice_index,
        },
        p,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Grid<f32> {
        Grid::from_fn(n, n, |r, c| (r * n + c) as f32 / (n * n) as f32)
    }

    #[test]
    fn identity_draw_is_identity() {
        let g = ramp(8);
        assert_eq!(Perturbation::identity().apply(&g), g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Perturbation::draw(8, &PerturbConfig::none(), &mut rng);
        assert_eq!(p.apply(&g), g);
    }

    #[test]
    fn double_flip_is_identity() {
        let g = ramp(8);
        let flip = Perturbation::new(true, (0, 0), 0.0, 0);
        let once = flip.apply(&g);
        assert_ne!(once, g);
        assert_eq!(*once.get(2, 0), *g.get(2, 7));
        assert_eq!(flip.apply(&once), g);
    }

    #[test]
    fn translation_zero_fills() {
        let g = Grid::filled(4, 4, 0.5f32);
        let t = Perturbation::new(false, (1, -2), 0.0, 0).apply(&g);
        assert_eq!(*t.get(0, 0), 0.0);
        assert_eq!(*t.get(1, 1), 0.5);
        assert_eq!(*t.get(1, 2), 0.0);
    }

    #[test]
    fn shifts_are_bounded() {
        let cfg = PerturbConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = Perturbation::draw(64, &cfg, &mut rng);
            assert!(p.translation.0.abs() <= 6 && p.translation.1.abs() <= 6);
        }
    }

    #[test]
    fn apply_is_deterministic() {
        let g = ramp(16);
        let p = Perturbation::new(true, (2, 1), 0.05, 99);
        assert_eq!(p.apply(&g), p.apply(&g));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn output_stays_in_unit_range(seed in any::<u64>(), base in 0.0f32..1.0) {
            let g = Grid::from_fn(8, 8, |r, c| if (r + c) % 2 == 0 { base } else { 1.0 - base });
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = PerturbConfig { noise_sigma: 0.3, ..PerturbConfig::default() };
            let (s, _) = perturb(&Slice::new(g, "a", 0), &cfg, &mut rng);
            prop_assert!(s.in_unit_range());
        }
    }
}
