//! Synthetic fetal-brain-like slices with motion artifact phenomenology.
//!
//! Each stack carries one elliptical "brain" phantom (textured interior,
//! dark ventricles, bright rim) embedded in dimmer background clutter.
//! Diagnostic slices show the phantom as rendered; non-diagnostic slices
//! apply blur, horizontal signal-void bands and/or a shifted ghost copy
//! over the phantom; no-brain slices contain only the background.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Slice, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Minimum mean absolute difference between a corrupted slice and its
/// clean counterpart whenever `corruption_strength > 0`.
pub const CORRUPTION_FLOOR: f32 = 2e-3;

const PIXEL_NOISE_SIGMA: f64 = 0.015;
const MIN_IMAGE_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_stacks: usize,
    pub slices_per_stack: usize,
    /// Proportions over (D, N, W).
    pub label_fractions: [f64; 3],
    pub corruption_strength: f64,
    pub seed: u64,
    /// Side length of the square slices.
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stacks: 10,
            slices_per_stack: 30,
            label_fractions: [0.5, 0.3, 0.2],
            corruption_strength: 0.5,
            seed: 0,
            image_size: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stacks == 0 || self.slices_per_stack == 0 {
            return Err(Error::Config(
                "n_stacks and slices_per_stack must be at least 1".into(),
            ));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size must be at least {MIN_IMAGE_SIZE}"
            )));
        }
        if self
            .label_fractions
            .iter()
            .any(|f| !f.is_finite() || *f < 0.0)
        {
            return Err(Error::Config(
                "label fractions must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = self.label_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "label fractions sum to {sum}, expected 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption_strength) {
            return Err(Error::Config("corruption_strength must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn stack_id(&self, index: usize) -> String {
        format!("s{}-{:04}", self.seed, index)
    }
}

/// Per-stack label counts by the largest-remainder rule (ties go to the
/// lower class index).
pub fn label_counts_per_stack(fractions: &[f64; 3], slices: usize) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * slices as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(slices.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Ground-truth phantom outline, in pixel coordinates (row, col).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
}

impl Ellipse {
    /// Normalized elliptic radius; 1 on the boundary.
    pub fn norm_radius(&self, r: f64, c: f64) -> f64 {
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        let (s, co) = self.angle.sin_cos();
        let u = dr * co + dc * s;
        let v = -dr * s + dc * co;
        ((u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2)).sqrt()
    }

    pub fn contains(&self, r: f64, c: f64) -> bool {
        self.norm_radius(r, c) <= 1.0
    }
}

/// What the generator knows about one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTruth {
    pub stack_id: String,
    pub slice_index: usize,
    pub label: Label,
    pub ellipse: Option<Ellipse>,
    /// The uncorrupted rendering (same noise draw) for non-diagnostic slices.
    pub clean: Option<Grid<f32>>,
}

/// Generates a fully labeled dataset (split `Train`).
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    generate_with_truth(config).map(|(d, _)| d)
}

/// Like [`generate_synthetic`] but also returns per-slice ground truth,
/// aligned with `dataset.labeled`.
pub fn generate_with_truth(config: &SynthConfig) -> Result<(Dataset, Vec<SliceTruth>)> {
    config.validate()?;
    let counts = label_counts_per_stack(&config.label_fractions, config.slices_per_stack);
    let mut dataset = Dataset::empty(Split::Train);
    let mut truth = Vec::with_capacity(config.n_stacks * config.slices_per_stack);
    for stack in 0..config.n_stacks {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stack as u64 + 1);
        let id = config.stack_id(stack);
        let plan = StackPlan::draw(config, &counts, &mut rng);
        for (i, &label) in plan.labels.iter().enumerate() {
            let slice_seed: u64 = rng.random();
            let rendered = plan.render_slice(config, i, label, slice_seed);
            dataset
                .labeled
                .push((Slice::new(rendered.pixels, id.clone(), i), label));
            truth.push(SliceTruth {
                stack_id: id.clone(),
                slice_index: i,
                label,
                ellipse: rendered.ellipse,
                clean: rendered.clean,
            });
        }
    }
    Ok((dataset, truth))
}

/// Smooth texture: normalized sum of three random plane waves, in [-1, 1].
#[derive(Clone, Debug)]
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn draw(rng: &mut ChaCha8Rng, n: f64, max_freq: f64) -> Self {
        let mut wave = || {
            let fr = rng.random_range(-max_freq..max_freq) * 2.0 * PI / n;
            let fc = rng.random_range(-max_freq..max_freq) * 2.0 * PI / n;
            (fr, fc, rng.random_range(0.0..2.0 * PI))
        };
        Texture {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, r: f64, c: f64, phase: f64) -> f64 {
        self.waves
            .iter()
            .map(|(fr, fc, ph)| (fr * r + fc * c + ph + phase).sin())
            .sum::<f64>()
            / 3.0
    }
}

#[derive(Clone, Debug)]
struct Blob {
    shape: Ellipse,
    intensity: f64,
}

struct StackPlan {
    labels: Vec<Label>,
    brain: Ellipse,
    brain_texture: Texture,
    bg_texture: Texture,
    clutter: Vec<Blob>,
    rim_intensity: f64,
}

struct Rendered {
    pixels: Grid<f32>,
    ellipse: Option<Ellipse>,
    clean: Option<Grid<f32>>,
}

impl StackPlan {
    fn draw(config: &SynthConfig, counts: &[usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let s = config.slices_per_stack;
        let n = config.image_size as f64;

        // W slices sit at both ends of the stack, N slices are scattered
        // among the remaining positions.
        let w = counts[Label::W.index()];
        let head = w.div_ceil(2);
        let mut labels = vec![Label::D; s];
        for (i, l) in labels.iter_mut().enumerate() {
            if i < head || i >= s - (w - head) {
                *l = Label::W;
            }
        }
        let mut middle: Vec<usize> = (head..s - (w - head)).collect();
        middle.shuffle(rng);
        for &i in middle.iter().take(counts[Label::N.index()]) {
            labels[i] = Label::N;
        }

        let a = n * rng.random_range(0.20..0.28);
        let brain = Ellipse {
            center: (
                n * rng.random_range(0.40..0.60),
                n * rng.random_range(0.40..0.60),
            ),
            semi_axes: (a, a * rng.random_range(0.70..0.90)),
            angle: rng.random_range(0.0..PI),
        };
        let n_clutter = rng.random_range(3..=6);
        let clutter = (0..n_clutter)
            .map(|_| Blob {
                shape: Ellipse {
                    center: (rng.random_range(0.0..n), rng.random_range(0.0..n)),
                    semi_axes: (
                        n * rng.random_range(0.06..0.22),
                        n * rng.random_range(0.06..0.22),
                    ),
                    angle: rng.random_range(0.0..PI),
                },
                intensity: rng.random_range(0.08..0.22),
            })
            .collect();
        StackPlan {
            labels,
            brain,
            brain_texture: Texture::draw(rng, n, 4.0),
            bg_texture: Texture::draw(rng, n, 3.0),
            clutter,
            rim_intensity: rng.random_range(0.85..0.95),
        }
    }

    fn render_slice(&self, config: &SynthConfig, index: usize, label: Label, seed: u64) -> Rendered {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = config.image_size;
        let n = size as f64;
        let s = config.slices_per_stack as f64;

        // Brain cross-section shrinks toward the stack ends; small
        // in-plane motion between slices.
        let t = (index as f64 + 0.5) / s;
        let scale = 0.55 + 0.45 * (PI * t).sin();
        let jitter = 0.03 * n;
        let ellipse = Ellipse {
            center: (
                self.brain.center.0 + rng.random_range(-jitter..jitter),
                self.brain.center.1 + rng.random_range(-jitter..jitter),
            ),
            semi_axes: (self.brain.semi_axes.0 * scale, self.brain.semi_axes.1 * scale),
            angle: self.brain.angle + rng.random_range(-0.1..0.1),
        };
        let phase = rng.random_range(0.0..0.6);

        let mut background = Grid::filled(size, size, 0.0f64);
        for r in 0..size {
            for c in 0..size {
                let (rf, cf) = (r as f64, c as f64);
                let mut v = 0.08 + 0.04 * self.bg_texture.at(rf, cf, phase);
                for blob in &self.clutter {
                    let rho = blob.shape.norm_radius(rf, cf);
                    v += blob.intensity * smooth_falloff(rho);
                }
                background.set(r, c, v.min(0.36));
            }
        }

        let noise: Vec<f64> = {
            let normal = Normal::new(0.0, PIXEL_NOISE_SIGMA).unwrap();
            (0..size * size).map(|_| normal.sample(&mut rng)).collect()
        };

        if label == Label::W {
            let pixels = finish(&background.map(|&v| v), &noise);
            return Rendered {
                pixels,
                ellipse: None,
                clean: None,
            };
        }

        let (layer, alpha) = self.brain_layer(size, &ellipse, phase);
        let clean_img = composite(&background, &layer, &alpha);

        if label == Label::D || config.corruption_strength <= 0.0 {
            return Rendered {
                pixels: finish(&clean_img, &noise),
                ellipse: Some(ellipse),
                clean: None,
            };
        }

        let clean = finish(&clean_img, &noise);
        let corruption = Corruption::draw(&mut rng, config.corruption_strength, n, &ellipse);
        let mut corrupted = corruption.apply(&background, &layer, &alpha);
        let mut pixels = finish(&corrupted, &noise);
        let mut extra = 0;
        while mean_abs_diff(&pixels, &clean) < CORRUPTION_FLOOR && extra < 16 {
            // Guarantee a visible artifact: add one more void band through
            // the phantom center.
            let offset = (extra as isize + 1) / 2 * if extra % 2 == 0 { 1 } else { -1 };
            let row = (ellipse.center.0.round() as isize + offset).clamp(0, size as isize - 1);
            void_band(&mut corrupted, &alpha, row as usize, 1);
            pixels = finish(&corrupted, &noise);
            extra += 1;
        }
        Rendered {
            pixels,
            ellipse: Some(ellipse),
            clean: Some(clean),
        }
    }

    /// Phantom intensities and hard alpha.
    fn brain_layer(&self, size: usize, e: &Ellipse, phase: f64) -> (Grid<f64>, Grid<f64>) {
        let rim_px = 1.3f64.max(0.08 * e.semi_axes.1);
        let rim = rim_px / e.semi_axes.1.min(e.semi_axes.0);
        let vent_offset = 0.22 * e.semi_axes.1;
        let (s, c) = e.angle.sin_cos();
        let ventricles = [-1.0, 1.0].map(|side| Ellipse {
            center: (
                e.center.0 - side * vent_offset * s,
                e.center.1 + side * vent_offset * c,
            ),
            semi_axes: (0.30 * e.semi_axes.0, 0.11 * e.semi_axes.1),
            angle: e.angle,
        });
        let mut layer = Grid::filled(size, size, 0.0);
        let mut alpha = Grid::filled(size, size, 0.0);
        for r in 0..size {
            for col in 0..size {
                let (rf, cf) = (r as f64, col as f64);
                let rho = e.norm_radius(rf, cf);
                if rho > 1.0 {
                    continue;
                }
                let v = if rho >= 1.0 - rim {
                    self.rim_intensity
                } else if ventricles.iter().any(|v| v.contains(rf, cf)) {
                    0.30
                } else {
                    0.58 + 0.08 * self.brain_texture.at(rf, cf, phase)
                };
                layer.set(r, col, v);
                alpha.set(r, col, 1.0);
            }
        }
        (layer, alpha)
    }
}

fn smooth_falloff(rho: f64) -> f64 {
    if rho >= 1.0 {
        0.0
    } else if rho <= 0.7 {
        1.0
    } else {
        let x = (1.0 - rho) / 0.3;
        x * x * (3.0 - 2.0 * x)
    }
}

fn composite(background: &Grid<f64>, layer: &Grid<f64>, alpha: &Grid<f64>) -> Grid<f64> {
    let data = background
        .as_slice()
        .iter()
        .zip(layer.as_slice())
        .zip(alpha.as_slice())
        .map(|((&b, &l), &a)| b * (1.0 - a) + l * a)
        .collect();
    Grid::from_vec(background.rows(), background.cols(), data).unwrap()
}

/// Adds pixel noise, clamps to [0, 1] and quantizes to the 16-bit grid so
/// the slice survives a 16-bit image round trip bit-exactly.
fn finish(img: &Grid<f64>, noise: &[f64]) -> Grid<f32> {
    let data = img
        .as_slice()
        .iter()
        .zip(noise)
        .map(|(&v, &e)| quantize_u16((v + e).clamp(0.0, 1.0)))
        .collect();
    Grid::from_vec(img.rows(), img.cols(), data).unwrap()
}

pub(crate) fn quantize_u16(v: f64) -> f32 {
    let k = (v * 65535.0).round() as u16;
    k as f32 / 65535.0
}

fn mean_abs_diff(a: &Grid<f32>, b: &Grid<f32>) -> f32 {
    let total: f32 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum();
    total / a.len() as f32
}

fn void_band(img: &mut Grid<f64>, alpha: &Grid<f64>, start: usize, height: usize) {
    for r in start..(start + height).min(img.rows()) {
        for c in 0..img.cols() {
            if *alpha.get(r, c) > 0.0 {
                img.set(r, c, 0.0);
            }
        }
    }
}

#[derive(Debug)]
struct Corruption {
    blur_sigma: Option<f64>,
    voids: Vec<(usize, usize)>,
    ghost: Option<(isize, f64)>,
}

impl Corruption {
    fn draw(rng: &mut ChaCha8Rng, strength: f64, n: f64, e: &Ellipse) -> Self {
        let mut blur = rng.random_bool(0.6);
        let mut void = rng.random_bool(0.5);
        let mut ghost = rng.random_bool(0.5);
        if !(blur || void || ghost) {
            match rng.random_range(0..3) {
                0 => blur = true,
                1 => void = true,
                _ => ghost = true,
            }
        }
        let px = (n / 64.0).max(0.5);
        let blur_sigma = blur.then(|| px * (0.7 + 2.0 * strength * rng.random_range(0.5..1.0)));
        let voids = if void {
            let count = (1 + (strength * rng.random_range(0.0..3.0)) as usize).min(3);
            let extent = e.semi_axes.0.max(e.semi_axes.1);
            (0..count)
                .map(|_| {
                    let height = ((0.02 + 0.04 * strength * rng.random::<f64>()) * n)
                        .round()
                        .max(1.0) as usize;
                    let center = e.center.0 + rng.random_range(-0.8..0.8) * extent;
                    let start = (center - height as f64 / 2.0).round().clamp(0.0, n - 1.0);
                    (start as usize, height)
                })
                .collect()
        } else {
            Vec::new()
        };
        let ghost = ghost.then(|| {
            let shift = (n * rng.random_range(0.20..0.35)).round() as isize;
            let sign = if rng.random_bool(0.5) { 1 } else { -1 };
            let amp = 0.10 + 0.20 * strength * rng.random::<f64>();
            (sign * shift, amp)
        });
        Corruption {
            blur_sigma,
            voids,
            ghost,
        }
    }

    fn apply(&self, background: &Grid<f64>, layer: &Grid<f64>, alpha: &Grid<f64>) -> Grid<f64> {
        let premult = composite(&Grid::filled(layer.rows(), layer.cols(), 0.0), layer, alpha);
        let (premult_b, alpha_b) = match self.blur_sigma {
            Some(sigma) => (gaussian_blur(&premult, sigma), gaussian_blur(alpha, sigma)),
            None => (premult.clone(), alpha.clone()),
        };
        let mut img = Grid::from_fn(layer.rows(), layer.cols(), |r, c| {
            background.get(r, c) * (1.0 - alpha_b.get(r, c)) + premult_b.get(r, c)
        });
        if let Some((shift, amp)) = self.ghost {
            let cols = img.cols() as isize;
            for r in 0..img.rows() {
                for c in 0..img.cols() {
                    let src = c as isize - shift;
                    if (0..cols).contains(&src) {
                        let v = img.get(r, c) + amp * premult.get(r, src as usize);
                        img.set(r, c, v);
                    }
                }
            }
        }
        for &(start, height) in &self.voids {
            void_band(&mut img, &alpha_b.map(|&a| if a > 0.05 { 1.0 } else { 0.0 }), start, height);
        }
        img
    }
}

fn gaussian_blur(img: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = k.iter().sum();
        k.into_iter().map(|v| v / sum).collect()
    };
    let (rows, cols) = img.shape();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = Grid::from_fn(rows, cols, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * img.get(r, clampi(c as isize + k as isize - radius, cols)))
            .sum()
    });
    Grid::from_fn(rows, cols, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * horiz.get(clampi(r as isize + k as isize - radius, rows), c))
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_stacks: 3,
            slices_per_stack: 10,
            image_size: 32,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(label_counts_per_stack(&[0.5, 0.3, 0.2], 30), [15, 9, 6]);
        assert_eq!(label_counts_per_stack(&[1.0 / 3.0; 3], 10), [4, 3, 3]);
        assert_eq!(label_counts_per_stack(&[0.5, 0.25, 0.25], 3), [1, 1, 1]);
        assert_eq!(label_counts_per_stack(&[0.0, 0.0, 1.0], 7), [0, 0, 7]);
    }

    #[test]
    fn exact_label_totals() {
        let cfg = SynthConfig {
            n_stacks: 10,
            slices_per_stack: 30,
            image_size: 16,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        assert_eq!(d.label_counts(), [150, 90, 60]);
        assert!(d.unlabeled.is_empty());
    }

    #[test]
    fn zero_corruption_all_diagnostic() {
        let cfg = SynthConfig {
            label_fractions: [1.0, 0.0, 0.0],
            corruption_strength: 0.0,
            ..small(4)
        };
        let (d, truth) = generate_with_truth(&cfg).unwrap();
        assert!(d.labeled.iter().all(|(_, l)| *l == Label::D));
        assert!(truth.iter().all(|t| t.ellipse.is_some() && t.clean.is_none()));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn corrupted_slices_exceed_floor() {
        for strength in [0.05, 0.5, 1.0] {
            let cfg = SynthConfig {
                corruption_strength: strength,
                ..small(11)
            };
            let (d, truth) = generate_with_truth(&cfg).unwrap();
            for ((slice, label), t) in d.labeled.iter().zip(&truth) {
                assert!(slice.in_unit_range());
                if *label == Label::N {
                    let clean = t.clean.as_ref().unwrap();
                    let mad = mean_abs_diff(&slice.pixels, clean);
                    assert!(mad >= CORRUPTION_FLOOR, "mad {mad} at strength {strength}");
                }
            }
        }
    }

    #[test]
    fn no_brain_slices_at_stack_ends() {
        let (d, truth) = generate_with_truth(&small(2)).unwrap();
        for (i, (_, l)) in d.labeled.iter().enumerate() {
            let pos = i % 10;
            if *l == Label::W {
                assert!(pos == 0 || pos == 9);
                assert!(truth[i].ellipse.is_none());
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SynthConfig { label_fractions: [0.5, 0.5, 0.5], ..small(0) },
            SynthConfig { n_stacks: 0, ..small(0) },
            SynthConfig { slices_per_stack: 0, ..small(0) },
            SynthConfig { image_size: 0, ..small(0) },
            SynthConfig { label_fractions: [1.5, -0.5, 0.0], ..small(0) },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        }
    }
}
