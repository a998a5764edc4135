//! Stack-level brain ROI aggregation.
//!
//! Raw per-slice masks are summarized by area, centroid and radius. Masks
//! smaller than `area_min` are discarded; the remaining centroids are
//! combined into an area-weighted center and spread, and the stack ROI is
//! the circle of radius `spread + max(radius_i)` around that center.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::datamodel::Slice;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

/// Default segmentation threshold of [`threshold_segmenter_stub`].
pub const DEFAULT_SEGMENT_THRESHOLD: f32 = 0.4;
/// Default `area_min` as a fraction of the image pixel count.
pub const DEFAULT_AREA_MIN_FRAC: f64 = 0.01;

/// Per-mask summary. `centroid` and `radius` are `None` for empty masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMask {
    pub mask: Mask,
    pub area: usize,
    pub centroid: Option<(f64, f64)>,
    pub radius: Option<f64>,
}

impl RawMask {
    pub fn is_empty(&self) -> bool {
        self.area == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiCircle {
    pub center: (f64, f64),
    pub spread: f64,
    pub radius: f64,
}

/// How retained centroids are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterWeighting {
    /// Convex weights `A_i / sum(A_j)`.
    #[default]
    Normalized,
    /// `A_i / |B|`, kept for comparison; not a convex combination.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    pub area_min: usize,
    pub weighting: CenterWeighting,
}

impl RoiConfig {
    pub fn new(area_min: usize) -> Result<Self> {
        if area_min == 0 {
            return Err(Error::Config("area_min must be at least 1".into()));
        }
        Ok(RoiConfig {
            area_min,
            weighting: CenterWeighting::Normalized,
        })
    }

    /// `area_min` as a fraction of the pixel count, rounded up, at least 1.
    pub fn from_fraction(rows: usize, cols: usize, frac: f64) -> Result<Self> {
        if !(frac.is_finite() && (0.0..=1.0).contains(&frac)) {
            return Err(Error::Config(format!("area fraction {frac} outside [0, 1]")));
        }
        let area = ((rows * cols) as f64 * frac).ceil() as usize;
        RoiConfig::new(area.max(1))
    }
}

pub fn mask_stats(mask: &Mask) -> RawMask {
    let mut area = 0usize;
    let (mut sr, mut sc) = (0.0f64, 0.0f64);
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if *mask.get(r, c) {
                area += 1;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    if area == 0 {
        return RawMask {
            mask: mask.clone(),
            area,
            centroid: None,
            radius: None,
        };
    }
    let centroid = (sr / area as f64, sc / area as f64);
    let mut max_d2 = 0.0f64;
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if *mask.get(r, c) {
                let d2 = (r as f64 - centroid.0).powi(2) + (c as f64 - centroid.1).powi(2);
                max_d2 = max_d2.max(d2);
            }
        }
    }
    RawMask {
        mask: mask.clone(),
        area,
        centroid: Some(centroid),
        radius: Some(max_d2.sqrt()),
    }
}

pub fn aggregate_stack_roi(masks: &[RawMask], config: &RoiConfig) -> Result<RoiCircle> {
    let kept: Vec<(f64, (f64, f64), f64)> = masks
        .iter()
        .filter(|m| m.area >= config.area_min && m.area > 0)
        .map(|m| (m.area as f64, m.centroid.unwrap(), m.radius.unwrap()))
        .collect();
    if kept.is_empty() {
        return Err(Error::NoReliableMasks);
    }
    let norm = match config.weighting {
        CenterWeighting::Normalized => kept.iter().map(|k| k.0).sum::<f64>(),
        CenterWeighting::Literal => kept.len() as f64,
    };
    let (mut qr, mut qc) = (0.0, 0.0);
    for (a, (r, c), _) in &kept {
        qr += a / norm * r;
        qc += a / norm * c;
    }
    let var: f64 = kept
        .iter()
        .map(|(a, (r, c), _)| a / norm * ((r - qr).powi(2) + (c - qc).powi(2)))
        .sum();
    let spread = var.sqrt();
    let max_radius = kept.iter().map(|k| k.2).fold(0.0, f64::max);
    Ok(RoiCircle {
        center: (qr, qc),
        spread,
        radius: spread + max_radius,
    })
}

/// A pixel is set iff its center lies within `radius` of the circle center.
pub fn rasterize_circle(circle: &RoiCircle, rows: usize, cols: usize) -> Mask {
    let r2 = circle.radius * circle.radius;
    let (qr, qc) = circle.center;
    let mut mask = Grid::filled(rows, cols, false);
    if rows == 0 || cols == 0 || circle.radius < 0.0 {
        return mask;
    }
    // Only scan the rows the disk can reach.
    let lo = (qr - circle.radius).floor().max(0.0);
    let hi = (qr + circle.radius).ceil().min(rows as f64 - 1.0);
    if lo > hi {
        return mask;
    }
    for r in lo as usize..=hi as usize {
        let dr2 = (r as f64 - qr).powi(2);
        for c in 0..cols {
            if dr2 + (c as f64 - qc).powi(2) <= r2 {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

pub fn apply_mask(slice: &Slice, mask: &Mask) -> Result<Slice> {
    slice.pixels.ensure_same_shape(mask)?;
    let data = slice
        .pixels
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok(Slice {
        pixels: Grid::from_vec(mask.rows(), mask.cols(), data)?,
        stack_id: slice.stack_id.clone(),
        slice_index: slice.slice_index,
    })
}

/// Stand-in brain segmenter: thresholds intensities and keeps the largest
/// 8-connected component (first in raster order on ties).
pub fn threshold_segmenter_stub(slice: &Slice, threshold: f32) -> Mask {
    let px = &slice.pixels;
    let (rows, cols) = px.shape();
    let fg = px.map(|&v| v >= threshold);
    let mut label = vec![0u32; rows * cols];
    let mut best: (u32, usize) = (0, 0);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if !fg.as_slice()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if fg.as_slice()[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let data = label.iter().map(|&l| best.1 > 0 && l == best.0).collect();
    Grid::from_vec(rows, cols, data).unwrap()
}

/// Outcome of ROI extraction for one stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackRoi {
    /// `None` when no mask in the stack passed `area_min`; the raster is
    /// then the full image.
    pub circle: Option<RoiCircle>,
    pub mask: Mask,
}

/// Segments every slice, groups by stack and aggregates one ROI per stack.
pub fn compute_stack_rois<'a>(
    slices: impl IntoIterator<Item = &'a Slice>,
    config: &RoiConfig,
    threshold: f32,
) -> Result<BTreeMap<String, StackRoi>> {
    let mut per_stack: BTreeMap<String, Vec<RawMask>> = BTreeMap::new();
    let mut shape = None;
    for slice in slices {
        match shape {
            None => shape = Some(slice.size()),
            Some(s) if s != slice.size() => {
                return Err(Error::Shape(format!("{:?} vs {:?}", s, slice.size())))
            }
            _ => {}
        }
        let raw = mask_stats(&threshold_segmenter_stub(slice, threshold));
        per_stack.entry(slice.stack_id.clone()).or_default().push(raw);
    }
    let Some((rows, cols)) = shape else {
        return Ok(BTreeMap::new());
    };
    let mut out = BTreeMap::new();
    for (id, masks) in per_stack {
        let roi = match aggregate_stack_roi(&masks, config) {
            Ok(circle) => StackRoi {
                circle: Some(circle),
                mask: rasterize_circle(&circle, rows, cols),
            },
            Err(Error::NoReliableMasks) => {
                log::warn!("stack {id}: no reliable masks, using the full image as ROI");
                StackRoi {
                    circle: None,
                    mask: Grid::filled(rows, cols, true),
                }
            }
            Err(e) => return Err(e),
        };
        out.insert(id, roi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_with_truth, Label, SynthConfig};
    use proptest::prelude::*;

    fn raw(area: usize, centroid: (f64, f64), radius: f64) -> RawMask {
        RawMask {
            mask: Grid::filled(1, 1, false),
            area,
            centroid: Some(centroid),
            radius: Some(radius),
        }
    }

    fn cfg(area_min: usize) -> RoiConfig {
        RoiConfig::new(area_min).unwrap()
    }

    #[test]
    fn single_pixel_stats() {
        let mut m = Grid::filled(64, 64, false);
        m.set(10, 20, true);
        let s = mask_stats(&m);
        assert_eq!(s.area, 1);
        assert_eq!(s.centroid, Some((10.0, 20.0)));
        assert_eq!(s.radius, Some(0.0));
    }

    #[test]
    fn square_stats() {
        let m = Grid::from_fn(11, 11, |r, c| (4..=6).contains(&r) && (4..=6).contains(&c));
        let s = mask_stats(&m);
        assert_eq!(s.area, 9);
        assert_eq!(s.centroid, Some((5.0, 5.0)));
        assert!((s.radius.unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_flagged() {
        let s = mask_stats(&Grid::filled(8, 8, false));
        assert_eq!(s.area, 0);
        assert!(s.is_empty() && s.centroid.is_none() && s.radius.is_none());
    }

    #[test]
    fn single_mask_zero_spread() {
        let c = aggregate_stack_roi(&[raw(100, (32.0, 32.0), 10.0)], &cfg(41)).unwrap();
        assert_eq!(c.center, (32.0, 32.0));
        assert_eq!(c.spread, 0.0);
        assert_eq!(c.radius, 10.0);
    }

    #[test]
    fn two_equal_masks() {
        let masks = [raw(50, (30.0, 30.0), 8.0), raw(50, (34.0, 34.0), 10.0)];
        let c = aggregate_stack_roi(&masks, &cfg(10)).unwrap();
        assert!((c.center.0 - 32.0).abs() < 1e-12 && (c.center.1 - 32.0).abs() < 1e-12);
        assert!((c.spread - 8f64.sqrt()).abs() < 1e-12);
        assert!((c.radius - (10.0 + 8f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn all_below_area_min_errors() {
        let masks = [raw(5, (1.0, 1.0), 1.0), raw(3, (2.0, 2.0), 1.0)];
        assert!(matches!(
            aggregate_stack_roi(&masks, &cfg(10)),
            Err(Error::NoReliableMasks)
        ));
        assert!(matches!(aggregate_stack_roi(&[], &cfg(1)), Err(Error::NoReliableMasks)));
        assert!(RoiConfig::new(0).is_err());
    }

    #[test]
    fn literal_weighting_differs() {
        let masks = [raw(10, (0.0, 0.0), 1.0), raw(30, (4.0, 0.0), 1.0)];
        let literal = RoiConfig {
            weighting: CenterWeighting::Literal,
            ..cfg(1)
        };
        let n = aggregate_stack_roi(&masks, &cfg(1)).unwrap();
        let l = aggregate_stack_roi(&masks, &literal).unwrap();
        assert_eq!(n.center.0, 3.0);
        assert_eq!(l.center.0, 60.0);
    }

    #[test]
    fn point_and_saturated_circles() {
        let point = RoiCircle { center: (7.0, 9.0), spread: 0.0, radius: 0.0 };
        let m = rasterize_circle(&point, 16, 16);
        assert_eq!(m.count_set(), 1);
        assert!(*m.get(7, 9));
        let big = RoiCircle { center: (8.0, 8.0), spread: 0.0, radius: 100.0 };
        assert_eq!(rasterize_circle(&big, 16, 16).count_set(), 256);
        let outside = RoiCircle { center: (-50.0, 8.0), spread: 0.0, radius: 3.0 };
        assert_eq!(rasterize_circle(&outside, 16, 16).count_set(), 0);
    }

    #[test]
    fn radius_five_matches_brute_force() {
        let c = RoiCircle { center: (32.0, 32.0), spread: 0.0, radius: 5.0 };
        let m = rasterize_circle(&c, 64, 64);
        let mut expected = 0;
        for r in 0..64 {
            for col in 0..64 {
                if ((r as f64 - 32.0).powi(2) + (col as f64 - 32.0).powi(2)).sqrt() <= 5.0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(m.count_set(), expected);
        assert_eq!(expected, 81);
    }

    #[test]
    fn masking() {
        let s = Slice::new(Grid::from_fn(4, 4, |r, c| (r * 4 + c) as f32 / 16.0), "a", 0);
        assert_eq!(apply_mask(&s, &Grid::filled(4, 4, true)).unwrap(), s);
        let zero = apply_mask(&s, &Grid::filled(4, 4, false)).unwrap();
        assert!(zero.pixels.as_slice().iter().all(|&v| v == 0.0));
        let half = apply_mask(&s, &Grid::from_fn(4, 4, |_, c| c < 2)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if c < 2 { *s.pixels.get(r, c) } else { 0.0 };
                assert_eq!(*half.pixels.get(r, c), want);
            }
        }
        assert!(matches!(
            apply_mask(&s, &Grid::filled(3, 4, true)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn segmenter_blank_and_saturated() {
        let blank = Slice::new(Grid::filled(16, 16, 0.0), "a", 0);
        assert_eq!(threshold_segmenter_stub(&blank, 0.4).count_set(), 0);
        let ramp = Slice::new(Grid::from_fn(16, 16, |r, _| 0.9 * r as f32 / 15.0), "a", 0);
        assert_eq!(threshold_segmenter_stub(&ramp, 0.999).count_set(), 0);
    }

    #[test]
    fn segmenter_keeps_largest_component() {
        let px = Grid::from_fn(10, 10, |r, c| {
            if r < 2 && c < 2 || (5..9).contains(&r) && (5..9).contains(&c) {
                1.0
            } else {
                0.0
            }
        });
        let m = threshold_segmenter_stub(&Slice::new(px, "a", 0), 0.5);
        assert_eq!(m.count_set(), 16);
        assert!(!*m.get(0, 0));
    }

    #[test]
    fn segmenter_covers_phantom() {
        let cfg = SynthConfig {
            n_stacks: 4,
            slices_per_stack: 10,
            label_fractions: [1.0, 0.0, 0.0],
            image_size: 64,
            seed: 5,
            ..SynthConfig::default()
        };
        let (d, truth) = generate_with_truth(&cfg).unwrap();
        for ((slice, label), t) in d.labeled.iter().zip(&truth) {
            assert_eq!(*label, Label::D);
            let e = t.ellipse.unwrap();
            let m = threshold_segmenter_stub(slice, DEFAULT_SEGMENT_THRESHOLD);
            let (mut inside, mut both, mut set) = (0, 0, 0);
            for r in 0..64 {
                for c in 0..64 {
                    let in_e = e.contains(r as f64, c as f64);
                    inside += in_e as usize;
                    set += *m.get(r, c) as usize;
                    both += (in_e && *m.get(r, c)) as usize;
                }
            }
            let coverage = both as f64 / inside as f64;
            let precision = both as f64 / set as f64;
            assert!(coverage >= 0.8, "coverage {coverage}");
            assert!(precision >= 0.8, "precision {precision}");
        }
    }

    #[test]
    fn stack_rois_fall_back_to_full_image() {
        let blank = Slice::new(Grid::filled(8, 8, 0.1), "empty", 0);
        let rois = compute_stack_rois([&blank], &cfg(1), 0.4).unwrap();
        assert!(rois["empty"].circle.is_none());
        assert_eq!(rois["empty"].mask.count_set(), 64);
    }

    fn arb_masks() -> impl Strategy<Value = Vec<RawMask>> {
        prop::collection::vec(
            (1usize..400, 0.0..64.0f64, 0.0..64.0f64, 0.0..20.0f64)
                .prop_map(|(a, r, c, rad)| raw(a, (r, c), rad)),
            1..10,
        )
    }

    proptest! {
        #[test]
        fn permutation_invariant(masks in arb_masks(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let config = cfg(1);
            let a = aggregate_stack_roi(&masks, &config).unwrap();
            let mut shuffled = masks.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = aggregate_stack_roi(&shuffled, &config).unwrap();
            prop_assert!((a.center.0 - b.center.0).abs() < 1e-9);
            prop_assert!((a.center.1 - b.center.1).abs() < 1e-9);
            prop_assert!((a.spread - b.spread).abs() < 1e-9);
            prop_assert!((a.radius - b.radius).abs() < 1e-9);
        }

        #[test]
        fn small_masks_never_matter(masks in arb_masks(), extra in arb_masks()) {
            let config = cfg(400);
            let big: Vec<RawMask> = masks.into_iter().map(|mut m| { m.area += 400; m }).collect();
            let small: Vec<RawMask> = extra.into_iter().map(|mut m| { m.area %= 400; m.area = m.area.max(1); m }).collect();
            let mut mixed = big.clone();
            mixed.extend(small);
            prop_assert_eq!(
                aggregate_stack_roi(&big, &config).unwrap(),
                aggregate_stack_roi(&mixed, &config).unwrap()
            );
        }

        #[test]
        fn area_scaling_invariant(masks in arb_masks(), k in 2usize..7) {
            let config = cfg(1);
            let a = aggregate_stack_roi(&masks, &config).unwrap();
            let scaled: Vec<RawMask> = masks.into_iter().map(|mut m| { m.area *= k; m }).collect();
            let b = aggregate_stack_roi(&scaled, &config).unwrap();
            prop_assert!((a.center.0 - b.center.0).abs() < 1e-9);
            prop_assert!((a.spread - b.spread).abs() < 1e-9);
            prop_assert!((a.radius - b.radius).abs() < 1e-9);
        }

        #[test]
        fn radius_bounds(masks in arb_masks()) {
            let c = aggregate_stack_roi(&masks, &cfg(1)).unwrap();
            let max_r = masks.iter().map(|m| m.radius.unwrap()).fold(0.0, f64::max);
            prop_assert!(c.radius >= c.spread && c.spread >= 0.0);
            prop_assert!(c.radius >= max_r);
        }
    }
}
