//! Slices, stacks, labels and datasets, plus the on-disk manifest format
//! and a synthetic artifact generator used in place of clinical scans.

mod manifest;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use manifest::{load_image, load_manifest, save_image_u16, save_manifest, save_mask};
pub use synth::{
    generate_synthetic, generate_with_truth, label_counts_per_stack, Ellipse, SliceTruth,
    SynthConfig, CORRUPTION_FLOOR,
};

/// Slice quality category. The index mapping is fixed: D→0, N→1, W→2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    /// Diagnostic.
    D = 0,
    /// Non-diagnostic.
    N = 1,
    /// No brain in the field of view.
    W = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::D, Label::N, Label::W];
    pub const COUNT: usize = 3;

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::D => "D",
            Label::N => "N",
            Label::W => "W",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "D" => Ok(Label::D),
            "N" => Ok(Label::N),
            "W" => Ok(Label::W),
            other => Err(Error::Invalid(format!("unknown label {other:?}"))),
        }
    }
}

/// One grayscale slice with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub pixels: Grid<f32>,
    pub stack_id: String,
    pub slice_index: usize,
}

impl Slice {
    pub fn new(pixels: Grid<f32>, stack_id: impl Into<String>, slice_index: usize) -> Self {
        Slice {
            pixels,
            stack_id: stack_id.into(),
            slice_index,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        self.pixels.shape()
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.as_slice().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A split of labeled and unlabeled slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<(Slice, Label)>,
    pub unlabeled: Vec<Slice>,
    pub split: Split,
}

impl Dataset {
    pub fn empty(split: Split) -> Self {
        Dataset {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All slices, labeled first.
    pub fn slices(&self) -> impl Iterator<Item = &Slice> {
        self.labeled
            .iter()
            .map(|(s, _)| s)
            .chain(self.unlabeled.iter())
    }

    pub fn stack_ids(&self) -> BTreeSet<&str> {
        self.slices().map(|s| s.stack_id.as_str()).collect()
    }

    /// Common slice size, or an error if slices disagree.
    pub fn slice_size(&self) -> Result<Option<(usize, usize)>> {
        let mut size = None;
        for s in self.slices() {
            match size {
                None => size = Some(s.size()),
                Some(sz) if sz != s.size() => {
                    return Err(Error::Shape(format!(
                        "slice {}/{} is {:?}, expected {:?}",
                        s.stack_id,
                        s.slice_index,
                        s.size(),
                        sz
                    )))
                }
                _ => {}
            }
        }
        Ok(size)
    }

    pub fn label_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for (_, l) in &self.labeled {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Keeps `n_labeled` randomly chosen labeled slices and moves the rest
    /// into the unlabeled pool (appended after any existing unlabeled
    /// slices, in their original order).
    pub fn with_label_budget(mut self, n_labeled: usize, rng: &mut impl Rng) -> Self {
        if n_labeled >= self.labeled.len() {
            return self;
        }
        let mut order: Vec<usize> = (0..self.labeled.len()).collect();
        order.shuffle(rng);
        let mut keep = vec![false; self.labeled.len()];
        for &i in &order[..n_labeled] {
            keep[i] = true;
        }
        let mut labeled = Vec::with_capacity(n_labeled);
        for (i, pair) in self.labeled.into_iter().enumerate() {
            if keep[i] {
                labeled.push(pair);
            } else {
                self.unlabeled.push(pair.0);
            }
        }
        self.labeled = labeled;
        self
    }

    /// Drops every unlabeled slice.
    pub fn labeled_only(mut self) -> Self {
        self.unlabeled.clear();
        self
    }

    /// Partitions whole stacks into train/val/test by stack index order.
    /// Stacks are assigned in sorted id order: the first `n_val` go to
    /// validation, the next `n_test` to test and the rest to training.
    pub fn split_by_stack(self, n_val: usize, n_test: usize) -> Result<(Dataset, Dataset, Dataset)> {
        let ids: Vec<String> = self.stack_ids().into_iter().map(String::from).collect();
        if n_val + n_test > ids.len() {
            return Err(Error::Config(format!(
                "cannot hold out {} stacks from {}",
                n_val + n_test,
                ids.len()
            )));
        }
        let which = |id: &str| -> Split {
            let pos = ids.binary_search_by(|p| p.as_str().cmp(id)).unwrap();
            if pos < n_val {
                Split::Val
            } else if pos < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            }
        };
        let mut train = Dataset::empty(Split::Train);
        let mut val = Dataset::empty(Split::Val);
        let mut test = Dataset::empty(Split::Test);
        for (s, l) in self.labeled {
            match which(&s.stack_id) {
                Split::Train => train.labeled.push((s, l)),
                Split::Val => val.labeled.push((s, l)),
                Split::Test => test.labeled.push((s, l)),
            }
        }
        for s in self.unlabeled {
            match which(&s.stack_id) {
                Split::Train => train.unlabeled.push(s),
                Split::Val => val.unlabeled.push(s),
                Split::Test => test.unlabeled.push(s),
            }
        }
        Ok((train, val, test))
    }
}

/// True when no stack id appears in both datasets.
pub fn stacks_disjoint(a: &Dataset, b: &Dataset) -> bool {
    let ids = a.stack_ids();
    b.slices().all(|s| !ids.contains(s.stack_id.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize) -> Dataset {
        let mut d = Dataset::empty(Split::Train);
        for i in 0..n {
            let s = Slice::new(Grid::filled(4, 4, 0.5), format!("s{}", i / 5), i % 5);
            d.labeled.push((s, Label::ALL[i % 3]));
        }
        d
    }

    #[test]
    fn label_index_mapping_is_fixed() {
        assert_eq!(Label::D.index(), 0);
        assert_eq!(Label::N.index(), 1);
        assert_eq!(Label::W.index(), 2);
        for l in Label::ALL {
            assert_eq!(Label::from_index(l.index()), Some(l));
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
        }
        assert!("X".parse::<Label>().is_err());
    }

    #[test]
    fn label_budget_moves_rest_to_unlabeled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = toy(20).with_label_budget(6, &mut rng);
        assert_eq!(d.labeled.len(), 6);
        assert_eq!(d.unlabeled.len(), 14);
    }

    #[test]
    fn split_by_stack_is_disjoint() {
        let (train, val, test) = toy(40).split_by_stack(2, 2).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), 40);
        assert!(stacks_disjoint(&train, &test));
        assert!(stacks_disjoint(&train, &val));
        assert!(stacks_disjoint(&val, &test));
        assert!(toy(10).split_by_stack(2, 1).is_err());
    }
}
