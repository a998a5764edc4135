//! Reacquisition simulation: rescan the lowest-scoring slices of a stack
//! and count the non-diagnostic slices that were missed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReacqConfig {
    pub n_acq: usize,
    pub q_frac: f64,
    pub seed: u64,
}

impl ReacqConfig {
    pub fn new(n_acq: usize, q_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q_frac) {
            return Err(Error::Config(format!("q {q_frac} outside [0, 1]")));
        }
        Ok(ReacqConfig { n_acq, q_frac, seed })
    }

    /// `round(q * n_acq)`, halves rounded up. A tolerance absorbs binary
    /// representation error so that e.g. 0.35 * 30 counts as a tie.
    pub fn n_re(&self) -> usize {
        let x = self.q_frac * self.n_acq as f64;
        ((x + 0.5 + 1e-9).floor() as usize).min(self.n_acq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReacqResult {
    /// Per-slice IQA scores; empty for the random baseline.
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub missed: usize,
}

/// `1 - P_N`.
pub fn iqa_score(probs: &[f64; 3]) -> f64 {
    1.0 - probs[Label::N.index()]
}

/// Indices of the `n_re` lowest scores, lowest first; ties go to the
/// smaller index.
pub fn select_reacquire(scores: &[f64], n_re: usize) -> Result<Vec<usize>> {
    if n_re > scores.len() {
        return Err(Error::Invalid(format!(
            "cannot reacquire {n_re} of {} slices",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(n_re);
    Ok(order)
}

fn count_missed(truth: &[Label], selected: &[usize]) -> usize {
    let mut chosen = vec![false; truth.len()];
    for &i in selected {
        chosen[i] = true;
    }
    truth
        .iter()
        .zip(&chosen)
        .filter(|(&l, &c)| l == Label::N && !c)
        .count()
}

fn check_len(n: usize, config: &ReacqConfig) -> Result<()> {
    if n != config.n_acq {
        return Err(Error::Shape(format!(
            "stack has {n} slices, config expects {}",
            config.n_acq
        )));
    }
    Ok(())
}

pub fn simulate_stack(probs: &[[f64; 3]], truth: &[Label], config: &ReacqConfig) -> Result<ReacqResult> {
    check_len(probs.len(), config)?;
    check_len(truth.len(), config)?;
    let scores: Vec<f64> = probs.iter().map(iqa_score).collect();
    let selected = select_reacquire(&scores, config.n_re())?;
    let missed = count_missed(truth, &selected);
    Ok(ReacqResult { scores, selected, missed })
}

/// Uniformly random subset of size `N_re`.
pub fn random_baseline(truth: &[Label], config: &ReacqConfig, rng: &mut impl Rng) -> Result<ReacqResult> {
    check_len(truth.len(), config)?;
    let selected = index::sample(rng, truth.len(), config.n_re()).into_vec();
    let missed = count_missed(truth, &selected);
    Ok(ReacqResult { scores: Vec::new(), selected, missed })
}

/// Per-slice probabilities and labels of one stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackPredictions {
    pub stack_id: String,
    pub probs: Vec<[f64; 3]>,
    pub truth: Vec<Label>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub q: f64,
    /// Mean missed N slices per stack for the model scores.
    pub mean_missed: f64,
    /// Sample std of the per-stack missed counts.
    pub std_missed: f64,
    /// Mean missed per stack under random selection, over all trials.
    pub random_mean_missed: f64,
}

/// Missed-count curve over `qs`; the random baseline uses `trials` draws
/// per stack.
pub fn simulate_curve(stacks: &[StackPredictions], qs: &[f64], trials: usize, seed: u64) -> Result<Vec<CurveRow>> {
    if stacks.is_empty() {
        return Err(Error::Invalid("no stacks to simulate".into()));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(qs.len());
    for &q in qs {
        let mut missed = Vec::with_capacity(stacks.len());
        let mut random_total = 0usize;
        for s in stacks {
            let cfg = ReacqConfig::new(s.probs.len(), q, seed)?;
            missed.push(simulate_stack(&s.probs, &s.truth, &cfg)?.missed as f64);
            for _ in 0..trials {
                random_total += random_baseline(&s.truth, &cfg, &mut rng)?.missed;
            }
        }
        let n = missed.len() as f64;
        let mean = missed.iter().sum::<f64>() / n;
        let std = if missed.len() > 1 {
            (missed.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(CurveRow {
            q,
            mean_missed: mean,
            std_missed: std,
            random_mean_missed: random_total as f64 / (n * trials as f64),
        });
    }
    Ok(rows)
}

/// One row of a per-slice probability file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbRow {
    pub stack_id: String,
    pub slice_index: usize,
    pub p_d: f64,
    pub p_n: f64,
    pub p_w: f64,
}

impl ProbRow {
    pub fn probs(&self) -> [f64; 3] {
        [self.p_d, self.p_n, self.p_w]
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Manifest {
            path: path.to_path_buf(),
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        },
    }
}

pub fn write_probs(path: &Path, rows: &[ProbRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_probs(path: &Path) -> Result<Vec<ProbRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Joins probabilities with the labeled slices of `dataset`, one entry per
/// stack in id order, slices sorted by index.
pub fn stacks_from_probs(rows: &[ProbRow], dataset: &Dataset) -> Result<Vec<StackPredictions>> {
    type Entry = (usize, [f64; 3], Label);
    let probs: BTreeMap<(&str, usize), [f64; 3]> = rows
        .iter()
        .map(|r| ((r.stack_id.as_str(), r.slice_index), r.probs()))
        .collect();
    let mut stacks: BTreeMap<&str, Vec<Entry>> = BTreeMap::new();
    for (s, l) in &dataset.labeled {
        let p = probs.get(&(s.stack_id.as_str(), s.slice_index)).ok_or_else(|| {
            Error::Invalid(format!(
                "no probabilities for slice {} of stack {}",
                s.slice_index, s.stack_id
            ))
        })?;
        stacks.entry(&s.stack_id).or_default().push((s.slice_index, *p, *l));
    }
    Ok(stacks
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|e| e.0);
            StackPredictions {
                stack_id: id.to_string(),
                probs: v.iter().map(|e| e.1).collect(),
                truth: v.iter().map(|e| e.2).collect(),
            }
        })
        .collect())
}
