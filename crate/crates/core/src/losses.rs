//! Loss terms, their gradients w.r.t. student outputs, the ramp-up
//! schedule and the weighted composite.
//!
//! Every teacher-side quantity is a constant: gradients are produced only
//! for the student's logits and pooled features.

use serde::{Deserialize, Serialize};

use crate::backbone::ForwardOutput;
use crate::datamodel::Label;
use crate::error::{Error, Result};

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
fn flog(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

pub fn cross_entropy(probs: &[f64; 3], label: Label) -> f64 {
    -flog(probs[label.index()])
}

/// `KL(teacher || student)`.
pub fn kl_consistency(teacher: &[f64; 3], student: &[f64; 3]) -> f64 {
    teacher
        .iter()
        .zip(student)
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &q)| p * (flog(p) - flog(q)))
        .sum()
}

/// Mean squared difference over the feature dimension.
pub fn roi_feature_mse(teacher_masked: &[f64], student_full: &[f64]) -> Result<f64> {
    if teacher_masked.len() != student_full.len() || teacher_masked.is_empty() {
        return Err(Error::Shape(format!(
            "feature dimensions {} vs {}",
            teacher_masked.len(),
            student_full.len()
        )));
    }
    let sum: f64 = teacher_masked
        .iter()
        .zip(student_full)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / teacher_masked.len() as f64)
}

pub fn entropy_term(probs: &[f64; 3]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|&p| p * flog(p))
        .sum::<f64>()
}

/// `exp(-5 (1 - min(t, T) / T)^2)`.
pub fn ramp_up(epoch: usize, horizon: usize) -> f64 {
    let horizon = horizon.max(1);
    let x = 1.0 - epoch.min(horizon) as f64 / horizon as f64;
    (-5.0 * x * x).exp()
}

fn d_cross_entropy(probs: &[f64; 3], label: Label) -> [f64; 3] {
    let mut g = [0.0; 3];
    let p = probs[label.index()];
    if p > PROB_FLOOR {
        g[label.index()] = -1.0 / p;
    }
    g
}

fn d_kl_student(teacher: &[f64; 3], student: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| {
        if student[k] > PROB_FLOOR {
            -teacher[k] / student[k]
        } else {
            0.0
        }
    })
}

fn d_entropy(probs: &[f64; 3]) -> [f64; 3] {
    probs.map(|p| if p > PROB_FLOOR { -(p.ln() + 1.0) } else { -PROB_FLOOR.ln() })
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits.
fn softmax_backward(probs: &[f64; 3], g: &[f64; 3]) -> [f64; 3] {
    let dot: f64 = probs.iter().zip(g).map(|(p, g)| p * g).sum();
    [0, 1, 2].map(|k| probs[k] * (g[k] - dot))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Ramp-up horizon `T` in epochs.
    pub ramp_horizon: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            beta: 1.0,
            gamma: 1.0,
            ramp_horizon: 5,
        }
    }
}

impl LossWeights {
    pub fn supervised() -> Self {
        LossWeights {
            lambda: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda) && ok(self.beta) && ok(self.gamma)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.ramp_horizon == 0 {
            return Err(Error::Config("ramp horizon must be >= 1".into()));
        }
        Ok(())
    }

    /// True when no unsupervised term contributes.
    pub fn is_supervised(&self) -> bool {
        self.lambda == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub cls_roi: f64,
    pub con: f64,
    pub con_roi: f64,
    pub ent: f64,
    pub ramp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn total_for(&self, w: &LossWeights) -> f64 {
        self.cls + self.cls_roi + self.ramp * (w.lambda * self.con + w.beta * self.con_roi + w.gamma * self.ent)
    }

    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("cls", self.cls),
            ("cls_roi", self.cls_roi),
            ("con", self.con),
            ("con_roi", self.con_roi),
            ("ent", self.ent),
            ("total", self.total),
        ]
    }
}

/// All forwards computed for one slice of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceForwards {
    pub label: Option<Label>,
    pub student_full: ForwardOutput,
    /// Required for labeled slices.
    pub student_masked: Option<ForwardOutput>,
    /// Required when `lambda > 0`.
    pub teacher_full: Option<ForwardOutput>,
    /// Required when `beta > 0`.
    pub teacher_masked: Option<ForwardOutput>,
}

/// Gradients of the total loss w.r.t. student outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentGradients {
    /// Per slice, w.r.t. student logits on the full image.
    pub full_logits: Vec<[f64; 3]>,
    /// Per slice, w.r.t. the student's pooled feature on the full image.
    pub full_features: Vec<Vec<f64>>,
    /// Per labeled slice (batch order), w.r.t. student logits on the
    /// masked image.
    pub masked_logits: Vec<[f64; 3]>,
}

pub fn composite_loss(batch: &[SliceForwards], weights: &LossWeights, epoch: usize) -> Result<LossBreakdown> {
    composite_loss_with_grads(batch, weights, epoch).map(|(l, _)| l)
}

pub fn composite_loss_with_grads(
    batch: &[SliceForwards],
    weights: &LossWeights,
    epoch: usize,
) -> Result<(LossBreakdown, StudentGradients)> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = batch.len() as f64;
    let n_labeled = batch.iter().filter(|s| s.label.is_some()).count();
    let ramp = ramp_up(epoch, weights.ramp_horizon);
    let (wl, wb, wg) = (ramp * weights.lambda, ramp * weights.beta, ramp * weights.gamma);

    let mut out = LossBreakdown {
        ramp,
        ..LossBreakdown::default()
    };
    let mut grads = StudentGradients {
        full_logits: Vec::with_capacity(batch.len()),
        full_features: Vec::with_capacity(batch.len()),
        masked_logits: Vec::with_capacity(n_labeled),
    };

    for (i, s) in batch.iter().enumerate() {
        let p = &s.student_full.probs;
        let mut g_probs = [0.0; 3];
        let mut g_feat = vec![0.0; s.student_full.feature.len()];

        if let Some(label) = s.label {
            let w = 1.0 / n_labeled as f64;
            out.cls += w * cross_entropy(p, label);
            add_scaled(&mut g_probs, &d_cross_entropy(p, label), w);

            let masked = s.student_masked.as_ref().ok_or_else(|| {
                Error::Invalid(format!("slice {i}: missing student forward on masked image"))
            })?;
            out.cls_roi += w * cross_entropy(&masked.probs, label);
            let mut gm = [0.0; 3];
            add_scaled(&mut gm, &d_cross_entropy(&masked.probs, label), w);
            grads.masked_logits.push(softmax_backward(&masked.probs, &gm));
        }

        match &s.teacher_full {
            Some(t) => {
                out.con += kl_consistency(&t.probs, p) / n;
                add_scaled(&mut g_probs, &d_kl_student(&t.probs, p), wl / n);
            }
            None if weights.lambda > 0.0 => {
                return Err(Error::Invalid(format!("slice {i}: missing teacher forward")));
            }
            None => {}
        }

        match &s.teacher_masked {
            Some(t) => {
                out.con_roi += roi_feature_mse(&t.feature, &s.student_full.feature)? / n;
                let scale = wb / n * 2.0 / g_feat.len() as f64;
                for ((g, z), zt) in g_feat.iter_mut().zip(&s.student_full.feature).zip(&t.feature) {
                    *g += scale * (z - zt);
                }
            }
            None if weights.beta > 0.0 => {
                return Err(Error::Invalid(format!(
                    "slice {i}: missing teacher forward on masked image"
                )));
            }
            None => {}
        }

        out.ent += entropy_term(p) / n;
        add_scaled(&mut g_probs, &d_entropy(p), wg / n);

        grads.full_logits.push(softmax_backward(p, &g_probs));
        grads.full_features.push(g_feat);
    }
    out.total = out.total_for(weights);
    let terms = out.terms();
    if let Some((name, _)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term {name}")));
    }
    Ok((out, grads))
}

fn add_scaled(acc: &mut [f64; 3], g: &[f64; 3], w: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += w * b;
    }
}
