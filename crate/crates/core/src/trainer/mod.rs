//! Mean-teacher training loop.

mod adam;
mod config;
mod perturb;
mod sampler;

pub use adam::Adam;
pub use config::TrainConfig;
pub use perturb::{perturb, PerturbConfig, Perturbation};
pub use sampler::{sample_batch, Batch, BatchSampler};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ema_update, Archive, ArchiveMeta, Architecture, ModelParams, Network, Scalar};
use crate::datamodel::{Dataset, Label};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::grid::Grid;
use crate::losses::{composite_loss_with_grads, LossBreakdown, LossWeights, SliceForwards};
use crate::roi::{compute_stack_rois, RoiConfig, StackRoi};

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let x = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Perturbed network inputs for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    /// One entry per slice; labeled slices come first.
    pub labels: Vec<Option<Label>>,
    /// Full images for every slice, then masked images of the labeled ones.
    pub student_inputs: Vec<Grid<f32>>,
    /// Empty when the consistency weight is zero.
    pub teacher_full: Vec<Grid<f32>>,
    /// Empty when the ROI consistency weight is zero.
    pub teacher_masked: Vec<Grid<f32>>,
    pub epoch: usize,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

fn masked(pixels: &Grid<f32>, roi: &StackRoi) -> Result<Grid<f32>> {
    pixels.ensure_same_shape(&roi.mask)?;
    let data = pixels
        .as_slice()
        .iter()
        .zip(roi.mask.as_slice())
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Grid::from_vec(pixels.rows(), pixels.cols(), data)
}

/// Draws an independent perturbation for every forward the loss needs.
pub fn prepare_batch(
    dataset: &Dataset,
    batch: &Batch,
    rois: &BTreeMap<String, StackRoi>,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    let slices: Vec<(&crate::datamodel::Slice, Option<Label>)> = batch
        .labeled
        .iter()
        .map(|&i| (&dataset.labeled[i].0, Some(dataset.labeled[i].1)))
        .chain(batch.unlabeled.iter().map(|&i| (&dataset.unlabeled[i], None)))
        .collect();
    let w = &config.weights;
    let mut out = PreparedBatch {
        labels: slices.iter().map(|s| s.1).collect(),
        student_inputs: Vec::with_capacity(slices.len() + batch.labeled.len()),
        teacher_full: Vec::new(),
        teacher_masked: Vec::new(),
        epoch,
    };
    let mut student_masked = Vec::with_capacity(batch.labeled.len());
    for (slice, label) in &slices {
        let side = slice.pixels.rows();
        let view = |img: &Grid<f32>, rng: &mut ChaCha8Rng| {
            Perturbation::draw(side, &config.perturb, rng).apply(img)
        };
        let roi = rois.get(&slice.stack_id).ok_or_else(|| {
            Error::Invalid(format!("no ROI for stack {}", slice.stack_id))
        })?;
        let masked_img = masked(&slice.pixels, roi)?;
        out.student_inputs.push(view(&slice.pixels, rng));
        if label.is_some() {
            student_masked.push(view(&masked_img, rng));
        }
        if w.lambda > 0.0 {
            out.teacher_full.push(view(&slice.pixels, rng));
        }
        if w.beta > 0.0 {
            out.teacher_masked.push(view(&masked_img, rng));
        }
    }
    out.student_inputs.extend(student_masked);
    Ok(out)
}

/// Composite loss of `student` against `teacher` on a prepared batch.
/// When `grads` is given it receives the gradient w.r.t. the student
/// parameters; the teacher is never differentiated.
pub fn objective<F: Scalar>(
    net: &Network,
    student: &ModelParams<F>,
    teacher: &ModelParams<F>,
    batch: &PreparedBatch,
    weights: &LossWeights,
    grads: Option<&mut ModelParams<F>>,
) -> Result<LossBreakdown> {
    let b = batch.len();
    let l = batch.n_labeled();
    if batch.student_inputs.len() != b + l {
        return Err(Error::Shape(format!(
            "{} student inputs for {b} slices with {l} labeled",
            batch.student_inputs.len()
        )));
    }
    let inputs: Vec<&Grid<f32>> = batch.student_inputs.iter().collect();
    let (s_out, tape) = match grads {
        Some(_) => {
            let (o, t) = net.forward_train(student, &inputs)?;
            (o, Some(t))
        }
        None => (net.forward_batch(student, &inputs)?, None),
    };
    let mut s_outs = s_out.outputs();
    let s_masked = s_outs.split_off(b);

    let t_inputs: Vec<&Grid<f32>> = batch.teacher_full.iter().chain(&batch.teacher_masked).collect();
    let mut t_full = Vec::new();
    let mut t_masked = Vec::new();
    if !t_inputs.is_empty() {
        let mut outs = net.forward_batch(teacher, &t_inputs)?.outputs();
        t_masked = outs.split_off(batch.teacher_full.len());
        t_full = outs;
    }
    for (name, v) in [("teacher full", &t_full), ("teacher masked", &t_masked)] {
        if !v.is_empty() && v.len() != b {
            return Err(Error::Shape(format!("{} {name} outputs for {b} slices", v.len())));
        }
    }

    let mut masked_iter = s_masked.into_iter();
    let mut t_full = t_full.into_iter();
    let mut t_masked = t_masked.into_iter();
    let forwards: Vec<SliceForwards> = s_outs
        .into_iter()
        .zip(&batch.labels)
        .map(|(student_full, &label)| SliceForwards {
            label,
            student_full,
            student_masked: if label.is_some() { masked_iter.next() } else { None },
            teacher_full: t_full.next(),
            teacher_masked: t_masked.next(),
        })
        .collect();
    let (loss, g) = composite_loss_with_grads(&forwards, weights, batch.epoch)?;

    if let (Some(grads), Some(tape)) = (grads, tape) {
        let fdim = net.feature_dim();
        let dlogits: Vec<F> = g
            .full_logits
            .iter()
            .chain(&g.masked_logits)
            .flat_map(|r| r.map(F::of))
            .collect();
        let dfeatures: Option<Vec<F>> = (weights.beta > 0.0).then(|| {
            g.full_features
                .iter()
                .flat_map(|r| r.iter().map(|&v| F::of(v)))
                .chain(std::iter::repeat_n(F::zero(), l * fdim))
                .collect()
        });
        net.backward(student, tape, &dlogits, dfeatures.as_deref(), grads)?;
    }
    Ok(loss)
}

/// Student, teacher and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F = f32> {
    pub student: ModelParams<F>,
    pub teacher: ModelParams<F>,
    pub adam: Adam<F>,
    pub step: u64,
    pub epoch: usize,
}

impl<F: Scalar> TrainState<F> {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn new(net: &Network, seed: u64) -> Self {
        let student: ModelParams<F> = net.init_params(&mut rng_for(seed, INIT_STREAM));
        TrainState {
            teacher: student.clone(),
            adam: Adam::new(&student),
            student,
            step: 0,
            epoch: 0,
        }
    }

    pub fn to_archive(&self, net: &Network, seed: u64) -> Archive<F> {
        let mut meta = ArchiveMeta::new::<F>(net.architecture().clone(), self.epoch, self.step, seed);
        meta.extra.insert("adam.t".into(), self.adam.t.to_string());
        let mut a = Archive::new(meta);
        a.push_group("student", &self.student);
        a.push_group("teacher", &self.teacher);
        a.push_group("adam.m", &self.adam.m);
        a.push_group("adam.v", &self.adam.v);
        a
    }

    pub fn from_archive(archive: &Archive<F>) -> Result<(Network, Self)> {
        let net = Network::new(archive.meta.architecture.clone())?;
        let t = archive
            .meta
            .extra
            .get("adam.t")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing optimizer step count".into()))?;
        let state = TrainState {
            student: archive.group("student")?,
            teacher: archive.group("teacher")?,
            adam: Adam {
                m: archive.group("adam.m")?,
                v: archive.group("adam.v")?,
                t,
            },
            step: archive.meta.step,
            epoch: archive.meta.epoch,
        };
        for p in [&state.student, &state.teacher, &state.adam.m, &state.adam.v] {
            net.check_params(p)?;
        }
        Ok((net, state))
    }

    pub fn save(&self, net: &Network, seed: u64, path: &Path) -> Result<()> {
        self.to_archive(net, seed).save(path)
    }

    pub fn load(path: &Path) -> Result<(Network, Self)> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Teacher network and parameters from a checkpoint.
pub fn load_teacher(path: &Path) -> Result<(Network, ModelParams<f32>)> {
    let archive = Archive::<f32>::load(path)?;
    let net = Network::new(archive.meta.architecture.clone())?;
    let teacher = archive.group("teacher")?;
    net.check_params(&teacher)?;
    Ok((net, teacher))
}

/// One optimizer step: loss and gradient, Adam at the cosine rate, then
/// the EMA teacher update with the updated student.
pub fn train_step<F: Scalar>(
    net: &Network,
    state: &mut TrainState<F>,
    batch: &PreparedBatch,
    config: &TrainConfig,
    total_steps: u64,
) -> Result<LossBreakdown> {
    let mut grads = ModelParams::zeros_like(&state.student);
    let loss = objective(net, &state.student, &state.teacher, batch, &config.weights, Some(&mut grads))?;
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
    }
    let lr = cosine_lr(state.step, total_steps, config.lr0);
    state.adam.step(&mut state.student, &grads, lr)?;
    ema_update(&mut state.teacher, &state.student, config.alpha)?;
    state.step += 1;
    Ok(loss)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    pub ramp: f64,
    /// Means over the epoch's steps.
    pub loss: LossBreakdown,
    pub student_val: Option<EvalReport>,
    pub teacher_val: Option<EvalReport>,
}

pub struct TrainOutcome {
    pub network: Network,
    pub state: TrainState<f32>,
    /// Teacher with the best validation accuracy, or the final teacher
    /// without a validation set.
    pub best_teacher: ModelParams<f32>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

pub fn roi_config_for(config: &TrainConfig, rows: usize, cols: usize) -> Result<RoiConfig> {
    let mut rc = RoiConfig::from_fraction(rows, cols, config.roi_area_min_frac)?;
    rc.weighting = config.roi_weighting;
    Ok(rc)
}

/// Stack ROIs for every stack in `dataset`.
pub fn dataset_rois(dataset: &Dataset, config: &TrainConfig) -> Result<BTreeMap<String, StackRoi>> {
    let (rows, cols) = dataset
        .slice_size()?
        .ok_or_else(|| Error::Invalid("dataset has no slices".into()))?;
    compute_stack_rois(dataset.slices(), &roi_config_for(config, rows, cols)?, config.roi_threshold)
}

pub fn network_for(dataset: &Dataset, config: &TrainConfig) -> Result<Network> {
    let (rows, cols) = dataset
        .slice_size()?
        .ok_or_else(|| Error::Invalid("dataset has no slices".into()))?;
    if rows != cols {
        return Err(Error::Shape(format!("slices must be square, got {rows}x{cols}")));
    }
    Network::new(Architecture::parse(&config.architecture, rows)?)
}

pub fn steps_per_epoch(dataset: &Dataset, sampler: &BatchSampler, config: &TrainConfig) -> usize {
    if config.steps_per_epoch > 0 {
        return config.steps_per_epoch;
    }
    let (nl, nu) = sampler.quotas();
    let labeled = dataset.labeled.len().div_ceil(nl);
    let unlabeled = if nu > 0 { dataset.unlabeled.len().div_ceil(nu) } else { 0 };
    labeled.max(unlabeled).max(1)
}

fn validate_on(net: &Network, params: &ModelParams<f32>, val: &Dataset) -> Result<EvalReport> {
    let slices: Vec<_> = val.labeled.iter().map(|(s, _)| s).collect();
    let truth: Vec<Label> = val.labeled.iter().map(|(_, l)| *l).collect();
    eval::evaluate(&eval::predict(net, params, &slices)?, &truth)
}

fn mean_breakdown(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = 1.0 / n.max(1) as f64;
    LossBreakdown {
        cls: sum.cls * k,
        cls_roi: sum.cls_roi * k,
        con: sum.con * k,
        con_roi: sum.con_roi * k,
        ent: sum.ent * k,
        ramp: sum.ramp * k,
        total: sum.total * k,
    }
}

fn accumulate(sum: &mut LossBreakdown, l: &LossBreakdown) {
    sum.cls += l.cls;
    sum.cls_roi += l.cls_roi;
    sum.con += l.con;
    sum.con_roi += l.con_roi;
    sum.ent += l.ent;
    sum.ramp += l.ramp;
    sum.total += l.total;
}

/// Trains one model pair. With `out_dir`, writes the metrics log and the
/// best and last checkpoints there.
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let net = network_for(train_set, config)?;
    let rois = dataset_rois(train_set, config)?;
    let mut sampler = BatchSampler::new(train_set, config)?;
    let steps = steps_per_epoch(train_set, &sampler, config);
    let total_steps = (steps * config.epochs) as u64;
    let val_set = val_set.filter(|v| !v.labeled.is_empty());

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };

    let mut state = TrainState::<f32>::new(&net, config.seed);
    let mut rng = rng_for(config.seed, TRAIN_STREAM);
    let mut best: Option<(f64, usize, TrainState<f32>)> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let mut sum = LossBreakdown::default();
        let mut lr = config.lr0;
        for _ in 0..steps {
            let batch = sampler.sample(&mut rng);
            let prepared = prepare_batch(train_set, &batch, &rois, config, epoch, &mut rng)?;
            lr = cosine_lr(state.step, total_steps, config.lr0);
            let l = train_step(&net, &mut state, &prepared, config, total_steps)?;
            accumulate(&mut sum, &l);
        }
        state.epoch = epoch + 1;
        let loss = mean_breakdown(&sum, steps);
        let (student_val, teacher_val) = match val_set {
            Some(v) => (
                Some(validate_on(&net, &state.student, v)?),
                Some(validate_on(&net, &state.teacher, v)?),
            ),
            None => (None, None),
        };
        if let Some(t) = &teacher_val {
            if best.as_ref().is_none_or(|(acc, _, _)| t.accuracy > *acc) {
                best = Some((t.accuracy, epoch, state.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            step: state.step,
            lr,
            ramp: loss.ramp,
            loss,
            student_val,
            teacher_val,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} teacher val acc {}",
            record.loss.total,
            teacher_val.map_or("n/a".to_string(), |r| format!("{:.4}", r.accuracy))
        );
        if let Some((path, w)) = &mut log {
            let line = serde_json::to_string(&record).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(record);
    }

    if let Some((path, w)) = &mut log {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    let (best_epoch, best_state) = match best {
        Some((_, e, s)) => (Some(e), s),
        None => (None, state.clone()),
    };
    if let Some(dir) = out_dir {
        best_state.save(&net, config.seed, &dir.join(BEST_CHECKPOINT))?;
        state.save(&net, config.seed, &dir.join(LAST_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        network: net,
        best_teacher: best_state.teacher,
        best_epoch,
        state,
        history,
    })
}

pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

pub fn run_dir(out_dir: &Path, run: usize) -> PathBuf {
    out_dir.join(format!("run{run}"))
}

/// `config.runs` independent trainings with consecutive seeds.
pub fn train_runs(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<TrainOutcome>> {
    config.validate()?;
    (0..config.runs)
        .map(|r| {
            let cfg = TrainConfig {
                seed: run_seed(config.seed, r),
                ..config.clone()
            };
            let dir = out_dir.map(|d| run_dir(d, r));
            train(train_set, val_set, &cfg, dir.as_deref())
        })
        .collect()
}
