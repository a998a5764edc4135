//! `roimt`: synthetic data generation, ROI extraction, mean-teacher
//! training, evaluation and reacquisition simulation.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use roimt_core::datamodel::{generate_synthetic, load_manifest, save_manifest, save_mask};
use roimt_core::eval::{self, aggregate_runs, roc_points};
use roimt_core::reacq::{read_probs, simulate_curve, stacks_from_probs, write_probs, ProbRow};
use roimt_core::roi::{compute_stack_rois, CenterWeighting};
use roimt_core::trainer::{self, load_teacher, train_runs};
use roimt_core::{Error, FileConfig, Label, Split};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error (unknown subcommand, flag or missing argument)
  3  configuration error (unknown key, invalid value)
  4  I/O error (missing or unwritable file)
  5  data error (malformed manifest, image, checkpoint or shape mismatch)
  6  numeric error (non-finite loss, gradient or activation)

Environment:
  ROIMT_OUT_DIR  output directory when --out is not given
  RUST_LOG       log filter for progress messages on stderr (default: info)";

const DEFAULT_VAL_STACKS: usize = 2;
const DEFAULT_TEST_STACKS: usize = 2;
const DEFAULT_Q: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const DEFAULT_TRIALS: usize = 100;

#[derive(Parser)]
#[command(name = "roimt", version, about, arg_required_else_help = true, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test manifests.
    GenData(GenDataArgs),
    /// Segment slices and write one circular brain ROI per stack.
    ExtractRoi(ExtractRoiArgs),
    /// Train student/teacher models.
    Train(TrainArgs),
    /// Evaluate teacher checkpoints on a manifest.
    Evaluate(EvaluateArgs),
    /// Simulate slice reacquisition from saved probabilities.
    SimulateReacq(SimulateArgs),
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "ROIMT_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of stacks [default: 10]
    #[arg(long)]
    n_stacks: Option<usize>,
    /// Slices per stack [default: 30]
    #[arg(long)]
    slices_per_stack: Option<usize>,
    /// Side of the square slices in pixels [default: 64]
    #[arg(long)]
    image_size: Option<usize>,
    /// Artifact strength in [0, 1] [default: 0.5]
    #[arg(long)]
    corruption_strength: Option<f64>,
    /// D,N,W proportions [default: 0.5,0.3,0.2]
    #[arg(long, value_delimiter = ',', num_args = 3)]
    label_fractions: Option<Vec<f64>>,
    /// Stacks held out for validation [default: 2]
    #[arg(long)]
    val_stacks: Option<usize>,
    /// Stacks held out for testing [default: 2]
    #[arg(long)]
    test_stacks: Option<usize>,
    /// Keep this many labeled training slices; the rest become unlabeled
    /// [default: all labeled]
    #[arg(long)]
    n_labeled: Option<usize>,
}

#[derive(Args)]
struct RoiFlags {
    /// Segmentation intensity threshold [default: 0.4]
    #[arg(long)]
    roi_threshold: Option<f32>,
    /// Minimum mask area as a fraction of the slice [default: 0.01]
    #[arg(long)]
    roi_area_min_frac: Option<f64>,
    /// Centroid weighting: normalized or literal [default: normalized]
    #[arg(long, value_parser = parse_weighting)]
    roi_weighting: Option<CenterWeighting>,
}

#[derive(Args)]
struct ExtractRoiArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    roi: RoiFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest; UNLABELED rows form the unlabeled pool.
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest for best-teacher selection.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Preset: desk, paper or tiny [default: desk]
    #[arg(long)]
    preset: Option<String>,
    /// Seed of the first run [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Independent runs with consecutive seeds [default: 5]
    #[arg(long)]
    runs: Option<usize>,
    /// Training epochs [default: 60]
    #[arg(long)]
    epochs: Option<usize>,
    /// Steps per epoch, 0 for one pass over the larger pool [default: 0]
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Batch size [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Labeled slices per batch [default: 16]
    #[arg(long)]
    labeled_per_batch: Option<usize>,
    /// Initial learning rate [default: 0.005]
    #[arg(long)]
    lr0: Option<f64>,
    /// EMA coefficient [default: 0.994]
    #[arg(long)]
    alpha: Option<f64>,
    /// Consistency weight [default: 1]
    #[arg(long)]
    lambda: Option<f64>,
    /// ROI consistency weight [default: 1]
    #[arg(long)]
    beta: Option<f64>,
    /// Entropy weight [default: 1]
    #[arg(long)]
    gamma: Option<f64>,
    /// Ramp-up horizon in epochs [default: 5]
    #[arg(long)]
    ramp_horizon: Option<usize>,
    /// reference, resnet34 or plain:w1,w2,... [default: reference]
    #[arg(long)]
    architecture: Option<String>,
    #[command(flatten)]
    roi: RoiFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output directory for report.json.
    #[arg(long, env = "ROIMT_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Checkpoint(s); several are aggregated as independent runs.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Manifest with labeled slices.
    #[arg(long)]
    manifest: PathBuf,
    /// Split name recorded in the report.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write ROC points (fpr, tpr, threshold) for class N.
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    /// Write per-slice teacher probabilities.
    #[arg(long)]
    dump_probs: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Probabilities written by `evaluate --dump-probs`.
    #[arg(long)]
    probs: PathBuf,
    /// Manifest giving the true labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Reacquisition proportions [default: 0.1,0.2,0.3,0.4,0.5]
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<f64>>,
    /// Random-baseline draws per stack [default: 100]
    #[arg(long)]
    trials: Option<usize>,
    /// Random-baseline seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Also write reacq.svg.
    #[arg(long)]
    plot: bool,
}

fn parse_weighting(s: &str) -> std::result::Result<CenterWeighting, String> {
    match s {
        "normalized" => Ok(CenterWeighting::Normalized),
        "literal" => Ok(CenterWeighting::Literal),
        _ => Err(format!("expected normalized or literal, got {s:?}")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. } => 4,
        Error::Manifest { .. }
        | Error::Image { .. }
        | Error::Shape(_)
        | Error::NoReliableMasks
        | Error::Invalid(_)
        | Error::Checkpoint(_) => 5,
        Error::NonFinite(_) => 6,
        #[allow(unreachable_patterns)]
        _ => 1,
    }
}

type Result<T> = roimt_core::Result<T>;

fn file_config(path: Option<&Path>) -> Result<FileConfig> {
    path.map_or(Ok(FileConfig::default()), FileConfig::load)
}

/// Output directory plus a list of files written into it.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, rel: impl AsRef<Path>) -> PathBuf {
        self.files.push(rel.as_ref().to_path_buf());
        self.dir.join(rel)
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.path(rel);
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }

    fn finish(mut self) -> Result<()> {
        self.files.sort();
        self.files.dedup();
        let list: String = self.files.iter().map(|f| format!("{}\n", f.display())).collect();
        let path = self.dir.join("artifacts.txt");
        fs::write(&path, list).map_err(|e| Error::Io { path, source: e })
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let flags = FileConfig {
        seed: a.seed,
        n_stacks: a.n_stacks,
        slices_per_stack: a.slices_per_stack,
        image_size: a.image_size,
        corruption_strength: a.corruption_strength,
        label_fractions: a.label_fractions.map(|v| [v[0], v[1], v[2]]),
        val_stacks: a.val_stacks,
        test_stacks: a.test_stacks,
        n_labeled: a.n_labeled,
        ..FileConfig::default()
    };
    let fc = file_config(a.common.config.as_deref())?.merged(flags);
    let synth = fc.synth_config()?;
    let n_val = fc.val_stacks.unwrap_or(DEFAULT_VAL_STACKS);
    let n_test = fc.test_stacks.unwrap_or(DEFAULT_TEST_STACKS);
    log::info!("generating {} stacks of {} slices", synth.n_stacks, synth.slices_per_stack);
    let (mut train, val, test) = generate_synthetic(&synth)?.split_by_stack(n_val, n_test)?;
    if let Some(n) = fc.n_labeled {
        let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
        rng.set_stream(u64::MAX);
        train = train.with_label_budget(n, &mut rng);
    }

    let mut out = Outputs::create(&a.common.out)?;
    for (name, ds) in [("train.csv", &train), ("val.csv", &val), ("test.csv", &test)] {
        save_manifest(ds, &out.path(name))?;
        for s in ds.slices() {
            out.files.push(PathBuf::from(format!("images/{}_{:04}.pgm", s.stack_id, s.slice_index)));
        }
    }
    let resolved = FileConfig {
        val_stacks: Some(n_val),
        test_stacks: Some(n_test),
        n_labeled: fc.n_labeled,
        ..FileConfig::resolved_synth(&synth)
    };
    out.write("resolved_config.toml", &resolved.to_toml()?)?;
    log::info!(
        "train {} labeled + {} unlabeled, val {}, test {} slices",
        train.labeled.len(),
        train.unlabeled.len(),
        val.len(),
        test.len()
    );
    out.finish()
}

fn roi_overrides(r: &RoiFlags) -> FileConfig {
    FileConfig {
        roi_threshold: r.roi_threshold,
        roi_area_min_frac: r.roi_area_min_frac,
        roi_weighting: r.roi_weighting,
        ..FileConfig::default()
    }
}

fn extract_roi(a: ExtractRoiArgs) -> Result<()> {
    let fc = file_config(a.common.config.as_deref())?.merged(roi_overrides(&a.roi));
    let cfg = fc.train_config()?;
    let ds = load_manifest(&a.manifest, Split::Train)?;
    let (rows, cols) = ds.slice_size()?.ok_or_else(|| Error::Invalid("manifest has no slices".into()))?;
    let rois = compute_stack_rois(ds.slices(), &trainer::roi_config_for(&cfg, rows, cols)?, cfg.roi_threshold)?;

    let mut out = Outputs::create(&a.common.out)?;
    fs::create_dir_all(out.dir.join("masks"))
        .map_err(|e| Error::Io { path: out.dir.join("masks"), source: e })?;
    let mut csv = String::from("stack_id,center_row,center_col,spread,radius,full_image\n");
    for (id, roi) in &rois {
        match &roi.circle {
            Some(c) => csv.push_str(&format!(
                "{id},{},{},{},{},false\n",
                c.center.0, c.center.1, c.spread, c.radius
            )),
            None => csv.push_str(&format!("{id},,,,,true\n")),
        }
        save_mask(&roi.mask, &out.path(format!("masks/{id}.pgm")))?;
    }
    out.write("rois.csv", &csv)?;
    let resolved = FileConfig {
        roi_threshold: Some(cfg.roi_threshold),
        roi_area_min_frac: Some(cfg.roi_area_min_frac),
        roi_weighting: Some(cfg.roi_weighting),
        ..FileConfig::default()
    };
    out.write("resolved_config.toml", &resolved.to_toml()?)?;
    log::info!("{} stack ROIs written", rois.len());
    out.finish()
}

fn train(a: TrainArgs) -> Result<()> {
    let flags = FileConfig {
        preset: a.preset,
        seed: a.seed,
        runs: a.runs,
        epochs: a.epochs,
        steps_per_epoch: a.steps_per_epoch,
        batch_size: a.batch_size,
        labeled_per_batch: a.labeled_per_batch,
        lr0: a.lr0,
        alpha: a.alpha,
        lambda: a.lambda,
        beta: a.beta,
        gamma: a.gamma,
        ramp_horizon: a.ramp_horizon,
        architecture: a.architecture,
        ..roi_overrides(&a.roi)
    };
    let cfg = file_config(a.common.config.as_deref())?.merged(flags).train_config()?;
    let train_set = load_manifest(&a.manifest, Split::Train)?;
    if train_set.labeled.is_empty() {
        return Err(Error::Invalid("training manifest has no labeled rows".into()));
    }
    let val = a.val_manifest.as_deref().map(|p| load_manifest(p, Split::Val)).transpose()?;
    if val.is_none() {
        log::warn!("no validation manifest: the final teacher is kept");
    }

    let mut out = Outputs::create(&a.common.out)?;
    out.write("resolved_config.toml", &FileConfig::resolved_train(&cfg).to_toml()?)?;
    log::info!(
        "training {} run(s) on {} labeled + {} unlabeled slices",
        cfg.runs,
        train_set.labeled.len(),
        train_set.unlabeled.len()
    );
    let outcomes = train_runs(&train_set, val.as_ref(), &cfg, Some(&out.dir))?;

    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for (r, o) in outcomes.iter().enumerate() {
        for f in [trainer::METRICS_FILE, trainer::BEST_CHECKPOINT, trainer::LAST_CHECKPOINT] {
            out.files.push(PathBuf::from(format!("run{r}/{f}")));
        }
        let best_val = o.best_epoch.and_then(|e| o.history[e].teacher_val);
        reports.extend(best_val);
        runs.push(json!({
            "run": r,
            "seed": trainer::run_seed(cfg.seed, r),
            "best_epoch": o.best_epoch,
            "steps": o.state.step,
            "teacher_val": best_val,
        }));
    }
    let aggregate = if reports.is_empty() { None } else { Some(aggregate_runs(&reports)?) };
    let summary = json!({ "runs": runs, "val_aggregate": aggregate });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Invalid(e.to_string()))?;
    out.write("summary.json", &text)?;
    println!("{text}");
    out.finish()
}

/// `probs.csv` → `probs-2.csv` for the third of several checkpoints.
fn indexed(path: &Path, k: usize, n: usize) -> PathBuf {
    if n == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{k}"),
    };
    path.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ds = load_manifest(&a.manifest, a.split)?;
    if ds.labeled.is_empty() {
        return Err(Error::Invalid("manifest has no labeled rows".into()));
    }
    let slices: Vec<_> = ds.labeled.iter().map(|(s, _)| s).collect();
    let truth: Vec<Label> = ds.labeled.iter().map(|(_, l)| *l).collect();
    let n = a.checkpoint.len();
    let mut out = Outputs::create(&a.out)?;
    let mut reports = Vec::new();
    let mut entries = Vec::new();
    for (k, ckpt) in a.checkpoint.iter().enumerate() {
        let (net, teacher) = load_teacher(ckpt)?;
        let outputs = eval::predict(&net, &teacher, &slices)?;
        let report = eval::evaluate(&outputs, &truth)?;
        if let Some(p) = &a.dump_probs {
            let rows: Vec<ProbRow> = slices
                .iter()
                .zip(&outputs)
                .map(|(s, o)| ProbRow {
                    stack_id: s.stack_id.clone(),
                    slice_index: s.slice_index,
                    p_d: o.probs[0],
                    p_n: o.probs[1],
                    p_w: o.probs[2],
                })
                .collect();
            write_probs(&indexed(p, k, n), &rows)?;
        }
        if let Some(p) = &a.roc_csv {
            let scores: Vec<f64> = outputs.iter().map(|o| o.probs[Label::N.index()]).collect();
            match roc_points(&scores, &truth) {
                Ok(pts) => {
                    let mut text = String::from("fpr,tpr,threshold\n");
                    for (f, t, th) in pts {
                        text.push_str(&format!("{f},{t},{th}\n"));
                    }
                    write_text(&indexed(p, k, n), &text)?;
                }
                Err(e) => log::warn!("ROC not written: {e}"),
            }
        }
        entries.push(json!({ "checkpoint": ckpt.display().to_string(), "report": report }));
        reports.push(report);
    }
    let summary = json!({
        "split": a.split.to_string(),
        "reports": entries,
        "aggregate": aggregate_runs(&reports)?,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Invalid(e.to_string()))?;
    out.write("report.json", &text)?;
    println!("{text}");
    out.finish()
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let flags = FileConfig { q: a.q, trials: a.trials, seed: a.seed, ..FileConfig::default() };
    let fc = file_config(a.common.config.as_deref())?.merged(flags);
    let qs = fc.q.clone().unwrap_or_else(|| DEFAULT_Q.to_vec());
    if let Some(q) = qs.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::Config(format!("q {q} outside [0, 1]")));
    }
    let trials = fc.trials.unwrap_or(DEFAULT_TRIALS);
    let seed = fc.seed.unwrap_or(0);
    let ds = load_manifest(&a.manifest, Split::Test)?;
    let stacks = stacks_from_probs(&read_probs(&a.probs)?, &ds)?;
    let rows = simulate_curve(&stacks, &qs, trials, seed)?;

    let mut csv = String::from("q,mean_missed,std_missed,random_mean_missed\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.q, r.mean_missed, r.std_missed, r.random_mean_missed));
    }
    let mut out = Outputs::create(&a.common.out)?;
    out.write("reacq.csv", &csv)?;
    if a.plot {
        out.write("reacq.svg", &plot::reacq_svg(&rows))?;
    }
    let resolved = FileConfig { q: Some(qs), trials: Some(trials), seed: Some(seed), ..FileConfig::default() };
    out.write("resolved_config.toml", &resolved.to_toml()?)?;
    print!("{csv}");
    out.finish()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::ExtractRoi(a) => extract_roi(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SimulateReacq(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_paths() {
        assert_eq!(indexed(Path::new("a/p.csv"), 2, 1), PathBuf::from("a/p.csv"));
        assert_eq!(indexed(Path::new("a/p.csv"), 2, 3), PathBuf::from("a/p-2.csv"));
        assert_eq!(indexed(Path::new("p"), 0, 2), PathBuf::from("p-0"));
    }

    #[test]
    fn exit_code_table() {
        assert_eq!(exit_code(&Error::Config("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 6);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 5);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
