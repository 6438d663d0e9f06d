//! End-to-end runs: configuration, datasets, teacher acquisition, metrics
//! files, manifests, the four-recipe ablation, embedding analysis and the
//! gradient suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_report, Graph, Tensor, Var, DEFAULT_STEP};
use crate::data::{self, PairedDataset, Split, Splits, SyntheticSpec};
use crate::encoders::{encode_on, init_encoder, EncoderParams, Network, TENSORS_PER_ENCODER};
use crate::error::{Error, Result};
use crate::eval::{evaluate_student, EvalMetrics, TeacherView};
use crate::losses::{
    clip_loss, clip_rd_total, fd_loss, hrd_loss, icl_loss, vrd_ce_loss, vrd_kl_loss, xrd_loss,
    LossKind, LossSet, LossValues, LossWeights, Pair, TempVars, TemperatureSet,
};
use crate::metrics::{pair_similarity_stats, similarity_histogram, DEFAULT_BINS};
use crate::seed;
use crate::trainer::{
    distill, train_teacher, Checkpoint, DistillRun, FrozenTeacher, MetricRecord, ModelConfig,
    TrainConfig,
};

pub const OUT_ENV: &str = "RELKD_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Line-delimited dataset; synthetic data is generated when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub split: (f64, f64, f64),
    /// Pretrained teacher checkpoint; a teacher is trained when absent.
    pub teacher: Option<PathBuf>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: SyntheticSpec::default(),
            split: (0.8, 0.1, 0.1),
            teacher: None,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The run seed drives data generation, the split, initialization and
    /// shuffling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.synthetic.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()
    }

    /// `explicit`, then `$RELKD_OUT`, then the config's `out`, then `runs`.
    pub fn out_root(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Loads or generates the dataset and partitions it. Untagged rows are
/// split with the run seed.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let ds = match &cfg.dataset {
        Some(path) => data::load(path)?,
        None => data::generate(&cfg.synthetic)?,
    };
    if ds.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    if ds.splits.iter().all(|&s| s == Split::Unassigned) {
        data::split(&ds, cfg.split, cfg.seed())
    } else {
        ds.partition()
    }
}

/// Loads the configured teacher checkpoint or trains one on `train`.
pub fn obtain_teacher(cfg: &RunConfig, train: &PairedDataset) -> Result<Checkpoint> {
    match &cfg.teacher {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            if c.network != Network::Teacher {
                return Err(Error::Config(format!(
                    "{} is not a teacher checkpoint",
                    path.display()
                )));
            }
            Ok(c)
        }
        None => {
            let run = train_teacher(&cfg.train, &cfg.model, train)?;
            Ok(Checkpoint::new(&run.teacher, cfg.seed(), run.temperatures))
        }
    }
}

/// Display name of a loss selection: `CLIP` for the task loss alone, `KD`
/// for {FD, ICL, HRD}, `RD` for everything, `KD+XRD`/`KD+VRD` in between.
pub fn method_name(set: &LossSet) -> String {
    if set.is_empty() {
        return "CLIP".into();
    }
    if *set == LossSet::rd() {
        return "RD".into();
    }
    let kd = LossSet::kd();
    if kd.iter().all(|k| set.contains(k)) {
        let extra: Vec<&str> = set
            .iter()
            .filter(|k| !kd.contains(*k))
            .map(|k| match k {
                LossKind::Vrd => "VRD",
                LossKind::Xrd => "XRD",
                _ => unreachable!(),
            })
            .collect();
        return std::iter::once("KD")
            .chain(extra)
            .collect::<Vec<_>>()
            .join("+");
    }
    set.iter()
        .map(|k| format!("{k:?}").to_uppercase())
        .collect::<Vec<_>>()
        .join("+")
}

/// Rows of the ablation table, in output order.
pub fn ablation_recipes() -> [(&'static str, LossSet); 4] {
    [
        ("KD", LossSet::kd()),
        ("KD+XRD", LossSet::kd().with(LossKind::Xrd)),
        ("KD+VRD", LossSet::kd().with(LossKind::Vrd)),
        ("RD", LossSet::rd()),
    ]
}

pub const METRICS_COLUMNS: [&str; 22] = [
    "run_id",
    "method",
    "seed",
    "epoch",
    "loss_task",
    "loss_fd",
    "loss_icl",
    "loss_hrd",
    "loss_vrd_ce",
    "loss_vrd_kl",
    "loss_xrd",
    "loss_total",
    "val_i2t_r1",
    "val_t2i_r1",
    "val_i2t_r5",
    "val_t2i_r5",
    "zs_acc",
    "pos_mean",
    "neg_mean",
    "gap",
    "mi_bound_image",
    "mi_bound_text",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record_fields(run_id: &str, method: &str, seed: u64, r: &MetricRecord) -> Vec<String> {
    let l = &r.losses;
    let e = &r.eval;
    vec![
        run_id.to_string(),
        method.to_string(),
        seed.to_string(),
        r.epoch.to_string(),
        l.task.to_string(),
        opt(l.fd),
        opt(l.icl),
        opt(l.hrd),
        opt(l.vrd_ce),
        opt(l.vrd_kl),
        opt(l.xrd),
        l.total.to_string(),
        e.retrieval.i2t_r1.to_string(),
        e.retrieval.t2i_r1.to_string(),
        e.retrieval.i2t_r5.to_string(),
        e.retrieval.t2i_r5.to_string(),
        e.zs_acc.to_string(),
        e.pos_mean.to_string(),
        e.neg_mean.to_string(),
        e.gap.to_string(),
        e.mi_bound_image.to_string(),
        e.mi_bound_text.to_string(),
    ]
}

pub fn write_metrics_csv(
    path: &Path,
    run_id: &str,
    method: &str,
    seed: u64,
    records: &[MetricRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(METRICS_COLUMNS).map_err(csv_error)?;
    for r in records {
        w.write_record(record_fields(run_id, method, seed, r))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Teacher training curve in the metrics schema; only the task and total
/// loss columns are filled.
pub fn write_teacher_metrics(
    path: &Path,
    run_id: &str,
    seed: u64,
    epoch_losses: &[f64],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(METRICS_COLUMNS).map_err(csv_error)?;
    for (e, l) in epoch_losses.iter().enumerate() {
        let mut row = vec![String::new(); METRICS_COLUMNS.len()];
        row[0] = run_id.to_string();
        row[1] = "TEACHER".to_string();
        row[2] = seed.to_string();
        row[3] = (e + 1).to_string();
        row[4] = l.to_string();
        row[11] = l.to_string();
        w.write_record(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

/// One row of a metrics CSV, parsed back.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    /// Remaining columns by name; empty cells are `None`.
    pub values: Vec<(String, Option<f64>)>,
}

impl MetricsRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(c, _)| c == column)
            .and_then(|(_, v)| *v)
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(String::from)
        .collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Data(format!(
            "{}: unexpected metrics header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let bad = |detail: String| Error::Parse {
            line: i + 2,
            detail,
        };
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| bad(format!("`{s}` is not a number")))
            }
        };
        rows.push(MetricsRow {
            run_id: rec[0].to_string(),
            method: rec[1].to_string(),
            seed: rec[2].parse().map_err(|_| bad("seed".into()))?,
            epoch: rec[3].parse().map_err(|_| bad("epoch".into()))?,
            values: METRICS_COLUMNS[4..]
                .iter()
                .zip(rec.iter().skip(4))
                .map(|(c, v)| Ok((c.to_string(), num(v)?)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub version: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: &RunConfig,
        artifacts: Vec<PathBuf>,
        started: Instant,
    ) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            seed: config.seed(),
            artifacts,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Writes `manifest.json` under `dir` through a temporary file and a
    /// rename. Every listed artifact must exist.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        if let Some(missing) = self.artifacts.iter().find(|p| !p.exists()) {
            return Err(Error::Contract(format!(
                "manifest names missing file {}",
                missing.display()
            )));
        }
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Output of one distillation run on disk.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub run: DistillRun,
    pub teacher: Checkpoint,
    pub student_path: PathBuf,
    pub teacher_path: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn run_id(method: &str, seed: u64) -> String {
    format!("{}-s{seed}", method.to_lowercase().replace('+', "-"))
}

/// Distills under `cfg` into `dir`, writing `teacher.json`, `student.json`
/// and `metrics.csv`.
pub fn run_distill(
    cfg: &RunConfig,
    splits: &Splits,
    teacher: Checkpoint,
    dir: &Path,
) -> Result<DistillOutcome> {
    fs::create_dir_all(dir)?;
    let frozen = FrozenTeacher::new(teacher.model()?, &teacher.temperatures);
    let run = distill(&cfg.train, &cfg.model, &frozen, splits)?;
    let method = method_name(&cfg.train.enabled_losses);
    let teacher_path = dir.join("teacher.json");
    let student_path = dir.join("student.json");
    let metrics_path = dir.join("metrics.csv");
    teacher.save(&teacher_path)?;
    Checkpoint::new(&run.student, cfg.seed(), run.temperatures).save(&student_path)?;
    write_metrics_csv(
        &metrics_path,
        &run_id(&method, cfg.seed()),
        &method,
        cfg.seed(),
        &run.records,
    )?;
    Ok(DistillOutcome {
        run,
        teacher,
        student_path,
        teacher_path,
        metrics_path,
    })
}

/// Scores a student checkpoint on the validation split exactly as the
/// per-epoch evaluation does.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    splits: &Splits,
    student: &Checkpoint,
    teacher: &Checkpoint,
) -> Result<EvalMetrics> {
    let view = TeacherView::new(&teacher.model()?, &splits.val)?;
    evaluate_student(
        &student.model()?,
        &student.temperatures,
        &view,
        &splits.train,
        &splits.val,
        cfg.train.batch_size,
    )
}

/// Mean final-epoch metrics of one recipe across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub seeds: Vec<u64>,
    pub i2t_r1: f64,
    pub t2i_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r5: f64,
    pub zs_acc: f64,
    pub gap: f64,
    pub mi_bound_image: f64,
    pub mi_bound_text: f64,
    /// Final-epoch records, one per seed.
    pub finals: Vec<MetricRecord>,
    /// First-epoch loss components, one per seed.
    pub first_losses: Vec<LossValues>,
}

impl AblationRow {
    fn from_runs(method: &str, seeds: &[u64], runs: &[DistillRun]) -> Self {
        let finals: Vec<MetricRecord> = runs
            .iter()
            .map(|r| r.records.last().expect("epochs ≥ 1").clone())
            .collect();
        let n = finals.len() as f64;
        let mean =
            |f: &dyn Fn(&EvalMetrics) -> f64| finals.iter().map(|r| f(&r.eval)).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            seeds: seeds.to_vec(),
            i2t_r1: mean(&|e| e.retrieval.i2t_r1),
            t2i_r1: mean(&|e| e.retrieval.t2i_r1),
            i2t_r5: mean(&|e| e.retrieval.i2t_r5),
            t2i_r5: mean(&|e| e.retrieval.t2i_r5),
            zs_acc: mean(&|e| e.zs_acc),
            gap: mean(&|e| e.gap),
            mi_bound_image: mean(&|e| e.mi_bound_image),
            mi_bound_text: mean(&|e| e.mi_bound_text),
            first_losses: runs.iter().map(|r| r.records[0].losses).collect(),
            finals,
        }
    }

    pub fn r1_sum(&self) -> f64 {
        self.i2t_r1 + self.t2i_r1
    }
}

pub const ABLATION_COLUMNS: [&str; 10] = [
    "method",
    "n_seeds",
    "val_i2t_r1",
    "val_t2i_r1",
    "val_i2t_r5",
    "val_t2i_r5",
    "zs_acc",
    "gap",
    "mi_bound_image",
    "mi_bound_text",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    fn cells(r: &AblationRow) -> Vec<String> {
        vec![
            r.method.clone(),
            r.seeds.len().to_string(),
            format!("{:.4}", r.i2t_r1),
            format!("{:.4}", r.t2i_r1),
            format!("{:.4}", r.i2t_r5),
            format!("{:.4}", r.t2i_r5),
            format!("{:.4}", r.zs_acc),
            format!("{:.4}", r.gap),
            format!("{:.4}", r.mi_bound_image),
            format!("{:.4}", r.mi_bound_text),
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(ABLATION_COLUMNS).map_err(csv_error)?;
        for r in &self.rows {
            w.write_record(Self::cells(r)).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text rendering.
    pub fn render(&self) -> String {
        let rows: Vec<Vec<String>> =
            std::iter::once(ABLATION_COLUMNS.iter().map(|s| s.to_string()).collect())
                .chain(self.rows.iter().map(Self::cells))
                .collect();
        let widths: Vec<usize> = (0..ABLATION_COLUMNS.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Runs every ablation recipe for every seed. Each seed gets its own data,
/// teacher and `seed-<n>/<method>` output directories.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], dir: &Path) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let recipes = ablation_recipes();
    let mut runs: Vec<Vec<DistillRun>> = vec![Vec::new(); recipes.len()];
    for &s in seeds {
        let cfg = cfg.clone().with_seed(s);
        cfg.validate()?;
        let splits = load_splits(&cfg)?;
        let teacher = obtain_teacher(&cfg, &splits.train)?;
        for (slot, (name, set)) in runs.iter_mut().zip(recipes.iter()) {
            let mut c = cfg.clone();
            c.train.enabled_losses = set.clone();
            let sub = dir.join(format!("seed-{s}")).join(run_id(name, s));
            slot.push(run_distill(&c, &splits, teacher.clone(), &sub)?.run);
        }
    }
    Ok(AblationTable {
        rows: recipes
            .iter()
            .zip(&runs)
            .map(|((name, _), r)| AblationRow::from_runs(name, seeds, r))
            .collect(),
    })
}

/// Histogram and summary statistics of positive and negative pair
/// similarities on the validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub bins: usize,
    pub pos_counts: Vec<usize>,
    pub neg_counts: Vec<usize>,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub gap: f64,
    pub mi_bound_image: f64,
    pub mi_bound_text: f64,
}

pub fn analyze(
    cfg: &RunConfig,
    splits: &Splits,
    student: &Checkpoint,
    teacher: &Checkpoint,
) -> Result<Analysis> {
    let model = student.model()?;
    let images = model.encode_images(&splits.val.image_features)?;
    let texts = model.encode_texts(&splits.val.text_features)?;
    let stats = pair_similarity_stats(&images, &texts)?;
    let eval = evaluate_checkpoint(cfg, splits, student, teacher)?;
    Ok(Analysis {
        bins: DEFAULT_BINS,
        pos_counts: similarity_histogram(&stats.pos_values, DEFAULT_BINS, (-1.0, 1.0))?,
        neg_counts: similarity_histogram(&stats.neg_values, DEFAULT_BINS, (-1.0, 1.0))?,
        pos_mean: stats.pos_mean,
        neg_mean: stats.neg_mean,
        gap: stats.gap,
        mi_bound_image: eval.mi_bound_image,
        mi_bound_text: eval.mi_bound_text,
    })
}

impl Analysis {
    /// Writes `histogram.csv` and `stats.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let hist = dir.join("histogram.csv");
        let mut w = csv::Writer::from_path(&hist).map_err(csv_error)?;
        w.write_record(["bin_lo", "bin_hi", "pos_count", "neg_count"])
            .map_err(csv_error)?;
        let width = 2.0 / self.bins as f64;
        for b in 0..self.bins {
            let lo = -1.0 + b as f64 * width;
            w.write_record([
                format!("{lo:.4}"),
                format!("{:.4}", lo + width),
                self.pos_counts[b].to_string(),
                self.neg_counts[b].to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        let stats = dir.join("stats.csv");
        let mut w = csv::Writer::from_path(&stats).map_err(csv_error)?;
        w.write_record([
            "pos_mean",
            "neg_mean",
            "gap",
            "mi_bound_image",
            "mi_bound_text",
        ])
        .map_err(csv_error)?;
        w.write_record(
            [
                self.pos_mean,
                self.neg_mean,
                self.gap,
                self.mi_bound_image,
                self.mi_bound_text,
            ]
            .map(|v| v.to_string()),
        )
        .map_err(csv_error)?;
        w.flush()?;
        Ok((hist, stats))
    }
}

/// Loss names covered by the gradient suite.
pub const GRAD_SUITE_LOSSES: [&str; 8] = [
    "clip", "fd", "icl", "hrd", "vrd_ce", "vrd_kl", "xrd", "combined",
];

/// Batch size and embedding width of the gradient suite.
pub const GRAD_SUITE_BATCH: usize = 4;
pub const GRAD_SUITE_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteEntry {
    pub loss: &'static str,
    /// Worst relative error over all seeds.
    pub max_error: f64,
    pub coordinates: usize,
}

struct SuiteCase {
    image_x: Tensor,
    text_x: Tensor,
    teacher_image: Tensor,
    teacher_text: Tensor,
    teacher_log_scale: f64,
    image: EncoderParams,
    text: EncoderParams,
    params: Vec<Tensor>,
}

fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    for r in data.chunks_mut(cols) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

fn suite_case(seed: u64) -> Result<SuiteCase> {
    let (b, d) = (GRAD_SUITE_BATCH, GRAD_SUITE_DIM);
    let mut rng = seed::stream(seed, 500);
    let (image_dim, text_dim, hidden) = (6, 5, 7);
    let image = init_encoder(image_dim, hidden, d, seed::derive(seed, 501))?;
    let text = init_encoder(text_dim, hidden, d, seed::derive(seed, 502))?;
    let mut params: Vec<Tensor> = image
        .tensors()
        .into_iter()
        .chain(text.tensors())
        .cloned()
        .collect();
    let init = TemperatureSet::default().task;
    for _ in 0..5 {
        params.push(Tensor::scalar(init + rng.random_range(-0.5..0.5)));
    }
    let feats = |rows, cols, rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        )
    };
    Ok(SuiteCase {
        image_x: feats(b, image_dim, &mut rng)?,
        text_x: feats(b, text_dim, &mut rng)?,
        teacher_image: unit_rows(b, d, &mut rng),
        teacher_text: unit_rows(b, d, &mut rng),
        teacher_log_scale: init + rng.random_range(-0.5..0.5),
        image,
        text,
        params,
    })
}

fn suite_loss(case: &SuiteCase, loss: &str, g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let e = TENSORS_PER_ENCODER;
    let iv = case.image.vars_from(&vars[..e])?;
    let tv = case.text.vars_from(&vars[e..2 * e])?;
    let xi = g.constant(case.image_x.clone());
    let xt = g.constant(case.text_x.clone());
    let si = encode_on(g, &iv, xi)?;
    let st = encode_on(g, &tv, xt)?;
    let student = Pair::from_vars(Network::Student, si, st);
    let ti = g.constant(case.teacher_image.clone());
    let tt = g.constant(case.teacher_text.clone());
    let teacher = Pair::from_vars(Network::Teacher, ti, tt);
    let temps = TempVars::learnable(
        g,
        case.teacher_log_scale,
        &[
            vars[2 * e],
            vars[2 * e + 1],
            vars[2 * e + 2],
            vars[2 * e + 3],
            vars[2 * e + 4],
        ],
    )?;
    match loss {
        "clip" => clip_loss(g, &student.image, &student.text, temps.task),
        "fd" => fd_loss(g, &teacher, &student),
        "icl" => icl_loss(g, &student, &teacher, temps.task),
        "hrd" => hrd_loss(g, &teacher, &student, temps.teacher, temps.student),
        "vrd_ce" => vrd_ce_loss(g, &teacher, &student, temps.image, temps.text),
        "vrd_kl" => vrd_kl_loss(g, &teacher, &student, temps.image, temps.text),
        "xrd" => xrd_loss(g, &teacher, &student, temps.cross),
        "combined" => Ok(clip_rd_total(
            g,
            &LossSet::rd(),
            &LossWeights::default(),
            &teacher,
            &student,
            &temps,
        )?
        .total),
        other => Err(Error::Config(format!("unknown loss `{other}`"))),
    }
}

/// Central-difference check of every loss against reverse mode, with
/// respect to student encoder weights and the learnable log-temperatures.
pub fn grad_check_suite(seeds: &[u64]) -> Result<Vec<GradSuiteEntry>> {
    let cases: Vec<SuiteCase> = seeds
        .iter()
        .map(|&s| suite_case(s))
        .collect::<Result<_>>()?;
    GRAD_SUITE_LOSSES
        .iter()
        .map(|&loss| {
            let mut entry = GradSuiteEntry {
                loss,
                max_error: 0.0,
                coordinates: 0,
            };
            for case in &cases {
                let r = grad_check_report(
                    |g, v| suite_loss(case, loss, g, v),
                    &case.params,
                    DEFAULT_STEP,
                )?;
                entry.max_error = entry.max_error.max(r.max_relative_error);
                entry.coordinates += r.coordinates;
            }
            Ok(entry)
        })
        .collect()
}
