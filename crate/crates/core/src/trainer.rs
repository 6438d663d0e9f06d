//! Teacher pretraining and teacher→student distillation with AdamW and a
//! warmup + cosine learning-rate schedule.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Parameter, Tensor, Var};
use crate::data::{PairedDataset, Splits};
use crate::encoders::{
    encode_on, DualEncoder, EmbeddingBatch, EncoderParams, Network, TENSORS_PER_ENCODER,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_student, EvalMetrics, TeacherView};
use crate::losses::{
    clip_loss, clip_rd_total, LossSet, LossValues, LossWeights, Pair, Temp, TempVars,
    TemperatureSet, MAX_LOGIT_SCALE,
};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub enabled_losses: LossSet,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_iters: 100,
            batch_size: 64,
            peak_lr: 1e-3,
            weight_decay: 0.1,
            betas: (0.9, 0.98),
            eps: 1e-8,
            seed: 0,
            enabled_losses: LossSet::rd(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size = {} but contrastive losses need at least 2 pairs",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "betas ({b1}, {b2}) must lie in [0, 1)"
            )));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "peak_lr and weight_decay must be ≥ 0 and eps > 0".into(),
            ));
        }
        self.weights.validate()
    }

    pub fn iters_per_epoch(&self, n_train: usize) -> usize {
        n_train / self.batch_size
    }

    pub fn schedule(&self, n_train: usize) -> Result<Schedule> {
        Schedule::new(
            self.peak_lr,
            self.warmup_iters,
            self.epochs * self.iters_per_epoch(n_train),
        )
    }
}

/// Linear warmup from 0 to `peak` over `warmup` iterations, then cosine
/// decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Result<Self> {
        if warmup >= total {
            return Err(Error::Config(format!(
                "warmup_iters = {warmup} must be below the total of {total} iterations"
            )));
        }
        Ok(Self {
            peak,
            warmup,
            total,
        })
    }

    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter > self.total {
            return Err(Error::Contract(format!(
                "iteration {iter} beyond {}",
                self.total
            )));
        }
        if iter < self.warmup {
            return Ok(self.peak * iter as f64 / self.warmup as f64);
        }
        let progress = (iter - self.warmup) as f64 / (self.total - self.warmup) as f64;
        Ok(self.peak * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

pub fn lr_at(iter: usize, config: &TrainConfig, total_iters: usize) -> Result<f64> {
    Schedule::new(config.peak_lr, config.warmup_iters, total_iters)?.lr_at(iter)
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One AdamW update using the gradients stored on `params`. Weight decay is
/// decoupled: `p ← p - lr·wd·p` before the adaptive step, and only for
/// parameters marked `decay`.
pub fn optimizer_step(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::Contract(
            "optimizer state does not match parameters".into(),
        ));
    }
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate {lr} is negative")));
    }
    for p in params.iter() {
        if p.trainable {
            match p.tensor.grad() {
                Some(g) if g.iter().all(|v| v.is_finite()) => {}
                Some(_) => return Err(Error::NonFiniteGradient(p.name.clone())),
                None => {
                    return Err(Error::Contract(format!(
                        "parameter `{}` has no gradient",
                        p.name
                    )))
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let decay = if p.decay {
            lr * config.weight_decay
        } else {
            0.0
        };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (k, x) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            *x -= decay * *x;
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Widths of the teacher and student encoders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub teacher_hidden: usize,
    pub student_hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_hidden: 128,
            student_hidden: 16,
            embed_dim: 32,
        }
    }
}

/// Per-epoch record of a distillation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// 1-based.
    pub epoch: usize,
    /// Component means over the epoch's iterations.
    pub losses: LossValues,
    pub eval: EvalMetrics,
}

/// Encoder weights plus temperatures, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
    pub image: EncoderParams,
    pub text: EncoderParams,
    pub temperatures: TemperatureSet,
}

impl Checkpoint {
    pub fn new(model: &DualEncoder, seed: u64, temperatures: TemperatureSet) -> Self {
        Self {
            network: model.network,
            seed,
            image: model.image.clone(),
            text: model.text.clone(),
            temperatures,
        }
    }

    pub fn model(&self) -> Result<DualEncoder> {
        let m = DualEncoder {
            image: self.image.clone(),
            text: self.text.clone(),
            network: self.network,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.model()?;
        Ok(c)
    }
}

const TEMP_PREFIX: &str = "temperature.";

/// Encoder tensors followed by the five learnable log-scales.
fn student_params(model: &DualEncoder, temps: &TemperatureSet) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for p in model.parameters() {
        set.push(p)?;
    }
    for (name, v) in TemperatureSet::names().iter().zip(temps.learnable()) {
        set.push(
            Parameter::new(format!("{TEMP_PREFIX}{name}"), Tensor::scalar(v)).without_decay(),
        )?;
    }
    Ok(set)
}

fn write_back(
    params: &ParamSet,
    model: &mut DualEncoder,
    temps: &mut TemperatureSet,
) -> Result<()> {
    let tensors: Vec<&Tensor> = params
        .iter()
        .take(2 * TENSORS_PER_ENCODER)
        .map(|p| &p.tensor)
        .collect();
    model.load_tensors(&tensors)?;
    let mut vals = [0.0; 5];
    for (slot, p) in vals
        .iter_mut()
        .zip(params.iter().skip(2 * TENSORS_PER_ENCODER))
    {
        *slot = p.tensor.item();
    }
    temps.set_learnable(vals);
    Ok(())
}

/// Keeps stored log-scales at or below `ln(MAX_LOGIT_SCALE)`.
fn clamp_temperatures(params: &mut ParamSet) {
    let cap = MAX_LOGIT_SCALE.ln();
    for p in params.iter_mut().skip(2 * TENSORS_PER_ENCODER) {
        let v = &mut p.tensor.data_mut()[0];
        if *v > cap {
            *v = cap;
        }
    }
}

struct Bound {
    model: DualEncoder,
    image_vars: crate::encoders::EncoderVars,
    text_vars: crate::encoders::EncoderVars,
    temp_vars: [Var; 5],
    all: Vec<Var>,
}

fn bind(g: &mut Graph, params: &ParamSet, template: &DualEncoder) -> Result<Bound> {
    let all = params.bind(g);
    let e = TENSORS_PER_ENCODER;
    Ok(Bound {
        model: template.clone(),
        image_vars: template.image.vars_from(&all[..e])?,
        text_vars: template.text.vars_from(&all[e..2 * e])?,
        temp_vars: [
            all[2 * e],
            all[2 * e + 1],
            all[2 * e + 2],
            all[2 * e + 3],
            all[2 * e + 4],
        ],
        all,
    })
}

/// Shuffled batches of one epoch; the trailing partial batch is dropped.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, 1000 + epoch as u64));
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

fn check_finite(value: f64, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, value })
    }
}

fn require_rows(data: &PairedDataset, config: &TrainConfig) -> Result<()> {
    if data.len() < config.batch_size {
        return Err(Error::Config(format!(
            "training split has {} rows, fewer than one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub teacher: DualEncoder,
    pub temperatures: TemperatureSet,
    /// Task loss after each epoch, over one fixed set of batches.
    pub epoch_losses: Vec<f64>,
    /// Mean task loss over each epoch's training iterations.
    pub running_losses: Vec<f64>,
}

fn task_objective(
    g: &mut Graph,
    params: &ParamSet,
    model: &DualEncoder,
    data: &PairedDataset,
    idx: &[usize],
) -> Result<(Var, Bound)> {
    let (img, txt) = data.batch(idx);
    let b = bind(g, params, model)?;
    let xi = g.leaf(&img);
    let xt = g.leaf(&txt);
    let vi = encode_on(g, &b.image_vars, xi)?;
    let vt = encode_on(g, &b.text_vars, xt)?;
    let pair = Pair::from_vars(model.network, vi, vt);
    let temp = Temp::learnable(g, b.temp_vars[0]);
    Ok((clip_loss(g, &pair.image, &pair.text, temp)?, b))
}

/// Trains a teacher with the contrastive task loss alone.
pub fn train_teacher(
    config: &TrainConfig,
    model: &ModelConfig,
    train: &PairedDataset,
) -> Result<TeacherRun> {
    config.validate()?;
    require_rows(train, config)?;
    let mut teacher = DualEncoder::init(
        Network::Teacher,
        train.image_dim(),
        train.text_dim(),
        model.teacher_hidden,
        model.embed_dim,
        seed::derive(config.seed, 100),
    )?;
    let mut temps = TemperatureSet::default();
    let mut params = student_params(&teacher, &temps)?;
    let mut state = OptimizerState::new(&params);
    let schedule = config.schedule(train.len())?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut running_losses = Vec::with_capacity(config.epochs);
    let probe = epoch_batches(
        train.len(),
        config.batch_size,
        seed::derive(config.seed, 102),
        0,
    );
    let mut iter = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(
            train.len(),
            config.batch_size,
            seed::derive(config.seed, 101),
            epoch,
        );
        for idx in &batches {
            let mut g = Graph::new();
            let (loss, b) = task_objective(&mut g, &params, &teacher, train, idx)?;
            let value = g.item(loss);
            check_finite(value, iter)?;
            sum += value;
            let grads = g.backward(loss)?;
            params.assign_grads(&b.all, &grads)?;
            drop(g);
            iter += 1;
            optimizer_step(&mut params, &mut state, schedule.lr_at(iter)?, config)?;
            clamp_temperatures(&mut params);
        }
        running_losses.push(sum / batches.len() as f64);
        let mut end = 0.0;
        for idx in &probe {
            let mut g = Graph::new();
            let (loss, _) = task_objective(&mut g, &params, &teacher, train, idx)?;
            end += g.item(loss);
        }
        epoch_losses.push(end / probe.len() as f64);
    }
    params.clear_grads();
    write_back(&params, &mut teacher, &mut temps)?;
    Ok(TeacherRun {
        teacher,
        temperatures: temps,
        epoch_losses,
        running_losses,
    })
}

/// A frozen teacher together with its learned task temperature.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    pub model: DualEncoder,
    /// Log logit scale the teacher was trained with.
    pub log_scale: f64,
}

impl FrozenTeacher {
    pub fn new(model: DualEncoder, temperatures: &TemperatureSet) -> Self {
        Self {
            model,
            log_scale: temperatures.task,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistillRun {
    pub student: DualEncoder,
    pub temperatures: TemperatureSet,
    pub records: Vec<MetricRecord>,
}

#[derive(Default)]
struct LossAccumulator {
    n: usize,
    task: f64,
    fd: Option<f64>,
    icl: Option<f64>,
    hrd: Option<f64>,
    vrd_ce: Option<f64>,
    vrd_kl: Option<f64>,
    xrd: Option<f64>,
    total: f64,
}

impl LossAccumulator {
    fn add(&mut self, v: &LossValues) {
        fn acc(slot: &mut Option<f64>, x: Option<f64>) {
            if let Some(x) = x {
                *slot = Some(slot.unwrap_or(0.0) + x);
            }
        }
        self.n += 1;
        self.task += v.task;
        acc(&mut self.fd, v.fd);
        acc(&mut self.icl, v.icl);
        acc(&mut self.hrd, v.hrd);
        acc(&mut self.vrd_ce, v.vrd_ce);
        acc(&mut self.vrd_kl, v.vrd_kl);
        acc(&mut self.xrd, v.xrd);
        self.total += v.total;
    }

    fn mean(&self) -> LossValues {
        let n = self.n.max(1) as f64;
        let m = |x: Option<f64>| x.map(|x| x / n);
        LossValues {
            task: self.task / n,
            fd: m(self.fd),
            icl: m(self.icl),
            hrd: m(self.hrd),
            vrd_ce: m(self.vrd_ce),
            vrd_kl: m(self.vrd_kl),
            xrd: m(self.xrd),
            total: self.total / n,
        }
    }
}

/// Builds the combined objective for one batch. Teacher embeddings enter as
/// constants, so no gradient reaches the teacher.
#[allow(clippy::too_many_arguments)]
fn batch_objective(
    g: &mut Graph,
    bound: &Bound,
    teacher_images: &EmbeddingBatch,
    teacher_texts: &EmbeddingBatch,
    teacher_log_scale: f64,
    img: &Tensor,
    txt: &Tensor,
    config: &TrainConfig,
) -> Result<crate::losses::LossBundle> {
    let ti = g.constant(teacher_images.matrix().clone());
    let tt = g.constant(teacher_texts.matrix().clone());
    let teacher = Pair::from_vars(Network::Teacher, ti, tt);
    let xi = g.leaf(img);
    let xt = g.leaf(txt);
    let vi = encode_on(g, &bound.image_vars, xi)?;
    let vt = encode_on(g, &bound.text_vars, xt)?;
    let student = Pair::from_vars(bound.model.network, vi, vt);
    let temps = TempVars::learnable(g, teacher_log_scale, &bound.temp_vars)?;
    clip_rd_total(
        g,
        &config.enabled_losses,
        &config.weights,
        &teacher,
        &student,
        &temps,
    )
}

/// Mean loss components of `student` over `data` in fixed batches, without
/// updating anything.
pub fn measure_losses(
    config: &TrainConfig,
    teacher: &FrozenTeacher,
    student: &DualEncoder,
    temps: &TemperatureSet,
    data: &PairedDataset,
) -> Result<LossValues> {
    config.validate()?;
    require_rows(data, config)?;
    let params = student_params(student, temps)?;
    let tv = TeacherView::new(&teacher.model, data)?;
    let mut acc = LossAccumulator::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks_exact(config.batch_size) {
        let (img, txt) = data.batch(chunk);
        let mut g = Graph::new();
        let b = bind(&mut g, &params, student)?;
        let bundle = batch_objective(
            &mut g,
            &b,
            &tv.images.select(chunk),
            &tv.texts.select(chunk),
            teacher.log_scale,
            &img,
            &txt,
            config,
        )?;
        acc.add(&bundle.values(&g));
    }
    Ok(acc.mean())
}

/// Distills a fresh student initialized from `config.seed`.
pub fn distill(
    config: &TrainConfig,
    model: &ModelConfig,
    teacher: &FrozenTeacher,
    data: &Splits,
) -> Result<DistillRun> {
    let student = DualEncoder::init(
        Network::Student,
        data.train.image_dim(),
        data.train.text_dim(),
        model.student_hidden,
        model.embed_dim,
        seed::derive(config.seed, 200),
    )?;
    distill_from(config, teacher, student, TemperatureSet::default(), data)
}

/// Distills into a given starting student. The teacher is only read.
pub fn distill_from(
    config: &TrainConfig,
    teacher: &FrozenTeacher,
    mut student: DualEncoder,
    mut temps: TemperatureSet,
    data: &Splits,
) -> Result<DistillRun> {
    config.validate()?;
    require_rows(&data.train, config)?;
    if teacher.model.dim() != student.dim() {
        return Err(Error::Config(format!(
            "teacher embeds into {} dimensions, student into {}",
            teacher.model.dim(),
            student.dim()
        )));
    }
    temps.teacher = teacher.log_scale;
    let train_view = TeacherView::new(&teacher.model, &data.train)?;
    let val_view = TeacherView::new(&teacher.model, &data.val)?;
    let mut params = student_params(&student, &temps)?;
    let mut state = OptimizerState::new(&params);
    let schedule = config.schedule(data.train.len())?;
    let mut records = Vec::with_capacity(config.epochs);
    let mut iter = 0;
    for epoch in 0..config.epochs {
        let mut acc = LossAccumulator::default();
        let batches = epoch_batches(
            data.train.len(),
            config.batch_size,
            seed::derive(config.seed, 201),
            epoch,
        );
        for idx in &batches {
            let (img, txt) = data.train.batch(idx);
            let mut g = Graph::new();
            let b = bind(&mut g, &params, &student)?;
            let bundle = batch_objective(
                &mut g,
                &b,
                &train_view.images.select(idx),
                &train_view.texts.select(idx),
                teacher.log_scale,
                &img,
                &txt,
                config,
            )?;
            let values = bundle.values(&g);
            check_finite(values.total, iter)?;
            acc.add(&values);
            let grads = g.backward(bundle.total)?;
            params.assign_grads(&b.all, &grads)?;
            drop(g);
            iter += 1;
            optimizer_step(&mut params, &mut state, schedule.lr_at(iter)?, config)?;
            clamp_temperatures(&mut params);
        }
        write_back(&params, &mut student, &mut temps)?;
        let eval = evaluate_student(
            &student,
            &temps,
            &val_view,
            &data.train,
            &data.val,
            config.batch_size,
        )?;
        records.push(MetricRecord {
            epoch: epoch + 1,
            losses: acc.mean(),
            eval,
        });
    }
    Ok(DistillRun {
        student,
        temperatures: temps,
        records,
    })
}
