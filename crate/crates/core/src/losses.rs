//! Distillation objectives between a frozen teacher and a student dual
//! encoder.
//!
//! Every loss is built on the graph from two primitives: a
//! [`SimilarityDistribution`] (row softmax of scaled dot products between an
//! anchor batch and a target batch) and [`kl_rows`], the batch-averaged
//! row-wise KL divergence. Contrastive terms read the diagonal of a
//! distribution's log-probabilities, treating index-aligned rows as
//! positives.
//!
//! | loss | distributions | reduction |
//! |------|---------------|-----------|
//! | task | student image↔text | ½ of two InfoNCE directions |
//! | FD | none | squared distance, summed over modalities |
//! | ICL | student image → teacher text, student text → teacher image | ½ of two InfoNCE |
//! | HRD | image→text and text→image, per network | KL(teacher‖student), summed |
//! | VRD | teacher↔student within each modality | ½ CE over modalities + ½ KL(image‖text) |
//! | XRD | four cross-network, cross-modality | ½ of two symmetrized KLs |

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoders::{Modality, Network};
use crate::error::{Error, Result};

/// Upper bound on any logit scale `1/τ`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Initial temperature for every learnable τ.
pub const INIT_TEMPERATURE: f64 = 0.07;

/// An embedding batch living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub var: Var,
    pub network: Network,
    pub modality: Modality,
}

impl Embedded {
    pub fn new(var: Var, network: Network, modality: Modality) -> Self {
        Self {
            var,
            network,
            modality,
        }
    }
}

/// Image and text embeddings of one network for the same batch of pairs.
#[derive(Clone, Copy, Debug)]
pub struct Pair {
    pub image: Embedded,
    pub text: Embedded,
}

impl Pair {
    pub fn new(g: &mut Graph, network: Network, image: &Tensor, text: &Tensor) -> Self {
        let image = g.leaf(image);
        let text = g.leaf(text);
        Self::from_vars(network, image, text)
    }

    pub fn from_vars(network: Network, image: Var, text: Var) -> Self {
        Self {
            image: Embedded::new(image, network, Modality::Image),
            text: Embedded::new(text, network, Modality::Text),
        }
    }
}

/// A temperature on the graph, held as the logit scale `1/τ`.
#[derive(Clone, Copy, Debug)]
pub struct Temp {
    scale: Var,
    tau: f64,
}

impl Temp {
    pub fn fixed(g: &mut Graph, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::domain(
                "temperature",
                format!("τ = {tau} must be positive"),
            ));
        }
        let scale = g.scalar(1.0 / tau);
        Ok(Self { scale, tau })
    }

    /// `1/τ = exp(log_scale)`, clamped at [`MAX_LOGIT_SCALE`]. Past the clamp
    /// the scale is a constant and `log_scale` receives no gradient.
    pub fn learnable(g: &mut Graph, log_scale: Var) -> Self {
        let raw = g.item(log_scale);
        let scale = if raw.exp() > MAX_LOGIT_SCALE {
            g.scalar(MAX_LOGIT_SCALE)
        } else {
            g.exp(log_scale)
        };
        let tau = 1.0 / g.item(scale);
        Self { scale, tau }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn scale_var(&self) -> Var {
        self.scale
    }
}

/// Row-stochastic `B × B` matrix: row `k` is the softmax over targets `j` of
/// `anchor_k · target_j / τ`.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityDistribution {
    pub probs: Var,
    pub log_probs: Var,
    pub anchor: (Network, Modality),
    pub target: (Network, Modality),
    pub temperature: f64,
}

impl SimilarityDistribution {
    /// Wraps explicit probabilities. Rows must sum to 1 within 1e-9; the
    /// log-probabilities go through the floored `log`.
    pub fn from_probs(
        g: &mut Graph,
        probs: &Tensor,
        anchor: (Network, Modality),
        target: (Network, Modality),
        temperature: f64,
    ) -> Result<Self> {
        if probs.rank() != 2 || probs.rows() != probs.cols() {
            return Err(Error::shape(
                "similarity_distribution",
                format!("{:?}", probs.shape()),
            ));
        }
        for i in 0..probs.rows() {
            let s: f64 = probs.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 || probs.row(i).iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::domain(
                    "similarity_distribution",
                    format!("row {i} is not a probability vector (sum {s})"),
                ));
            }
        }
        let p = g.leaf(probs);
        let lp = g.log(p)?;
        Ok(Self {
            probs: p,
            log_probs: lp,
            anchor,
            target,
            temperature,
        })
    }

    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.probs)[0]
    }
}

fn check_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Softmax over targets of `anchor · target / τ`, row per anchor.
pub fn similarity_distribution(
    g: &mut Graph,
    anchors: &Embedded,
    targets: &Embedded,
    temp: Temp,
) -> Result<SimilarityDistribution> {
    check_same(g, "similarity_distribution", anchors.var, targets.var)?;
    if g.shape(anchors.var)[0] == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if !(temp.tau > 0.0) {
        return Err(Error::domain(
            "similarity_distribution",
            format!("τ = {}", temp.tau),
        ));
    }
    let sim = g.matmul_t(anchors.var, targets.var)?;
    let logits = g.mul_scalar(sim, temp.scale)?;
    let probs = g.row_softmax(logits)?;
    let log_probs = g.log_softmax_rows(logits)?;
    Ok(SimilarityDistribution {
        probs,
        log_probs,
        anchor: (anchors.network, anchors.modality),
        target: (targets.network, targets.modality),
        temperature: temp.tau,
    })
}

/// `(1/B) Σ_k Σ_j p[k][j] · log(p[k][j] / q[k][j])`.
pub fn kl_rows(
    g: &mut Graph,
    p: &SimilarityDistribution,
    q: &SimilarityDistribution,
) -> Result<Var> {
    check_same(g, "kl_rows", p.probs, q.probs)?;
    let b = p.batch(g) as f64;
    let log_ratio = g.sub(p.log_probs, q.log_probs)?;
    let weighted = g.mul(p.probs, log_ratio)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / b))
}

/// `-(1/B) Σ_k log dist[k][k]`.
pub fn diagonal_nll(g: &mut Graph, dist: &SimilarityDistribution) -> Result<Var> {
    let diag = g.select_diag(dist.log_probs)?;
    let m = g.mean(diag)?;
    Ok(g.negate(m))
}

/// InfoNCE with index-aligned positives, averaged over anchors.
pub fn info_nce(g: &mut Graph, anchors: &Embedded, targets: &Embedded, temp: Temp) -> Result<Var> {
    let dist = similarity_distribution(g, anchors, targets, temp)?;
    diagonal_nll(g, &dist)
}

fn half_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Symmetric image↔text contrastive loss of one network.
pub fn clip_loss(g: &mut Graph, images: &Embedded, texts: &Embedded, temp: Temp) -> Result<Var> {
    let i2t = info_nce(g, images, texts, temp)?;
    let t2i = info_nce(g, texts, images, temp)?;
    half_sum(g, i2t, t2i)
}

/// Mean over pairs of squared teacher–student distance, both modalities.
pub fn fd_loss(g: &mut Graph, teacher: &Pair, student: &Pair) -> Result<Var> {
    check_same(g, "fd_loss", teacher.image.var, student.image.var)?;
    check_same(g, "fd_loss", teacher.text.var, student.text.var)?;
    check_same(g, "fd_loss", teacher.image.var, teacher.text.var)?;
    let b = g.shape(teacher.image.var)[0];
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let di = g.sub(teacher.image.var, student.image.var)?;
    let dt = g.sub(teacher.text.var, student.text.var)?;
    let si = g.square(di);
    let st = g.square(dt);
    let si = g.sum(si);
    let st = g.sum(st);
    let total = g.add(si, st)?;
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Student embeddings contrasted against the teacher's opposite modality.
pub fn icl_loss(g: &mut Graph, student: &Pair, teacher: &Pair, temp: Temp) -> Result<Var> {
    let i2t = info_nce(g, &student.image, &teacher.text, temp)?;
    let t2i = info_nce(g, &student.text, &teacher.image, temp)?;
    half_sum(g, i2t, t2i)
}

#[derive(Clone, Copy, Debug)]
pub struct HrdOutput {
    pub loss: Var,
    pub p_teacher: SimilarityDistribution,
    pub p_student: SimilarityDistribution,
    pub q_teacher: SimilarityDistribution,
    pub q_student: SimilarityDistribution,
}

/// Within-network image→text (`p`) and text→image (`q`) distributions;
/// `KL(p_T‖p_S) + KL(q_T‖q_S)`.
pub fn hrd(
    g: &mut Graph,
    teacher: &Pair,
    student: &Pair,
    tau_teacher: Temp,
    tau_student: Temp,
) -> Result<HrdOutput> {
    check_same(g, "hrd_loss", teacher.image.var, student.image.var)?;
    let p_teacher = similarity_distribution(g, &teacher.image, &teacher.text, tau_teacher)?;
    let p_student = similarity_distribution(g, &student.image, &student.text, tau_student)?;
    let q_teacher = similarity_distribution(g, &teacher.text, &teacher.image, tau_teacher)?;
    let q_student = similarity_distribution(g, &student.text, &student.image, tau_student)?;
    let i2t = kl_rows(g, &p_teacher, &p_student)?;
    let t2i = kl_rows(g, &q_teacher, &q_student)?;
    let loss = g.add(i2t, t2i)?;
    Ok(HrdOutput {
        loss,
        p_teacher,
        p_student,
        q_teacher,
        q_student,
    })
}

pub fn hrd_loss(
    g: &mut Graph,
    teacher: &Pair,
    student: &Pair,
    tau_teacher: Temp,
    tau_student: Temp,
) -> Result<Var> {
    Ok(hrd(g, teacher, student, tau_teacher, tau_student)?.loss)
}

#[derive(Clone, Copy, Debug)]
pub struct VrdOutput {
    pub ce: Var,
    pub kl: Var,
    pub loss: Var,
    /// Teacher image anchors over student image targets.
    pub image_ts: SimilarityDistribution,
    pub image_st: SimilarityDistribution,
    pub text_ts: SimilarityDistribution,
    pub text_st: SimilarityDistribution,
}

/// Teacher↔student distributions within each modality: a contrastive part
/// on their diagonals and a KL part pulling image distributions toward text
/// ones.
pub fn vrd(
    g: &mut Graph,
    teacher: &Pair,
    student: &Pair,
    tau_image: Temp,
    tau_text: Temp,
) -> Result<VrdOutput> {
    check_same(g, "vrd_loss", teacher.image.var, student.image.var)?;
    check_same(g, "vrd_loss", teacher.text.var, student.text.var)?;
    check_same(g, "vrd_loss", teacher.image.var, teacher.text.var)?;
    let image_ts = similarity_distribution(g, &teacher.image, &student.image, tau_image)?;
    let image_st = similarity_distribution(g, &student.image, &teacher.image, tau_image)?;
    let text_ts = similarity_distribution(g, &teacher.text, &student.text, tau_text)?;
    let text_st = similarity_distribution(g, &student.text, &teacher.text, tau_text)?;

    // Each modality sums its two anchor directions; modalities are averaged.
    let img_a = diagonal_nll(g, &image_ts)?;
    let img_b = diagonal_nll(g, &image_st)?;
    let ce_image = g.add(img_a, img_b)?;
    let txt_a = diagonal_nll(g, &text_ts)?;
    let txt_b = diagonal_nll(g, &text_st)?;
    let ce_text = g.add(txt_a, txt_b)?;
    let ce = half_sum(g, ce_image, ce_text)?;

    let kl_ts = kl_rows(g, &image_ts, &text_ts)?;
    let kl_st = kl_rows(g, &image_st, &text_st)?;
    let kl = half_sum(g, kl_ts, kl_st)?;

    let loss = g.add(ce, kl)?;
    Ok(VrdOutput {
        ce,
        kl,
        loss,
        image_ts,
        image_st,
        text_ts,
        text_st,
    })
}

pub fn vrd_ce_loss(
    g: &mut Graph,
    teacher: &Pair,
    student: &Pair,
    tau_image: Temp,
    tau_text: Temp,
) -> Result<Var> {
    Ok(vrd(g, teacher, student, tau_image, tau_text)?.ce)
}

pub fn vrd_kl_loss(
    g: &mut Graph,
    teacher: &Pair,
    student: &Pair,
    tau_image: Temp,
    tau_text: Temp,
) -> Result<Var> {
    Ok(vrd(g, teacher, student, tau_image, tau_text)?.kl)
}

pub fn vrd_loss(
    g: &mut Graph,
    teacher: &Pair,
    student: &Pair,
    tau_image: Temp,
    tau_text: Temp,
) -> Result<Var> {
    Ok(vrd(g, teacher, student, tau_image, tau_text)?.loss)
}

#[derive(Clone, Copy, Debug)]
pub struct XrdOutput {
    pub loss: Var,
    pub teacher_to_student: Var,
    pub student_to_teacher: Var,
    pub teacher_image_student_text: SimilarityDistribution,
    pub teacher_text_student_image: SimilarityDistribution,
    pub student_image_teacher_text: SimilarityDistribution,
    pub student_text_teacher_image: SimilarityDistribution,
}

fn symmetric_kl(
    g: &mut Graph,
    a: &SimilarityDistribution,
    b: &SimilarityDistribution,
) -> Result<Var> {
    let ab = kl_rows(g, a, b)?;
    let ba = kl_rows(g, b, a)?;
    half_sum(g, ab, ba)
}

/// Cross-network, cross-modality distributions aligned by symmetrized KL,
/// once for teacher-anchored and once for student-anchored pairs.
pub fn xrd(g: &mut Graph, teacher: &Pair, student: &Pair, tau: Temp) -> Result<XrdOutput> {
    check_same(g, "xrd_loss", teacher.image.var, student.text.var)?;
    check_same(g, "xrd_loss", teacher.text.var, student.image.var)?;
    let ti_st = similarity_distribution(g, &teacher.image, &student.text, tau)?;
    let tt_si = similarity_distribution(g, &teacher.text, &student.image, tau)?;
    let si_tt = similarity_distribution(g, &student.image, &teacher.text, tau)?;
    let st_ti = similarity_distribution(g, &student.text, &teacher.image, tau)?;
    let teacher_to_student = symmetric_kl(g, &ti_st, &tt_si)?;
    let student_to_teacher = symmetric_kl(g, &si_tt, &st_ti)?;
    let loss = half_sum(g, teacher_to_student, student_to_teacher)?;
    Ok(XrdOutput {
        loss,
        teacher_to_student,
        student_to_teacher,
        teacher_image_student_text: ti_st,
        teacher_text_student_image: tt_si,
        student_image_teacher_text: si_tt,
        student_text_teacher_image: st_ti,
    })
}

pub fn xrd_loss(g: &mut Graph, teacher: &Pair, student: &Pair, tau: Temp) -> Result<Var> {
    Ok(xrd(g, teacher, student, tau)?.loss)
}

/// Optional objectives on top of the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Fd,
    Icl,
    Hrd,
    Vrd,
    Xrd,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Fd => "fd",
            LossKind::Icl => "icl",
            LossKind::Hrd => "hrd",
            LossKind::Vrd => "vrd",
            LossKind::Xrd => "xrd",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossSet(BTreeSet<LossKind>);

impl LossSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn of(kinds: &[LossKind]) -> Self {
        Self(kinds.iter().copied().collect())
    }

    /// FD + ICL + HRD.
    pub fn kd() -> Self {
        Self::of(&[LossKind::Fd, LossKind::Icl, LossKind::Hrd])
    }

    /// Every objective.
    pub fn rd() -> Self {
        Self::of(&[
            LossKind::Fd,
            LossKind::Icl,
            LossKind::Hrd,
            LossKind::Vrd,
            LossKind::Xrd,
        ])
    }

    pub fn with(mut self, kind: LossKind) -> Self {
        self.0.insert(kind);
        self
    }

    pub fn contains(&self, kind: LossKind) -> bool {
        self.0.contains(&kind)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = LossKind> + '_ {
        self.0.iter().copied()
    }

    /// True if any enabled loss compares against the teacher.
    pub fn needs_teacher(&self) -> bool {
        !self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2000.0,
            beta: 1.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Learnable temperatures as log logit scales, `ln(1/τ)`. The teacher's
/// temperature is never trained during distillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSet {
    pub task: f64,
    pub teacher: f64,
    pub student: f64,
    pub image: f64,
    pub text: f64,
    pub cross: f64,
}

impl Default for TemperatureSet {
    fn default() -> Self {
        let init = (1.0 / INIT_TEMPERATURE).ln();
        Self {
            task: init,
            teacher: init,
            student: init,
            image: init,
            text: init,
            cross: init,
        }
    }
}

impl TemperatureSet {
    /// `τ` corresponding to a stored log logit scale, with the clamp applied.
    pub fn tau_of(log_scale: f64) -> f64 {
        1.0 / log_scale.exp().min(MAX_LOGIT_SCALE)
    }

    pub fn names() -> [&'static str; 5] {
        ["task", "student", "image", "text", "cross"]
    }

    pub fn learnable(&self) -> [f64; 5] {
        [self.task, self.student, self.image, self.text, self.cross]
    }

    pub fn set_learnable(&mut self, values: [f64; 5]) {
        [self.task, self.student, self.image, self.text, self.cross] = values;
    }
}

/// Temperatures bound on a graph for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TempVars {
    pub task: Temp,
    pub teacher: Temp,
    pub student: Temp,
    pub image: Temp,
    pub text: Temp,
    pub cross: Temp,
}

impl TempVars {
    /// Every temperature as a constant.
    pub fn fixed(g: &mut Graph, temps: &TemperatureSet) -> Result<Self> {
        let mut f = |v: f64| Temp::fixed(g, TemperatureSet::tau_of(v));
        Ok(Self {
            task: f(temps.task)?,
            teacher: f(temps.teacher)?,
            student: f(temps.student)?,
            image: f(temps.image)?,
            text: f(temps.text)?,
            cross: f(temps.cross)?,
        })
    }

    /// Learnable temperatures from bound log-scale leaves, ordered as
    /// [`TemperatureSet::names`]; the teacher's stays constant.
    pub fn learnable(g: &mut Graph, teacher_log_scale: f64, log_scales: &[Var; 5]) -> Result<Self> {
        let teacher = Temp::fixed(g, TemperatureSet::tau_of(teacher_log_scale))?;
        let [task, student, image, text, cross] = log_scales.map(|v| Temp::learnable(g, v));
        Ok(Self {
            task,
            teacher,
            student,
            image,
            text,
            cross,
        })
    }
}

/// Weighted components of the combined objective. Disabled components are
/// `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub task: Var,
    pub fd: Option<Var>,
    pub icl: Option<Var>,
    pub hrd: Option<Var>,
    pub vrd_ce: Option<Var>,
    pub vrd_kl: Option<Var>,
    pub vrd: Option<Var>,
    pub xrd: Option<Var>,
    pub total: Var,
}

/// Plain values of a [`LossBundle`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub task: f64,
    pub fd: Option<f64>,
    pub icl: Option<f64>,
    pub hrd: Option<f64>,
    pub vrd_ce: Option<f64>,
    pub vrd_kl: Option<f64>,
    pub xrd: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Option<Var>| x.map(|x| g.item(x));
        LossValues {
            task: g.item(self.task),
            fd: v(self.fd),
            icl: v(self.icl),
            hrd: v(self.hrd),
            vrd_ce: v(self.vrd_ce),
            vrd_kl: v(self.vrd_kl),
            xrd: v(self.xrd),
            total: g.item(self.total),
        }
    }
}

/// `task + α·FD + β·ICL + λ·(HRD + VRD + XRD)` over the enabled set.
pub fn clip_rd_total(
    g: &mut Graph,
    enabled: &LossSet,
    weights: &LossWeights,
    teacher: &Pair,
    student: &Pair,
    temps: &TempVars,
) -> Result<LossBundle> {
    weights.validate()?;
    let task = clip_loss(g, &student.image, &student.text, temps.task)?;
    let mut bundle = LossBundle {
        task,
        fd: None,
        icl: None,
        hrd: None,
        vrd_ce: None,
        vrd_kl: None,
        vrd: None,
        xrd: None,
        total: task,
    };
    let mut total = task;
    let mut add = |g: &mut Graph, term: Var, w: f64| -> Result<()> {
        let scaled = g.scale(term, w);
        total = g.add(total, scaled)?;
        Ok(())
    };
    if enabled.contains(LossKind::Fd) {
        let l = fd_loss(g, teacher, student)?;
        add(g, l, weights.alpha)?;
        bundle.fd = Some(l);
    }
    if enabled.contains(LossKind::Icl) {
        let l = icl_loss(g, student, teacher, temps.task)?;
        add(g, l, weights.beta)?;
        bundle.icl = Some(l);
    }
    if enabled.contains(LossKind::Hrd) {
        let l = hrd_loss(g, teacher, student, temps.teacher, temps.student)?;
        add(g, l, weights.lambda)?;
        bundle.hrd = Some(l);
    }
    if enabled.contains(LossKind::Vrd) {
        let out = vrd(g, teacher, student, temps.image, temps.text)?;
        add(g, out.loss, weights.lambda)?;
        bundle.vrd_ce = Some(out.ce);
        bundle.vrd_kl = Some(out.kl);
        bundle.vrd = Some(out.loss);
    }
    if enabled.contains(LossKind::Xrd) {
        let l = xrd_loss(g, teacher, student, temps.cross)?;
        add(g, l, weights.lambda)?;
        bundle.xrd = Some(l);
    }
    bundle.total = total;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = std::f64::consts::E;

    fn pair(g: &mut Graph, network: Network, image: &[[f64; 2]], text: &[[f64; 2]]) -> Pair {
        Pair::new(
            g,
            network,
            &Tensor::from_rows(image).unwrap(),
            &Tensor::from_rows(text).unwrap(),
        )
    }

    const ORTHO: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

    #[test]
    fn equal_similarities_give_uniform_rows() {
        let mut g = Graph::new();
        let p = pair(&mut g, Network::Student, &[[1.0, 0.0]; 3], &[[0.6, 0.8]; 3]);
        let t = Temp::fixed(&mut g, 0.5).unwrap();
        let d = similarity_distribution(&mut g, &p.image, &p.text, t).unwrap();
        for &x in g.value(d.probs).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(d.anchor, (Network::Student, Modality::Image));
        assert_eq!(d.target, (Network::Student, Modality::Text));
    }

    #[test]
    fn single_row_distribution_is_one() {
        let mut g = Graph::new();
        let p = pair(&mut g, Network::Teacher, &[[0.6, 0.8]], &[[1.0, 0.0]]);
        let t = Temp::fixed(&mut g, 0.07).unwrap();
        let d = similarity_distribution(&mut g, &p.image, &p.text, t).unwrap();
        assert_eq!(g.value(d.probs).data(), &[1.0]);
    }

    #[test]
    fn orthonormal_rows_at_unit_temperature() {
        let mut g = Graph::new();
        let p = pair(&mut g, Network::Teacher, &ORTHO, &ORTHO);
        let t = Temp::fixed(&mut g, 1.0).unwrap();
        let d = similarity_distribution(&mut g, &p.image, &p.text, t).unwrap();
        let hi = E / (E + 1.0);
        let lo = 1.0 / (E + 1.0);
        let got = g.value(d.probs).data();
        for (a, b) in got.iter().zip([hi, lo, lo, hi]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((hi - 0.7311).abs() < 1e-4 && (lo - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn distribution_errors() {
        let mut g = Graph::new();
        let a = pair(&mut g, Network::Teacher, &ORTHO, &ORTHO);
        let b = pair(&mut g, Network::Student, &[[1.0, 0.0]], &[[1.0, 0.0]]);
        let t = Temp::fixed(&mut g, 1.0).unwrap();
        assert!(matches!(
            similarity_distribution(&mut g, &a.image, &b.text, t),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            Temp::fixed(&mut g, 0.0),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(
            Temp::fixed(&mut g, -1.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn kl_identity_and_hand_value() {
        let mut g = Graph::new();
        let tag = (Network::Teacher, Modality::Image);
        let p = SimilarityDistribution::from_probs(
            &mut g,
            &Tensor::from_rows(&[[0.5, 0.5]]).unwrap(),
            tag,
            tag,
            1.0,
        );
        // 1×2 is not square; embed into a 2×2 with an identical second row.
        assert!(p.is_err());
        let pm = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let qm = Tensor::from_rows(&[[0.25, 0.75], [0.25, 0.75]]).unwrap();
        let p = SimilarityDistribution::from_probs(&mut g, &pm, tag, tag, 1.0).unwrap();
        let q = SimilarityDistribution::from_probs(&mut g, &qm, tag, tag, 1.0).unwrap();
        let same = kl_rows(&mut g, &p, &p).unwrap();
        assert_eq!(g.item(same), 0.0);
        let kl = kl_rows(&mut g, &p, &q).unwrap();
        // 0.5·ln(0.5/0.25) + 0.5·ln(0.5/0.75), identical in both rows
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((g.item(kl) - expected).abs() < 1e-15);
        assert!((g.item(kl) - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut g = Graph::new();
        let tag = (Network::Teacher, Modality::Image);
        let p = SimilarityDistribution::from_probs(
            &mut g,
            &Tensor::from_rows(&[[1.0]]).unwrap(),
            tag,
            tag,
            1.0,
        )
        .unwrap();
        let q = SimilarityDistribution::from_probs(
            &mut g,
            &Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap(),
            tag,
            tag,
            1.0,
        )
        .unwrap();
        assert!(kl_rows(&mut g, &p, &q).is_err());
    }

    #[test]
    fn clip_closed_forms() {
        let mut g = Graph::new();
        let one = pair(&mut g, Network::Student, &[[0.6, 0.8]], &[[1.0, 0.0]]);
        let t = Temp::fixed(&mut g, 0.07).unwrap();
        let l = clip_loss(&mut g, &one.image, &one.text, t).unwrap();
        assert_eq!(g.item(l), 0.0);

        let two = pair(&mut g, Network::Student, &ORTHO, &ORTHO);
        let t1 = Temp::fixed(&mut g, 1.0).unwrap();
        let l = clip_loss(&mut g, &two.image, &two.text, t1).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.item(l) - expected).abs() < 1e-15);
        assert!((g.item(l) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn clip_halves_equal_for_symmetric_similarity() {
        let mut g = Graph::new();
        let s = 0.5f64.sqrt();
        let p = pair(
            &mut g,
            Network::Student,
            &[[1.0, 0.0], [s, s]],
            &[[1.0, 0.0], [s, s]],
        );
        let t = Temp::fixed(&mut g, 0.3).unwrap();
        let a = info_nce(&mut g, &p.image, &p.text, t).unwrap();
        let b = info_nce(&mut g, &p.text, &p.image, t).unwrap();
        assert_eq!(g.item(a), g.item(b));
    }

    #[test]
    fn clip_empty_batch_errors() {
        let mut g = Graph::new();
        let e = Tensor::zeros(&[0, 2]);
        let p = Pair::new(&mut g, Network::Student, &e, &e);
        let t = Temp::fixed(&mut g, 1.0).unwrap();
        assert!(matches!(
            clip_loss(&mut g, &p.image, &p.text, t),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fd_values() {
        let mut g = Graph::new();
        let t = pair(&mut g, Network::Teacher, &ORTHO, &ORTHO);
        let same = pair(&mut g, Network::Student, &ORTHO, &ORTHO);
        let l = fd_loss(&mut g, &t, &same).unwrap();
        assert_eq!(g.item(l), 0.0);
        let off = pair(&mut g, Network::Student, &[[1.1, 0.0], [0.0, 1.0]], &ORTHO);
        let l = fd_loss(&mut g, &t, &off).unwrap();
        assert!((g.item(l) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn icl_single_pair_and_identity() {
        let mut g = Graph::new();
        let t = pair(&mut g, Network::Teacher, &[[0.6, 0.8]], &[[0.0, 1.0]]);
        let s = pair(&mut g, Network::Student, &[[1.0, 0.0]], &[[0.8, 0.6]]);
        let temp = Temp::fixed(&mut g, 0.07).unwrap();
        let l = icl_loss(&mut g, &s, &t, temp).unwrap();
        assert_eq!(g.item(l), 0.0);

        let s2 = 0.5f64.sqrt();
        let rows = [[1.0, 0.0], [s2, s2]];
        let trows = [[0.6, 0.8], [0.0, 1.0]];
        let t = pair(&mut g, Network::Teacher, &rows, &trows);
        let s = pair(&mut g, Network::Student, &rows, &trows);
        let temp = Temp::fixed(&mut g, 0.2).unwrap();
        let icl = icl_loss(&mut g, &s, &t, temp).unwrap();
        let clip = clip_loss(&mut g, &t.image, &t.text, temp).unwrap();
        assert_eq!(g.item(icl), g.item(clip));
    }

    #[test]
    fn hrd_identity_collapse() {
        let mut g = Graph::new();
        let s2 = 0.5f64.sqrt();
        let rows = [[1.0, 0.0], [s2, s2]];
        let t = pair(&mut g, Network::Teacher, &rows, &ORTHO);
        let s = pair(&mut g, Network::Student, &rows, &ORTHO);
        let tau = Temp::fixed(&mut g, 0.1).unwrap();
        let l = hrd_loss(&mut g, &t, &s, tau, tau).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn vrd_closed_form() {
        let mut g = Graph::new();
        let t = pair(&mut g, Network::Teacher, &ORTHO, &ORTHO);
        let s = pair(&mut g, Network::Student, &ORTHO, &ORTHO);
        let one = Temp::fixed(&mut g, 1.0).unwrap();
        let out = vrd(&mut g, &t, &s, one, one).unwrap();
        let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln() / 2.0;
        assert!((g.item(out.ce) - expected).abs() < 1e-14);
        assert!((g.item(out.ce) - 0.62652).abs() < 1e-5);
        // image and text distributions coincide
        assert_eq!(g.item(out.kl), 0.0);
        assert_eq!(g.item(out.loss), g.item(out.ce) + g.item(out.kl));
    }

    #[test]
    fn single_pair_relational_losses_vanish() {
        let mut g = Graph::new();
        let t = pair(&mut g, Network::Teacher, &[[0.6, 0.8]], &[[0.0, 1.0]]);
        let s = pair(&mut g, Network::Student, &[[1.0, 0.0]], &[[0.8, 0.6]]);
        let tau = Temp::fixed(&mut g, 0.07).unwrap();
        let tau2 = Temp::fixed(&mut g, 0.5).unwrap();
        let h = hrd_loss(&mut g, &t, &s, tau, tau2).unwrap();
        assert_eq!(g.item(h), 0.0);
        let v = vrd(&mut g, &t, &s, tau, tau2).unwrap();
        assert_eq!(g.item(v.ce), 0.0);
        assert_eq!(g.item(v.kl), 0.0);
        assert_eq!(g.item(v.loss), 0.0);
        let x = xrd_loss(&mut g, &t, &s, tau).unwrap();
        assert_eq!(g.item(x), 0.0);
    }

    #[test]
    fn xrd_identity_gives_equal_directions() {
        let mut g = Graph::new();
        let s2 = 0.5f64.sqrt();
        let rows = [[1.0, 0.0], [s2, s2]];
        let trows = [[0.6, 0.8], [0.0, 1.0]];
        let t = pair(&mut g, Network::Teacher, &rows, &trows);
        let s = pair(&mut g, Network::Student, &rows, &trows);
        let tau = Temp::fixed(&mut g, 0.1).unwrap();
        let out = xrd(&mut g, &t, &s, tau).unwrap();
        assert_eq!(
            g.item(out.teacher_to_student),
            g.item(out.student_to_teacher)
        );
    }

    #[test]
    fn learnable_temperature_clamps() {
        let mut g = Graph::new();
        let big = g.scalar(10.0);
        let t = Temp::learnable(&mut g, big);
        assert_eq!(t.tau(), 1.0 / MAX_LOGIT_SCALE);
        let init = g.scalar((1.0 / INIT_TEMPERATURE).ln());
        let t = Temp::learnable(&mut g, init);
        assert!((t.tau() - INIT_TEMPERATURE).abs() < 1e-15);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn loss_set_serde_names() {
        let s = serde_json::to_string(&LossSet::kd()).unwrap();
        assert_eq!(s, r#"["fd","icl","hrd"]"#);
        let back: LossSet = serde_json::from_str(r#"["xrd","vrd"]"#).unwrap();
        assert!(back.contains(LossKind::Vrd) && back.contains(LossKind::Xrd));
    }
}
