#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relkd_core::autodiff::{Graph, Tensor};
use relkd_core::encoders::Network;
use relkd_core::losses::{
    clip_loss, clip_rd_total, fd_loss, hrd_loss, icl_loss, vrd, xrd, LossSet, LossWeights, Pair,
    Temp, TempVars,
};
use relkd_core::seed;

pub type Rows = Vec<Vec<f64>>;

/// Plain scalar reimplementation of every loss, written with explicit loops
/// and no shared code with the library.
pub mod oracle {
    use super::Rows;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    /// `out[k][j] = softmax_j(a_k · b_j / τ)`.
    pub fn distribution(a: &Rows, b: &Rows, tau: f64) -> Rows {
        let n = a.len();
        let mut out = vec![vec![0.0; n]; n];
        for k in 0..n {
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(dot(&a[k], &b[j]) / tau);
            }
            let mut z = 0.0;
            for j in 0..n {
                z += (dot(&a[k], &b[j]) / tau - m).exp();
            }
            for j in 0..n {
                out[k][j] = (dot(&a[k], &b[j]) / tau - m).exp() / z;
            }
        }
        out
    }

    /// `ln p[k][j]` computed directly from logits.
    pub fn log_distribution(a: &Rows, b: &Rows, tau: f64) -> Rows {
        let n = a.len();
        let mut out = vec![vec![0.0; n]; n];
        for k in 0..n {
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(dot(&a[k], &b[j]) / tau);
            }
            let mut z = 0.0;
            for j in 0..n {
                z += (dot(&a[k], &b[j]) / tau - m).exp();
            }
            for j in 0..n {
                out[k][j] = dot(&a[k], &b[j]) / tau - m - z.ln();
            }
        }
        out
    }

    pub fn kl(pa: &Rows, pb: &Rows, qa: &Rows, qb: &Rows, tau_p: f64, tau_q: f64) -> f64 {
        let p = distribution(pa, pb, tau_p);
        let lp = log_distribution(pa, pb, tau_p);
        let lq = log_distribution(qa, qb, tau_q);
        let n = p.len();
        let mut s = 0.0;
        for k in 0..n {
            for j in 0..n {
                s += p[k][j] * (lp[k][j] - lq[k][j]);
            }
        }
        s / n as f64
    }

    pub fn info_nce(a: &Rows, b: &Rows, tau: f64) -> f64 {
        let l = log_distribution(a, b, tau);
        let mut s = 0.0;
        for k in 0..a.len() {
            s -= l[k][k];
        }
        s / a.len() as f64
    }

    pub fn clip(vi: &Rows, vt: &Rows, tau: f64) -> f64 {
        0.5 * (info_nce(vi, vt, tau) + info_nce(vt, vi, tau))
    }

    pub fn fd(ti: &Rows, tt: &Rows, si: &Rows, st: &Rows) -> f64 {
        let mut s = 0.0;
        for k in 0..ti.len() {
            for c in 0..ti[k].len() {
                s += (ti[k][c] - si[k][c]).powi(2) + (tt[k][c] - st[k][c]).powi(2);
            }
        }
        s / ti.len() as f64
    }

    pub fn icl(ti: &Rows, tt: &Rows, si: &Rows, st: &Rows, tau: f64) -> f64 {
        0.5 * (info_nce(si, tt, tau) + info_nce(st, ti, tau))
    }

    pub fn hrd(ti: &Rows, tt: &Rows, si: &Rows, st: &Rows, tau_t: f64, tau_s: f64) -> f64 {
        kl(ti, tt, si, st, tau_t, tau_s) + kl(tt, ti, st, si, tau_t, tau_s)
    }

    pub fn vrd_ce(ti: &Rows, tt: &Rows, si: &Rows, st: &Rows, tau_i: f64, tau_t: f64) -> f64 {
        let image = info_nce(ti, si, tau_i) + info_nce(si, ti, tau_i);
        let text = info_nce(tt, st, tau_t) + info_nce(st, tt, tau_t);
        0.5 * (image + text)
    }

    pub fn vrd_kl(ti: &Rows, tt: &Rows, si: &Rows, st: &Rows, tau_i: f64, tau_t: f64) -> f64 {
        0.5 * (kl(ti, si, tt, st, tau_i, tau_t) + kl(si, ti, st, tt, tau_i, tau_t))
    }

    pub fn xrd_parts(ti: &Rows, tt: &Rows, si: &Rows, st: &Rows, tau: f64) -> (f64, f64) {
        let t2s = 0.5 * (kl(ti, st, tt, si, tau, tau) + kl(tt, si, ti, st, tau, tau));
        let s2t = 0.5 * (kl(si, tt, st, ti, tau, tau) + kl(st, ti, si, tt, tau, tau));
        (t2s, s2t)
    }

    pub fn xrd(ti: &Rows, tt: &Rows, si: &Rows, st: &Rows, tau: f64) -> f64 {
        let (a, b) = xrd_parts(ti, tt, si, st, tau);
        0.5 * (a + b)
    }

    /// Temperatures in the order task, teacher, student, image, text, cross.
    pub fn total(
        ti: &Rows,
        tt: &Rows,
        si: &Rows,
        st: &Rows,
        taus: [f64; 6],
        w: (f64, f64, f64),
    ) -> f64 {
        let [task, teacher, student, image, text, cross] = taus;
        let (alpha, beta, lambda) = w;
        clip(si, st, task)
            + alpha * fd(ti, tt, si, st)
            + beta * icl(ti, tt, si, st, task)
            + lambda
                * (hrd(ti, tt, si, st, teacher, student)
                    + vrd_ce(ti, tt, si, st, image, text)
                    + vrd_kl(ti, tt, si, st, image, text)
                    + xrd(ti, tt, si, st, cross))
    }
}

/// `rows × dim` Gaussian rows scaled to unit length.
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Rows {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Teacher image, teacher text, student image, student text.
#[derive(Clone, Debug)]
pub struct Quad {
    pub ti: Rows,
    pub tt: Rows,
    pub si: Rows,
    pub st: Rows,
}

impl Quad {
    pub fn random(seed_value: u64, b: usize, d: usize) -> Self {
        let mut rng = seed::rng(seed_value);
        Self {
            ti: unit_rows(&mut rng, b, d),
            tt: unit_rows(&mut rng, b, d),
            si: unit_rows(&mut rng, b, d),
            st: unit_rows(&mut rng, b, d),
        }
    }

    /// Same pairs in the order given by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = |r: &Rows| perm.iter().map(|&i| r[i].clone()).collect();
        Self {
            ti: p(&self.ti),
            tt: p(&self.tt),
            si: p(&self.si),
            st: p(&self.st),
        }
    }

    /// Teacher and student roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            ti: self.si.clone(),
            tt: self.st.clone(),
            si: self.ti.clone(),
            st: self.tt.clone(),
        }
    }
}

pub fn tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn random_taus(rng: &mut ChaCha8Rng) -> [f64; 6] {
    std::array::from_fn(|_| rng.random_range(0.05..1.0))
}

pub const LOSS_NAMES: [&str; 8] = [
    "clip", "fd", "icl", "hrd", "vrd_ce", "vrd_kl", "xrd", "total",
];

/// Every loss through the library with fixed temperatures, in
/// [`LOSS_NAMES`] order.
pub fn library_losses(q: &Quad, taus: [f64; 6], w: (f64, f64, f64)) -> [f64; 8] {
    let mut g = Graph::new();
    let teacher = Pair::new(&mut g, Network::Teacher, &tensor(&q.ti), &tensor(&q.tt));
    let student = Pair::new(&mut g, Network::Student, &tensor(&q.si), &tensor(&q.st));
    let [task, tt, ts, ti, tx, tc] = taus.map(|t| Temp::fixed(&mut g, t).unwrap());
    let temps = TempVars {
        task,
        teacher: tt,
        student: ts,
        image: ti,
        text: tx,
        cross: tc,
    };
    let clip = clip_loss(&mut g, &student.image, &student.text, task).unwrap();
    let fd = fd_loss(&mut g, &teacher, &student).unwrap();
    let icl = icl_loss(&mut g, &student, &teacher, task).unwrap();
    let hrd = hrd_loss(&mut g, &teacher, &student, tt, ts).unwrap();
    let v = vrd(&mut g, &teacher, &student, ti, tx).unwrap();
    let x = xrd(&mut g, &teacher, &student, tc).unwrap();
    let weights = LossWeights {
        alpha: w.0,
        beta: w.1,
        lambda: w.2,
    };
    let total = clip_rd_total(&mut g, &LossSet::rd(), &weights, &teacher, &student, &temps)
        .unwrap()
        .total;
    [clip, fd, icl, hrd, v.ce, v.kl, x.loss, total].map(|var| g.item(var))
}

pub fn oracle_losses(q: &Quad, taus: [f64; 6], w: (f64, f64, f64)) -> [f64; 8] {
    let (ti, tt, si, st) = (&q.ti, &q.tt, &q.si, &q.st);
    [
        oracle::clip(si, st, taus[0]),
        oracle::fd(ti, tt, si, st),
        oracle::icl(ti, tt, si, st, taus[0]),
        oracle::hrd(ti, tt, si, st, taus[1], taus[2]),
        oracle::vrd_ce(ti, tt, si, st, taus[3], taus[4]),
        oracle::vrd_kl(ti, tt, si, st, taus[3], taus[4]),
        oracle::xrd(ti, tt, si, st, taus[5]),
        oracle::total(ti, tt, si, st, taus, w),
    ]
}

/// Absolute difference scaled by magnitude once values exceed 1.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
