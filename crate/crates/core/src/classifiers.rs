//! Few-shot classifier heads over embeddings.
//!
//! Differentiable heads ([`ncc_logits_on_tape`], [`md_logits_on_tape`]) build
//! on a [`Tape`] so adaptation can backpropagate through them; the plain
//! functions evaluate the same graphs on a private tape.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tsa_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Default cosine temperature.
pub const DEFAULT_TAU: f64 = 10.0;
/// Relative ridge added to Mahalanobis covariances.
pub const COV_RIDGE: f64 = 1e-3;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape()[0]).map(|i| argmax(logits.row(i))).collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `tau * cos(z, c)`.
    #[default]
    Cosine,
    /// `-tau / 2 * ||z - c||^2` on normalized `z` and `c`.
    SquaredEuclidean,
}

/// Classifier selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Ncc,
    Md,
    Lr,
    Softmax,
    Knn(usize),
    /// Full finetuning of the backbone with an NCC loss.
    FinetuneNcc,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Ncc => f.write_str("ncc"),
            HeadKind::Md => f.write_str("md"),
            HeadKind::Lr => f.write_str("lr"),
            HeadKind::Softmax => f.write_str("softmax"),
            HeadKind::Knn(k) => write!(f, "knn{k}"),
            HeadKind::FinetuneNcc => f.write_str("finetune-ncc"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncc" => Ok(HeadKind::Ncc),
            "md" => Ok(HeadKind::Md),
            "lr" => Ok(HeadKind::Lr),
            "softmax" => Ok(HeadKind::Softmax),
            "finetune-ncc" => Ok(HeadKind::FinetuneNcc),
            _ => match s.strip_prefix("knn").map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => Ok(HeadKind::Knn(k)),
                _ => Err(Error::config(format!(
                    "unknown head {s:?} (expected ncc, md, lr, softmax, knn<k> or finetune-ncc)"
                ))),
            },
        }
    }
}

impl Serialize for HeadKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-class support counts; every class in `0..way` must appear.
pub fn class_counts(labels: &[usize], way: usize) -> Result<Vec<usize>> {
    if way < 2 {
        return Err(Error::config(format!("way must be at least 2, got {way}")));
    }
    let mut counts = vec![0; way];
    for &y in labels {
        if y >= way {
            return Err(Error::config(format!("label {y} out of range for way {way}")));
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::config(format!("class {k} has no support examples")));
    }
    Ok(counts)
}

/// `[way, N]` matrix whose product with `[N, d]` embeddings gives class means.
pub fn averaging_matrix(labels: &[usize], way: usize) -> Result<Tensor> {
    let counts = class_counts(labels, way)?;
    let n = labels.len();
    let mut data = vec![0.0; way * n];
    for (i, &y) in labels.iter().enumerate() {
        data[y * n + i] = 1.0 / counts[y] as f64;
    }
    Ok(Tensor::new([way, n], data)?)
}

/// Class centers of L2-normalized support embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub centroids: Tensor,
    pub class_counts: Vec<usize>,
}

impl Prototypes {
    pub fn fit(support: &Tensor, labels: &[usize], way: usize) -> Result<Self> {
        let mut tape = Tape::new();
        let s = tape.constant(support.clone());
        let (c, counts) = centroids_on_tape(&mut tape, s, labels, way)?;
        Ok(Prototypes {
            centroids: tape.value(c).clone(),
            class_counts: counts,
        })
    }

    pub fn way(&self) -> usize {
        self.class_counts.len()
    }
}

fn centroids_on_tape(tape: &mut Tape, support: Var, labels: &[usize], way: usize) -> Result<(Var, Vec<usize>)> {
    let counts = class_counts(labels, way)?;
    if tape.shape(support).first() != Some(&labels.len()) {
        return Err(Error::config(format!(
            "{} labels for support of shape {:?}",
            labels.len(),
            tape.shape(support)
        )));
    }
    let avg = tape.constant(averaging_matrix(labels, way)?);
    let sn = tape.l2_normalize(support)?;
    Ok((tape.matmul(avg, sn)?, counts))
}

fn ncc_from_centroids(tape: &mut Tape, query: Var, centroids: Var, metric: Metric, tau: f64) -> Result<Var> {
    let qn = tape.l2_normalize(query)?;
    let cn = tape.l2_normalize(centroids)?;
    let ct = tape.transpose(cn)?;
    let cos = tape.matmul(qn, ct)?;
    Ok(match metric {
        Metric::Cosine => tape.scale(cos, tau)?,
        // -tau/2 ||q - c||^2 = tau * cos - tau for unit vectors
        Metric::SquaredEuclidean => {
            let scaled = tape.scale(cos, tau)?;
            let n = tape.shape(cos)[0];
            let k = tape.shape(cos)[1];
            let offset = tape.constant(Tensor::full([n, k], -tau));
            tape.add(scaled, offset)?
        }
    })
}

/// NCC logits `[N, way]` of `query` against class centers of `support`.
pub fn ncc_logits_on_tape(
    tape: &mut Tape,
    query: Var,
    support: Var,
    labels: &[usize],
    way: usize,
    metric: Metric,
    tau: f64,
) -> Result<Var> {
    let (c, _) = centroids_on_tape(tape, support, labels, way)?;
    ncc_from_centroids(tape, query, c, metric, tau)
}

pub fn ncc_logits(query: &Tensor, prototypes: &Prototypes, metric: Metric, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let c = tape.constant(prototypes.centroids.clone());
    let l = ncc_from_centroids(&mut tape, q, c, metric, tau)?;
    Ok(tape.value(l).clone())
}

/// Covariance pieces of the Mahalanobis head.
#[derive(Clone, Debug, PartialEq)]
pub struct CovModel {
    pub class_covariances: Vec<Tensor>,
    pub task_covariance: Tensor,
    pub lambdas: Vec<f64>,
    pub ridge: f64,
}

/// Sample covariance of the rows of `x` (divisor `max(n - 1, 1)`).
fn covariance_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let mean = tape.mean_rows(x)?;
    let neg = tape.scale(mean, -1.0)?;
    let centered = tape.add_row(x, neg)?;
    let ct = tape.transpose(centered)?;
    let scatter = tape.matmul(ct, centered)?;
    Ok(tape.scale(scatter, 1.0 / (n.max(2) - 1) as f64)?)
}

struct MdParts {
    means: Vec<Var>,
    /// Blended, ridged covariance per class.
    blended: Vec<Var>,
    class_covs: Vec<Var>,
    task_cov: Var,
    lambdas: Vec<f64>,
}

fn md_parts(tape: &mut Tape, support: Var, labels: &[usize], way: usize) -> Result<MdParts> {
    let counts = class_counts(labels, way)?;
    let task_cov = covariance_on_tape(tape, support)?;
    let mut parts = MdParts {
        means: Vec::with_capacity(way),
        blended: Vec::with_capacity(way),
        class_covs: Vec::with_capacity(way),
        task_cov,
        lambdas: Vec::with_capacity(way),
    };
    for (k, &n_k) in counts.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        let xk = tape.gather_rows(support, &rows)?;
        let mean = tape.mean_rows(xk)?;
        let cov = covariance_on_tape(tape, xk)?;
        let lambda = n_k as f64 / (n_k as f64 + 1.0);
        let a = tape.scale(cov, lambda)?;
        let b = tape.scale(task_cov, 1.0 - lambda)?;
        let mix = tape.add(a, b)?;
        let ridged = tape.add_ridge(mix, COV_RIDGE)?;
        parts.means.push(mean);
        parts.blended.push(ridged);
        parts.class_covs.push(cov);
        parts.lambdas.push(lambda);
    }
    Ok(parts)
}

impl CovModel {
    pub fn fit(support: &Tensor, labels: &[usize], way: usize) -> Result<Self> {
        let mut tape = Tape::new();
        let s = tape.constant(support.clone());
        let p = md_parts(&mut tape, s, labels, way)?;
        Ok(CovModel {
            class_covariances: p.class_covs.iter().map(|&v| tape.value(v).clone()).collect(),
            task_covariance: tape.value(p.task_cov).clone(),
            lambdas: p.lambdas,
            ridge: COV_RIDGE,
        })
    }
}

/// Mahalanobis logits `-1/2 (z - c_k)^T S_k^{-1} (z - c_k)` on raw embeddings.
pub fn md_logits_on_tape(tape: &mut Tape, query: Var, support: Var, labels: &[usize], way: usize) -> Result<Var> {
    let p = md_parts(tape, support, labels, way)?;
    let mut cols = Vec::with_capacity(way);
    for k in 0..way {
        let inv = tape.inverse(p.blended[k])?;
        let neg = tape.scale(p.means[k], -1.0)?;
        let diff = tape.add_row(query, neg)?;
        let proj = tape.matmul(diff, inv)?;
        let quad = tape.hadamard(proj, diff)?;
        let dist = tape.row_sum(quad)?;
        cols.push(tape.scale(dist, -0.5)?);
    }
    Ok(tape.concat_cols(&cols)?)
}

pub fn md_logits(query: &Tensor, support: &Tensor, labels: &[usize], way: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let s = tape.constant(support.clone());
    let l = md_logits_on_tape(&mut tape, q, s, labels, way)?;
    Ok(tape.value(l).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    /// Multinomial logistic regression with bias and L2 penalty on
    /// L2-normalized embeddings.
    Lr,
    /// Bias-free linear softmax classifier on raw embeddings.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearHeadConfig {
    pub steps: usize,
    /// Step size, divided by the mean squared embedding norm.
    pub lr: f64,
    /// L2 penalty on the weights (logistic regression only).
    pub l2: f64,
}

impl Default for LinearHeadConfig {
    fn default() -> Self {
        LinearHeadConfig {
            steps: 200,
            lr: 1.0,
            l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub kind: LinearKind,
    /// `[way, d]`.
    pub weight: Tensor,
    /// `[1, way]`, zero for the softmax head.
    pub bias: Tensor,
}

impl LinearHead {
    fn inputs(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        let v = tape.constant(x.clone());
        Ok(match self.kind {
            LinearKind::Lr => tape.l2_normalize(v)?,
            LinearKind::Softmax => v,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.inputs(&mut tape, x)?;
        let w = tape.constant(self.weight.transpose());
        let b = tape.constant(self.bias.clone());
        let l = tape.matmul(z, w)?;
        let l = tape.add_row(l, b)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(predict(&self.logits(x)?))
    }
}

/// Fits a linear head on the support set by full-batch gradient descent
/// from zero weights.
pub fn train_linear_head(
    kind: LinearKind,
    support: &Tensor,
    labels: &[usize],
    way: usize,
    cfg: &LinearHeadConfig,
) -> Result<LinearHead> {
    class_counts(labels, way)?;
    let s = support.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::config(format!(
            "support of shape {s:?} does not match {} labels",
            labels.len()
        )));
    }
    let d = s[1];
    let mut head = LinearHead {
        kind,
        weight: Tensor::zeros([way, d]),
        bias: Tensor::zeros([1, way]),
    };
    let mean_sq = match kind {
        LinearKind::Lr => 1.0,
        LinearKind::Softmax => {
            (support.data().iter().map(|v| v * v).sum::<f64>() / s[0] as f64).max(1e-12)
        }
    };
    let step = cfg.lr / mean_sq;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let z = head.inputs(&mut tape, support)?;
        let w = tape.param(head.weight.clone());
        let b = tape.param(head.bias.clone());
        let wt = tape.transpose(w)?;
        let l = tape.matmul(z, wt)?;
        let l = match kind {
            LinearKind::Lr => tape.add_row(l, b)?,
            LinearKind::Softmax => l,
        };
        let mut loss = tape.softmax_cross_entropy(l, labels)?;
        if kind == LinearKind::Lr && cfg.l2 > 0.0 {
            let sq = tape.hadamard(w, w)?;
            let pen = tape.sum(sq)?;
            let pen = tape.scale(pen, 0.5 * cfg.l2)?;
            loss = tape.add(loss, pen)?;
        }
        let g = tape.backward(loss)?;
        let gw = g.get(w).expect("tracked");
        for (p, gv) in head.weight.data_mut().iter_mut().zip(gw.data()) {
            *p -= step * gv;
        }
        if kind == LinearKind::Lr {
            let gb = g.get(b).expect("tracked");
            for (p, gv) in head.bias.data_mut().iter_mut().zip(gb.data()) {
                *p -= step * gv;
            }
        }
    }
    Ok(head)
}

/// Majority vote among the `k` support points of highest cosine
/// similarity. Equal similarities keep support order; vote ties go to the
/// lowest class index.
pub fn knn_predict(query: &Tensor, support: &Tensor, labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = labels.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("k = {k} must be in 1..={n}")));
    }
    let way = labels.iter().max().map_or(0, |m| m + 1);
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let s = tape.constant(support.clone());
    let qn = tape.l2_normalize(q)?;
    let sn = tape.l2_normalize(s)?;
    let st = tape.transpose(sn)?;
    let sim = tape.matmul(qn, st)?;
    let sim = tape.value(sim);
    let mut out = Vec::with_capacity(query.shape()[0]);
    for i in 0..query.shape()[0] {
        let row = sim.row(i);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let mut votes = vec![0usize; way];
        for &j in &order[..k] {
            votes[labels[j]] += 1;
        }
        let votes: Vec<f64> = votes.into_iter().map(|v| v as f64).collect();
        out.push(argmax(&votes));
    }
    Ok(out)
}
