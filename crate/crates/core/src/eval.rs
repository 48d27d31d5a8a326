//! Representation probes on frozen encoders: kNN monitor, linear evaluation
//! and the embedding-collapse statistic.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{l2_normalize_rows, Network, NnError};
use crate::rng::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("k = {k} must be in 1..={train}")]
    BadK { k: usize, train: usize },
    #[error("non-finite loss in linear evaluation at epoch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-dimension std threshold below which embeddings count as collapsed,
/// relative to the `1/sqrt(d)` of a uniform spread on the sphere.
pub const COLLAPSE_FRACTION: f64 = 0.1;

pub fn collapse_threshold(dim: usize) -> f64 {
    COLLAPSE_FRACTION / (dim as f64).sqrt()
}

pub fn embed(encoder: &Network, ds: &Dataset) -> Result<Array2<f64>> {
    Ok(encoder.forward(&ds.samples.view())?)
}

/// Majority vote among the `k` nearest training embeddings under cosine
/// distance. Ties go to the smaller summed distance, then the smaller label.
pub fn knn_accuracy(
    train_emb: &ArrayView2<f64>,
    train_labels: &[usize],
    test_emb: &ArrayView2<f64>,
    test_labels: &[usize],
    num_classes: usize,
    k: usize,
) -> Result<f64> {
    if train_emb.nrows() == 0 {
        return Err(EvalError::Empty("train"));
    }
    if test_emb.nrows() == 0 {
        return Err(EvalError::Empty("test"));
    }
    if k == 0 || k > train_emb.nrows() {
        return Err(EvalError::BadK { k, train: train_emb.nrows() });
    }
    let (tr, _, _) = l2_normalize_rows(&train_emb.to_owned());
    let (te, _, _) = l2_normalize_rows(&test_emb.to_owned());
    let sims = te.dot(&tr.t());

    let mut correct = 0;
    let mut order: Vec<usize> = Vec::with_capacity(tr.nrows());
    for (i, row) in sims.rows().into_iter().enumerate() {
        order.clear();
        order.extend(0..tr.nrows());
        let dist = |j: usize| 1.0 - row[j];
        order.select_nth_unstable_by(k - 1, |&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let mut votes = vec![(0usize, 0.0f64); num_classes];
        for &j in &order[..k] {
            let v = &mut votes[train_labels[j]];
            v.0 += 1;
            v.1 += dist(j);
        }
        let pred = (0..num_classes)
            .filter(|&c| votes[c].0 > 0)
            .min_by(|&a, &b| {
                votes[b].0.cmp(&votes[a].0).then(votes[a].1.total_cmp(&votes[b].1)).then(a.cmp(&b))
            })
            .unwrap();
        correct += (pred == test_labels[i]) as usize;
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

pub fn knn_eval(encoder: &Network, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    if train.is_empty() {
        return Err(EvalError::Empty("train"));
    }
    if test.is_empty() {
        return Err(EvalError::Empty("test"));
    }
    let (a, b) = (embed(encoder, train)?, embed(encoder, test)?);
    knn_accuracy(&a.view(), &train.labels, &b.view(), &test.labels, train.num_classes, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearEvalParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LinearEvalParams {
    fn default() -> Self {
        Self { epochs: 100, lr: 0.5, batch_size: 32 }
    }
}

/// Softmax-regression head on fixed features, trained with mini-batch SGD.
pub fn linear_probe_accuracy<R: Rng + ?Sized>(
    train_x: &ArrayView2<f64>,
    train_y: &[usize],
    test_x: &ArrayView2<f64>,
    test_y: &[usize],
    num_classes: usize,
    params: &LinearEvalParams,
    rng: &mut R,
) -> Result<f64> {
    if train_x.nrows() == 0 {
        return Err(EvalError::Empty("train"));
    }
    if test_x.nrows() == 0 {
        return Err(EvalError::Empty("test"));
    }
    let d = train_x.ncols();
    let bound = 1.0 / (d as f64).sqrt();
    let mut w = Array2::from_shape_fn((d, num_classes), |_| rng.random_range(-bound..=bound));
    let mut b = Array1::from_shape_fn(num_classes, |_| rng.random_range(-bound..=bound));

    let n = train_x.nrows();
    let bs = params.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..params.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(bs) {
            let x = train_x.select(Axis(0), idx);
            let mut logits = x.dot(&w) + &b;
            for (r, mut row) in logits.rows_mut().into_iter().enumerate() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let s = row.sum();
                row /= s;
                let y = train_y[idx[r]];
                epoch_loss -= row[y].max(f64::MIN_POSITIVE).ln();
                row[y] -= 1.0;
            }
            logits /= idx.len() as f64;
            let gw = x.t().dot(&logits);
            let gb = logits.sum_axis(Axis(0));
            w.scaled_add(-params.lr, &gw);
            b.scaled_add(-params.lr, &gb);
        }
        if !epoch_loss.is_finite() {
            return Err(EvalError::NonFiniteLoss(epoch));
        }
    }

    let logits = test_x.dot(&w) + &b;
    let correct = logits
        .rows()
        .into_iter()
        .zip(test_y)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Linear evaluation on L2-normalized frozen embeddings. The encoder is only
/// borrowed immutably.
pub fn linear_eval(
    encoder: &Network,
    train: &Dataset,
    test: &Dataset,
    params: &LinearEvalParams,
    seed: u64,
) -> Result<f64> {
    let (tr, _, _) = l2_normalize_rows(&embed(encoder, train)?);
    let (te, _, _) = l2_normalize_rows(&embed(encoder, test)?);
    let mut r = rng::stream(seed, Stream::Eval, 0);
    linear_probe_accuracy(&tr.view(), &train.labels, &te.view(), &test.labels, train.num_classes, params, &mut r)
}

/// Mean over dimensions of the standard deviation of L2-normalized rows.
pub fn collapse_stat_of(embeddings: &ArrayView2<f64>) -> f64 {
    if embeddings.nrows() == 0 {
        return 0.0;
    }
    let (z, _, _) = l2_normalize_rows(&embeddings.to_owned());
    z.std_axis(Axis(0), 0.0).mean().unwrap_or(0.0)
}

pub fn collapse_stat(encoder: &Network, probe: &ArrayView2<f64>) -> Result<f64> {
    Ok(collapse_stat_of(&encoder.forward(probe)?.view()))
}

pub fn is_collapsed(stat: f64, dim: usize) -> bool {
    stat < collapse_threshold(dim)
}

/// One evaluation, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub round: usize,
    pub knn_acc: f64,
    pub linear_acc: f64,
    pub collapse_stat: f64,
    pub per_round_divergence: BTreeMap<usize, Vec<f64>>,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
