use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::{info_nce_queue_loss, neg_cosine_loss, nt_xent_loss, EmbeddingQueue, LossOutput};
use super::method::{LossKind, MethodConfig};
use super::SslError;
use crate::data::{two_view_batch, AugSpec};
use crate::nn::{apply_sgd, l2_normalize_rows, MlpSpec, Network, OptimizerState, Tape};
use crate::params::{NamedParams, ENCODER, PREDICTOR};

type Result<T> = std::result::Result<T, SslError>;

/// Architectures of the encoder and predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpecs {
    pub encoder: MlpSpec,
    pub predictor: MlpSpec,
}

impl NetSpecs {
    /// Encoder `input -> 64 -> 32`, predictor `32 -> 64 -> 32`.
    pub fn desk_scale(input: usize) -> Self {
        Self::new(input, 64, 32, 64)
    }

    pub fn new(input: usize, enc_hidden: usize, embed: usize, pred_hidden: usize) -> Self {
        Self {
            encoder: MlpSpec::encoder(input, enc_hidden, embed),
            predictor: MlpSpec::predictor(embed, pred_hidden),
        }
    }

    /// Seeded initial global model: `encoder`, plus `predictor` when used.
    pub fn init_global<R: Rng + ?Sized>(&self, with_predictor: bool, rng: &mut R) -> Result<NamedParams> {
        let mut g = NamedParams::new();
        let enc = Network::init(self.encoder.clone(), rng)?;
        g.insert(ENCODER, enc.params().to_vec());
        if with_predictor {
            let pred = Network::init(self.predictor.clone(), rng)?;
            g.insert(PREDICTOR, pred.params().to_vec());
        }
        Ok(g)
    }
}

/// A client's Siamese networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientNets {
    pub online: Network,
    pub predictor: Option<Network>,
    /// `None` when the target shares the online encoder's weights.
    pub target: Option<Network>,
    pub queue: Option<EmbeddingQueue>,
}

impl ClientNets {
    /// Online, target and predictor all copied from the global model. A
    /// contrastive queue starts full of random unit vectors.
    pub fn from_global<R: Rng + ?Sized>(
        global: &NamedParams,
        specs: &NetSpecs,
        cfg: &MethodConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let online = Network::from_params(specs.encoder.clone(), global.group(ENCODER)?.to_vec())?;
        let predictor = if cfg.has_predictor {
            Some(Network::from_params(specs.predictor.clone(), global.group(PREDICTOR)?.to_vec())?)
        } else {
            None
        };
        let target = cfg.has_distinct_target().then(|| online.clone());
        let queue = (cfg.loss_kind == LossKind::InfoNceQueue).then(|| {
            let dim = specs.encoder.output_dim();
            let raw = Array2::from_shape_fn((cfg.queue_size, dim), |_| StandardNormal.sample(rng));
            let mut q = EmbeddingQueue::new(cfg.queue_size, dim);
            q.enqueue(&l2_normalize_rows(&raw).0.view());
            q
        });
        Ok(Self { online, predictor, target, queue })
    }

    pub fn target_encoder(&self) -> &Network {
        self.target.as_ref().unwrap_or(&self.online)
    }

    pub fn shares_weights(&self) -> bool {
        self.target.is_none()
    }

    /// What the client uploads: the online encoder and, when present, the predictor.
    pub fn online_params(&self) -> NamedParams {
        let mut p = NamedParams::new();
        p.insert(ENCODER, self.online.params().to_vec());
        if let Some(pred) = &self.predictor {
            p.insert(PREDICTOR, pred.params().to_vec());
        }
        p
    }

    pub fn target_params(&self) -> &[f64] {
        self.target_encoder().params()
    }
}

/// `target <- m * target + (1 - m) * online`.
pub fn target_momentum_update(target: &NamedParams, online: &NamedParams, m: f64) -> Result<NamedParams> {
    if !(0.0..=1.0).contains(&m) {
        return Err(SslError::InvalidMethod(format!("momentum {m} outside [0, 1]")));
    }
    target.check_same_shape(online)?;
    let mut out = target.clone();
    for (name, o) in online.iter() {
        momentum_into(out.get_mut(name).unwrap(), o, m);
    }
    Ok(out)
}

fn momentum_into(target: &mut [f64], online: &[f64], m: f64) {
    if m == 1.0 {
        return;
    }
    if m == 0.0 {
        target.copy_from_slice(online);
        return;
    }
    // t + (1 - m)(o - t): exact fixed point when target == online.
    let step = 1.0 - m;
    for (t, o) in target.iter_mut().zip(online) {
        *t += step * (o - *t);
    }
}

/// Loss and parameter gradients for one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: f64,
    /// Gradient reaching the online encoder through the online path.
    pub online_encoder: Vec<f64>,
    pub predictor: Option<Vec<f64>>,
    /// Gradient reaching the target encoder's parameters through the target
    /// path. All zeros under stop-gradient.
    pub target_path: Vec<f64>,
    /// Normalized target embeddings to enqueue (contrastive queue only).
    pub keys: Option<Array2<f64>>,
}

struct OnlinePass {
    out: Array2<f64>,
    enc_tape: Tape,
    pred_tape: Option<Tape>,
}

fn online_forward(nets: &ClientNets, x: &ArrayView2<f64>) -> Result<OnlinePass> {
    let (z, enc_tape) = nets.online.forward_tape(x)?;
    match &nets.predictor {
        Some(pred) => {
            let (p, pred_tape) = pred.forward_tape(&z.view())?;
            Ok(OnlinePass { out: p, enc_tape, pred_tape: Some(pred_tape) })
        }
        None => Ok(OnlinePass { out: z, enc_tape, pred_tape: None }),
    }
}

fn online_backward(
    nets: &ClientNets,
    pass: &OnlinePass,
    grad: &ArrayView2<f64>,
    enc_acc: &mut [f64],
    pred_acc: &mut Option<Vec<f64>>,
) -> Result<()> {
    let grad_z = match (&nets.predictor, &pass.pred_tape) {
        (Some(pred), Some(tape)) => {
            let g = pred.backward(tape, grad)?;
            add_into(pred_acc.as_mut().unwrap(), &g.params);
            g.input
        }
        _ => grad.to_owned(),
    };
    let g = nets.online.backward(&pass.enc_tape, &grad_z.view())?;
    add_into(enc_acc, &g.params);
    Ok(())
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Forward and backward for one pair of view batches.
///
/// The online path is `online encoder [-> predictor]`, the target path is the
/// target encoder (the online encoder itself under weight sharing). Gradient
/// flows into the target path only when stop-gradient is off.
pub fn batch_loss_and_grads(
    nets: &ClientNets,
    cfg: &MethodConfig,
    v1: &ArrayView2<f64>,
    v2: &ArrayView2<f64>,
) -> Result<BatchGrads> {
    let target_net = nets.target_encoder();
    let mut enc = vec![0.0; nets.online.params().len()];
    let mut pred = nets.predictor.as_ref().map(|p| vec![0.0; p.params().len()]);
    let mut tgt = vec![0.0; target_net.params().len()];

    let mut route = |online_in: &ArrayView2<f64>,
                     target_in: &ArrayView2<f64>,
                     weight: f64,
                     loss_fn: &mut dyn FnMut(&Array2<f64>, &Array2<f64>) -> Result<LossOutput>|
     -> Result<(f64, Array2<f64>)> {
        let pass = online_forward(nets, online_in)?;
        let (z, t_tape) = target_net.forward_tape(target_in)?;
        let out = loss_fn(&pass.out, &z)?;
        online_backward(nets, &pass, &(out.grad_a * weight).view(), &mut enc, &mut pred)?;
        if !cfg.stop_gradient {
            let g = target_net.backward(&t_tape, &(out.grad_b * weight).view())?;
            add_into(&mut tgt, &g.params);
        }
        Ok((weight * out.loss, z))
    };

    let mut keys = None;
    let loss = match cfg.loss_kind {
        LossKind::NegCosine => {
            let mut f = |p: &Array2<f64>, z: &Array2<f64>| neg_cosine_loss(&p.view(), &z.view());
            if cfg.symmetrize {
                let (a, _) = route(v1, v2, 0.5, &mut f)?;
                let (b, _) = route(v2, v1, 0.5, &mut f)?;
                a + b
            } else {
                route(v1, v2, 1.0, &mut f)?.0
            }
        }
        LossKind::NtXent => {
            let t = cfg.temperature;
            let mut f = |a: &Array2<f64>, b: &Array2<f64>| nt_xent_loss(&a.view(), &b.view(), t);
            route(v1, v2, 1.0, &mut f)?.0
        }
        LossKind::InfoNceQueue => {
            let queue = nets.queue.as_ref().ok_or(SslError::EmptyQueue)?.to_matrix();
            let t = cfg.temperature;
            let mut f = |q: &Array2<f64>, k: &Array2<f64>| info_nce_queue_loss(&q.view(), &k.view(), &queue.view(), t);
            let (l, k) = route(v1, v2, 1.0, &mut f)?;
            let (kn, _, zeros) = l2_normalize_rows(&k);
            if let Some(&row) = zeros.first() {
                return Err(SslError::ZeroNormRow(row));
            }
            keys = Some(kn);
            l
        }
    };
    Ok(BatchGrads { loss, online_encoder: enc, predictor: pred, target_path: tgt, keys })
}

/// Local-training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub aug: AugSpec,
}

impl TrainParams {
    /// Optimizer steps one round of local training takes on `samples` rows.
    pub fn steps_per_round(&self, samples: usize) -> u64 {
        (self.epochs * (samples / self.batch_size.max(1))) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

/// Runs `epochs` passes of Siamese training over `data`, returning the
/// per-batch loss trace. Incomplete trailing batches are dropped.
pub fn local_train<R: Rng + ?Sized>(
    nets: &mut ClientNets,
    cfg: &MethodConfig,
    data: &ArrayView2<f64>,
    params: &TrainParams,
    opt: &mut OptimizerState,
    rng: &mut R,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if params.epochs == 0 {
        return Err(SslError::NoEpochs);
    }
    let n = data.nrows();
    if params.batch_size == 0 || params.batch_size > n {
        return Err(SslError::BatchLargerThanData { batch: params.batch_size, samples: n });
    }
    if nets.shares_weights() == cfg.has_distinct_target() || nets.predictor.is_some() != cfg.has_predictor {
        return Err(SslError::InvalidMethod("client networks do not match the method".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(params.epochs * (n / params.batch_size));
    for epoch in 0..params.epochs {
        order.shuffle(rng);
        for (batch, idx) in order.chunks_exact(params.batch_size).enumerate() {
            let x = data.select(ndarray::Axis(0), idx);
            let (v1, v2) = two_view_batch(&x.view(), &params.aug, rng);
            let g = batch_loss_and_grads(nets, cfg, &v1.view(), &v2.view())?;
            if !g.loss.is_finite() {
                return Err(SslError::NonFiniteLoss { epoch, batch });
            }
            let lr = opt.advance()?;
            apply_step(nets, cfg, &g, lr);
            trace.push(LossRow { epoch, batch, loss: g.loss });
        }
    }
    Ok(trace)
}

fn apply_step(nets: &mut ClientNets, cfg: &MethodConfig, g: &BatchGrads, lr: f64) {
    match nets.target.as_mut() {
        None => {
            let mut total = g.online_encoder.clone();
            add_into(&mut total, &g.target_path);
            apply_sgd(nets.online.params_mut(), &total, lr);
        }
        Some(target) => {
            apply_sgd(nets.online.params_mut(), &g.online_encoder, lr);
            if !cfg.stop_gradient {
                apply_sgd(target.params_mut(), &g.target_path, lr);
            }
        }
    }
    if let (Some(pred), Some(pg)) = (nets.predictor.as_mut(), g.predictor.as_ref()) {
        apply_sgd(pred.params_mut(), pg, lr);
    }
    if cfg.target_ema {
        if let Some(target) = nets.target.as_mut() {
            momentum_into(target.params_mut(), nets.online.params(), cfg.momentum);
        }
    }
    if let (Some(queue), Some(keys)) = (nets.queue.as_mut(), g.keys.as_ref()) {
        queue.enqueue(&keys.view());
    }
}
