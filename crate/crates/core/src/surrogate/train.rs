use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureCache, NormStats};
use super::network::{Network, Workspace};
use super::{ModelConfig, SurrogateModel};
use crate::codebook::Codebook;
use crate::dataset::Sample;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moment estimates.
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// 1-based epoch after which training stopped.
    pub stopping_epoch: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Mean squared error over `inputs` and its gradient with respect to every
/// parameter, in inference mode (no dropout).
pub fn batch_mse_and_grad(
    net: &Network,
    params: &[f64],
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; net.n_params];
    if inputs.is_empty() {
        return (0.0, grad);
    }
    let mut ws = net.batch_workspace(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        ws.sample_mut(i).copy_from_slice(x);
    }
    let scale = 1.0 / inputs.len() as f64;
    let preds = net.forward_batch::<ChaCha8Rng>(params, &mut ws, inputs.len(), None);
    let errs: Vec<f64> = preds.iter().zip(targets).map(|(p, y)| p - y).collect();
    let loss = errs.iter().map(|e| e * e * scale).sum();
    let d_out: Vec<f64> = errs.iter().map(|e| 2.0 * e * scale).collect();
    net.backward_batch(params, &mut ws, &d_out, &mut grad);
    (loss, grad)
}

/// Sum of squared errors over `set`, in inference mode.
fn sum_sq_error(
    net: &Network,
    params: &[f64],
    ws: &mut Workspace,
    cache: &FeatureCache,
    set: &[(usize, usize, f64)],
) -> f64 {
    let mut total = 0.0;
    for chunk in set.chunks(ws.capacity()) {
        for (j, &(slot, cw, _)) in chunk.iter().enumerate() {
            cache.fill(slot, cw, ws.sample_mut(j));
        }
        let preds = net.forward_batch::<ChaCha8Rng>(params, ws, chunk.len(), None);
        total += preds
            .iter()
            .zip(chunk)
            .map(|(p, s)| (p - s.2).powi(2))
            .sum::<f64>();
    }
    total
}

fn cache_for(
    samples: &[Sample<'_>],
    cache: &mut FeatureCache,
    stats: &NormStats,
) -> Result<Vec<(usize, usize, f64)>> {
    samples
        .iter()
        .map(|s| {
            Ok((
                cache.add_location(s.location_id, s.features, stats)?,
                s.codeword,
                s.rate,
            ))
        })
        .collect()
}

/// Minibatch Adam on the batch MSE with early stopping on validation MSE.
/// Returns the weights of the best validation epoch.
pub fn train(
    train: &[Sample<'_>],
    val: &[Sample<'_>],
    cb: &Codebook,
    cfg: &ModelConfig,
) -> Result<(SurrogateModel, TrainReport)> {
    let (n1, n2) = cb.dims();
    let net = cfg.network(n1, n2);
    let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    train_with_init(train, val, cb, cfg, params)
}

/// [`train`] starting from the given parameters.
pub fn train_with_init(
    train: &[Sample<'_>],
    val: &[Sample<'_>],
    cb: &Codebook,
    cfg: &ModelConfig,
    mut params: Vec<f64>,
) -> Result<(SurrogateModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    let started = Instant::now();
    let (n1, n2) = cb.dims();
    let net = cfg.network(n1, n2);
    if params.len() != net.n_params {
        return Err(Error::DimMismatch {
            context: "initial parameter count",
            expected: net.n_params,
            actual: params.len(),
        });
    }
    let stats = NormStats::from_samples(train, cb)?;
    let mut cache = FeatureCache::new(cb, &stats);
    let train_set = cache_for(train, &mut cache, &stats)?;
    let val_set = cache_for(val, &mut cache, &stats)?;

    // shuffling and dropout draw from separate streams of the same seed
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);
    let use_dropout = cfg.dropout > 0.0;

    let mut ws = net.batch_workspace(cfg.batch_size);
    let mut grad = vec![0.0; net.n_params];
    let mut d_out = vec![0.0; cfg.batch_size];
    let mut adam = Adam::new(net.n_params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut report = TrainReport {
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        best_epoch: 0,
        stopping_epoch: 0,
        wall_time_s: 0.0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_sq = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for (j, &i) in batch.iter().enumerate() {
                let (slot, cw, _) = train_set[i];
                cache.fill(slot, cw, ws.sample_mut(j));
            }
            let preds = net.forward_batch(
                &params,
                &mut ws,
                batch.len(),
                use_dropout.then_some(&mut drop_rng),
            );
            for ((d, &p), &i) in d_out.iter_mut().zip(preds).zip(batch) {
                let err = p - train_set[i].2;
                epoch_sq += err * err;
                *d = 2.0 * err * scale;
            }
            net.backward_batch(&params, &mut ws, &d_out[..batch.len()], &mut grad);
            adam.step(&mut params, &grad);
        }
        let train_mse = epoch_sq / train_set.len() as f64;
        let val_sq = sum_sq_error(&net, &params, &mut ws, &cache, &val_set);
        let val_mse = val_sq / val_set.len() as f64;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            let loss = if train_mse.is_finite() {
                val_mse
            } else {
                train_mse
            };
            return Err(Error::NonFiniteLoss { epoch, loss });
        }
        report.train_mse.push(train_mse);
        report.val_mse.push(val_mse);
        report.stopping_epoch = epoch;
        log::debug!("epoch {epoch}: train mse {train_mse:.6}, val mse {val_mse:.6}");

        if val_mse < best_val {
            best_val = val_mse;
            best_params.copy_from_slice(&params);
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    let model = SurrogateModel::new(cfg.clone(), n1, n2, stats, best_params)?;
    Ok((model, report))
}
