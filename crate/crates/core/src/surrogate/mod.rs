//! Convolutional rate surrogate: predicts the achievable rate of a codeword
//! at a location from the location attributes alone, and recommends the
//! codeword with the highest predicted rate.

mod features;
mod io;
mod network;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{featurize, FeatureTensor, NormStats, CHANNELS};
pub use io::{decode_model, encode_model};
pub use network::{Layer, Network, NetworkBuilder, PoolKind, Workspace};
pub use train::{batch_mse_and_grad, train, train_with_init, Adam, TrainReport};

use features::FeatureCache;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::geometry::LocationFeatures;
use crate::hash::Hash32;
use crate::oracle::argmax;

/// Codewords scored per forward pass at inference time.
const PREDICT_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::filters")]
    pub conv_filters: Vec<usize>,
    #[serde(default = "defaults::kernels")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default)]
    pub pool: PoolKind,
    #[serde(default = "defaults::pool_size")]
    pub pool_size: usize,
    #[serde(default = "defaults::fc")]
    pub fc_widths: Vec<usize>,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None` never stops early.
    #[serde(default = "defaults::patience")]
    pub patience: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn filters() -> Vec<usize> {
        vec![16, 32, 64]
    }
    pub fn kernels() -> Vec<usize> {
        vec![3, 3, 3]
    }
    pub fn pool_size() -> usize {
        2
    }
    pub fn fc() -> Vec<usize> {
        vec![128, 64]
    }
    pub fn dropout() -> f64 {
        0.3
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn batch() -> usize {
        128
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn patience() -> Option<usize> {
        Some(20)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_filters: defaults::filters(),
            kernel_sizes: defaults::kernels(),
            pool: PoolKind::Max,
            pool_size: defaults::pool_size(),
            fc_widths: defaults::fc(),
            dropout: defaults::dropout(),
            learning_rate: defaults::lr(),
            batch_size: defaults::batch(),
            max_epochs: defaults::epochs(),
            patience: defaults::patience(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_filters.len() != self.kernel_sizes.len() {
            return bad("model.conv_filters and model.kernel_sizes differ in length".into());
        }
        if self
            .conv_filters
            .iter()
            .chain(&self.fc_widths)
            .any(|&v| v == 0)
        {
            return bad("model layer widths must be positive".into());
        }
        if self.kernel_sizes.iter().any(|&k| k % 2 == 0) {
            return bad("model.kernel_sizes must be odd".into());
        }
        if self.pool_size == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("model.pool_size, batch_size and max_epochs must be positive".into());
        }
        if self.patience == Some(0) {
            return bad("model.patience must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!(
                "model.dropout must be in [0, 1), got {}",
                self.dropout
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("model.learning_rate must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> Hash32 {
        Hash32::of_json(self)
    }

    /// conv -> ReLU -> pool per stage, then dense -> ReLU -> dropout per
    /// hidden width, then a linear scalar head.
    pub fn network(&self, n1: usize, n2: usize) -> Network {
        let mut b = NetworkBuilder::new(CHANNELS, n1, n2);
        for (&f, &k) in self.conv_filters.iter().zip(&self.kernel_sizes) {
            b = b.conv(f, k).relu().pool(self.pool, self.pool_size);
        }
        for &width in &self.fc_widths {
            b = b.dense(width).relu().dropout(self.dropout);
        }
        b.dense(1).build()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub config: ModelConfig,
    pub n1: usize,
    pub n2: usize,
    pub stats: NormStats,
    pub params: Vec<f64>,
    network: Network,
}

impl SurrogateModel {
    pub fn new(
        config: ModelConfig,
        n1: usize,
        n2: usize,
        stats: NormStats,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let network = config.network(n1, n2);
        if params.len() != network.n_params {
            return Err(Error::DimMismatch {
                context: "model parameter count",
                expected: network.n_params,
                actual: params.len(),
            });
        }
        Ok(Self {
            config,
            n1,
            n2,
            stats,
            params,
            network,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config_hash(&self) -> Hash32 {
        self.config.hash()
    }

    /// Inference-mode prediction for an already built tensor.
    pub fn forward(&self, t: &FeatureTensor) -> Result<f64> {
        if (t.n1, t.n2) != (self.n1, self.n2) || t.data.len() != self.network.input_len {
            return Err(Error::DimMismatch {
                context: "feature tensor vs model input",
                expected: self.network.input_len,
                actual: t.data.len(),
            });
        }
        let mut ws = self.network.workspace();
        ws.input_mut().copy_from_slice(&t.data);
        Ok(self
            .network
            .forward::<rand_chacha::ChaCha8Rng>(&self.params, &mut ws, None))
    }

    fn check_codebook(&self, cb: &Codebook) -> Result<()> {
        if cb.dims() != (self.n1, self.n2) {
            return Err(Error::DimMismatch {
                context: "codebook vs model panel",
                expected: self.n1 * self.n2,
                actual: cb.len(),
            });
        }
        Ok(())
    }

    fn predict_with(
        &self,
        cache: &mut FeatureCache,
        ws: &mut Workspace,
        loc: &LocationFeatures,
        cb: &Codebook,
    ) -> Result<Vec<f64>> {
        let slot = cache.add_location(0, loc, &self.stats)?;
        let mut rates = Vec::with_capacity(cb.len());
        let indices: Vec<usize> = (0..cb.len()).collect();
        for chunk in indices.chunks(ws.capacity()) {
            for (j, &p) in chunk.iter().enumerate() {
                cache.fill(slot, p, ws.sample_mut(j));
            }
            rates.extend_from_slice(self.network.forward_batch::<rand_chacha::ChaCha8Rng>(
                &self.params,
                ws,
                chunk.len(),
                None,
            ));
        }
        Ok(rates)
    }

    fn predict_workspace(&self, cb: &Codebook) -> Workspace {
        self.network
            .batch_workspace(cb.len().clamp(1, PREDICT_BATCH))
    }

    /// Predicted rates for many locations, evaluated in parallel.
    pub fn predict_many(&self, locs: &[&LocationFeatures], cb: &Codebook) -> Result<Vec<Vec<f64>>> {
        self.check_codebook(cb)?;
        locs.par_iter()
            .map_init(
                || {
                    (
                        self.predict_workspace(cb),
                        FeatureCache::new(cb, &self.stats),
                    )
                },
                |(ws, cache), loc| {
                    cache.clear_locations();
                    self.predict_with(cache, ws, loc, cb)
                },
            )
            .collect()
    }
}

/// Anything that scores every codeword of a codebook at a location.
pub trait RatePredictor {
    fn predict_rates(&self, loc: &LocationFeatures, cb: &Codebook) -> Result<Vec<f64>>;
}

impl RatePredictor for SurrogateModel {
    fn predict_rates(&self, loc: &LocationFeatures, cb: &Codebook) -> Result<Vec<f64>> {
        self.check_codebook(cb)?;
        let mut cache = FeatureCache::new(cb, &self.stats);
        let mut ws = self.predict_workspace(cb);
        self.predict_with(&mut cache, &mut ws, loc, cb)
    }
}

/// Codeword with the highest predicted rate, lowest index on ties.
pub fn recommend<P: RatePredictor + ?Sized>(
    model: &P,
    loc: &LocationFeatures,
    cb: &Codebook,
) -> Result<usize> {
    let rates = model.predict_rates(loc, cb)?;
    argmax(&rates).ok_or(Error::EmptyCodebook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::dft_codebook;

    struct Fixed(Vec<f64>);

    impl RatePredictor for Fixed {
        fn predict_rates(&self, _: &LocationFeatures, _: &Codebook) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn loc(n: usize) -> LocationFeatures {
        LocationFeatures {
            x: 1.0,
            y: 2.0,
            distances: (0..n).map(|i| 3.0 + i as f64 * 0.01).collect(),
        }
    }

    fn tiny_model(n1: usize, n2: usize, seed: u64) -> SurrogateModel {
        use rand::SeedableRng;
        let cfg = ModelConfig {
            conv_filters: vec![4, 4],
            kernel_sizes: vec![3, 3],
            fc_widths: vec![8],
            ..ModelConfig::default()
        };
        let net = cfg.network(n1, n2);
        let params = net.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let stats = NormStats {
            mean: [0.0, 0.0, 1.0, 2.0, 3.0],
            std: [1.0, 1.0, 2.0, 2.0, 0.5],
        };
        SurrogateModel::new(cfg, n1, n2, stats, params).unwrap()
    }

    #[test]
    fn recommend_with_stub() {
        let cb = dft_codebook(2, 1);
        assert_eq!(recommend(&Fixed(vec![0.1, 0.9]), &loc(2), &cb).unwrap(), 1);
        let shifted = Fixed(vec![0.1 + 5.0, 0.9 + 5.0]);
        assert_eq!(recommend(&shifted, &loc(2), &cb).unwrap(), 1);
        assert_eq!(recommend(&Fixed(vec![0.4, 0.4]), &loc(2), &cb).unwrap(), 0);
        let one = dft_codebook(1, 1);
        assert_eq!(recommend(&Fixed(vec![-3.0]), &loc(1), &one).unwrap(), 0);
    }

    #[test]
    fn single_codeword_model() {
        let m = tiny_model(1, 1, 3);
        let cb = dft_codebook(1, 1);
        assert_eq!(m.predict_rates(&loc(1), &cb).unwrap().len(), 1);
        assert_eq!(recommend(&m, &loc(1), &cb).unwrap(), 0);
    }

    #[test]
    fn batched_matches_single_path() {
        let m = tiny_model(4, 4, 1);
        let cb = dft_codebook(4, 4);
        let l = loc(16);
        let batched = m.predict_rates(&l, &cb).unwrap();
        for (p, &b) in batched.iter().enumerate() {
            let t = featurize(&l, cb.codeword(p), 4, 4, Some(&m.stats)).unwrap();
            assert!((m.forward(&t).unwrap() - b).abs() < 1e-10);
        }
        let many = m.predict_many(&[&l, &loc(16)], &cb).unwrap();
        assert_eq!(many[0], batched);
        assert_eq!(many[1], batched);
    }

    #[test]
    fn prediction_is_order_independent() {
        let m = tiny_model(2, 2, 2);
        let cb = dft_codebook(2, 2);
        let a = loc(4);
        let b = LocationFeatures { x: -4.0, ..loc(4) };
        let first = (
            m.predict_rates(&a, &cb).unwrap(),
            m.predict_rates(&b, &cb).unwrap(),
        );
        let second = (
            m.predict_rates(&b, &cb).unwrap(),
            m.predict_rates(&a, &cb).unwrap(),
        );
        assert_eq!(first.0, second.1);
        assert_eq!(first.1, second.0);
    }

    #[test]
    fn inference_is_repeatable() {
        let m = tiny_model(4, 4, 5);
        let cb = dft_codebook(4, 4);
        let t = featurize(&loc(16), cb.codeword(3), 4, 4, Some(&m.stats)).unwrap();
        assert_eq!(
            m.forward(&t).unwrap().to_bits(),
            m.forward(&t).unwrap().to_bits()
        );
    }

    #[test]
    fn hand_computed_forward() {
        // 1x1 conv with one filter, no pooling on a 1x1 panel, hidden width 2.
        let cfg = ModelConfig {
            conv_filters: vec![1],
            kernel_sizes: vec![1],
            fc_widths: vec![2],
            dropout: 0.0,
            ..ModelConfig::default()
        };
        // conv: 5 weights + bias, dense 1->2: 2 weights + 2 biases, head 2->1: 2 + 1
        let params = vec![
            0.5, -1.0, 0.25, 0.1, 0.2, // conv weights
            0.3, // conv bias
            1.5, -2.0, // dense weights
            0.1, 0.2, // dense biases
            0.7, 0.9,  // head weights
            0.05, // head bias
        ];
        let m = SurrogateModel::new(cfg, 1, 1, NormStats::identity(), params).unwrap();
        let l = LocationFeatures {
            x: 2.0,
            y: -1.0,
            distances: vec![4.0],
        };
        let t = featurize(&l, &[num_complex::Complex64::new(1.0, 0.0)], 1, 1, None).unwrap();
        // conv: 0.5 + 0.25*2 - 0.1 + 0.2*4 + 0.3 = 2.0
        // hidden: relu(1.5*2 + 0.1) = 3.1, relu(-2*2 + 0.2) = 0
        // head: 0.7*3.1 + 0.05 = 2.22
        let want = 2.22;
        assert!((m.forward(&t).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig {
                dropout: 1.0,
                ..ModelConfig::default()
            },
            ModelConfig {
                kernel_sizes: vec![3, 4, 3],
                ..ModelConfig::default()
            },
            ModelConfig {
                kernel_sizes: vec![3],
                ..ModelConfig::default()
            },
            ModelConfig {
                patience: Some(0),
                ..ModelConfig::default()
            },
            ModelConfig {
                batch_size: 0,
                ..ModelConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn default_architecture_on_desk_panel() {
        let net = ModelConfig::default().network(8, 8);
        let convs = net
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .count();
        let pools = net
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Pool { .. }))
            .count();
        let dense = net
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense { .. }))
            .count();
        assert_eq!((convs, pools, dense), (3, 3, 3));
        assert_eq!(net.output_len(), 1);
        // 4x4 panel: third pool would go below one cell
        let net = ModelConfig::default().network(4, 4);
        let pools = net
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Pool { .. }))
            .count();
        assert_eq!(pools, 2);
    }
}
