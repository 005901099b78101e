//! Five-plane input tensor: `Re(v)`, `Im(v)`, `x`, `y` and the per-element
//! distances, each laid out on the `n1 x n2` element grid.

use std::collections::HashMap;

use num_complex::Complex64;

use crate::codebook::Codebook;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::LocationFeatures;

pub const CHANNELS: usize = 5;

/// `CHANNELS x n1 x n2` values, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub n1: usize,
    pub n2: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.n1 * self.n2;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-channel mean and standard deviation of the training tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

const STD_FLOOR: f64 = 1e-9;

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    /// Moments over every value of every raw tensor built from `samples`.
    pub fn from_samples(samples: &[Sample<'_>], cb: &Codebook) -> Result<Self> {
        let (n1, n2) = cb.dims();
        let mut sum = [0.0; CHANNELS];
        let mut count = 0usize;
        for s in samples {
            let t = featurize(s.features, cb.codeword(s.codeword), n1, n2, None)?;
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += t.plane(c).iter().sum::<f64>();
            }
            count += n1 * n2;
        }
        if count == 0 {
            return Ok(Self::identity());
        }
        let mean = sum.map(|s| s / count as f64);
        let mut sq = [0.0; CHANNELS];
        for s in samples {
            let t = featurize(s.features, cb.codeword(s.codeword), n1, n2, None)?;
            for (c, acc) in sq.iter_mut().enumerate() {
                *acc += t
                    .plane(c)
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = sq.map(|s| (s / count as f64).sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    fn apply(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }
}

pub fn featurize(
    loc: &LocationFeatures,
    v: &[Complex64],
    n1: usize,
    n2: usize,
    stats: Option<&NormStats>,
) -> Result<FeatureTensor> {
    let n = n1 * n2;
    for (context, actual) in [
        ("codeword length", v.len()),
        ("distance vector length", loc.distances.len()),
    ] {
        if actual != n {
            return Err(Error::DimMismatch {
                context,
                expected: n,
                actual,
            });
        }
    }
    let mut data = Vec::with_capacity(CHANNELS * n);
    data.extend(v.iter().map(|z| z.re));
    data.extend(v.iter().map(|z| z.im));
    data.extend(std::iter::repeat_n(loc.x, n));
    data.extend(std::iter::repeat_n(loc.y, n));
    data.extend_from_slice(&loc.distances);
    if let Some(st) = stats {
        for (c, plane) in data.chunks_exact_mut(n).enumerate() {
            for x in plane {
                *x = st.apply(c, *x);
            }
        }
    }
    Ok(FeatureTensor { n1, n2, data })
}

/// Standardized planes precomputed per codeword and per location, so a
/// sample tensor is assembled by two copies.
pub(crate) struct FeatureCache {
    n: usize,
    codeword_planes: Vec<f64>,
    location_planes: Vec<f64>,
    slot: HashMap<u64, usize>,
}

impl FeatureCache {
    pub fn new(cb: &Codebook, stats: &NormStats) -> Self {
        let n = cb.len();
        let mut codeword_planes = Vec::with_capacity(2 * n * n);
        for v in cb.iter() {
            codeword_planes.extend(v.iter().map(|z| stats.apply(0, z.re)));
            codeword_planes.extend(v.iter().map(|z| stats.apply(1, z.im)));
        }
        Self {
            n,
            codeword_planes,
            location_planes: Vec::new(),
            slot: HashMap::new(),
        }
    }

    pub fn add_location(
        &mut self,
        id: u64,
        loc: &LocationFeatures,
        stats: &NormStats,
    ) -> Result<usize> {
        if let Some(&s) = self.slot.get(&id) {
            return Ok(s);
        }
        if loc.distances.len() != self.n {
            return Err(Error::DimMismatch {
                context: "distance vector length",
                expected: self.n,
                actual: loc.distances.len(),
            });
        }
        let s = self.slot.len();
        let (x, y) = (stats.apply(2, loc.x), stats.apply(3, loc.y));
        self.location_planes.extend(std::iter::repeat_n(x, self.n));
        self.location_planes.extend(std::iter::repeat_n(y, self.n));
        self.location_planes
            .extend(loc.distances.iter().map(|&d| stats.apply(4, d)));
        self.slot.insert(id, s);
        Ok(s)
    }

    pub fn clear_locations(&mut self) {
        self.location_planes.clear();
        self.slot.clear();
    }

    /// Writes the tensor for (location slot, codeword) into `out`.
    pub fn fill(&self, slot: usize, codeword: usize, out: &mut [f64]) {
        let n = self.n;
        out[..2 * n]
            .copy_from_slice(&self.codeword_planes[codeword * 2 * n..(codeword + 1) * 2 * n]);
        out[2 * n..].copy_from_slice(&self.location_planes[slot * 3 * n..(slot + 1) * 3 * n]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::dft_codebook;
    use crate::dataset::{flatten, LocationRecord};

    fn loc(x: f64, y: f64, n: usize) -> LocationFeatures {
        LocationFeatures {
            x,
            y,
            distances: (0..n).map(|i| 4.0 + 0.1 * i as f64 + x).collect(),
        }
    }

    #[test]
    fn dc_codeword_planes() {
        let cb = dft_codebook(2, 3);
        let t = featurize(&loc(3.0, -1.5, 6), cb.codeword(0), 2, 3, None).unwrap();
        assert!(t.plane(0).iter().all(|&v| v == 1.0));
        assert!(t.plane(1).iter().all(|&v| v == 0.0));
        assert!(t.plane(2).iter().all(|&v| v == 3.0));
        assert!(t.plane(3).iter().all(|&v| v == -1.5));
        assert_eq!(t.plane(4), &loc(3.0, -1.5, 6).distances[..]);
    }

    #[test]
    fn dimension_checks() {
        let cb = dft_codebook(2, 2);
        assert!(featurize(&loc(0.0, 0.0, 3), cb.codeword(1), 2, 2, None).is_err());
        assert!(featurize(&loc(0.0, 0.0, 4), cb.codeword(1), 2, 3, None).is_err());
    }

    #[test]
    fn standardized_moments() {
        let cb = dft_codebook(2, 2);
        let records: Vec<LocationRecord> = (0..7)
            .map(|i| LocationRecord {
                id: i,
                features: loc(i as f64 * 0.7, 2.0 - i as f64 * 0.3, 4),
                rates: vec![0.0; 4],
                opt_index: 0,
                top3: vec![0, 1, 2],
            })
            .collect();
        let refs: Vec<_> = records.iter().collect();
        let samples = flatten(&refs);
        let stats = NormStats::from_samples(&samples, &cb).unwrap();
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let mut count = 0.0;
        for s in &samples {
            let t = featurize(s.features, cb.codeword(s.codeword), 2, 2, Some(&stats)).unwrap();
            for c in 0..CHANNELS {
                sum[c] += t.plane(c).iter().sum::<f64>();
                sq[c] += t.plane(c).iter().map(|v| v * v).sum::<f64>();
            }
            count += 4.0;
        }
        for c in 0..CHANNELS {
            assert!((sum[c] / count).abs() < 1e-12, "mean of channel {c}");
            // a 2x2 DFT codebook has no imaginary parts; constant planes stay at zero
            let want = if stats.std[c] == STD_FLOOR { 0.0 } else { 1.0 };
            assert!(
                (sq[c] / count - want).abs() < 1e-9,
                "variance of channel {c}"
            );
        }
    }

    #[test]
    fn cache_matches_featurize() {
        let cb = dft_codebook(2, 4);
        let stats = NormStats {
            mean: [0.1, -0.2, 1.0, 2.0, 5.0],
            std: [0.9, 0.8, 2.0, 3.0, 1.5],
        };
        let mut cache = FeatureCache::new(&cb, &stats);
        let l = loc(1.5, 2.5, 8);
        let slot = cache.add_location(7, &l, &stats).unwrap();
        assert_eq!(cache.add_location(7, &l, &stats).unwrap(), slot);
        let mut buf = vec![0.0; CHANNELS * 8];
        for p in 0..8 {
            cache.fill(slot, p, &mut buf);
            let t = featurize(&l, cb.codeword(p), 2, 4, Some(&stats)).unwrap();
            assert_eq!(buf, t.data);
        }
    }
}
