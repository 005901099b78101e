//! Cascaded channel, per-codeword achievable rate and the exhaustive-search
//! labelling oracle.

use num_complex::Complex64;

use crate::channel::{CMatrix, FreqChannel};
use crate::codebook::Codebook;
use crate::error::{Error, Result};

/// `K x N` matrix whose row `k` is `h_R[k] ⊙ h_T[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveChannel(pub CMatrix);

impl EffectiveChannel {
    pub fn subcarriers(&self) -> usize {
        self.0.rows()
    }

    pub fn elements(&self) -> usize {
        self.0.cols()
    }

    /// Received amplitude `psi_k^T v` at subcarrier `k`.
    pub fn gain(&self, k: usize, v: &[Complex64]) -> Complex64 {
        self.0.row(k).iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

pub fn effective_channel(h_r: &FreqChannel, h_t: &FreqChannel) -> Result<EffectiveChannel> {
    for (context, expected, actual) in [
        ("effective channel subcarriers", h_t.rows(), h_r.rows()),
        ("effective channel elements", h_t.cols(), h_r.cols()),
    ] {
        if expected != actual {
            return Err(Error::DimMismatch {
                context,
                expected,
                actual,
            });
        }
    }
    let data = h_r
        .as_slice()
        .iter()
        .zip(h_t.as_slice())
        .map(|(r, t)| r * t)
        .collect();
    Ok(EffectiveChannel(CMatrix::from_vec(
        h_r.rows(),
        h_r.cols(),
        data,
    )?))
}

/// `h_R^T diag(v) h_T` evaluated by forming the diagonal reflection matrix
/// explicitly. Quadratic in `N`; used to cross-check [`EffectiveChannel::gain`].
pub fn received_gain_diag(h_r: &[Complex64], v: &[Complex64], h_t: &[Complex64]) -> Complex64 {
    let n = v.len();
    let mut theta = vec![Complex64::new(0.0, 0.0); n * n];
    for (i, &vi) in v.iter().enumerate() {
        theta[i * n + i] = vi;
    }
    let reflected: Vec<Complex64> = (0..n)
        .map(|row| (0..n).map(|col| theta[row * n + col] * h_t[col]).sum())
        .collect();
    h_r.iter().zip(&reflected).map(|(a, b)| a * b).sum()
}

/// Average spectral efficiency in bits/s/Hz over the rows of `psi`, with the
/// power budget split evenly over `total_subcarriers`.
pub fn achievable_rate(
    psi: &EffectiveChannel,
    v: &[Complex64],
    snr_budget: f64,
    total_subcarriers: usize,
) -> f64 {
    let k = psi.subcarriers();
    if k == 0 {
        return 0.0;
    }
    let per_tone = snr_budget / total_subcarriers as f64;
    let sum: f64 = (0..k)
        .map(|kk| (1.0 + per_tone * psi.gain(kk, v).norm_sqr()).log2())
        .sum();
    sum / k as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub rates: Vec<f64>,
    /// Codeword indices by descending rate, ties to the lower index.
    pub ranking: Vec<usize>,
}

impl RateTable {
    pub fn from_rates(rates: Vec<f64>) -> Self {
        let ranking = rank_descending(&rates);
        Self { rates, ranking }
    }

    pub fn argmax(&self) -> usize {
        self.ranking[0]
    }

    pub fn best_rate(&self) -> f64 {
        self.rates[self.argmax()]
    }

    /// First `k` ranks (fewer if the codebook is smaller).
    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

/// Indices sorted by descending value, lowest index first among equals.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn exhaustive_search(
    psi: &EffectiveChannel,
    cb: &Codebook,
    snr_budget: f64,
    total_subcarriers: usize,
) -> Result<RateTable> {
    if cb.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    if cb.len() != psi.elements() {
        return Err(Error::DimMismatch {
            context: "codeword length vs effective channel",
            expected: psi.elements(),
            actual: cb.len(),
        });
    }
    let rates = cb
        .iter()
        .map(|v| achievable_rate(psi, v, snr_budget, total_subcarriers))
        .collect();
    Ok(RateTable::from_rates(rates))
}
