//! DFT reflection codebook for a uniform planar RIS.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::hash::Hash32;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    n1: usize,
    n2: usize,
    quant_bits: Option<u32>,
    /// `len() * len()` entries; codeword `c` occupies `[c * n .. (c + 1) * n]`.
    entries: Vec<Complex64>,
}

/// Codebook block of a run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    /// Phase resolution in bits; `None` keeps the exact DFT phases.
    #[serde(default)]
    pub quant_bits: Option<u32>,
}

impl Codebook {
    pub fn from_config(n1: usize, n2: usize, cfg: &CodebookConfig) -> Self {
        let cb = dft_codebook(n1, n2);
        match cfg.quant_bits {
            Some(b) => quantize_phases(&cb, b),
            None => cb,
        }
    }

    /// Number of codewords (equal to the element count).
    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    pub fn quant_bits(&self) -> Option<u32> {
        self.quant_bits
    }

    pub fn codeword(&self, idx: usize) -> &[Complex64] {
        let n = self.len();
        &self.entries[idx * n..(idx + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Complex64]> {
        self.entries.chunks_exact(self.len().max(1))
    }

    pub fn hash(&self) -> Hash32 {
        let mut bytes = Vec::with_capacity(16 + self.entries.len() * 16);
        bytes.extend_from_slice(&(self.n1 as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.n2 as u64).to_le_bytes());
        bytes.extend_from_slice(&self.quant_bits.map_or(0u32, |b| b + 1).to_le_bytes());
        for z in &self.entries {
            bytes.extend_from_slice(&z.re.to_le_bytes());
            bytes.extend_from_slice(&z.im.to_le_bytes());
        }
        Hash32::of_bytes(&bytes)
    }

    /// `codeword,element,re,im` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("codeword,element,re,im\n");
        for (c, cw) in self.iter().enumerate() {
            for (e, z) in cw.iter().enumerate() {
                writeln!(out, "{c},{e},{:?},{:?}", z.re, z.im).unwrap();
            }
        }
        out
    }
}

fn dft_entry(a: usize, p: usize, n: usize) -> Complex64 {
    let m = (a * p) % n;
    if m == 0 {
        return Complex64::new(1.0, 0.0);
    }
    Complex64::from_polar(1.0, -TAU * m as f64 / n as f64)
}

/// Kronecker product of `n1`- and `n2`-point DFT beams. Codeword `a * n2 + b`
/// has entry `p * n2 + q` equal to `exp(-j 2 pi (a p / n1 + b q / n2))`.
pub fn dft_codebook(n1: usize, n2: usize) -> Codebook {
    let n = n1 * n2;
    let mut entries = Vec::with_capacity(n * n);
    for a in 0..n1 {
        for b in 0..n2 {
            for p in 0..n1 {
                for q in 0..n2 {
                    entries.push(dft_entry(a, p, n1) * dft_entry(b, q, n2));
                }
            }
        }
    }
    Codebook {
        n1,
        n2,
        quant_bits: None,
        entries,
    }
}

/// Snaps a phase to the nearest multiple of `step`, ties toward zero.
fn snap_phase(phase: f64, step: f64) -> f64 {
    let m = phase / step;
    let r = if (m - m.trunc()).abs() == 0.5 {
        m.trunc()
    } else {
        m.round()
    };
    r * step
}

/// Projects every entry onto the `2^bits` phase grid with unit magnitude.
pub fn quantize_phases(cb: &Codebook, bits: u32) -> Codebook {
    assert!(bits >= 1, "quantization needs at least one bit");
    let step = 2.0 * PI / 2f64.powi(bits as i32);
    let entries = cb
        .entries
        .iter()
        .map(|z| Complex64::from_polar(1.0, snap_phase(z.arg(), step)))
        .collect();
    Codebook {
        entries,
        quant_bits: Some(bits),
        ..*cb
    }
}
