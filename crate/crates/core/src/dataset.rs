//! Per-location labelled datasets: features plus the achievable rate of
//! every codeword, location-level splits and persistence.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{LeReader, LeWriter};
use crate::channel::{ChannelConfig, LinkSynthesizer, ScattererField};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::geometry::{location_features, rx_grid_points, LocationFeatures, Scenario};
use crate::hash::Hash32;
use crate::oracle::{effective_channel, exhaustive_search, RateTable};

#[derive(Debug, Clone, PartialEq)]
pub struct LocationRecord {
    pub id: u64,
    pub features: LocationFeatures,
    pub rates: Vec<f64>,
    pub opt_index: usize,
    /// Best `min(3, N)` codewords, best first.
    pub top3: Vec<usize>,
}

impl LocationRecord {
    fn from_table(id: u64, features: LocationFeatures, table: RateTable) -> Self {
        let top3 = table.top(3).to_vec();
        Self {
            id,
            features,
            opt_index: table.argmax(),
            rates: table.rates,
            top3,
        }
    }

    pub fn best_rate(&self) -> f64 {
        self.rates[self.opt_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[repr(u8)]
pub enum SplitTag {
    #[default]
    Unassigned = 0,
    Train = 1,
    Val = 2,
    Test = 3,
}

impl SplitTag {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Unassigned,
            1 => Self::Train,
            2 => Self::Val,
            3 => Self::Test,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenario_hash: Hash32,
    pub codebook_hash: Hash32,
    pub channel_hash: Hash32,
    pub seed: u64,
    pub num_elements: usize,
    pub records: Vec<LocationRecord>,
    pub tags: Vec<SplitTag>,
}

impl Dataset {
    /// Identity of the generating configuration.
    pub fn config_hash(&self) -> Hash32 {
        let mut bytes = Vec::with_capacity(104);
        bytes.extend_from_slice(&self.scenario_hash.0);
        bytes.extend_from_slice(&self.codebook_hash.0);
        bytes.extend_from_slice(&self.channel_hash.0);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        Hash32::of_bytes(&bytes)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn apply_split(&mut self, split: &Split) {
        self.tags = vec![SplitTag::Unassigned; self.records.len()];
        for (list, tag) in [
            (&split.train, SplitTag::Train),
            (&split.val, SplitTag::Val),
            (&split.test, SplitTag::Test),
        ] {
            for &i in list {
                self.tags[i] = tag;
            }
        }
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&LocationRecord> {
        indices.iter().map(|&i| &self.records[i]).collect()
    }
}

/// Labels every grid location by exhaustive search over `cb`.
pub fn build(scenario: &Scenario, channel: &ChannelConfig, cb: &Codebook) -> Result<Dataset> {
    scenario.validate()?;
    channel.validate(scenario)?;
    let n = scenario.ris.num_elements();
    if cb.len() != n || cb.dims() != (scenario.ris.n1, scenario.ris.n2) {
        return Err(Error::DimMismatch {
            context: "codebook size vs RIS elements",
            expected: n,
            actual: cb.len(),
        });
    }
    let field = ScattererField::generate(scenario, channel);
    let synth = LinkSynthesizer {
        scenario,
        config: channel,
        field: &field,
    };
    let h_t = synth.link(scenario.tx_m)?;
    let lambda = scenario.wavelength_m();
    let k = scenario.num_subcarriers;

    let records = rx_grid_points(scenario)
        .into_par_iter()
        .enumerate()
        .map(|(id, rx)| {
            let features = location_features(rx, &scenario.ris, lambda, scenario.feature_mode)?;
            let psi = effective_channel(&synth.link(rx)?, &h_t)?;
            let table = exhaustive_search(&psi, cb, scenario.snr_budget_linear, k)?;
            Ok(LocationRecord::from_table(id as u64, features, table))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        scenario_hash: Hash32::of_json(scenario),
        codebook_hash: cb.hash(),
        channel_hash: Hash32::of_json(channel),
        seed: scenario.seed,
        num_elements: n,
        tags: vec![SplitTag::Unassigned; records.len()],
        records,
    })
}

/// Record indices per partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Location-level random split; every location lands in exactly one partition.
pub fn split(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<Split> {
    let total = ds.len();
    if n_train + n_val > total {
        return Err(Error::InsufficientRecords {
            requested: n_train + n_val,
            available: total,
        });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: sorted(&order[..n_train]),
        val: sorted(&order[n_train..n_train + n_val]),
        test: sorted(&order[n_train + n_val..]),
    })
}

/// One `(location, codeword) -> rate` regression sample.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub location_id: u64,
    pub features: &'a LocationFeatures,
    pub codeword: usize,
    pub rate: f64,
}

/// Expands locations into `|locations| * N` samples, location-major.
pub fn flatten<'a>(records: &[&'a LocationRecord]) -> Vec<Sample<'a>> {
    records
        .iter()
        .flat_map(|r| {
            r.rates.iter().enumerate().map(move |(p, &rate)| Sample {
                location_id: r.id,
                features: &r.features,
                codeword: p,
                rate,
            })
        })
        .collect()
}

const DATASET_MAGIC: &[u8; 4] = b"ETWD";
const DATASET_VERSION: u32 = 1;

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let n = ds.num_elements;
    let mut w = LeWriter::new();
    w.bytes(DATASET_MAGIC)
        .u32(DATASET_VERSION)
        .bytes(&ds.scenario_hash.0)
        .bytes(&ds.codebook_hash.0)
        .bytes(&ds.channel_hash.0)
        .u64(ds.seed)
        .u64(ds.records.len() as u64)
        .u64(n as u64);
    for (r, tag) in ds.records.iter().zip(&ds.tags) {
        w.u64(r.id)
            .u8(*tag as u8)
            .f64(r.features.x)
            .f64(r.features.y)
            .f64s(&r.features.distances)
            .f64s(&r.rates)
            .u64(r.opt_index as u64);
        for &t in &r.top3 {
            w.u64(t as u64);
        }
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = LeReader::new(bytes, "dataset");
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let scenario_hash = Hash32(r.array32()?);
    let codebook_hash = Hash32(r.array32()?);
    let channel_hash = Hash32(r.array32()?);
    let seed = r.u64()?;
    let count = r.len(1)?;
    let n = r.len(16)?;
    let top = n.min(3);
    let mut records = Vec::with_capacity(count);
    let mut tags = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let tag = r.u8()?;
        tags.push(SplitTag::from_u8(tag).ok_or_else(|| r.error(format!("bad split tag {tag}")))?);
        let x = r.f64()?;
        let y = r.f64()?;
        let distances = r.f64s(n)?;
        let rates = r.f64s(n)?;
        let opt_index = r.u64()? as usize;
        let top3 = (0..top)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if opt_index >= n || top3.iter().any(|&t| t >= n) {
            return Err(r.error(format!("codeword index out of range in record {id}")));
        }
        records.push(LocationRecord {
            id,
            features: LocationFeatures { x, y, distances },
            rates,
            opt_index,
            top3,
        });
    }
    r.finish()?;
    Ok(Dataset {
        scenario_hash,
        codebook_hash,
        channel_hash,
        seed,
        num_elements: n,
        records,
        tags,
    })
}

/// `location_id,x,y,codeword,rate` rows with a header line.
pub fn to_csv(ds: &Dataset) -> String {
    let mut out = String::from("location_id,x,y,codeword,rate\n");
    for r in &ds.records {
        for (p, rate) in r.rates.iter().enumerate() {
            writeln!(
                out,
                "{},{:?},{:?},{p},{:?}",
                r.id, r.features.x, r.features.y, rate
            )
            .unwrap();
        }
    }
    out
}
