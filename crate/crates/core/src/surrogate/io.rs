//! Model file layout (all integers and floats little-endian):
//!
//! ```text
//! magic "ETWM" | version u32 | config hash [32] | config json len u64 | config json
//! n1 u64 | n2 u64 | mean f64 x5 | std f64 x5
//! layer count u64 | per layer: kind u8, dims u64 x6
//! param count u64 | params f64 x count
//! ```

use super::features::{NormStats, CHANNELS};
use super::{ModelConfig, SurrogateModel};
use crate::binio::{LeReader, LeWriter};
use crate::error::Result;
use crate::hash::Hash32;

const MAGIC: &[u8; 4] = b"ETWM";
const VERSION: u32 = 1;

pub fn encode_model(model: &SurrogateModel) -> Vec<u8> {
    let config_json = serde_json::to_vec(&model.config).expect("serializable config");
    let mut w = LeWriter::new();
    w.bytes(MAGIC)
        .u32(VERSION)
        .bytes(&model.config_hash().0)
        .u64(config_json.len() as u64)
        .bytes(&config_json)
        .u64(model.n1 as u64)
        .u64(model.n2 as u64)
        .f64s(&model.stats.mean)
        .f64s(&model.stats.std)
        .u64(model.network().layers.len() as u64);
    for layer in &model.network().layers {
        let (kind, dims) = layer.descriptor();
        w.u8(kind);
        for d in dims {
            w.u64(d);
        }
    }
    w.u64(model.params.len() as u64).f64s(&model.params);
    w.finish()
}

pub fn decode_model(bytes: &[u8]) -> Result<SurrogateModel> {
    let mut r = LeReader::new(bytes, "model");
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let hash = Hash32(r.array32()?);
    let json_len = r.len(1)?;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| r.error(format!("embedded config: {e}")))?;
    if config.hash() != hash {
        return Err(r.error("config hash does not match embedded config"));
    }
    let n1 = r.u64()? as usize;
    let n2 = r.u64()? as usize;
    let mut stats = NormStats::identity();
    for c in 0..CHANNELS {
        stats.mean[c] = r.f64()?;
    }
    for c in 0..CHANNELS {
        stats.std[c] = r.f64()?;
    }
    if stats.mean.iter().chain(&stats.std).any(|v| !v.is_finite())
        || stats.std.iter().any(|&s| s <= 0.0)
    {
        return Err(r.error("invalid normalization statistics"));
    }
    let net = config.network(n1, n2);
    let layers = r.len(49)?;
    if layers != net.layers.len() {
        return Err(r.error(format!(
            "file has {layers} layers, config builds {}",
            net.layers.len()
        )));
    }
    for (i, layer) in net.layers.iter().enumerate() {
        let kind = r.u8()?;
        let mut dims = [0u64; 6];
        for d in &mut dims {
            *d = r.u64()?;
        }
        if (kind, dims) != layer.descriptor() {
            return Err(r.error(format!("layer {i} dimensions differ from config")));
        }
    }
    let count = r.len(8)?;
    let params = r.f64s(count)?;
    r.finish()?;
    SurrogateModel::new(config, n1, n2, stats, params)
}
