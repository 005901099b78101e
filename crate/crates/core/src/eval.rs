//! Beam-selection metrics, the random-codeword baseline and training-size
//! sweeps.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::dataset::{flatten, split, Dataset, LocationRecord};
use crate::error::{Error, Result};
use crate::oracle::argmax;
use crate::surrogate::{train, ModelConfig, SurrogateModel};

fn check_len(pred: &[usize], records: &[&LocationRecord]) -> Result<()> {
    if pred.len() != records.len() {
        return Err(Error::DimMismatch {
            context: "predictions vs records",
            expected: records.len(),
            actual: pred.len(),
        });
    }
    Ok(())
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of locations whose predicted codeword is the optimal one.
pub fn top1(pred: &[usize], records: &[&LocationRecord]) -> Result<f64> {
    check_len(pred, records)?;
    let hits = pred
        .iter()
        .zip(records)
        .filter(|(p, r)| **p == r.opt_index)
        .count();
    Ok(fraction(hits, records.len()))
}

/// Fraction of locations whose predicted codeword is among the three best.
/// With fewer than three codewords this degrades to top-`N`.
pub fn top3(pred: &[usize], records: &[&LocationRecord]) -> Result<f64> {
    check_len(pred, records)?;
    if records.iter().any(|r| r.top3.len() < 3) {
        log::warn!("fewer than 3 codewords; top-3 accuracy uses every codeword");
    }
    let hits = pred
        .iter()
        .zip(records)
        .filter(|(p, r)| r.top3.contains(p))
        .count();
    Ok(fraction(hits, records.len()))
}

/// Mean of `rate[pred] / rate[opt]` over locations with a nonzero optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovered {
    pub mean: f64,
    /// Locations skipped because their optimal rate is zero.
    pub dead_zones: usize,
}

pub fn recovered_rate(pred: &[usize], records: &[&LocationRecord]) -> Result<Recovered> {
    check_len(pred, records)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (&p, r) in pred.iter().zip(records) {
        let best = r.best_rate();
        if best > 0.0 {
            sum += r.rates[p] / best;
            used += 1;
        }
    }
    let dead_zones = records.len() - used;
    if dead_zones > 0 {
        log::warn!("{dead_zones} locations with zero optimal rate excluded from recovered rate");
    }
    Ok(Recovered {
        mean: if used == 0 { 0.0 } else { sum / used as f64 },
        dead_zones,
    })
}

/// Recovered rate of uniformly random codewords, averaged over `trials`
/// independent draws per location.
pub fn random_baseline(records: &[&LocationRecord], seed: u64, trials: usize) -> f64 {
    assert!(trials >= 1, "random baseline needs at least one trial");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let pred: Vec<usize> = records
            .iter()
            .map(|r| rng.gen_range(0..r.rates.len()))
            .collect();
        total += recovered_rate(&pred, records).expect("aligned").mean;
    }
    total / trials as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub u_test: usize,
    pub top1_acc: f64,
    pub top3_acc: f64,
    pub recov_ar_avg: f64,
    pub mean_predicted_choice_rate: f64,
    pub mean_optimal_rate: f64,
    pub baseline_recov_ar: f64,
    pub dead_zones: usize,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn check_bounds(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.top1_acc)
            && (0.0..=1.0).contains(&self.top3_acc)
            && (0.0..=1.0).contains(&self.recov_ar_avg)
            && self.top1_acc <= self.top3_acc;
        if ok {
            Ok(())
        } else {
            Err(Error::Verify(format!("metric bounds violated: {self:?}")))
        }
    }
}

/// Scores predicted codeword indices against the oracle labels.
pub fn report(
    pred: &[usize],
    records: &[&LocationRecord],
    seeds: Vec<u64>,
    baseline_seed: u64,
    baseline_trials: usize,
) -> Result<EvalReport> {
    let recov = recovered_rate(pred, records)?;
    let u = records.len().max(1) as f64;
    let report = EvalReport {
        u_test: records.len(),
        top1_acc: top1(pred, records)?,
        top3_acc: top3(pred, records)?,
        recov_ar_avg: recov.mean,
        mean_predicted_choice_rate: pred
            .iter()
            .zip(records)
            .map(|(&p, r)| r.rates[p])
            .sum::<f64>()
            / u,
        mean_optimal_rate: records.iter().map(|r| r.best_rate()).sum::<f64>() / u,
        baseline_recov_ar: random_baseline(records, baseline_seed, baseline_trials),
        dead_zones: recov.dead_zones,
        seeds,
    };
    report.check_bounds()?;
    Ok(report)
}

/// Recommended codeword per location.
pub fn recommend_all(
    model: &SurrogateModel,
    records: &[&LocationRecord],
    cb: &Codebook,
) -> Result<Vec<usize>> {
    let locs: Vec<_> = records.iter().map(|r| &r.features).collect();
    model
        .predict_many(&locs, cb)?
        .iter()
        .map(|rates| argmax(rates).ok_or(Error::EmptyCodebook))
        .collect()
}

/// Recovered rate on growing nested subsets of the held-out locations: the
/// locations are shuffled once and each subset is a prefix of that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPoint {
    pub fraction: f64,
    pub locations: usize,
    pub recov: f64,
}

pub fn nested_subsets(
    pred: &[usize],
    records: &[&LocationRecord],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SubsetPoint>> {
    check_len(pred, records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(seed));
    fractions
        .iter()
        .map(|&f| {
            let take = ((records.len() as f64 * f).round() as usize).clamp(1, records.len());
            let idx = &order[..take];
            let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let r: Vec<&LocationRecord> = idx.iter().map(|&i| records[i]).collect();
            Ok(SubsetPoint {
                fraction: f,
                locations: take,
                recov: recovered_rate(&p, &r)?.mean,
            })
        })
        .collect()
}

pub const SUBSET_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Recovered rate versus training locations observed on a large ray-traced
/// street scene, reported next to sweep results as a qualitative reference.
pub const REFERENCE_TRAJECTORY: [(usize, f64); 4] =
    [(100, 0.80), (200, 0.82), (500, 0.87), (1000, 0.88)];

/// Validation locations carved out of a training budget of `size` locations.
pub fn val_count(size: usize, val_fraction: f64) -> usize {
    if size < 2 {
        return 0;
    }
    ((size as f64 * val_fraction).round() as usize).clamp(1, size - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub seed: u64,
    pub top1: f64,
    pub top3: f64,
    pub recov: f64,
    pub baseline: f64,
    pub best_epoch: usize,
    pub stopping_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub runs: usize,
    pub top1_mean: f64,
    pub top3_mean: f64,
    pub recov_mean: f64,
    pub recov_min: f64,
    pub recov_max: f64,
    pub baseline_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,seed,top1,top3,recov,baseline\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?}",
                r.size, r.seed, r.top1, r.top3, r.recov, r.baseline
            )
            .unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub val_fraction: f64,
    pub baseline_trials: usize,
}

/// One sweep run: split, train, evaluate on every held-out location.
pub fn run_point(
    ds: &Dataset,
    cb: &Codebook,
    model_cfg: &ModelConfig,
    size: usize,
    seed: u64,
    settings: &SweepSettings,
) -> Result<(SweepRow, SurrogateModel, Vec<usize>)> {
    let n_val = val_count(size, settings.val_fraction);
    let parts = split(ds, size - n_val, n_val, seed)?;
    let train_recs = ds.select(&parts.train);
    let val_recs = ds.select(&parts.val);
    let test_recs = ds.select(&parts.test);
    let cfg = ModelConfig {
        seed,
        ..model_cfg.clone()
    };
    let (model, tr) = train(&flatten(&train_recs), &flatten(&val_recs), cb, &cfg)?;
    let pred = recommend_all(&model, &test_recs, cb)?;
    let rep = report(
        &pred,
        &test_recs,
        vec![seed],
        seed,
        settings.baseline_trials,
    )?;
    log::info!(
        "size {size} seed {seed}: recov {:.4} top1 {:.3} top3 {:.3} baseline {:.4} (epochs {}, best {}, {:.1}s)",
        rep.recov_ar_avg,
        rep.top1_acc,
        rep.top3_acc,
        rep.baseline_recov_ar,
        tr.stopping_epoch,
        tr.best_epoch,
        tr.wall_time_s
    );
    let row = SweepRow {
        size,
        seed,
        top1: rep.top1_acc,
        top3: rep.top3_acc,
        recov: rep.recov_ar_avg,
        baseline: rep.baseline_recov_ar,
        best_epoch: tr.best_epoch,
        stopping_epoch: tr.stopping_epoch,
    };
    Ok((row, model, parts.test))
}

pub fn sweep(
    ds: &Dataset,
    cb: &Codebook,
    model_cfg: &ModelConfig,
    settings: &SweepSettings,
) -> Result<SweepTable> {
    if settings.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    for &size in &settings.sizes {
        if size < 2 || size >= ds.len() {
            return Err(Error::Config(format!(
                "sweep size {size} must leave validation and test locations (dataset has {})",
                ds.len()
            )));
        }
    }
    let jobs: Vec<(usize, u64)> = settings
        .sizes
        .iter()
        .flat_map(|&s| settings.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(size, seed)| run_point(ds, cb, model_cfg, size, seed, settings).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let points = settings
        .sizes
        .iter()
        .map(|&size| {
            let rs: Vec<_> = rows.iter().filter(|r| r.size == size).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&SweepRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepPoint {
                size,
                runs: rs.len(),
                top1_mean: mean(|r| r.top1),
                top3_mean: mean(|r| r.top3),
                recov_mean: mean(|r| r.recov),
                recov_min: rs.iter().map(|r| r.recov).fold(f64::INFINITY, f64::min),
                recov_max: rs.iter().map(|r| r.recov).fold(f64::NEG_INFINITY, f64::max),
                baseline_mean: mean(|r| r.baseline),
            }
        })
        .collect();
    Ok(SweepTable { rows, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LocationFeatures;
    use crate::oracle::RateTable;

    fn record(id: u64, rates: Vec<f64>) -> LocationRecord {
        let t = RateTable::from_rates(rates);
        LocationRecord {
            id,
            features: LocationFeatures {
                x: 0.0,
                y: 0.0,
                distances: vec![1.0; t.rates.len()],
            },
            opt_index: t.argmax(),
            top3: t.top(3).to_vec(),
            rates: t.rates,
        }
    }

    fn random_records(count: usize, n: usize, seed: u64) -> Vec<LocationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| record(i as u64, (0..n).map(|_| rng.gen_range(0.0..3.0)).collect()))
            .collect()
    }

    #[test]
    fn perfect_and_partial_accuracy() {
        let recs = random_records(4, 8, 1);
        let refs: Vec<_> = recs.iter().collect();
        let oracle: Vec<_> = recs.iter().map(|r| r.opt_index).collect();
        assert_eq!(top1(&oracle, &refs).unwrap(), 1.0);
        assert_eq!(top3(&oracle, &refs).unwrap(), 1.0);
        assert_eq!(recovered_rate(&oracle, &refs).unwrap().mean, 1.0);

        let mut three = oracle.clone();
        three[2] = recs[2].ranking_last();
        assert_eq!(top1(&three, &refs).unwrap(), 0.75);
        assert!(top1(&oracle[..3], &refs).is_err());
    }

    trait Last {
        fn ranking_last(&self) -> usize;
    }

    impl Last for LocationRecord {
        fn ranking_last(&self) -> usize {
            RateTable::from_rates(self.rates.clone())
                .ranking
                .last()
                .copied()
                .unwrap()
        }
    }

    #[test]
    fn second_best_predictor() {
        let recs = random_records(20, 6, 2);
        let refs: Vec<_> = recs.iter().collect();
        let pred: Vec<_> = recs.iter().map(|r| r.top3[1]).collect();
        assert_eq!(top1(&pred, &refs).unwrap(), 0.0);
        assert_eq!(top3(&pred, &refs).unwrap(), 1.0);
    }

    #[test]
    fn recovered_mean_of_ratios() {
        let recs = [record(0, vec![2.0, 1.0]), record(1, vec![0.6, 1.0])];
        let refs: Vec<_> = recs.iter().collect();
        assert!((recovered_rate(&[0, 0], &refs).unwrap().mean - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dead_zones_are_excluded() {
        let recs = [record(0, vec![0.0, 0.0]), record(1, vec![0.5, 1.0])];
        let refs: Vec<_> = recs.iter().collect();
        let r = recovered_rate(&[1, 0], &refs).unwrap();
        assert_eq!(r.dead_zones, 1);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn random_top3_rate() {
        let n = 16;
        let recs = random_records(10_000, n, 3);
        let refs: Vec<_> = recs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<_> = (0..recs.len()).map(|_| rng.gen_range(0..n)).collect();
        let p = 3.0 / n as f64;
        let sigma = (p * (1.0 - p) / recs.len() as f64).sqrt();
        assert!((top3(&pred, &refs).unwrap() - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn baseline_with_dominant_codeword() {
        let recs: Vec<_> = (0..4000)
            .map(|i| record(i, vec![0.0, 0.0, 1.0, 0.0]))
            .collect();
        let refs: Vec<_> = recs.iter().collect();
        let trials = 3;
        let got = random_baseline(&refs, 5, trials);
        let sigma = (0.25 * 0.75 / (4000 * trials) as f64).sqrt();
        assert!((got - 0.25).abs() < 3.0 * sigma, "{got}");
        let single: Vec<_> = (0..10).map(|i| record(i, vec![0.7])).collect();
        let refs: Vec<_> = single.iter().collect();
        assert_eq!(random_baseline(&refs, 1, 2), 1.0);
    }

    #[test]
    fn baseline_never_beats_oracle() {
        let recs = random_records(50, 8, 6);
        let refs: Vec<_> = recs.iter().collect();
        assert!(random_baseline(&refs, 7, 5) <= 1.0);
    }

    #[test]
    fn report_fields() {
        let recs = random_records(30, 4, 8);
        let refs: Vec<_> = recs.iter().collect();
        let pred: Vec<_> = recs.iter().map(|r| r.top3[2]).collect();
        let rep = report(&pred, &refs, vec![1, 2, 3], 0, 4).unwrap();
        assert_eq!(rep.u_test, 30);
        assert_eq!(rep.top1_acc, 0.0);
        assert_eq!(rep.top3_acc, 1.0);
        assert!(rep.recov_ar_avg < 1.0);
        assert!(rep.mean_predicted_choice_rate <= rep.mean_optimal_rate);
        rep.check_bounds().unwrap();
    }

    #[test]
    fn small_codebook_top3() {
        let recs = [record(0, vec![0.3, 0.9])];
        let refs: Vec<_> = recs.iter().collect();
        assert_eq!(top3(&[0], &refs).unwrap(), 1.0);
    }

    #[test]
    fn nested_subsets_are_prefixes() {
        let recs = random_records(40, 4, 9);
        let refs: Vec<_> = recs.iter().collect();
        let oracle: Vec<_> = recs.iter().map(|r| r.opt_index).collect();
        let pts = nested_subsets(&oracle, &refs, &SUBSET_FRACTIONS, 1).unwrap();
        assert_eq!(
            pts.iter().map(|p| p.locations).collect::<Vec<_>>(),
            vec![10, 20, 30, 40]
        );
        assert!(pts.iter().all(|p| p.recov == 1.0));
        let worst: Vec<_> = recs.iter().map(|r| r.ranking_last()).collect();
        let pts = nested_subsets(&worst, &refs, &[1.0], 1).unwrap();
        assert_eq!(pts[0].recov, recovered_rate(&worst, &refs).unwrap().mean);
    }

    #[test]
    fn validation_carve_out() {
        assert_eq!(val_count(50, 0.1), 5);
        assert_eq!(val_count(500, 0.1), 50);
        assert_eq!(val_count(3, 0.1), 1);
        assert_eq!(val_count(1, 0.1), 0);
    }
}
