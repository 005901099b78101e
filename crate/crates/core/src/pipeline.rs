//! The experiment steps behind the command-line tool. Every step reads its
//! inputs from the run's output directory, writes its outputs atomically
//! and records them in `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{
    self, EvalReport, SubsetPoint, SweepSettings, SweepTable, REFERENCE_TRAJECTORY,
    SUBSET_FRACTIONS,
};
use crate::geometry::Scenario;
use crate::hash::Hash32;
use crate::surrogate::{self, ModelConfig, SurrogateModel, TrainReport};

pub const CONFIG_FILE: &str = "config.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const CODEBOOK_FILE: &str = "codebook.csv";
pub const DATASET_FILE: &str = "dataset.bin";
pub const DATASET_CSV: &str = "dataset.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const REPORT_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".envtwin.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Scenario,
    Dataset,
    Train,
    Eval,
    Sweep,
    Report,
}

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::Scenario => "scenario",
            Step::Dataset => "dataset",
            Step::Train => "train",
            Step::Eval => "eval",
            Step::Sweep => "sweep",
            Step::Report => "report",
        }
    }
}

/// JSON artifact body tagged with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamped<T> {
    pub config_hash: Hash32,
    pub seed: u64,
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub sha256: Hash32,
    pub step: String,
    pub config_hash: Hash32,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub n_train: usize,
    pub report: EvalReport,
    pub nested_subsets: Vec<SubsetPoint>,
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_artifact(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        kind: "json artifact",
        reason: format!("{}: {e}", path.display()),
    })
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable artifact");
    s.push('\n');
    s.into_bytes()
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One step's view of the output directory.
struct Run<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    step: Step,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn open(cfg: &'a RunConfig, step: Step) -> Result<Self> {
        let dir = cfg.output_dir.as_path();
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            read_json(&path)?
        } else {
            Manifest::default()
        };
        Ok(Self {
            cfg,
            dir,
            step,
            manifest,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        self.manifest.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                sha256: Hash32::of_bytes(bytes),
                step: self.step.name().to_string(),
                config_hash: self.cfg.hash(),
                seed: self.cfg.seed,
            },
        );
        Ok(())
    }

    fn write_stamped<T: Serialize>(&mut self, name: &str, body: T) -> Result<()> {
        let stamped = Stamped {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            body,
        };
        self.write(name, &pretty(&stamped))
    }

    fn finish(mut self) -> Result<()> {
        self.write(CONFIG_FILE, self.cfg.to_json_pretty().as_bytes())?;
        let bytes = pretty(&self.manifest);
        write_atomic(&self.path(MANIFEST_FILE), &bytes)
    }

    fn codebook(&self) -> Codebook {
        let ris = &self.cfg.scenario.ris;
        Codebook::from_config(ris.n1, ris.n2, &self.cfg.codebook)
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let ds = dataset::decode(&read_artifact(&self.path(DATASET_FILE))?)?;
        let cb = self.codebook();
        let expected = (
            Hash32::of_json(&self.cfg.scenario),
            cb.hash(),
            Hash32::of_json(&self.cfg.channel),
        );
        if (ds.scenario_hash, ds.codebook_hash, ds.channel_hash) != expected {
            return Err(Error::Config(format!(
                "{DATASET_FILE} was built from a different scenario, channel or codebook; rerun `dataset`"
            )));
        }
        Ok(ds)
    }
}

fn model_config(cfg: &RunConfig) -> ModelConfig {
    ModelConfig {
        seed: cfg.seed,
        ..cfg.model.clone()
    }
}

fn partition(ds: &Dataset, tag: SplitTag) -> Vec<&dataset::LocationRecord> {
    ds.records
        .iter()
        .zip(&ds.tags)
        .filter(|(_, t)| **t == tag)
        .map(|(r, _)| r)
        .collect()
}

/// Runs one step under the directory lock.
pub fn run_step(cfg: &RunConfig, step: Step) -> Result<()> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let mut run = Run::open(cfg, step)?;
    log::info!("{}: config {} seed {}", step.name(), cfg.hash(), cfg.seed);
    match step {
        Step::Scenario => scenario_step(&mut run)?,
        Step::Dataset => dataset_step(&mut run)?,
        Step::Train => train_step(&mut run)?,
        Step::Eval => eval_step(&mut run)?,
        Step::Sweep => sweep_step(&mut run)?,
        Step::Report => report_step(&mut run)?,
    }
    run.finish()
}

/// `scenario`, `dataset`, `train`, `eval` and `report` in order.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    for step in [
        Step::Scenario,
        Step::Dataset,
        Step::Train,
        Step::Eval,
        Step::Report,
    ] {
        run_step(cfg, step)?;
    }
    Ok(())
}

fn scenario_step(run: &mut Run) -> Result<()> {
    let sc = &run.cfg.scenario;
    let bytes = pretty(sc);
    run.write(SCENARIO_FILE, &bytes)?;
    let csv = run.codebook().to_csv();
    run.write(CODEBOOK_FILE, csv.as_bytes())?;
    log::info!("scenario hash {}", Hash32::of_json(sc));
    Ok(())
}

fn dataset_step(run: &mut Run) -> Result<()> {
    let saved: Scenario = read_json(&run.path(SCENARIO_FILE))?;
    if saved != run.cfg.scenario {
        return Err(Error::Config(format!(
            "{SCENARIO_FILE} differs from the config; rerun `scenario`"
        )));
    }
    let cfg = run.cfg;
    let cb = run.codebook();
    let mut ds = dataset::build(&cfg.scenario, &cfg.channel, &cb)?;
    let n_val = eval::val_count(cfg.eval.n_train, cfg.eval.val_fraction);
    let parts = dataset::split(&ds, cfg.eval.n_train - n_val, n_val, cfg.seed)?;
    ds.apply_split(&parts);
    ds.seed = cfg.seed;
    log::info!(
        "dataset: {} locations, {} train / {} val / {} test",
        ds.len(),
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    );
    run.write(DATASET_FILE, &dataset::encode(&ds))?;
    run.write(DATASET_CSV, dataset::to_csv(&ds).as_bytes())
}

fn train_step(run: &mut Run) -> Result<()> {
    let ds = run.load_dataset()?;
    let cb = run.codebook();
    let train = partition(&ds, SplitTag::Train);
    let val = partition(&ds, SplitTag::Val);
    let (model, report) = surrogate::train(
        &dataset::flatten(&train),
        &dataset::flatten(&val),
        &cb,
        &model_config(run.cfg),
    )?;
    log::info!(
        "trained {} epochs (best {}), val mse {:.6}, {:.1}s",
        report.stopping_epoch,
        report.best_epoch,
        report.val_mse[report.best_epoch - 1],
        report.wall_time_s
    );
    run.write(MODEL_FILE, &surrogate::encode_model(&model))?;
    run.write_stamped(TRAIN_REPORT_FILE, report)
}

fn eval_step(run: &mut Run) -> Result<()> {
    let model = surrogate::decode_model(&read_artifact(&run.path(MODEL_FILE))?)?;
    let ds = run.load_dataset()?;
    if model.config != model_config(run.cfg) {
        return Err(Error::Config(format!(
            "{MODEL_FILE} was trained with a different model config; rerun `train`"
        )));
    }
    let cb = run.codebook();
    let test = partition(&ds, SplitTag::Test);
    let pred = eval::recommend_all(&model, &test, &cb)?;
    let seed = run.cfg.seed;
    let report = eval::report(&pred, &test, vec![seed], seed, run.cfg.eval.baseline_trials)?;
    let nested_subsets = eval::nested_subsets(&pred, &test, &SUBSET_FRACTIONS, seed)?;
    log::info!(
        "eval on {} locations: recov {:.4}, top1 {:.4}, top3 {:.4}, baseline {:.4}",
        report.u_test,
        report.recov_ar_avg,
        report.top1_acc,
        report.top3_acc,
        report.baseline_recov_ar
    );
    let csv = format!(
        "size,seed,top1,top3,recov,baseline\n{},{},{:?},{:?},{:?},{:?}\n",
        run.cfg.eval.n_train,
        seed,
        report.top1_acc,
        report.top3_acc,
        report.recov_ar_avg,
        report.baseline_recov_ar
    );
    run.write(EVAL_CSV, csv.as_bytes())?;
    run.write_stamped(
        EVAL_FILE,
        EvalOutput {
            n_train: run.cfg.eval.n_train,
            report,
            nested_subsets,
        },
    )
}

fn sweep_step(run: &mut Run) -> Result<()> {
    let ds = run.load_dataset()?;
    let cb = run.codebook();
    let e = &run.cfg.eval;
    let settings = SweepSettings {
        sizes: e.sweep_sizes.clone(),
        seeds: e.sweep_seeds.clone(),
        val_fraction: e.val_fraction,
        baseline_trials: e.baseline_trials,
    };
    let table = eval::sweep(&ds, &cb, &run.cfg.model, &settings)?;
    for p in &table.points {
        log::info!(
            "size {}: recov {:.4} (min {:.4}, max {:.4})",
            p.size,
            p.recov_mean,
            p.recov_min,
            p.recov_max
        );
    }
    run.write(SWEEP_CSV, table.to_csv().as_bytes())?;
    run.write_stamped(SWEEP_FILE, table)
}

fn report_step(run: &mut Run) -> Result<()> {
    let eval_path = run.path(EVAL_FILE);
    let sweep_path = run.path(SWEEP_FILE);
    if !eval_path.exists() && !sweep_path.exists() {
        return Err(Error::MissingArtifact(eval_path));
    }
    let mut md = String::new();
    writeln!(md, "# Run report\n").unwrap();
    writeln!(md, "- config hash: `{}`", run.cfg.hash()).unwrap();
    writeln!(md, "- seed: {}", run.cfg.seed).unwrap();
    let sc = &run.cfg.scenario;
    writeln!(
        md,
        "- panel: {}x{} elements, {} subcarriers, {} receiver locations\n",
        sc.ris.n1,
        sc.ris.n2,
        sc.num_subcarriers,
        sc.rx_grid.len()
    )
    .unwrap();
    if eval_path.exists() {
        let out: Stamped<EvalOutput> = read_json(&eval_path)?;
        let r = &out.body.report;
        writeln!(
            md,
            "## Held-out evaluation ({} training locations)\n",
            out.body.n_train
        )
        .unwrap();
        writeln!(md, "| metric | value |\n|---|---|").unwrap();
        for (k, v) in [
            ("test locations", r.u_test as f64),
            ("top-1 accuracy", r.top1_acc),
            ("top-3 accuracy", r.top3_acc),
            ("recovered rate", r.recov_ar_avg),
            (
                "mean rate, predicted codeword (bits/s/Hz)",
                r.mean_predicted_choice_rate,
            ),
            (
                "mean rate, optimal codeword (bits/s/Hz)",
                r.mean_optimal_rate,
            ),
            ("recovered rate, random codeword", r.baseline_recov_ar),
            ("zero-rate locations excluded", r.dead_zones as f64),
        ] {
            writeln!(md, "| {k} | {v:.4} |").unwrap();
        }
        writeln!(
            md,
            "\n| test subset | locations | recovered rate |\n|---|---|---|"
        )
        .unwrap();
        for p in &out.body.nested_subsets {
            writeln!(
                md,
                "| {:.0}% | {} | {:.4} |",
                p.fraction * 100.0,
                p.locations,
                p.recov
            )
            .unwrap();
        }
        writeln!(md).unwrap();
    }
    if sweep_path.exists() {
        let out: Stamped<SweepTable> = read_json(&sweep_path)?;
        writeln!(md, "## Training-size sweep\n").unwrap();
        writeln!(md, "| training locations | runs | top-1 | top-3 | recovered (mean) | recovered (min..max) | random |").unwrap();
        writeln!(md, "|---|---|---|---|---|---|---|").unwrap();
        for p in &out.body.points {
            writeln!(
                md,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4}..{:.4} | {:.4} |",
                p.size,
                p.runs,
                p.top1_mean,
                p.top3_mean,
                p.recov_mean,
                p.recov_min,
                p.recov_max,
                p.baseline_mean
            )
            .unwrap();
        }
        writeln!(
            md,
            "\nReference trajectory from a ray-traced street scene (qualitative only):\n"
        )
        .unwrap();
        writeln!(md, "| training locations | recovered rate |\n|---|---|").unwrap();
        for (size, recov) in REFERENCE_TRAJECTORY {
            writeln!(md, "| {size} | {recov:.2} |").unwrap();
        }
    }
    run.write(REPORT_FILE, md.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifySummary {
    pub checked: usize,
    pub problems: Vec<String>,
}

/// Re-hashes every artifact in the manifest and checks that stamped and
/// binary artifacts agree with their manifest entry.
pub fn verify(dir: &Path) -> Result<VerifySummary> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut problems = Vec::new();
    for (name, entry) in &manifest.artifacts {
        let path = dir.join(name);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        if Hash32::of_bytes(&bytes) != entry.sha256 {
            problems.push(format!("{name}: content hash differs from manifest"));
            continue;
        }
        if let Err(p) = check_embedded(name, &bytes, entry) {
            problems.push(format!("{name}: {p}"));
        }
    }
    Ok(VerifySummary {
        checked: manifest.artifacts.len(),
        problems,
    })
}

fn check_embedded(
    name: &str,
    bytes: &[u8],
    entry: &ArtifactEntry,
) -> std::result::Result<(), String> {
    let stamp_ok = |hash: Hash32, seed: u64| {
        if (hash, seed) == (entry.config_hash, entry.seed) {
            Ok(())
        } else {
            Err("embedded config hash or seed differs from manifest".to_string())
        }
    };
    match name {
        TRAIN_REPORT_FILE | EVAL_FILE | SWEEP_FILE => {
            let v: Stamped<serde_json::Value> =
                serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
            stamp_ok(v.config_hash, v.seed)
        }
        CONFIG_FILE => {
            let cfg =
                crate::config::parse(std::str::from_utf8(bytes).map_err(|e| e.to_string())?, &[])
                    .map_err(|e| e.to_string())?;
            stamp_ok(cfg.hash(), cfg.seed)
        }
        DATASET_FILE => {
            let ds = dataset::decode(bytes).map_err(|e| e.to_string())?;
            if ds.seed == entry.seed {
                Ok(())
            } else {
                Err("embedded seed differs from manifest".into())
            }
        }
        MODEL_FILE => {
            let m: SurrogateModel = surrogate::decode_model(bytes).map_err(|e| e.to_string())?;
            if m.config.seed == entry.seed {
                Ok(())
            } else {
                Err("embedded seed differs from manifest".into())
            }
        }
        _ => Ok(()),
    }
}

/// Convenience used by tests and the CLI: loads the eval artifact.
pub fn load_eval(dir: &Path) -> Result<Stamped<EvalOutput>> {
    read_json(&dir.join(EVAL_FILE))
}

/// Training report of the last `train` step.
pub fn load_train_report(dir: &Path) -> Result<Stamped<TrainReport>> {
    read_json(&dir.join(TRAIN_REPORT_FILE))
}
