//! The pipeline commands. Each writes its outputs plus one
//! `manifest.json` into an output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scalenas_core::data::{gen_synthetic, make_windows, make_windows_with_stats, SyntheticSpec};
use scalenas_core::metrics::Metrics;
use scalenas_core::train::{self, EpochReport};
use scalenas_core::{Ablation, DiscreteArchitecture, MtsDataset, Split, TrainConfig};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{CliError, Result};
use crate::files::{
    self, file_sha256, log_csv, matrix_csv, now_rfc3339, read_config, read_json, read_spec, write_bytes,
    write_json_checked, AdjacencyFile, FileRecord, RunManifest,
};
use crate::series::{default_names, load_csv, write_csv, LoadedSeries};

pub const MANIFEST: &str = "manifest.json";
pub const SERIES: &str = "series.csv";
pub const PLANTED: &str = "adjacency.json";
pub const SPEC: &str = "spec.json";
pub const ARCH: &str = "arch.json";
pub const CONFIG: &str = "config.toml";
pub const SEARCH_LOG: &str = "search_log.csv";
pub const SEARCH_CHECKPOINT: &str = "search_checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const METRICS: &str = "metrics.json";

/// Config sources shared by `search` and `train`, applied in field order
/// over the defaults.
#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub scales: Option<usize>,
    pub ablations: Vec<Ablation>,
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(k) = self.scales {
            cfg.set_scales(k)?;
        }
        for &a in &self.ablations {
            cfg.apply_ablation(a)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Model and baseline metrics on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub model: Metrics,
    pub persistence: Metrics,
}

struct Run {
    command: &'static str,
    started_at: String,
    seed: Option<u64>,
    config: Option<TrainConfig>,
    dataset_sha256: Option<String>,
    inputs: BTreeMap<String, FileRecord>,
    out: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        Ok(Self {
            command,
            started_at: now_rfc3339(),
            seed: None,
            config: None,
            dataset_sha256: None,
            inputs: BTreeMap::new(),
            out: out.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let rec = FileRecord::of(path)?;
        if role == "data" {
            self.dataset_sha256 = Some(rec.sha256.clone());
        }
        self.inputs.insert(role.to_string(), rec);
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn finish(self) -> Result<Vec<PathBuf>> {
        let outputs = self.outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            seed: self.seed,
            config: self.config,
            dataset_sha256: self.dataset_sha256,
            inputs: self.inputs,
            outputs,
            started_at: self.started_at,
            finished_at: now_rfc3339(),
        };
        let path = self.out.join(MANIFEST);
        write_json_checked(&path, &manifest)?;
        let mut all = self.outputs;
        all.push(path);
        Ok(all)
    }
}

fn load_dataset(data: &Path, cfg: &TrainConfig) -> Result<(LoadedSeries, MtsDataset)> {
    let d = &cfg.data;
    let loaded = load_csv(data, d.input_len + d.horizon)?;
    let ds = make_windows(loaded.series.clone(), d.input_len, d.horizon, d.split)?;
    Ok((loaded, ds))
}

/// Generates a synthetic series with a planted graph. `seed` overrides the
/// spec's seed.
pub fn gen_synth(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>> {
    let mut spec = match spec_path {
        Some(p) => read_spec(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let mut run = Run::start("gen-synth", out)?;
    if let Some(p) = spec_path {
        run.input("spec", p)?;
    }
    run.seed = Some(spec.seed);
    let synth = gen_synthetic(&spec)?;

    let path = run.path(SERIES);
    let mut buf = Vec::new();
    write_csv(&mut buf, &synth.series, &default_names(spec.n_vars))
        .map_err(|e| CliError::parse(&path, None, e.to_string()))?;
    write_bytes(&path, &buf)?;
    let back = load_csv(&path, 1)?;
    if back.series != synth.series {
        return Err(CliError::parse(&path, None, "written series does not read back exactly"));
    }
    run.wrote(path);

    let path = run.path(PLANTED);
    write_json_checked(&path, &AdjacencyFile::from_flat(&synth.adjacency, spec.n_vars))?;
    run.wrote(path);
    let path = run.path(SPEC);
    write_json_checked(&path, &spec)?;
    run.wrote(path);
    run.finish()
}

/// Search stage: writes the discretised architecture, the effective
/// config, the loss log and a checkpoint of the relaxed model.
pub fn search(
    data: &Path,
    args: &ConfigArgs,
    out: &Path,
    progress: &mut dyn FnMut(EpochReport),
) -> Result<Vec<PathBuf>> {
    let cfg = args.resolve()?;
    let mut run = Run::start("search", out)?;
    run.input("data", data)?;
    if let Some(c) = &args.config {
        run.input("config", c)?;
    }
    run.seed = Some(cfg.seed);
    run.config = Some(cfg.clone());
    let (_, ds) = load_dataset(data, &cfg)?;
    let outcome = train::search_stage(&cfg, &ds, progress)?;

    let path = run.path(ARCH);
    write_json_checked(&path, &outcome.arch)?;
    run.wrote(path);
    let path = run.path(CONFIG);
    let text = toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_bytes(&path, text.as_bytes())?;
    if read_config(&path)? != cfg {
        return Err(CliError::parse(&path, None, "written config does not read back to the same value"));
    }
    run.wrote(path);
    let path = run.path(SEARCH_LOG);
    write_bytes(&path, log_csv(&outcome.log).as_bytes())?;
    run.wrote(path);
    let path = run.path(SEARCH_CHECKPOINT);
    Checkpoint::new(Stage::Search, &cfg, &outcome.model, &outcome.store, &outcome.arch, ds.stats()).save(&path)?;
    run.wrote(path);
    run.finish()
}

/// Train stage on a fixed architecture.
pub fn train(
    data: &Path,
    arch_path: &Path,
    args: &ConfigArgs,
    out: &Path,
    progress: &mut dyn FnMut(EpochReport),
) -> Result<Vec<PathBuf>> {
    let cfg = args.resolve()?;
    let arch: DiscreteArchitecture = read_json(arch_path)?;
    arch.validate()?;
    let mut run = Run::start("train", out)?;
    run.input("data", data)?;
    run.input("arch", arch_path)?;
    if let Some(c) = &args.config {
        run.input("config", c)?;
    }
    run.seed = Some(cfg.seed);
    run.config = Some(cfg.clone());
    let (_, ds) = load_dataset(data, &cfg)?;
    let outcome = train::train_stage(&cfg, &ds, &arch, progress)?;

    let path = run.path(TRAIN_LOG);
    write_bytes(&path, log_csv(&outcome.log).as_bytes())?;
    run.wrote(path);
    let path = run.path(CHECKPOINT);
    let ckpt = Checkpoint::new(Stage::Train, &cfg, &outcome.model, &outcome.store, &arch, ds.stats());
    ckpt.save(&path)?;
    ckpt.rebuild(&path)?;
    run.wrote(path);
    run.finish()
}

/// Loads a checkpoint and windows `data` with its stored statistics,
/// checking that the series matches the model's dimensions.
fn checkpoint_dataset(ckpt_path: &Path, data: &Path) -> Result<(Checkpoint, MtsDataset)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let d = &ckpt.config.data;
    let loaded = load_csv(data, d.input_len + d.horizon)?;
    let n = loaded.series.n_vars();
    if n != ckpt.dims.n_vars {
        return Err(CliError::Dimension(format!(
            "checkpoint was trained on {} variables, {} has {n}",
            ckpt.dims.n_vars,
            data.display()
        )));
    }
    let channels = 1 + usize::from(loaded.series.has_clock());
    if channels != ckpt.dims.in_channels {
        return Err(CliError::Dimension(format!(
            "checkpoint expects {} input channels, {} gives {channels} (clock timestamps add a time-of-day channel)",
            ckpt.dims.in_channels,
            data.display()
        )));
    }
    let ds = make_windows_with_stats(loaded.series, d.input_len, d.horizon, d.split, ckpt.stats.clone())?;
    Ok((ckpt, ds))
}

/// Test-split metrics of a checkpoint and of the persistence baseline.
pub fn eval(ckpt_path: &Path, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (ckpt, ds) = checkpoint_dataset(ckpt_path, data)?;
    let (model, store) = ckpt.rebuild(ckpt_path)?;
    let mut run = Run::start("eval", out)?;
    run.input("checkpoint", ckpt_path)?;
    run.input("data", data)?;
    run.seed = Some(ckpt.seed);
    let report = EvalReport {
        split: "test".to_string(),
        model: train::evaluate(&model, &store, &ds, Split::Test, ckpt.config.optim.batch_size)?,
        persistence: train::persistence_metrics(&ds, Split::Test)?,
    };
    let path = run.path(METRICS);
    write_json_checked(&path, &report)?;
    run.wrote(path);
    run.finish()
}

/// Copies the checkpoint's discretised architecture, with logits, to
/// `arch.json`.
pub fn export_arch(ckpt_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut run = Run::start("export-arch", out)?;
    run.input("checkpoint", ckpt_path)?;
    run.seed = Some(ckpt.seed);
    let path = run.path(ARCH);
    write_json_checked(&path, &ckpt.arch)?;
    run.wrote(path);
    run.finish()
}

/// Writes one `adjacency_scale{k}.csv` per scale.
pub fn export_graph(ckpt_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (model, store) = ckpt.rebuild(ckpt_path)?;
    let mut run = Run::start("export-graph", out)?;
    run.input("checkpoint", ckpt_path)?;
    run.seed = Some(ckpt.seed);
    let n = ckpt.dims.n_vars;
    for (k, a) in model.adjacency(&store)?.iter().enumerate() {
        let path = run.path(&format!("adjacency_scale{}.csv", k + 1));
        write_bytes(&path, matrix_csv(a.data(), n).as_bytes())?;
        run.wrote(path);
    }
    run.finish()
}

/// Reads a matrix written by [`export_graph`].
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = files::read_text(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| CliError::parse(path, Some(i + 1), format!("non-numeric value `{c}`")))
                })
                .collect()
        })
        .collect()
}

/// SHA-256 of a file, for comparing run outputs.
pub fn fingerprint(path: &Path) -> Result<String> {
    file_sha256(path)
}
