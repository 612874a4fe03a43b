//! Subcommand implementations. Each returns the text to print on success.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iqa_core::checkpoint::{load_checkpoint, save_checkpoint};
use iqa_core::encoder::save_feature_cache;
use iqa_core::graph::estimate_cost;
use iqa_core::io::write_atomic;
use iqa_core::metrics::MetricReport;
use iqa_core::model::{ModelConfig, ModelParams};
use iqa_core::objective::LossBreakdown;
use iqa_core::trainer::{fit, predict_examples, predict_tta, EpochRecord, Example, MosNormalizer, Split};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{Manifest, ManifestRow};
use crate::pipeline::{cache_path, canonical_layout, encode_layout, graph_input, prepare_examples, prepare_input, read_source, Source};

pub const CHECKPOINT_FILE: &str = "checkpoint.ugqm";
pub const STEP_LOG_FILE: &str = "steps.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn require<'a>(value: Option<&'a Path>, flag: &str) -> Result<&'a Path, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

/// Sidecar path holding selection metrics and MOS statistics.
pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub selection: MetricReport,
    pub normalizer: MosNormalizer,
}

impl CheckpointMeta {
    pub fn render(&self) -> String {
        format!(
            "epoch = {}\nval_plcc = {}\nval_srcc = {}\nval_rmse = {}\nmos_mean = {}\nmos_std = {}\n",
            self.epoch,
            self.selection.plcc,
            self.selection.srcc,
            self.selection.rmse,
            self.normalizer.mean,
            self.normalizer.std
        )
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let map: HashMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |key: &str| -> Result<f64, CliError> {
            map.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Data(format!("checkpoint metadata lacks `{key}`")))
        };
        Ok(Self {
            epoch: get("epoch")? as usize,
            selection: MetricReport {
                plcc: get("val_plcc")?,
                srcc: get("val_srcc")?,
                rmse: get("val_rmse")?,
                n: 0,
            },
            normalizer: MosNormalizer {
                mean: get("mos_mean")?,
                std: get("mos_std")?,
            },
        })
    }

    pub fn load(checkpoint: &Path) -> Result<Self, CliError> {
        let path = meta_path(checkpoint);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Writes the canonical feature cache of every manifest entry into
/// `out_dir`, skipping entries whose cache already exists.
pub fn cmd_encode(cfg: &RunConfig, manifest: Option<&Path>, out: Option<&Path>) -> Result<String, CliError> {
    let manifest = Manifest::load(require(manifest, "manifest")?)?;
    let out_dir = out
        .or(cfg.cache_dir.as_deref())
        .ok_or_else(|| CliError::Usage("missing required flag --out (or cache_dir in the config)".into()))?;
    std::fs::create_dir_all(out_dir)?;
    #[derive(PartialEq)]
    enum Outcome {
        Encoded,
        Reused,
        AlreadyCache,
    }
    let results = iqa_core::exec::map_slice(&manifest.rows, |row| -> Result<Outcome, CliError> {
        let target = cache_path(out_dir, &row.path, cfg);
        if target.exists() {
            return Ok(Outcome::Reused);
        }
        match read_source(&row.path)? {
            Source::Cache(..) => Ok(Outcome::AlreadyCache),
            Source::Image(img) => {
                let layout = canonical_layout(&img, cfg);
                let features = encode_layout(&img, &layout, cfg)?;
                save_feature_cache(&features, &layout, &target)?;
                Ok(Outcome::Encoded)
            }
        }
    });
    let mut report = String::new();
    let mut failures = Vec::new();
    let count = |o: Outcome| results.iter().filter(|r| r.as_ref().is_ok_and(|x| *x == o)).count();
    let (encoded, reused, caches) = (count(Outcome::Encoded), count(Outcome::Reused), count(Outcome::AlreadyCache));
    for (row, r) in manifest.rows.iter().zip(&results) {
        if let Err(e) = r {
            failures.push(format!("{}: {e}", row.path.display()));
        }
    }
    writeln!(report, "encoded {encoded}, reused {reused}, already cached {caches}").unwrap();
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Data(format!(
            "{}{} file(s) failed:\n{}",
            report,
            failures.len(),
            failures.join("\n")
        )))
    }
}

fn rows_of(manifest: &Manifest, split: Split, name: &str) -> Result<Vec<ManifestRow>, CliError> {
    let rows: Vec<ManifestRow> = manifest.split(split).into_iter().cloned().collect();
    if rows.is_empty() {
        return Err(CliError::Data(format!("manifest has no `{name}` rows")));
    }
    Ok(rows)
}

fn feature_width(examples: &[Example]) -> Result<usize, CliError> {
    let d_raw = examples[0].canonical.raw.ncols();
    for ex in examples {
        let inputs = std::iter::once(&ex.canonical).chain(ex.offset.as_ref());
        if let Some(bad) = inputs.map(|g| g.raw.ncols()).find(|&w| w != d_raw) {
            return Err(CliError::Data(format!("inconsistent feature widths {d_raw} and {bad}")));
        }
    }
    Ok(d_raw)
}

fn check_compatible(params: &ModelParams, model: &ModelConfig) -> Result<(), CliError> {
    let ours = (params.d(), params.layers.len(), params.gate_variant());
    let wanted = (model.d, model.layers, model.gate_variant);
    if ours != wanted {
        return Err(CliError::Data(format!(
            "checkpoint has d={}, layers={}, gate={:?} but the config has d={}, layers={}, gate={:?}",
            ours.0, ours.1, ours.2, wanted.0, wanted.1, wanted.2
        )));
    }
    Ok(())
}

fn check_feature_width(params: &ModelParams, d_raw: usize) -> Result<(), CliError> {
    if params.d_raw() != d_raw {
        return Err(CliError::Data(format!(
            "feature width {d_raw} does not match the checkpoint input width {}",
            params.d_raw()
        )));
    }
    Ok(())
}

fn step_log(steps: &[LossBreakdown]) -> String {
    let mut s = String::from(LossBreakdown::CSV_HEADER);
    s.push('\n');
    for (i, b) in steps.iter().enumerate() {
        s.push_str(&b.to_csv_line(i as u64 + 1));
        s.push('\n');
    }
    s
}

fn epoch_log(history: &[EpochRecord]) -> String {
    let mut s = String::from(EpochRecord::CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

/// Trains on the `train` split, selects by `val` SRCC and writes the
/// checkpoint, its metadata and both logs into `out`.
pub fn cmd_train(cfg: &RunConfig, manifest: Option<&Path>, out: Option<&Path>, tta: bool) -> Result<String, CliError> {
    let manifest = Manifest::load(require(manifest, "manifest")?)?;
    let out_dir = require(out, "out")?;
    let train_rows = rows_of(&manifest, Split::Train, "train")?;
    let val_rows = rows_of(&manifest, Split::Val, "val")?;
    let train = prepare_examples(&train_rows.iter().collect::<Vec<_>>(), cfg, tta)?;
    let val = prepare_examples(&val_rows.iter().collect::<Vec<_>>(), cfg, tta)?;
    let d_raw = feature_width(&train)?;
    if feature_width(&val)? != d_raw {
        return Err(CliError::Data("train and val feature widths differ".into()));
    }
    let mos: Vec<f64> = train.iter().map(|e| e.mos).collect();
    let normalizer = MosNormalizer::fit(&mos)?;
    let model = cfg.model();
    let params = ModelParams::init(&model, d_raw, cfg.seed);
    let outcome = fit(&train, &val, params, &model, &cfg.objective(), &cfg.train(), &normalizer, tta)?;

    std::fs::create_dir_all(out_dir)?;
    let best = &outcome.best;
    let record = &outcome.history[best.epoch - 1];
    let meta = CheckpointMeta {
        epoch: best.epoch,
        selection: record.val.unwrap_or(record.train),
        normalizer,
    };
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&best.value, &ckpt)?;
    write_atomic(&meta_path(&ckpt), meta.render().as_bytes())?;
    write_atomic(&out_dir.join(STEP_LOG_FILE), step_log(&outcome.steps).as_bytes())?;
    write_atomic(&out_dir.join(EPOCH_LOG_FILE), epoch_log(&outcome.history).as_bytes())?;
    Ok(format!(
        "best epoch {} of {}\n{}\ncheckpoint {}\n",
        best.epoch,
        outcome.history.len(),
        meta.selection,
        ckpt.display()
    ))
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(ModelParams, CheckpointMeta), CliError> {
    let path = require(checkpoint, "checkpoint")?;
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let params = load_checkpoint(path).map_err(|e| CliError::context(e, path.display()))?;
    check_compatible(&params, &cfg.model())?;
    Ok((params, CheckpointMeta::load(path)?))
}

/// Metrics on the configured evaluation split (default `test`), on the
/// original MOS scale.
pub fn cmd_eval(
    cfg: &RunConfig,
    manifest: Option<&Path>,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    tta: bool,
) -> Result<String, CliError> {
    let manifest = Manifest::load(require(manifest, "manifest")?)?;
    let (params, meta) = load_model(cfg, checkpoint)?;
    let name = match cfg.eval_split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let rows = rows_of(&manifest, cfg.eval_split, name)?;
    let examples = prepare_examples(&rows.iter().collect::<Vec<_>>(), cfg, tta)?;
    check_feature_width(&params, feature_width(&examples)?)?;
    let pred = predict_examples(&examples, &params, &cfg.model(), &meta.normalizer, tta)?;
    let mos: Vec<f64> = rows.iter().map(|r| r.mos).collect();
    let report = MetricReport::compute(&pred, &mos)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("path,mos,prediction\n");
        for (row, p) in rows.iter().zip(&pred) {
            writeln!(csv, "{},{},{}", row.path.display(), row.mos, p).unwrap();
        }
        write_atomic(&dir.join(PREDICTIONS_FILE), csv.as_bytes())?;
    }
    Ok(format!("{report}\n"))
}

/// Score for one image or feature cache on the original MOS scale.
pub fn cmd_predict(cfg: &RunConfig, input: Option<&Path>, checkpoint: Option<&Path>, tta: bool) -> Result<String, CliError> {
    let input = require(input, "input")?;
    let (params, meta) = load_model(cfg, checkpoint)?;
    let (canonical, offset) = prepare_input(input, cfg, tta)?;
    check_feature_width(&params, canonical.raw.ncols())?;
    let score = predict_tta(&canonical, offset.as_ref(), &params, &cfg.model(), &meta.normalizer)?;
    Ok(format!("{score}\n"))
}

/// Operation and memory estimates for the configured graph and model size.
pub fn cmd_cost(cfg: &RunConfig) -> String {
    let (n, k, d, l) = (cfg.grid_n as u64, cfg.k as u64, cfg.d as u64, cfg.layers as u64);
    let layer = estimate_cost(n, k, d, 1);
    let total = estimate_cost(n, k, d, l);
    let mut s = String::new();
    writeln!(s, "nodes {n}  k {k}  d {d}  layers {l}").unwrap();
    writeln!(s, "{:<16}{:>16}{:>16}", "quantity", "per layer", "total").unwrap();
    writeln!(s, "{:<16}{:>16}{:>16}", "message_ops", layer.message_ops, total.message_ops).unwrap();
    writeln!(s, "{:<16}{:>16}{:>16}", "transform_ops", layer.transform_ops, total.transform_ops).unwrap();
    writeln!(s, "{:<16}{:>16}", "feature_memory", total.feature_memory).unwrap();
    writeln!(s, "{:<16}{:>16}", "edge_memory", total.edge_memory).unwrap();
    s
}

/// `src dst affinity` for every edge of the canonical graph, sorted.
pub fn cmd_inspect_graph(cfg: &RunConfig, input: Option<&Path>) -> Result<String, CliError> {
    let input = require(input, "input")?;
    let (features, layout) = match read_source(input)? {
        Source::Cache(f, l) => (f, l),
        Source::Image(img) => {
            let layout = canonical_layout(&img, cfg);
            (encode_layout(&img, &layout, cfg)?, layout)
        }
    };
    if features.n_patches() <= cfg.k {
        return Err(CliError::Data(format!(
            "{} has {} patches, too few for k = {}",
            input.display(),
            features.n_patches(),
            cfg.k
        )));
    }
    let g = graph_input(&features, &layout, cfg)?.graph;
    let mut s = String::new();
    for (e, a) in g.sorted_edges() {
        writeln!(s, "{} {} {:.12}", e.src, e.dst, a).unwrap();
    }
    Ok(s)
}
