//! The batch commands. Every command works inside one run directory:
//!
//! ```text
//! RUN/features/<id>.lps       extract
//! RUN/stats.json              extract
//! RUN/<mode>/genuinizer.fgt   train (fg, fs)
//! RUN/<mode>/lcnn.fgt         train
//! RUN/<mode>/train_report.json
//! RUN/<mode>/scores_<subset>.txt, det_<subset>.csv, report.json   eval
//! RUN/summary.txt             report
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::manifest::{Manifest, ManifestRow, Subset};
use crate::error::{io_err, FgcmError, Result};
use crate::frontend::{extract_feature, load_cache, load_wav, save_cache, Cqt, Feature, NormStats};
use crate::genuinizer::{build_genuinizer, train_genuinizer, GenuinizerModel};
use crate::lcnn::{build_lcnn, score_pipeline_batch, train_lcnn, LcnnModel, Mode};
use crate::metrics::{
    compute_eer, det_curve, min_tdcf, read_asv_scores, write_det_csv, write_scores, AsvOperatingPoint, Key,
    TdcfParams, Trial,
};
use crate::nn::{Example, TrainHistory};

const SCORE_CHUNK: usize = 8;

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn cache(&self, id: &str) -> PathBuf {
        self.features().join(format!("{id}.lps"))
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("stats.json")
    }
    pub fn mode_dir(&self, mode: Mode) -> PathBuf {
        self.root.join(mode.as_str())
    }
    pub fn genuinizer(&self, mode: Mode) -> PathBuf {
        self.mode_dir(mode).join("genuinizer.fgt")
    }
    pub fn lcnn(&self, mode: Mode) -> PathBuf {
        self.mode_dir(mode).join("lcnn.fgt")
    }
    pub fn train_report(&self, mode: Mode) -> PathBuf {
        self.mode_dir(mode).join("train_report.json")
    }
    pub fn scores(&self, mode: Mode, subset: Subset) -> PathBuf {
        self.mode_dir(mode).join(format!("scores_{subset}.txt"))
    }
    pub fn det(&self, mode: Mode, subset: Subset) -> PathBuf {
        self.mode_dir(mode).join(format!("det_{subset}.csv"))
    }
    pub fn report(&self, mode: Mode) -> PathBuf {
        self.mode_dir(mode).join("report.json")
    }
    pub fn timing(&self, mode: Mode) -> PathBuf {
        self.mode_dir(mode).join("report_timing.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| FgcmError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub extracted: usize,
    pub stats_rows: usize,
}

/// Compute one cache per manifest row, in parallel, then normalisation
/// statistics from the bonafide train caches. Failing files are collected;
/// the rest are still written.
pub fn cmd_extract(manifest: &Manifest, cfg: &PipelineConfig, run: &RunDir) -> Result<ExtractSummary> {
    cfg.validate()?;
    let cqt = Cqt::new(&cfg.features.cqt)?;
    mkdir(&run.features())?;
    let rate = cfg.features.cqt.sample_rate;
    let results: Vec<(&ManifestRow, Result<()>)> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let r = load_wav(&row.audio_path, rate)
                .and_then(|clip| extract_feature(&row.id, &clip, &cqt, &cfg.features))
                .and_then(|feat| save_cache(&run.cache(&row.id), &feat));
            (row, r)
        })
        .collect();
    let failures: Vec<String> = results
        .iter()
        .filter_map(|(row, r)| r.as_ref().err().map(|e| format!("  {}: {e}", row.id)))
        .collect();

    let genuine: Vec<&ManifestRow> = manifest
        .subset(Subset::Train)
        .filter(|r| r.key == Key::Bonafide)
        .collect();
    let mut feats = Vec::new();
    for row in &genuine {
        if let Ok(f) = load_cache(&run.cache(&row.id)) {
            feats.push(f);
        }
    }
    if !feats.is_empty() {
        let refs: Vec<&Feature> = feats.iter().collect();
        let stats = NormStats::compute(&refs, cfg.normalization.eps, "bonafide/train")?;
        stats.save(&run.stats())?;
    }
    if !failures.is_empty() {
        return Err(FgcmError::Batch {
            failed: failures.len(),
            total: manifest.rows.len(),
            report: failures.join("\n"),
        });
    }
    if feats.is_empty() {
        return Err(FgcmError::Input(
            "manifest has no bonafide train rows to compute normalisation statistics from".into(),
        ));
    }
    log::info!("extracted {} features; stats from {} rows", results.len(), feats.len());
    Ok(ExtractSummary {
        extracted: results.len(),
        stats_rows: feats.len(),
    })
}

fn load_stats(run: &RunDir) -> Result<NormStats> {
    if !run.stats().exists() {
        return Err(FgcmError::Input(format!(
            "{} is missing; run `fgcm extract` first",
            run.stats().display()
        )));
    }
    NormStats::load(&run.stats())
}

/// Cached, normalised features for some rows.
fn load_features(rows: &[&ManifestRow], run: &RunDir, stats: &NormStats) -> Result<Vec<Feature>> {
    rows.iter()
        .map(|row| {
            let path = run.cache(&row.id);
            if !path.exists() {
                return Err(FgcmError::Input(format!(
                    "no feature cache for {} at {}; run `fgcm extract` first",
                    row.id,
                    path.display()
                )));
            }
            stats.apply(&load_cache(&path)?)
        })
        .collect()
}

fn rows_of(manifest: &Manifest, subset: Subset) -> Vec<&ManifestRow> {
    manifest.subset(subset).collect()
}

/// Seeds for the four stochastic stages, drawn in a fixed order so every
/// mode sees the same values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub genuinizer_init: u64,
    pub genuinizer_train: u64,
    pub lcnn_init: u64,
    pub lcnn_train: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StageSeeds {
            genuinizer_init: rng.next_u64(),
            genuinizer_train: rng.next_u64(),
            lcnn_init: rng.next_u64(),
            lcnn_train: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub transformer_source: Option<Key>,
    pub transformer_rows: usize,
    pub transformer_history: Option<TrainHistory>,
    pub classifier_rows: usize,
    pub classifier_history: TrainHistory,
    pub checkpoints: Vec<String>,
}

fn transform_all(g: Option<&GenuinizerModel>, feats: Vec<Feature>) -> Result<Vec<Feature>> {
    match g {
        None => Ok(feats),
        Some(g) => {
            let mut out = Vec::with_capacity(feats.len());
            for chunk in feats.chunks(SCORE_CHUNK) {
                let refs: Vec<&Feature> = chunk.iter().collect();
                out.extend(crate::genuinizer::genuinize_batch(g, &refs)?);
            }
            Ok(out)
        }
    }
}

/// Train the transformer (fg: bonafide rows only, fs: spoof rows only) and
/// then the classifier on transformed train features.
pub fn cmd_train(manifest: &Manifest, cfg: &PipelineConfig, run: &RunDir) -> Result<TrainReport> {
    cfg.validate()?;
    let mode = cfg.mode;
    let stats = load_stats(run)?;
    let seeds = StageSeeds::derive(cfg.seed);
    let dir = run.mode_dir(mode);
    mkdir(&dir)?;
    let train_rows = rows_of(manifest, Subset::Train);
    let mut checkpoints = Vec::new();

    let mut transformer = None;
    let mut transformer_rows = 0;
    if let Some(source) = mode.transformer_source() {
        let rows: Vec<&ManifestRow> = train_rows.iter().copied().filter(|r| r.key == source).collect();
        transformer_rows = rows.len();
        let feats = load_features(&rows, run, &stats)?;
        let data: Vec<Example> = feats.iter().map(|f| Example { feature: f, key: source }).collect();
        let mut model = build_genuinizer(&cfg.genuinizer_arch()?, source, seeds.genuinizer_init)?;
        let tcfg = crate::nn::TrainRunConfig {
            seed: seeds.genuinizer_train,
            ..cfg.genuinizer_training.clone()
        };
        train_genuinizer(&mut model, &data, &tcfg)?;
        model.save(&run.genuinizer(mode))?;
        checkpoints.push("genuinizer.fgt".to_string());
        transformer = Some(model);
    }

    let keys: Vec<Key> = train_rows.iter().map(|r| r.key).collect();
    let train = transform_all(transformer.as_ref(), load_features(&train_rows, run, &stats)?)?;
    let examples: Vec<Example> = train.iter().zip(&keys).map(|(f, &key)| Example { feature: f, key }).collect();
    let dev_rows = rows_of(manifest, Subset::Dev);
    let dev = if cfg.select_on_dev && !dev_rows.is_empty() {
        let keys: Vec<Key> = dev_rows.iter().map(|r| r.key).collect();
        let feats = transform_all(transformer.as_ref(), load_features(&dev_rows, run, &stats)?)?;
        Some((feats, keys))
    } else {
        None
    };
    let dev_examples: Option<Vec<Example>> = dev
        .as_ref()
        .map(|(f, k)| f.iter().zip(k).map(|(f, &key)| Example { feature: f, key }).collect());

    let mut lcnn = build_lcnn(&cfg.lcnn_arch()?, mode, seeds.lcnn_init)?;
    let lcfg = crate::nn::TrainRunConfig {
        seed: seeds.lcnn_train,
        ..cfg.lcnn_training.clone()
    };
    let history = train_lcnn(&mut lcnn, &examples, dev_examples.as_deref(), &lcfg)?;
    lcnn.save(&run.lcnn(mode))?;
    checkpoints.push("lcnn.fgt".to_string());

    let report = TrainReport {
        mode,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        transformer_source: mode.transformer_source(),
        transformer_rows,
        transformer_history: transformer.as_ref().map(|t| t.meta.history.clone()),
        classifier_rows: examples.len(),
        classifier_history: history,
        checkpoints,
    };
    write_json(&run.train_report(mode), &report)?;
    std::fs::write(dir.join("config.json"), cfg.canonical_json()).map_err(io_err(dir.join("config.json")))?;
    Ok(report)
}

/// EER and min t-DCF of one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub bonafide: usize,
    pub spoof: usize,
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub min_tdcf_threshold: f64,
}

pub fn subset_metrics(trials: &[Trial], tdcf: &TdcfParams) -> Result<SubsetMetrics> {
    let (eer, eer_threshold) = compute_eer(trials)?;
    let (min_tdcf, min_tdcf_threshold) = min_tdcf(trials, tdcf)?;
    Ok(SubsetMetrics {
        bonafide: trials.iter().filter(|t| t.key == Key::Bonafide).count(),
        spoof: trials.iter().filter(|t| t.key == Key::Spoof).count(),
        eer,
        eer_threshold,
        min_tdcf,
        min_tdcf_threshold,
    })
}

/// Deterministic record of an evaluated run. Wall-clock timing goes to a
/// separate sidecar so identical runs give identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub dev: Option<SubsetMetrics>,
    pub eval: Option<SubsetMetrics>,
    pub tdcf: TdcfParams,
    pub timing_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub load_seconds: f64,
    pub score_seconds: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

/// Effective t-DCF parameters: the configured ones, with the ASV operating
/// point replaced when an ASV score file is configured.
pub fn effective_tdcf(cfg: &PipelineConfig) -> Result<TdcfParams> {
    let mut p = cfg.tdcf.clone();
    if let Some(path) = &cfg.asv_scores {
        p.asv = AsvOperatingPoint::from_asv_trials(&read_asv_scores(path)?)?;
    }
    p.validate()?;
    Ok(p)
}

/// Build a report from already-scored subsets.
pub fn build_report(cfg: &PipelineConfig, scored: &[(Subset, Vec<Trial>)]) -> Result<RunReport> {
    let tdcf = effective_tdcf(cfg)?;
    let mut report = RunReport {
        mode: cfg.mode,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        dev: None,
        eval: None,
        tdcf: tdcf.clone(),
        timing_file: "report_timing.json".into(),
    };
    for (subset, trials) in scored {
        let m = subset_metrics(trials, &tdcf)?;
        match subset {
            Subset::Dev => report.dev = Some(m),
            Subset::Eval => report.eval = Some(m),
            Subset::Train => {}
        }
    }
    Ok(report)
}

/// Score dev and eval rows with the trained models of `cfg.mode`.
pub fn cmd_eval(manifest: &Manifest, cfg: &PipelineConfig, run: &RunDir) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mode = cfg.mode;
    let lcnn_path = run.lcnn(mode);
    if !lcnn_path.exists() {
        return Err(FgcmError::Input(format!(
            "{} is missing; run `fgcm train --mode {mode}` first",
            lcnn_path.display()
        )));
    }
    let lcnn = LcnnModel::load(&lcnn_path)?;
    if lcnn.mode() != mode {
        return Err(FgcmError::Contract(format!(
            "{} was trained in {} mode but the config asks for {mode}",
            lcnn_path.display(),
            lcnn.mode()
        )));
    }
    let genuinizer = match mode.transformer_source() {
        Some(_) => Some(GenuinizerModel::load(&run.genuinizer(mode))?),
        None => None,
    };
    let stats = load_stats(run)?;
    let load_seconds = start.elapsed().as_secs_f64();

    let mut scored = Vec::new();
    let mut score_seconds = BTreeMap::new();
    for subset in [Subset::Dev, Subset::Eval] {
        let rows = rows_of(manifest, subset);
        if rows.is_empty() {
            continue;
        }
        let t = Instant::now();
        let mut trials = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(SCORE_CHUNK) {
            let feats = load_features(chunk, run, &stats)?;
            let refs: Vec<&Feature> = feats.iter().collect();
            let scores = score_pipeline_batch(genuinizer.as_ref(), &lcnn, &refs)?;
            trials.extend(chunk.iter().zip(scores).map(|(r, s)| Trial::new(&r.id, r.key, s)));
        }
        write_scores(&trials, &run.scores(mode, subset))?;
        write_det_csv(&det_curve(&trials)?, &run.det(mode, subset))?;
        score_seconds.insert(subset.to_string(), t.elapsed().as_secs_f64());
        scored.push((subset, trials));
    }
    if scored.is_empty() {
        return Err(FgcmError::Input("manifest has no dev or eval rows to evaluate".into()));
    }
    let report = build_report(cfg, &scored)?;
    write_json(&run.report(mode), &report)?;
    write_json(
        &run.timing(mode),
        &Timing {
            load_seconds,
            score_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(report)
}

/// Table of every evaluated mode in the run directory.
pub fn cmd_report(run: &RunDir) -> Result<String> {
    let mut out = String::from("mode      dev_eer(%)  dev_min_tdcf  eval_eer(%)  eval_min_tdcf\n");
    let mut found = 0;
    for mode in Mode::ALL {
        let path = run.report(mode);
        if !path.exists() {
            continue;
        }
        found += 1;
        let r: RunReport = read_json(&path)?;
        let cell = |m: &Option<SubsetMetrics>| match m {
            Some(m) => (format!("{:.2}", 100.0 * m.eer), format!("{:.4}", m.min_tdcf)),
            None => ("-".into(), "-".into()),
        };
        let (de, dt) = cell(&r.dev);
        let (ee, et) = cell(&r.eval);
        out.push_str(&format!("{:<9} {de:>10}  {dt:>12}  {ee:>11}  {et:>13}\n", r.mode.as_str()));
    }
    if found == 0 {
        return Err(FgcmError::Input(format!(
            "no report.json under {}; run `fgcm eval` first",
            run.root.display()
        )));
    }
    std::fs::write(run.summary(), &out).map_err(io_err(run.summary()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_depend_only_on_seed() {
        assert_eq!(StageSeeds::derive(3), StageSeeds::derive(3));
        assert_ne!(StageSeeds::derive(3), StageSeeds::derive(4));
    }

    #[test]
    fn perfect_scores_report_zero() {
        let trials = vec![
            Trial::new("a", Key::Bonafide, 2.0),
            Trial::new("b", Key::Bonafide, 1.5),
            Trial::new("c", Key::Spoof, -1.0),
        ];
        let r = build_report(&PipelineConfig::default(), &[(Subset::Dev, trials.clone()), (Subset::Eval, trials)]).unwrap();
        for m in [r.dev.unwrap(), r.eval.unwrap()] {
            assert_eq!(m.eer, 0.0);
            assert_eq!(m.min_tdcf, 0.0);
        }
    }
}
