//! Light CNN countermeasure: convolution blocks with max-feature-map
//! activations, max pooling followed by batch-norm, and a dropout-regularised
//! fully connected head producing bonafide/spoof logits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use fgcm_engine::{Adam, Forward, Graph, LayerSpec, Sequential, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FgcmError, Result};
use crate::frontend::Feature;
use crate::genuinizer::{genuinize_batch, GenuinizerModel};
use crate::metrics::Key;
use crate::nn::{read_model_checkpoint, stack, Example, Selector, TrainHistory, TrainRunConfig, Weights};

const INFER_BATCH: usize = 16;

/// Which transformer, if any, sits in front of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Fg,
    Fs,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Fg, Mode::Fs];

    /// Class the transformer of this mode is trained on.
    pub fn transformer_source(self) -> Option<Key> {
        match self {
            Mode::Baseline => None,
            Mode::Fg => Some(Key::Bonafide),
            Mode::Fs => Some(Key::Spoof),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Fg => "fg",
            Mode::Fs => "fs",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "fg" => Ok(Mode::Fg),
            "fs" => Ok(Mode::Fs),
            other => Err(format!("unknown mode {other:?} (expected baseline, fg or fs)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcnnArch {
    /// Feature geometry `[rows, cols]`.
    pub input: [usize; 2],
    /// Convolutional trunk on `[N, 1, rows, cols]`.
    pub features: Vec<LayerSpec>,
    /// Fully connected head on the flattened trunk output.
    pub classifier: Vec<LayerSpec>,
}

fn block(out: &mut Vec<LayerSpec>, cin: usize, cout: usize, k: usize, pool: bool) {
    out.push(LayerSpec::conv(cin, cout, k, 1, k / 2));
    out.push(LayerSpec::Mfm);
    if pool {
        out.push(LayerSpec::maxpool(2));
    }
    out.push(LayerSpec::batchnorm(cout / 2));
}

fn head(flat: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Affine {
            in_features: flat,
            out_features: hidden,
        },
        LayerSpec::Mfm,
        LayerSpec::Dropout { p: 0.4 },
        LayerSpec::Affine {
            in_features: hidden / 2,
            out_features: 2,
        },
    ]
}

impl LcnnArch {
    /// Three conv/MFM blocks (8, 12, 16 channels after MFM) with 2x2 pooling
    /// and batch-norm, then affine(64) -> MFM -> dropout(0.4) -> affine(2).
    pub fn desk(rows: usize, cols: usize) -> Self {
        let mut features = Vec::new();
        block(&mut features, 1, 16, 5, true);
        block(&mut features, 8, 24, 3, true);
        block(&mut features, 12, 32, 3, true);
        Self::with_head(rows, cols, features, 64)
    }

    /// Nine convolutions in the LCNN-9 pattern: 5x5 stem, then 1x1 / 3x3
    /// pairs, four pooling stages, affine(160) -> MFM -> dropout -> affine(2).
    pub fn full(rows: usize, cols: usize) -> Self {
        let mut f = Vec::new();
        block(&mut f, 1, 64, 5, true);
        block(&mut f, 32, 64, 1, false);
        block(&mut f, 32, 96, 3, true);
        block(&mut f, 48, 96, 1, false);
        block(&mut f, 48, 128, 3, true);
        block(&mut f, 64, 128, 1, false);
        block(&mut f, 64, 64, 3, false);
        block(&mut f, 32, 64, 1, false);
        block(&mut f, 32, 64, 3, true);
        Self::with_head(rows, cols, f, 160)
    }

    fn with_head(rows: usize, cols: usize, features: Vec<LayerSpec>, hidden: usize) -> Self {
        let flat = Sequential::new("probe", features.clone())
            .trace(&[1, 1, rows, cols])
            .ok()
            .and_then(|s| s.last().map(|s| s[1..].iter().product()))
            .unwrap_or(1);
        LcnnArch {
            input: [rows, cols],
            features,
            classifier: head(flat, hidden),
        }
    }

    pub fn preset(name: &str, rows: usize, cols: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(rows, cols)),
            "full" => Ok(Self::full(rows, cols)),
            other => Err(FgcmError::Config(format!("unknown LCNN preset {other:?} (desk or full)"))),
        }
    }

    /// Structural checks plus a shape trace; returns the trunk and head.
    pub fn check(&self) -> Result<(Sequential, Sequential)> {
        for (i, l) in self.features.iter().enumerate() {
            if matches!(l, LayerSpec::Affine { .. } | LayerSpec::Dropout { .. } | LayerSpec::ConvTranspose2d { .. }) {
                return Err(FgcmError::Config(format!("trunk layer {i} is {}, not allowed there", l.kind())));
            }
        }
        for (i, l) in self.classifier.iter().enumerate() {
            if !matches!(l, LayerSpec::Affine { .. } | LayerSpec::Mfm | LayerSpec::Dropout { .. } | LayerSpec::Relu | LayerSpec::LeakyRelu { .. }) {
                return Err(FgcmError::Config(format!("head layer {i} is {}, not allowed there", l.kind())));
            }
        }
        let dropouts = self.classifier.iter().filter(|l| matches!(l, LayerSpec::Dropout { .. })).count();
        if dropouts != 1 {
            return Err(FgcmError::Config(format!("head must hold exactly one dropout layer, found {dropouts}")));
        }
        let trunk = Sequential::new("lcnn.features", self.features.clone());
        let fc = Sequential::new("lcnn.classifier", self.classifier.clone());
        let shapes = trunk
            .trace(&[1, 1, self.input[0], self.input[1]])
            .map_err(|e| FgcmError::Config(format!("LCNN trunk: {e}")))?;
        let flat: usize = shapes.last().expect("non-empty")[1..].iter().product();
        let out = fc
            .trace(&[1, flat])
            .map_err(|e| FgcmError::Config(format!("LCNN head on {flat} flattened features: {e}")))?;
        if out.last().expect("non-empty") != &[1, 2] {
            return Err(FgcmError::Config(format!(
                "LCNN must end in 2 logits, produces {:?}",
                out.last()
            )));
        }
        Ok((trunk, fc))
    }

    /// Shapes after every trunk layer for a single input.
    pub fn trace(&self) -> Result<Vec<Vec<usize>>> {
        Ok(self.check()?.0.trace(&[1, 1, self.input[0], self.input[1]])?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcnnMeta {
    pub mode: Mode,
    pub epochs_trained: usize,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: String,
    arch: LcnnArch,
    meta: LcnnMeta,
}

#[derive(Debug, Clone)]
pub struct LcnnModel {
    arch: LcnnArch,
    trunk: Sequential,
    head: Sequential,
    weights: Weights,
    pub meta: LcnnMeta,
}

pub fn build_lcnn(arch: &LcnnArch, mode: Mode, seed: u64) -> Result<LcnnModel> {
    let (trunk, head) = arch.check()?;
    let weights = Weights::init(&[&trunk, &head], seed);
    Ok(LcnnModel {
        arch: arch.clone(),
        trunk,
        head,
        weights,
        meta: LcnnMeta {
            mode,
            epochs_trained: 0,
            history: TrainHistory::default(),
        },
    })
}

fn logits<R: Rng>(trunk: &Sequential, head: &Sequential, g: &mut Graph<f32>, x: Var, ctx: &mut Forward<'_, f32, R>) -> Result<Var> {
    let y = trunk.forward(g, x, ctx)?;
    let n = g.shape(y)[0];
    let flat: usize = g.shape(y)[1..].iter().product();
    let y = g.reshape(y, vec![n, flat])?;
    Ok(head.forward(g, y, ctx)?)
}

impl LcnnModel {
    pub fn arch(&self) -> &LcnnArch {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.meta.mode
    }

    pub fn is_trained(&self) -> bool {
        self.meta.epochs_trained > 0
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.params.total_len()
    }

    /// Eval-mode logits, `[N, 2]` row-major.
    pub fn logits(&self, feats: &[&Feature]) -> Result<Vec<[f32; 2]>> {
        let [h, w] = self.arch.input;
        let mut out = Vec::with_capacity(feats.len());
        for chunk in feats.chunks(INFER_BATCH) {
            let x = stack(chunk, h, w)?;
            let y = self.weights.infer(|g, ctx| {
                let xv = g.constant(x)?;
                logits(&self.trunk, &self.head, g, xv, ctx)
            })?;
            out.extend(y.values().chunks(2).map(|c| [c[0], c[1]]));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model: "lcnn".into(),
            arch: self.arch.clone(),
            meta: self.meta.clone(),
        };
        self.weights.save(path, &serde_json::to_string(&header).expect("header serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_model_checkpoint(path)?;
        let header: CheckpointHeader = serde_json::from_str(&ck.metadata).map_err(|e| FgcmError::Format {
            path: path.to_path_buf(),
            detail: format!("bad LCNN metadata: {e}"),
        })?;
        if header.model != "lcnn" {
            return Err(FgcmError::Format {
                path: path.to_path_buf(),
                detail: format!("checkpoint holds a {} model, not an LCNN", header.model),
            });
        }
        let mut model = build_lcnn(&header.arch, header.meta.mode, 0)?;
        model.weights.load_into(path, &ck.tensors)?;
        model.meta = header.meta;
        Ok(model)
    }
}

fn cross_entropy(model: &LcnnModel, data: &[Example<'_>]) -> Result<f64> {
    let feats: Vec<&Feature> = data.iter().map(|e| e.feature).collect();
    let l = model.logits(&feats)?;
    let total: f64 = l
        .iter()
        .zip(data)
        .map(|(z, e)| {
            let (a, b) = (z[0] as f64, z[1] as f64);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            lse - if e.key == Key::Bonafide { a } else { b }
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Softmax cross-entropy training. With a dev set the epoch with the lowest
/// dev loss is kept, otherwise the one with the lowest training loss.
pub fn train_lcnn(
    model: &mut LcnnModel,
    train: &[Example<'_>],
    dev: Option<&[Example<'_>]>,
    cfg: &TrainRunConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    for key in [Key::Bonafide, Key::Spoof] {
        if !train.iter().any(|e| e.key == key) {
            return Err(FgcmError::Contract(format!("LCNN training data has no {key} examples")));
        }
    }
    let dev = dev.filter(|d| !d.is_empty());
    let [h, w] = model.arch.input;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut opt = Adam::new(cfg.adam, &model.weights.params)?;
    let mut history = TrainHistory::default();
    let mut selector = Selector::new(cfg.patience);
    let (trunk, head) = (model.trunk.clone(), model.head.clone());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let feats: Vec<&Feature> = batch.iter().map(|&i| train[i].feature).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].key.label()).collect();
            let x = stack(&feats, h, w)?;
            let mut hits = 0;
            let loss = model.weights.step(&mut opt, &mut rng, |g, ctx| {
                let xv = g.constant(x)?;
                let z = logits(&trunk, &head, g, xv, ctx)?;
                let zv = g.value(z).values();
                hits = labels
                    .iter()
                    .enumerate()
                    .filter(|&(i, &l)| usize::from(zv[2 * i + 1] > zv[2 * i]) == l)
                    .count();
                Ok(g.softmax_cross_entropy(z, &labels)?)
            })?;
            total += loss * batch.len() as f64;
            correct += hits;
        }
        let loss = total / train.len() as f64;
        let acc = correct as f64 / train.len() as f64;
        history.loss.push(loss);
        history.accuracy.push(acc);
        let metric = match dev {
            Some(d) => {
                let l = cross_entropy(model, d)?;
                history.selection_loss.push(l);
                l
            }
            None => loss,
        };
        log::info!("lcnn epoch {}: loss {loss:.5} acc {acc:.3} selection {metric:.5}", epoch + 1);
        if selector.observe(epoch, metric, &model.weights) {
            break;
        }
    }
    if let Some(best) = selector.snapshot.take() {
        model.weights = best;
    }
    history.best_epoch = selector.best_epoch;
    model.meta.epochs_trained += history.loss.len();
    model.meta.history = history.clone();
    Ok(history)
}

fn ensure_trained(model: &LcnnModel) -> Result<()> {
    if model.is_trained() {
        Ok(())
    } else {
        Err(FgcmError::Untrained("LCNN has not been trained; use score_unchecked to run it anyway".into()))
    }
}

/// `logit(bonafide) - logit(spoof)`; higher means more bonafide.
pub fn score(model: &LcnnModel, feat: &Feature) -> Result<f64> {
    Ok(score_batch(model, &[feat])?[0])
}

pub fn score_batch(model: &LcnnModel, feats: &[&Feature]) -> Result<Vec<f64>> {
    ensure_trained(model)?;
    score_unchecked(model, feats)
}

pub fn score_unchecked(model: &LcnnModel, feats: &[&Feature]) -> Result<Vec<f64>> {
    Ok(model.logits(feats)?.iter().map(|z| z[0] as f64 - z[1] as f64).collect())
}

fn check_mode(genuinizer: Option<&GenuinizerModel>, lcnn: &LcnnModel) -> Result<()> {
    let want = lcnn.mode().transformer_source();
    let have = genuinizer.map(|g| g.source());
    if want != have {
        let describe = |k: Option<Key>| match k {
            None => "no transformer".to_string(),
            Some(k) => format!("a transformer trained on {k}"),
        };
        return Err(FgcmError::Contract(format!(
            "classifier was trained in {} mode, which needs {}, but {} was supplied",
            lcnn.mode(),
            describe(want),
            describe(have)
        )));
    }
    Ok(())
}

/// Score through the transformer matching the classifier's training mode.
pub fn score_pipeline(genuinizer: Option<&GenuinizerModel>, lcnn: &LcnnModel, feat: &Feature) -> Result<f64> {
    Ok(score_pipeline_batch(genuinizer, lcnn, &[feat])?[0])
}

pub fn score_pipeline_batch(genuinizer: Option<&GenuinizerModel>, lcnn: &LcnnModel, feats: &[&Feature]) -> Result<Vec<f64>> {
    check_mode(genuinizer, lcnn)?;
    match genuinizer {
        None => score_batch(lcnn, feats),
        Some(g) => {
            let transformed = genuinize_batch(g, feats)?;
            let refs: Vec<&Feature> = transformed.iter().collect();
            score_batch(lcnn, &refs)
        }
    }
}
