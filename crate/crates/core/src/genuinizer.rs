//! Fully convolutional encoder-decoder trained on a single class of
//! features. Trained on bonafide features it is a genuinization transformer
//! (genuine inputs pass nearly unchanged, spoofed ones are distorted);
//! trained on spoofed features it is the feature-spoofing contrast.

use std::path::Path;

use fgcm_engine::{Adam, LayerSpec, Sequential};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FgcmError, Result};
use crate::frontend::Feature;
use crate::metrics::Key;
use crate::nn::{feature_from, holdout_split, read_model_checkpoint, stack, Example, Selector, TrainHistory, TrainRunConfig, Weights};

const PREFIX: &str = "genuinizer";
const INFER_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenuinizerArch {
    /// Feature geometry `[rows, cols]` the network consumes.
    pub input: [usize; 2],
    /// Strided convolutions. Batch-norm follows every one but the first,
    /// then leaky ReLU.
    pub encoder: Vec<LayerSpec>,
    /// Transposed convolutions. Batch-norm and ReLU follow every one but
    /// the last, whose output is linear.
    pub decoder: Vec<LayerSpec>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn default_slope() -> f64 {
    0.2
}

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

impl GenuinizerArch {
    /// Four stride-2 4x4 convolutions (1, 16, 32, 64, 128 channels) and the
    /// mirrored transposed stack.
    pub fn standard(rows: usize, cols: usize) -> Self {
        Self::with_channels(rows, cols, &[1, 16, 32, 64, 128])
    }

    pub fn with_channels(rows: usize, cols: usize, channels: &[usize]) -> Self {
        let encoder = channels.windows(2).map(|c| LayerSpec::conv(c[0], c[1], 4, 2, 1)).collect();
        let decoder = channels.windows(2).rev().map(|c| LayerSpec::deconv(c[1], c[0], 4, 2, 1)).collect();
        GenuinizerArch {
            input: [rows, cols],
            encoder,
            decoder,
            leaky_slope: default_slope(),
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    /// Zero rows/columns appended so the input divides the total encoder stride.
    pub fn padding(&self) -> [usize; 2] {
        let mut total = [1usize, 1];
        for l in &self.encoder {
            if let LayerSpec::Conv2d { stride, .. } = l {
                total[0] *= stride[0];
                total[1] *= stride[1];
            }
        }
        [0, 1].map(|a| (total[a] - self.input[a] % total[a]) % total[a])
    }

    pub fn padded_input(&self) -> [usize; 2] {
        let p = self.padding();
        [self.input[0] + p[0], self.input[1] + p[1]]
    }

    /// The full layer stack with normalisation and activations inserted.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(FgcmError::Config("genuinizer needs at least one encoder and one decoder layer".into()));
        }
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            let LayerSpec::Conv2d { out_channels, .. } = *l else {
                return Err(FgcmError::Config(format!(
                    "encoder layer {i} is {}, only conv2d is allowed",
                    l.kind()
                )));
            };
            out.push(l.clone());
            if i > 0 {
                out.push(self.bn(out_channels));
            }
            out.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
        }
        let last = self.decoder.len() - 1;
        for (i, l) in self.decoder.iter().enumerate() {
            let LayerSpec::ConvTranspose2d { out_channels, .. } = *l else {
                return Err(FgcmError::Config(format!(
                    "decoder layer {i} is {}, only conv_transpose2d is allowed",
                    l.kind()
                )));
            };
            out.push(l.clone());
            if i < last {
                out.push(self.bn(out_channels));
                out.push(LayerSpec::Relu);
            }
        }
        Ok(out)
    }

    fn bn(&self, channels: usize) -> LayerSpec {
        LayerSpec::Batchnorm2d {
            channels,
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        }
    }

    /// Check that the stack maps `[1, 1, H, W]` (after padding) back to itself.
    pub fn check(&self) -> Result<Sequential> {
        let net = Sequential::new(PREFIX, self.layers()?);
        let [h, w] = self.padded_input();
        let input = [1, 1, h, w];
        let describe = |shapes: &[Vec<usize>]| {
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| format!("  {i}: {s:?}"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let mut shapes = vec![input.to_vec()];
        for (i, l) in net.layers().iter().enumerate() {
            match l.output_shape(shapes.last().expect("non-empty")) {
                Ok(s) => shapes.push(s),
                Err(e) => {
                    return Err(FgcmError::Config(format!(
                        "genuinizer layer {i} ({}) fails: {e}\nshapes so far:\n{}",
                        l.kind(),
                        describe(&shapes)
                    )))
                }
            }
        }
        if shapes.last().expect("non-empty") != &input {
            return Err(FgcmError::Config(format!(
                "genuinizer does not map {input:?} back to itself:\n{}",
                describe(&shapes)
            )));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenuinizerMeta {
    pub source: Key,
    pub epochs_trained: usize,
    pub final_loss: Option<f64>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: String,
    arch: GenuinizerArch,
    meta: GenuinizerMeta,
}

#[derive(Debug, Clone)]
pub struct GenuinizerModel {
    arch: GenuinizerArch,
    net: Sequential,
    weights: Weights,
    pub meta: GenuinizerMeta,
}

pub fn build_genuinizer(arch: &GenuinizerArch, source: Key, seed: u64) -> Result<GenuinizerModel> {
    let net = arch.check()?;
    let weights = Weights::init(&[&net], seed);
    Ok(GenuinizerModel {
        arch: arch.clone(),
        net,
        weights,
        meta: GenuinizerMeta {
            source,
            epochs_trained: 0,
            final_loss: None,
            history: TrainHistory::default(),
        },
    })
}

impl GenuinizerModel {
    pub fn arch(&self) -> &GenuinizerArch {
        &self.arch
    }

    pub fn source(&self) -> Key {
        self.meta.source
    }

    pub fn is_trained(&self) -> bool {
        self.meta.epochs_trained > 0
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.params.total_len()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &fgcm_engine::Tensor<f32>)> {
        self.weights.params.iter().chain(self.weights.buffers.iter())
    }

    fn forward<R: rand::Rng>(
        &self,
        g: &mut fgcm_engine::Graph<f32>,
        x: fgcm_engine::Var,
        ctx: &mut fgcm_engine::Forward<'_, f32, R>,
    ) -> Result<fgcm_engine::Var> {
        forward_with(&self.net, &self.arch, g, x, ctx)
    }

    fn run(&self, feats: &[&Feature]) -> Result<Vec<Feature>> {
        let [h, w] = self.arch.input;
        let mut out = Vec::with_capacity(feats.len());
        for chunk in feats.chunks(INFER_BATCH) {
            let x = stack(chunk, h, w)?;
            let y = self.weights.infer(|g, ctx| {
                let xv = g.constant(x)?;
                self.forward(g, xv, ctx)
            })?;
            for (f, vals) in chunk.iter().zip(y.values().chunks(h * w)) {
                out.push(feature_from(&f.id, h, w, vals)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model: PREFIX.into(),
            arch: self.arch.clone(),
            meta: self.meta.clone(),
        };
        self.weights.save(path, &serde_json::to_string(&header).expect("header serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_model_checkpoint(path)?;
        let header: CheckpointHeader = serde_json::from_str(&ck.metadata).map_err(|e| FgcmError::Format {
            path: path.to_path_buf(),
            detail: format!("bad genuinizer metadata: {e}"),
        })?;
        if header.model != PREFIX {
            return Err(FgcmError::Format {
                path: path.to_path_buf(),
                detail: format!("checkpoint holds a {} model, not a genuinizer", header.model),
            });
        }
        let mut model = build_genuinizer(&header.arch, header.meta.source, 0)?;
        model.weights.load_into(path, &ck.tensors)?;
        model.meta = header.meta;
        Ok(model)
    }
}

/// Train on features of the model's source class only; any row of the other
/// class is a contract violation. The best epoch (lowest holdout loss when a
/// holdout is configured, training loss otherwise) is kept.
pub fn train_genuinizer(model: &mut GenuinizerModel, data: &[Example<'_>], cfg: &TrainRunConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(FgcmError::Input("genuinizer training set is empty".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.key != model.meta.source) {
        return Err(FgcmError::Contract(format!(
            "genuinizer trains on {} features only, but {} is {}",
            model.meta.source, bad.feature.id, bad.key
        )));
    }
    let [h, w] = model.arch.input;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, held) = holdout_split(data.len(), cfg.holdout_fraction, &mut rng);
    let held_feats: Vec<&Feature> = held.iter().map(|&i| data[i].feature).collect();
    let mut opt = Adam::new(cfg.adam, &model.weights.params)?;
    let mut history = TrainHistory::default();
    let mut selector = Selector::new(cfg.patience);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let feats: Vec<&Feature> = batch.iter().map(|&i| data[i].feature).collect();
            let x = stack(&feats, h, w)?;
            let target = x.clone();
            let net = model.net.clone();
            let arch = model.arch.clone();
            let loss = model.weights.step(&mut opt, &mut rng, |g, ctx| {
                let xv = g.constant(x)?;
                let y = forward_with(&net, &arch, g, xv, ctx)?;
                Ok(g.mse(y, &target)?)
            })?;
            total += loss * batch.len() as f64;
        }
        let loss = total / train.len() as f64;
        history.loss.push(loss);
        let metric = if held_feats.is_empty() {
            loss
        } else {
            let l = mean(&reconstruction_errors_unchecked(model, &held_feats)?);
            history.selection_loss.push(l);
            l
        };
        log::info!("genuinizer epoch {}: loss {loss:.6} selection {metric:.6}", epoch + 1);
        if selector.observe(epoch, metric, &model.weights) {
            break;
        }
    }
    if let Some(best) = selector.snapshot.take() {
        model.weights = best;
    }
    history.best_epoch = selector.best_epoch;
    model.meta.epochs_trained += history.loss.len();
    model.meta.final_loss = Some(selector.best);
    model.meta.history = history.clone();
    Ok(history)
}

fn forward_with<R: rand::Rng>(
    net: &Sequential,
    arch: &GenuinizerArch,
    g: &mut fgcm_engine::Graph<f32>,
    x: fgcm_engine::Var,
    ctx: &mut fgcm_engine::Forward<'_, f32, R>,
) -> Result<fgcm_engine::Var> {
    let [ph, pw] = arch.padding();
    let [h, w] = arch.input;
    let mut v = x;
    if ph > 0 || pw > 0 {
        v = g.pad_hw(v, ph, pw)?;
    }
    v = net.forward(g, v, ctx)?;
    if ph > 0 || pw > 0 {
        v = g.crop_hw(v, h, w)?;
    }
    Ok(v)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ensure_trained(model: &GenuinizerModel) -> Result<()> {
    if model.is_trained() {
        Ok(())
    } else {
        Err(FgcmError::Untrained(
            "genuinizer has not been trained; use genuinize_unchecked to run it anyway".into(),
        ))
    }
}

/// Eval-mode transform of one feature.
pub fn genuinize(model: &GenuinizerModel, feat: &Feature) -> Result<Feature> {
    ensure_trained(model)?;
    genuinize_unchecked(model, feat)
}

pub fn genuinize_unchecked(model: &GenuinizerModel, feat: &Feature) -> Result<Feature> {
    Ok(model.run(&[feat])?.pop().expect("one output"))
}

pub fn genuinize_batch(model: &GenuinizerModel, feats: &[&Feature]) -> Result<Vec<Feature>> {
    ensure_trained(model)?;
    model.run(feats)
}

/// Mean squared difference between a feature and its transform.
pub fn reconstruction_error(model: &GenuinizerModel, feat: &Feature) -> Result<f64> {
    ensure_trained(model)?;
    Ok(reconstruction_errors_unchecked(model, &[feat])?[0])
}

pub fn reconstruction_errors(model: &GenuinizerModel, feats: &[&Feature]) -> Result<Vec<f64>> {
    ensure_trained(model)?;
    reconstruction_errors_unchecked(model, feats)
}

fn reconstruction_errors_unchecked(model: &GenuinizerModel, feats: &[&Feature]) -> Result<Vec<f64>> {
    let outs = model.run(feats)?;
    Ok(feats
        .iter()
        .zip(&outs)
        .map(|(f, o)| {
            let s: f64 = f.data.iter().zip(&o.data).map(|(a, b)| (a - b) * (a - b)).sum();
            s / f.data.len() as f64
        })
        .collect())
}
