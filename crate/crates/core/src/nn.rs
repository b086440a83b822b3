//! Plumbing shared by the two networks: batching, train steps, snapshots
//! and checkpoint I/O.

use std::path::Path;

use fgcm_engine::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Forward, Graph, ParamSet, Sequential, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, FgcmError, Result};
use crate::frontend::Feature;
use crate::metrics::Key;

/// Optimisation settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Filled in from the run seed by the pipeline.
    #[serde(skip)]
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many epochs without improvement; 0 disables.
    pub patience: usize,
    /// Fraction of the training rows held out for model selection.
    pub holdout_fraction: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 30,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            patience: 0,
            holdout_fraction: 0.0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FgcmError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(FgcmError::Config(format!(
                "holdout_fraction {} must lie in [0, 1)",
                self.holdout_fraction
            )));
        }
        self.adam.validate()?;
        Ok(())
    }
}

/// A feature with its class key.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub feature: &'a Feature,
    pub key: Key,
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accuracy: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Weights {
    pub params: ParamSet<f32>,
    pub buffers: ParamSet<f32>,
}

impl Weights {
    pub fn init(nets: &[&Sequential], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        for net in nets {
            net.init(&mut rng, &mut params, &mut buffers);
        }
        Weights { params, buffers }
    }

    /// One optimiser step on the loss produced by `build`.
    pub fn step<R: Rng>(
        &mut self,
        opt: &mut Adam<f32>,
        rng: &mut R,
        build: impl FnOnce(&mut Graph<f32>, &mut Forward<'_, f32, R>) -> Result<Var>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g)?;
        let loss = {
            let mut ctx = Forward {
                params: &self.params,
                vars: &vars,
                buffers: &mut self.buffers,
                train: true,
                rng,
            };
            build(&mut g, &mut ctx)?
        };
        let value = g.value(loss).values()[0] as f64;
        g.backward(loss)?;
        let grads = self.params.collect_grads(&g, &vars);
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Eval-mode forward pass; running statistics are left untouched.
    pub fn infer(
        &self,
        build: impl FnOnce(&mut Graph<f32>, &mut Forward<'_, f32, ChaCha8Rng>) -> Result<Var>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = self.params.bind_constants(&mut g)?;
        let mut buffers = self.buffers.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Forward {
            params: &self.params,
            vars: &vars,
            buffers: &mut buffers,
            train: false,
            rng: &mut rng,
        };
        let out = build(&mut g, &mut ctx)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let tensors = self.params.iter().chain(self.buffers.iter());
        write_checkpoint(std::io::BufWriter::new(file), metadata, tensors).map_err(|e| match e {
            fgcm_engine::EngineError::Io(source) => FgcmError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other.into(),
        })
    }

    /// Overwrite every tensor of `self` with the same-named tensor from a
    /// checkpoint; names and shapes must match exactly.
    pub fn load_into(&mut self, path: &Path, tensors: &[fgcm_engine::StoredTensor]) -> Result<()> {
        let bad = |detail: String| FgcmError::Format {
            path: path.to_path_buf(),
            detail,
        };
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(bad(format!("checkpoint holds {} tensors, model expects {expected}", tensors.len())));
        }
        for st in tensors {
            let slot = match self.params.get_mut(&st.name) {
                Some(t) => t,
                None => self
                    .buffers
                    .get_mut(&st.name)
                    .ok_or_else(|| bad(format!("unexpected tensor {}", st.name)))?,
            };
            let t = st.to_tensor::<f32>()?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    st.name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

pub(crate) fn read_model_checkpoint(path: &Path) -> Result<fgcm_engine::Checkpoint> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_checkpoint(std::io::BufReader::new(file)).map_err(|e| FgcmError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Stack features into an `[N, 1, rows, cols]` tensor.
pub(crate) fn stack(feats: &[&Feature], rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let mut values = Vec::with_capacity(feats.len() * rows * cols);
    for f in feats {
        if (f.rows, f.cols) != (rows, cols) {
            return Err(FgcmError::Input(format!(
                "feature {} is {}x{}, model expects {rows}x{cols}",
                f.id, f.rows, f.cols
            )));
        }
        values.extend(f.data.iter().map(|&v| v as f32));
    }
    Ok(Tensor::new(vec![feats.len(), 1, rows, cols], values)?)
}

/// Deterministic train/holdout split.
pub(crate) fn holdout_split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction <= 0.0 || n < 2 {
        return (idx, Vec::new());
    }
    idx.shuffle(rng);
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let held = idx.split_off(n - k);
    idx.sort_unstable();
    let mut held = held;
    held.sort_unstable();
    (idx, held)
}

/// Best-so-far tracker with optional patience.
pub(crate) struct Selector {
    pub best: f64,
    pub best_epoch: usize,
    pub snapshot: Option<Weights>,
    since: usize,
    patience: usize,
}

impl Selector {
    pub fn new(patience: usize) -> Self {
        Selector {
            best: f64::INFINITY,
            best_epoch: 0,
            snapshot: None,
            since: 0,
            patience,
        }
    }

    /// Record an epoch; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, metric: f64, weights: &Weights) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.snapshot = Some(weights.clone());
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

pub(crate) fn feature_from(id: &str, rows: usize, cols: usize, values: &[f32]) -> Result<Feature> {
    Feature::new(id, rows, cols, values.iter().map(|&v| v as f64).collect())
}
