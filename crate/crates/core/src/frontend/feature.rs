use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::audio::AudioClip;
use super::cqt::{Cqt, CqtConfig};
use crate::error::{io_err, FgcmError, Result};

/// A bins x frames matrix of log-power values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn new(id: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if rows * cols != data.len() {
            return Err(FgcmError::Input(format!(
                "feature {id}: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FgcmError::Input(format!("feature {id}: entry {i} is not finite")));
        }
        Ok(Feature { id, rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub cqt: CqtConfig,
    pub eps_floor: f64,
    /// Highest-frequency bins dropped after the log mapping.
    pub trim_top_bins: usize,
    pub frames: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            cqt: CqtConfig::default(),
            eps_floor: 1e-10,
            trim_top_bins: 1,
            frames: 256,
        }
    }
}

impl FeatureConfig {
    pub fn rows(&self) -> usize {
        self.cqt.bins().saturating_sub(self.trim_top_bins)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_floor > 0.0) {
            return Err(FgcmError::Config("eps_floor must be positive".into()));
        }
        if self.trim_top_bins >= self.cqt.bins() {
            return Err(FgcmError::Config(format!(
                "trim_top_bins {} leaves no bins out of {}",
                self.trim_top_bins,
                self.cqt.bins()
            )));
        }
        if self.frames == 0 {
            return Err(FgcmError::Config("frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// `log(max(mag^2, eps_floor))`, then drop the top `trim_top` rows.
pub fn lps(
    id: &str,
    mag: &[f64],
    bins: usize,
    frames: usize,
    eps_floor: f64,
    trim_top: usize,
) -> Result<Feature> {
    if mag.len() != bins * frames {
        return Err(FgcmError::Input(format!(
            "magnitude matrix {bins}x{frames} has {} values",
            mag.len()
        )));
    }
    if trim_top >= bins {
        return Err(FgcmError::Input(format!("cannot trim {trim_top} of {bins} bins")));
    }
    if let Some(v) = mag.iter().find(|v| !(**v >= 0.0)) {
        return Err(FgcmError::Input(format!("magnitude {v} is negative or NaN")));
    }
    let rows = bins - trim_top;
    let data = mag[..rows * frames].iter().map(|m| (m * m).max(eps_floor).ln()).collect();
    Feature::new(id, rows, frames, data)
}

/// Truncate to `target` frames, or pad by repeating the last frame.
pub fn fix_frames(feat: &Feature, target: usize) -> Result<Feature> {
    if feat.cols == 0 {
        return Err(FgcmError::Input(format!("feature {} has no frames", feat.id)));
    }
    if target == 0 {
        return Err(FgcmError::Input("target frame count must be >= 1".into()));
    }
    if feat.cols == target {
        return Ok(feat.clone());
    }
    let mut data = Vec::with_capacity(feat.rows * target);
    for r in 0..feat.rows {
        let row = feat.row(r);
        if feat.cols > target {
            data.extend_from_slice(&row[..target]);
        } else {
            data.extend_from_slice(row);
            let last = row[feat.cols - 1];
            data.extend(std::iter::repeat(last).take(target - feat.cols));
        }
    }
    Ok(Feature {
        id: feat.id.clone(),
        rows: feat.rows,
        cols: target,
        data,
    })
}

/// Audio to fixed-size log-power feature.
pub fn extract_feature(id: &str, clip: &AudioClip, cqt: &Cqt, cfg: &FeatureConfig) -> Result<Feature> {
    if clip.sample_rate != cqt.config().sample_rate {
        return Err(FgcmError::Input(format!(
            "clip {id} at {} Hz, front-end configured for {} Hz",
            clip.sample_rate,
            cqt.config().sample_rate
        )));
    }
    let spec = cqt.transform(&clip.samples)?;
    let feat = lps(id, &spec.magnitude(), spec.bins, spec.frames, cfg.eps_floor, cfg.trim_top_bins)?;
    fix_frames(&feat, cfg.frames)
}

/// Per-row mean and standard deviation over every frame of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source: String,
    pub count: usize,
}

impl NormStats {
    pub fn compute(features: &[&Feature], eps: f64, source: &str) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| FgcmError::Input("cannot compute statistics of an empty feature set".into()))?;
        if !(eps > 0.0) {
            return Err(FgcmError::Config("normalization eps must be positive".into()));
        }
        let rows = first.rows;
        if let Some(f) = features.iter().find(|f| f.rows != rows) {
            return Err(FgcmError::Input(format!("feature {} has {} rows, expected {rows}", f.id, f.rows)));
        }
        let mut mean = vec![0.0; rows];
        let mut n = 0usize;
        for f in features {
            for (r, m) in mean.iter_mut().enumerate() {
                *m += f.row(r).iter().sum::<f64>();
            }
            n += f.cols;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; rows];
        for f in features {
            for (r, v) in var.iter_mut().enumerate() {
                *v += f.row(r).iter().map(|x| (x - mean[r]) * (x - mean[r])).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(eps)).collect();
        Ok(NormStats {
            mean,
            std,
            source: source.to_string(),
            count: features.len(),
        })
    }

    fn check(&self, feat: &Feature) -> Result<()> {
        if feat.rows != self.mean.len() {
            return Err(FgcmError::Input(format!(
                "feature {} has {} rows, statistics cover {}",
                feat.id,
                feat.rows,
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, feat: &Feature) -> Result<Feature> {
        self.check(feat)?;
        let mut out = feat.clone();
        for r in 0..feat.rows {
            let (m, s) = (self.mean[r], self.std[r]);
            for v in &mut out.data[r * feat.cols..(r + 1) * feat.cols] {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, feat: &Feature) -> Result<Feature> {
        self.check(feat)?;
        let mut out = feat.clone();
        for r in 0..feat.rows {
            let (m, s) = (self.mean[r], self.std[r]);
            for v in &mut out.data[r * feat.cols..(r + 1) * feat.cols] {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| FgcmError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

pub const CACHE_MAGIC: &[u8; 4] = b"LPS1";

/// Cache layout: "LPS1", u32 id length, id bytes, u32 rows, u32 cols, then
/// rows*cols little-endian f32 values.
pub fn write_cache<W: Write>(mut w: W, feat: &Feature) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(16 + feat.id.len() + 4 * feat.data.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(feat.id.len() as u32).to_le_bytes());
    out.extend_from_slice(feat.id.as_bytes());
    out.extend_from_slice(&(feat.rows as u32).to_le_bytes());
    out.extend_from_slice(&(feat.cols as u32).to_le_bytes());
    for &v in &feat.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&out)?;
    w.flush()
}

pub fn read_cache<R: Read>(mut r: R) -> std::result::Result<Feature, String> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| e.to_string())?;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> std::result::Result<&[u8], String> {
        let end = pos + n;
        if end > buf.len() {
            return Err(format!("truncated while reading {what}"));
        }
        let s = &buf[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4, "magic")? != CACHE_MAGIC {
        return Err("not an LPS1 feature cache".into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let id_len = u32_at(take(4, "id length")?);
    let id = String::from_utf8(take(id_len, "id")?.to_vec()).map_err(|_| "id is not UTF-8".to_string())?;
    let rows = u32_at(take(4, "rows")?);
    let cols = u32_at(take(4, "cols")?);
    let count = rows.checked_mul(cols).ok_or("dimensions overflow")?;
    let data = take(count * 4, "values")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - pos));
    }
    Feature::new(id, rows, cols, data).map_err(|e| e.to_string())
}

pub fn save_cache(path: &Path, feat: &Feature) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_cache(std::io::BufWriter::new(f), feat).map_err(io_err(path))
}

pub fn load_cache(path: &Path) -> Result<Feature> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_cache(std::io::BufReader::new(f)).map_err(|detail| FgcmError::Format {
        path: path.to_path_buf(),
        detail,
    })
}
