//! DET sweep, equal error rate and normalized minimum tandem detection cost.
//!
//! Thresholds are every distinct score plus +inf. A trial is accepted as
//! bonafide when `score >= threshold`, so
//! `P_miss(t) = #{bonafide: score < t} / #bonafide` and
//! `P_fa(t) = #{spoof: score >= t} / #spoof`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, FgcmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    /// Class index used by the classifiers.
    pub fn label(self) -> usize {
        match self {
            Key::Bonafide => 0,
            Key::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Key {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            other => Err(format!("unknown key {other:?} (expected bonafide or spoof)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: String,
    pub key: Key,
    pub score: f64,
}

impl Trial {
    pub fn new(id: impl Into<String>, key: Key, score: f64) -> Self {
        Trial {
            id: id.into(),
            key,
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub thresholds: Vec<f64>,
    pub p_miss: Vec<f64>,
    pub p_fa: Vec<f64>,
}

/// Split scores into (positive, negative) after validating them.
fn split(trials: &[Trial]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in trials {
        if !t.score.is_finite() {
            return Err(FgcmError::Input(format!("trial {} has non-finite score", t.id)));
        }
        match t.key {
            Key::Bonafide => pos.push(t.score),
            Key::Spoof => neg.push(t.score),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(FgcmError::Input(format!(
            "need both classes, got {} bonafide and {} spoof trials",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos, neg))
}

/// DET curve of positive vs negative scores (both non-empty, finite).
pub(crate) fn sweep(pos: &[f64], neg: &[f64]) -> DetCurve {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut thresholds = Vec::new();
    let mut p_miss = Vec::new();
    let mut p_fa = Vec::new();
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        thresholds.push(t);
        p_miss.push(pos_below as f64 / np);
        p_fa.push((neg.len() - neg_below) as f64 / nn);
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    thresholds.push(f64::INFINITY);
    p_miss.push(1.0);
    p_fa.push(0.0);
    DetCurve {
        thresholds,
        p_miss,
        p_fa,
    }
}

pub fn det_curve(trials: &[Trial]) -> Result<DetCurve> {
    let (pos, neg) = split(trials)?;
    Ok(sweep(&pos, &neg))
}

/// Crossing of P_miss and P_fa, linearly interpolated between the two DET
/// points that bracket it. Returns `(eer, threshold)`.
pub(crate) fn eer_of(det: &DetCurve) -> (f64, f64) {
    let d = |j: usize| det.p_fa[j] - det.p_miss[j];
    let j = (0..det.thresholds.len())
        .find(|&j| d(j) <= 0.0)
        .expect("last DET point has P_fa 0 and P_miss 1");
    if d(j) == 0.0 || j == 0 {
        return (det.p_miss[j], finite_threshold(det, j));
    }
    let (a, b) = (d(j - 1), d(j));
    let alpha = a / (a - b);
    let eer = det.p_miss[j - 1] + alpha * (det.p_miss[j] - det.p_miss[j - 1]);
    let (t0, t1) = (det.thresholds[j - 1], det.thresholds[j]);
    let thr = if t1.is_finite() { t0 + alpha * (t1 - t0) } else { t0 };
    (eer, thr)
}

fn finite_threshold(det: &DetCurve, j: usize) -> f64 {
    if det.thresholds[j].is_finite() {
        det.thresholds[j]
    } else {
        det.thresholds[j - 1]
    }
}

pub fn compute_eer(trials: &[Trial]) -> Result<(f64, f64)> {
    Ok(eer_of(&det_curve(trials)?))
}

/// Rates of the automatic speaker verification system the countermeasure is
/// placed in front of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsvOperatingPoint {
    pub p_fa_asv: f64,
    pub p_miss_asv: f64,
    pub p_miss_spoof_asv: f64,
}

impl Default for AsvOperatingPoint {
    /// An ideal verifier: no errors on target and non-target trials, and
    /// every spoof accepted.
    fn default() -> Self {
        AsvOperatingPoint {
            p_fa_asv: 0.0,
            p_miss_asv: 0.0,
            p_miss_spoof_asv: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsvKey {
    Target,
    Nontarget,
    Spoof,
}

impl FromStr for AsvKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(AsvKey::Target),
            "nontarget" => Ok(AsvKey::Nontarget),
            "spoof" => Ok(AsvKey::Spoof),
            other => Err(format!("unknown ASV key {other:?} (expected target, nontarget or spoof)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsvTrial {
    pub id: String,
    pub key: AsvKey,
    pub score: f64,
}

impl AsvOperatingPoint {
    /// Fix the ASV threshold at its target/non-target EER and measure all
    /// three rates there.
    pub fn from_asv_trials(trials: &[AsvTrial]) -> Result<Self> {
        let pick = |k: AsvKey| -> Vec<f64> { trials.iter().filter(|t| t.key == k).map(|t| t.score).collect() };
        let (tar, non, spoof) = (pick(AsvKey::Target), pick(AsvKey::Nontarget), pick(AsvKey::Spoof));
        if tar.is_empty() || non.is_empty() || spoof.is_empty() {
            return Err(FgcmError::Input(format!(
                "ASV scores need target, nontarget and spoof trials (got {}, {}, {})",
                tar.len(),
                non.len(),
                spoof.len()
            )));
        }
        if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
            return Err(FgcmError::Input(format!("ASV trial {} has non-finite score", t.id)));
        }
        let (_, thr) = eer_of(&sweep(&tar, &non));
        let below = |v: &[f64]| v.iter().filter(|&&s| s < thr).count() as f64 / v.len() as f64;
        Ok(AsvOperatingPoint {
            p_fa_asv: 1.0 - below(&non),
            p_miss_asv: below(&tar),
            p_miss_spoof_asv: below(&spoof),
        })
    }
}

/// Priors, costs and ASV operating point of the tandem cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfParams {
    pub pi_tar: f64,
    pub pi_non: f64,
    pub pi_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    pub asv: AsvOperatingPoint,
}

impl Default for TdcfParams {
    fn default() -> Self {
        TdcfParams {
            pi_tar: 0.9405,
            pi_non: 0.0095,
            pi_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            asv: AsvOperatingPoint::default(),
        }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.pi_tar, self.pi_non, self.pi_spoof];
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FgcmError::Config(format!("priors {priors:?} must be >= 0 and sum to 1")));
        }
        let costs = [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm];
        if costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(FgcmError::Config(format!("costs {costs:?} must be positive")));
        }
        let rates = [self.asv.p_fa_asv, self.asv.p_miss_asv, self.asv.p_miss_spoof_asv];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(FgcmError::Config(format!("ASV rates {rates:?} must lie in [0, 1]")));
        }
        Ok(())
    }

    /// The two tandem cost coefficients `(C1, C2)`.
    pub fn coefficients(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let c1 = self.pi_tar * (self.c_miss_cm - self.c_miss_asv * self.asv.p_miss_asv)
            - self.pi_non * self.c_fa_asv * self.asv.p_fa_asv;
        let c2 = self.c_fa_cm * self.pi_spoof * (1.0 - self.asv.p_miss_spoof_asv);
        if c1 <= 0.0 || c2 <= 0.0 {
            return Err(FgcmError::Config(format!(
                "degenerate tandem cost: C1 = {c1}, C2 = {c2} (both must be positive)"
            )));
        }
        Ok((c1, c2))
    }
}

pub(crate) fn min_tdcf_of(det: &DetCurve, c1: f64, c2: f64) -> (f64, f64) {
    let norm = c1.min(c2);
    let mut best = (f64::INFINITY, 0.0);
    for j in 0..det.thresholds.len() {
        let v = (c1 * det.p_miss[j] + c2 * det.p_fa[j]) / norm;
        if v < best.0 {
            best = (v, finite_threshold(det, j));
        }
    }
    best
}

/// Normalized minimum t-DCF and the threshold attaining it.
pub fn min_tdcf(trials: &[Trial], params: &TdcfParams) -> Result<(f64, f64)> {
    let (c1, c2) = params.coefficients()?;
    Ok(min_tdcf_of(&det_curve(trials)?, c1, c2))
}

fn parse_lines<T>(
    path: &Path,
    text: &str,
    mut parse: impl FnMut(&[&str]) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        out.push(parse(&fields).map_err(|detail| FgcmError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        })?);
    }
    Ok(out)
}

fn parse_score(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad score {s:?}"))?;
    if !v.is_finite() {
        return Err(format!("score {s:?} is not finite"));
    }
    Ok(v)
}

/// Parse `utterance_id key score` lines.
pub fn parse_scores(path: &Path, text: &str) -> Result<Vec<Trial>> {
    parse_lines(path, text, |f| match f {
        [id, key, score] => Ok(Trial::new(*id, key.parse()?, parse_score(score)?)),
        _ => Err(format!("expected 3 fields (id key score), found {}", f.len())),
    })
}

pub fn read_scores(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_scores(path, &text)
}

/// Scores are written in shortest round-trip form.
pub fn format_scores(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!("{} {} {}\n", t.id, t.key, t.score));
    }
    out
}

pub fn write_scores(trials: &[Trial], path: &Path) -> Result<()> {
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite() || t.id.is_empty() || t.id.contains(char::is_whitespace)) {
        return Err(FgcmError::Input(format!("trial {:?} cannot be written", t.id)));
    }
    std::fs::write(path, format_scores(trials)).map_err(io_err(path))
}

/// Parse `trial_id asv_key score` lines.
pub fn read_asv_scores(path: &Path) -> Result<Vec<AsvTrial>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_lines(path, &text, |f| match f {
        [id, key, score] => Ok(AsvTrial {
            id: id.to_string(),
            key: key.parse()?,
            score: parse_score(score)?,
        }),
        _ => Err(format!("expected 3 fields (id asv_key score), found {}", f.len())),
    })
}

/// DET curve as `threshold,p_miss,p_fa` rows.
pub fn write_det_csv(det: &DetCurve, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(f);
    let mut body = String::from("threshold,p_miss,p_fa\n");
    for j in 0..det.thresholds.len() {
        body.push_str(&format!("{},{},{}\n", det.thresholds[j], det.p_miss[j], det.p_fa[j]));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io_err(path))
}
