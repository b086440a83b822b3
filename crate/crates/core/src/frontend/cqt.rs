//! Constant-Q transform with Hann-windowed complex exponential kernels.
//!
//! Frame `t` of bin `k` is
//!
//! ```text
//! X[k, t] = 1/N_k * sum_{n < N_k} x[t*hop - N_k/2 + n] * w[n] * exp(-i*w_k*n)
//! ```
//!
//! with samples outside the clip taken as zero. The Hann window
//! `w[n] = 0.5 - 0.5*cos(2*pi*n/(N-1))` splits into three complex
//! exponentials, so each bin reduces to differences of three running sums of
//! the modulated signal. Cost is O(bins * len) per clip instead of
//! O(bins * frames * N_k) for direct summation, and the result is the same
//! sum evaluated in a different order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{FgcmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqtConfig {
    pub sample_rate: u32,
    pub octaves: u32,
    pub bins_per_octave: u32,
    /// Highest analysed frequency; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub hop: usize,
    pub q_scale: f64,
}

impl Default for CqtConfig {
    fn default() -> Self {
        CqtConfig {
            sample_rate: 16000,
            octaves: 9,
            bins_per_octave: 96,
            f_max: None,
            hop: 256,
            q_scale: 1.0,
        }
    }
}

impl CqtConfig {
    pub fn bins(&self) -> usize {
        (self.octaves * self.bins_per_octave) as usize
    }

    pub fn frames(&self, len: usize) -> usize {
        1 + len.saturating_sub(1) / self.hop
    }
}

/// Complex CQT output, bins x frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrogram {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    pub fn power(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).collect()
    }
}

/// Precomputed bin geometry for one configuration.
#[derive(Debug, Clone)]
pub struct Cqt {
    cfg: CqtConfig,
    freqs: Vec<f64>,
    lengths: Vec<usize>,
    q: f64,
}

impl Cqt {
    pub fn new(cfg: &CqtConfig) -> Result<Self> {
        let fs = cfg.sample_rate as f64;
        if cfg.sample_rate == 0 {
            return Err(FgcmError::Config("sample_rate must be positive".into()));
        }
        if cfg.octaves == 0 || cfg.bins_per_octave == 0 {
            return Err(FgcmError::Config("octaves and bins_per_octave must be >= 1".into()));
        }
        if cfg.hop == 0 {
            return Err(FgcmError::Config("hop must be >= 1".into()));
        }
        if !(cfg.q_scale > 0.0 && cfg.q_scale.is_finite()) {
            return Err(FgcmError::Config(format!("q_scale must be positive, got {}", cfg.q_scale)));
        }
        let f_max = cfg.f_max.unwrap_or(fs / 2.0);
        if f_max > fs / 2.0 {
            return Err(FgcmError::Config(format!(
                "f_max {f_max} Hz exceeds Nyquist {} Hz",
                fs / 2.0
            )));
        }
        let f_min = f_max / 2f64.powi(cfg.octaves as i32);
        if !(f_min > 0.0 && f_min.is_finite()) {
            return Err(FgcmError::Config(format!("f_min {f_min} Hz is not positive")));
        }
        let b = cfg.bins_per_octave as usize;
        // octave multiples are exact powers of two so f[k + B] == 2 * f[k]
        let freqs: Vec<f64> = (0..cfg.bins())
            .map(|k| f_min * (1u64 << (k / b)) as f64 * 2f64.powf((k % b) as f64 / b as f64))
            .collect();
        let q = cfg.q_scale / (2f64.powf(1.0 / b as f64) - 1.0);
        let lengths = freqs.iter().map(|f| (q * fs / f).ceil() as usize).collect();
        Ok(Cqt {
            cfg: cfg.clone(),
            freqs,
            lengths,
            q,
        })
    }

    pub fn config(&self) -> &CqtConfig {
        &self.cfg
    }

    pub fn bins(&self) -> usize {
        self.freqs.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn kernel_lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn quality(&self) -> f64 {
        self.q
    }

    pub fn transform(&self, x: &[f64]) -> Result<Spectrogram> {
        if x.is_empty() {
            return Err(FgcmError::Input("cannot transform an empty signal".into()));
        }
        let frames = self.cfg.frames(x.len());
        let bins = self.bins();
        let mut re = vec![0.0; bins * frames];
        let mut im = vec![0.0; bins * frames];
        let mut sums = RunningSums::new(x.len());
        for k in 0..bins {
            self.bin(x, k, &mut sums, &mut re[k * frames..(k + 1) * frames], &mut im[k * frames..(k + 1) * frames]);
        }
        Ok(Spectrogram { bins, frames, re, im })
    }

    fn bin(&self, x: &[f64], k: usize, s: &mut RunningSums, re: &mut [f64], im: &mut [f64]) {
        let n = self.lengths[k];
        let omega = 2.0 * PI * self.freqs[k] / self.cfg.sample_rate as f64;
        let len = x.len() as isize;
        let half = (n / 2) as isize;
        if n == 1 {
            // degenerate single-tap kernel: window is [1]
            for t in 0..re.len() {
                let a = (t * self.cfg.hop) as isize;
                re[t] = if a < len { x[a as usize] } else { 0.0 };
                im[t] = 0.0;
            }
            return;
        }
        let theta = 2.0 * PI / (n - 1) as f64;
        s.fill(x, omega, 0);
        s.fill(x, omega - theta, 1);
        s.fill(x, omega + theta, 2);
        let inv_n = 1.0 / n as f64;
        for t in 0..re.len() {
            let a = (t * self.cfg.hop) as isize - half;
            let lo = a.max(0);
            let hi = (a + n as isize).min(len);
            if lo >= hi {
                re[t] = 0.0;
                im[t] = 0.0;
                continue;
            }
            let (lo, hi) = (lo as usize, hi as usize);
            let d0 = s.diff(0, lo, hi);
            let dp = s.diff(1, lo, hi);
            let dm = s.diff(2, lo, hi);
            let af = a as f64;
            let (st, ct) = (theta * af).sin_cos();
            // e^{-i theta a} * dp and e^{+i theta a} * dm
            let p = (ct * dp.0 + st * dp.1, ct * dp.1 - st * dp.0);
            let m = (ct * dm.0 - st * dm.1, ct * dm.1 + st * dm.0);
            let inner = (0.5 * d0.0 - 0.25 * (p.0 + m.0), 0.5 * d0.1 - 0.25 * (p.1 + m.1));
            let (sw, cw) = (omega * af).sin_cos();
            re[t] = inv_n * (cw * inner.0 - sw * inner.1);
            im[t] = inv_n * (cw * inner.1 + sw * inner.0);
        }
    }
}

const RESEED: usize = 64;

/// Prefix sums of `x[m] * exp(-i f m)` for three frequencies.
struct RunningSums {
    re: [Vec<f64>; 3],
    im: [Vec<f64>; 3],
}

impl RunningSums {
    fn new(len: usize) -> Self {
        RunningSums {
            re: std::array::from_fn(|_| vec![0.0; len + 1]),
            im: std::array::from_fn(|_| vec![0.0; len + 1]),
        }
    }

    fn fill(&mut self, x: &[f64], f: f64, slot: usize) {
        let (re, im) = (&mut self.re[slot], &mut self.im[slot]);
        let (ss, cs) = f.sin_cos();
        let (mut zr, mut zi) = (1.0, 0.0);
        let (mut ar, mut ai) = (0.0, 0.0);
        re[0] = 0.0;
        im[0] = 0.0;
        for (m, &v) in x.iter().enumerate() {
            if m % RESEED == 0 {
                let (s, c) = (f * m as f64).sin_cos();
                zr = c;
                zi = -s;
            }
            ar += v * zr;
            ai += v * zi;
            re[m + 1] = ar;
            im[m + 1] = ai;
            // z *= exp(-i f)
            let nr = zr * cs + zi * ss;
            zi = zi * cs - zr * ss;
            zr = nr;
        }
    }

    fn diff(&self, slot: usize, lo: usize, hi: usize) -> (f64, f64) {
        (
            self.re[slot][hi] - self.re[slot][lo],
            self.im[slot][hi] - self.im[slot][lo],
        )
    }
}
