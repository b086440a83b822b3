//! Reference implementations written straight from the definitions, shared
//! by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Centre frequencies and kernel lengths from first principles.
pub fn cqt_geometry(fs: f64, octaves: u32, bpo: u32) -> (Vec<f64>, Vec<usize>) {
    let f_min = fs / 2.0 / 2f64.powi(octaves as i32);
    let q = 1.0 / (2f64.powf(1.0 / bpo as f64) - 1.0);
    let freqs: Vec<f64> = (0..octaves * bpo)
        .map(|k| f_min * 2f64.powf(k as f64 / bpo as f64))
        .collect();
    let lengths = freqs.iter().map(|f| (q * fs / f).ceil() as usize).collect();
    (freqs, lengths)
}

/// Direct kernel summation
/// `X[k,t] = 1/N * sum_n x[t*hop - N/2 + n] * hann[n] * exp(-i w_k n)`
/// for every clip at once; each kernel is built once. Returns, per clip,
/// (re, im) in bins x frames row-major order.
pub fn direct_cqt(clips: &[Vec<f64>], fs: f64, octaves: u32, bpo: u32, hop: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (freqs, lengths) = cqt_geometry(fs, octaves, bpo);
    let bins = freqs.len();
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = clips
        .iter()
        .map(|x| {
            let frames = 1 + (x.len() - 1) / hop;
            (vec![0.0; bins * frames], vec![0.0; bins * frames])
        })
        .collect();
    let longest = clips.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..bins {
        let n = lengths[k];
        let w = 2.0 * PI * freqs[k] / fs;
        // only offsets that can land inside some clip are ever needed
        let reach = n.min(n / 2 + longest + 1);
        let kernel: Vec<(f64, f64)> = (0..reach)
            .map(|j| {
                let win = if n == 1 {
                    1.0
                } else {
                    0.5 - 0.5 * (2.0 * PI * j as f64 / (n - 1) as f64).cos()
                };
                let ph = w * j as f64;
                (win * ph.cos(), -win * ph.sin())
            })
            .collect();
        for (x, (re, im)) in clips.iter().zip(out.iter_mut()) {
            let frames = re.len() / bins;
            for t in 0..frames {
                let start = (t * hop) as isize - (n / 2) as isize;
                let (mut sr, mut si) = (0.0, 0.0);
                let j0 = (-start).max(0) as usize;
                let j1 = ((x.len() as isize - start).max(0) as usize).min(reach);
                for j in j0..j1 {
                    let v = x[(start + j as isize) as usize];
                    sr += v * kernel[j].0;
                    si += v * kernel[j].1;
                }
                re[k * frames + t] = sr / n as f64;
                im[k * frames + t] = si / n as f64;
            }
        }
    }
    out
}

/// Miss and false-alarm rates at one threshold by counting: a trial is
/// accepted when its score is >= the threshold.
pub fn rates_at(bona: &[f64], spoof: &[f64], tau: f64) -> (f64, f64) {
    let miss = bona.iter().filter(|&&s| s < tau).count() as f64 / bona.len() as f64;
    let fa = spoof.iter().filter(|&&s| s >= tau).count() as f64 / spoof.len() as f64;
    (miss, fa)
}

/// Every distinct score in ascending order, then +inf.
pub fn candidate_thresholds(bona: &[f64], spoof: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t.push(f64::INFINITY);
    t
}

/// EER as the linear interpolation of (P_miss, P_fa) between the last
/// threshold where P_fa > P_miss and the first where it is not.
pub fn brute_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = candidate_thresholds(bona, spoof)
        .into_iter()
        .map(|t| rates_at(bona, spoof, t))
        .collect();
    for j in 0..pts.len() {
        let (m1, f1) = pts[j];
        if f1 - m1 <= 0.0 {
            if j == 0 || f1 == m1 {
                return m1;
            }
            let (m0, f0) = pts[j - 1];
            let alpha = (f0 - m0) / ((f0 - m0) - (f1 - m1));
            return m0 + alpha * (m1 - m0);
        }
    }
    unreachable!("the +inf threshold rejects everything")
}

/// Tandem cost coefficients from the raw parameters.
pub fn tdcf_coefficients(
    pi_tar: f64,
    pi_non: f64,
    pi_spoof: f64,
    costs: [f64; 4],
    asv: (f64, f64, f64),
) -> (f64, f64) {
    let [c_miss_asv, c_fa_asv, c_miss_cm, c_fa_cm] = costs;
    let (p_fa_asv, p_miss_asv, p_miss_spoof_asv) = asv;
    let c1 = pi_tar * (c_miss_cm - c_miss_asv * p_miss_asv) - pi_non * c_fa_asv * p_fa_asv;
    let c2 = c_fa_cm * pi_spoof * (1.0 - p_miss_spoof_asv);
    (c1, c2)
}

/// Minimum over thresholds of (C1 P_miss + C2 P_fa) / min(C1, C2).
pub fn brute_min_tdcf(bona: &[f64], spoof: &[f64], c1: f64, c2: f64) -> f64 {
    candidate_thresholds(bona, spoof)
        .into_iter()
        .map(|t| {
            let (m, f) = rates_at(bona, spoof, t);
            (c1 * m + c2 * f) / c1.min(c2)
        })
        .fold(f64::INFINITY, f64::min)
}
