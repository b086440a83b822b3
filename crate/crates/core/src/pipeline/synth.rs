//! Seeded two-class synthetic corpus.
//!
//! Generator version 1. For a clip of duration `D ~ U(1.5, 5)` s at rate `fs`:
//!
//! ```text
//! f0(t)   = F * (1 + 0.08 sin(2 pi r t + p)),   F ~ U(100, 220), r ~ U(0.5, 3)
//! th(t)   = 2 pi * cumsum(f0) / fs  (+ jumps for spoof, see below)
//! env(t)  = 0.1 + 0.9 * (0.5 - 0.5 cos(2 pi s t + q)),   s ~ U(3, 6)
//! v(t)    = sum_h a_h sin(h th(t) + c_h) / sum_h a_h,
//!           h = 1..floor(3800 / (1.08 F)),  a_h = u_h / h,  u_h ~ U(0.7, 1)
//! x(t)    = 0.4 env(t) v(t) + n(t),   n ~ N(0, 0.003^2)
//! ```
//!
//! Spoof clips add two artifacts on top of the same recipe:
//!
//! ```text
//! buzz(t) = 0.05 / sqrt(M) * sum_m sin(2 pi m B t + d_m),  B ~ U(180, 320),
//!           over the M harmonics with 3500 <= m B <= 7500 Hz
//! th(t)  += J_k for t past the k-th jump time; jump gaps ~ U(30, 50) ms,
//!           J_k ~ +-U(pi/2, pi)
//! ```
//!
//! Every clip draws from its own ChaCha8 stream, so the corpus is a pure
//! function of the seed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::Subset;
use crate::error::{io_err, Result};
use crate::frontend::{write_wav, AudioClip};
use crate::metrics::Key;

pub const GENERATOR_VERSION: u32 = 1;
pub const NOISE_STD: f64 = 0.003;
pub const BUZZ_BAND: (f64, f64) = (3500.0, 7500.0);

pub fn clip_id(subset: Subset, key: Key, index: usize) -> String {
    format!("{subset}_{key}_{:04}", index + 1)
}

fn stream(subset: Subset, key: Key, index: usize) -> u64 {
    let s = Subset::ALL.iter().position(|&x| x == subset).expect("subset") as u64;
    ((s * 2 + key.label() as u64) << 32) | index as u64
}

/// Generate one clip deterministically.
pub fn synth_clip(seed: u64, subset: Subset, key: Key, index: usize, fs: u32) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream(subset, key, index));
    let fsf = fs as f64;
    let duration = rng.gen_range(1.5..5.0);
    let len = (duration * fsf).round() as usize;

    let f0_base: f64 = rng.gen_range(100.0..220.0);
    let vib_rate = rng.gen_range(0.5..3.0);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let syl_rate = rng.gen_range(3.0..6.0);
    let syl_phase = rng.gen_range(0.0..2.0 * PI);
    let harmonics = ((3800.0 / (1.08 * f0_base)).floor() as usize).max(1);
    let amps: Vec<f64> = (1..=harmonics).map(|h| rng.gen_range(0.7..1.0) / h as f64).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let amp_sum: f64 = amps.iter().sum();

    let spoof = key == Key::Spoof;
    let mut jumps = Vec::new();
    let mut buzz = Vec::new();
    if spoof {
        let mut t = 0.0;
        loop {
            t += rng.gen_range(0.030..0.050);
            if t >= duration {
                break;
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            jumps.push(((t * fsf) as usize, sign * rng.gen_range(PI / 2.0..PI)));
        }
        let b: f64 = rng.gen_range(180.0..320.0);
        let first = (BUZZ_BAND.0 / b).ceil() as usize;
        let last = (BUZZ_BAND.1 / b).floor() as usize;
        for m in first..=last {
            buzz.push((2.0 * PI * m as f64 * b / fsf, rng.gen_range(0.0..2.0 * PI)));
        }
    }
    let buzz_gain = if buzz.is_empty() { 0.0 } else { 0.05 / (buzz.len() as f64).sqrt() };
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");

    let mut samples = Vec::with_capacity(len);
    let mut theta = 0.0;
    let mut next_jump = 0;
    for n in 0..len {
        let t = n as f64 / fsf;
        while next_jump < jumps.len() && jumps[next_jump].0 <= n {
            theta += jumps[next_jump].1;
            next_jump += 1;
        }
        let env = 0.1 + 0.9 * (0.5 - 0.5 * (2.0 * PI * syl_rate * t + syl_phase).cos());
        let voiced: f64 = amps
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(h, (a, c))| a * ((h + 1) as f64 * theta + c).sin())
            .sum::<f64>()
            / amp_sum;
        let mut x = 0.4 * env * voiced;
        for &(w, d) in &buzz {
            x += buzz_gain * (w * n as f64 + d).sin();
        }
        x += noise.sample(&mut rng);
        samples.push(x.clamp(-1.0, 1.0));
        let f0 = f0_base * (1.0 + 0.08 * (2.0 * PI * vib_rate * t + vib_phase).sin());
        theta += 2.0 * PI * f0 / fsf;
    }
    AudioClip {
        samples,
        sample_rate: fs,
    }
}

/// Write `per_class` bonafide and spoof clips for every subset plus a
/// manifest covering all of them. Returns the manifest path.
pub fn write_corpus(out: &Path, per_class: usize, seed: u64, fs: u32) -> Result<PathBuf> {
    let audio = out.join("audio");
    std::fs::create_dir_all(&audio).map_err(io_err(&audio))?;
    let mut manifest = String::new();
    for subset in Subset::ALL {
        for key in [Key::Bonafide, Key::Spoof] {
            for i in 0..per_class {
                let id = clip_id(subset, key, i);
                let clip = synth_clip(seed, subset, key, i, fs);
                write_wav(&audio.join(format!("{id}.wav")), &clip)?;
                manifest.push_str(&format!("{id} audio/{id}.wav {key} {subset}\n"));
            }
        }
    }
    let path = out.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}
