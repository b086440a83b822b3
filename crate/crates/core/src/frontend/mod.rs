//! Audio in, fixed-size log-power constant-Q features out.

mod audio;
mod cqt;
mod feature;

pub use audio::{load_wav, write_wav, AudioClip};
pub use cqt::{Cqt, CqtConfig, Spectrogram};
pub use feature::{
    extract_feature, fix_frames, load_cache, lps, read_cache, save_cache, write_cache, Feature, FeatureConfig,
    NormStats, CACHE_MAGIC,
};
