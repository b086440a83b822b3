use std::path::{Path, PathBuf};
use std::process::Command;

use fgcm::frontend::{load_cache, AudioClip};
use fgcm::genuinizer::GenuinizerModel;
use fgcm::lcnn::Mode;
use fgcm::metrics::{read_scores, Key};
use fgcm::pipeline::synth::{synth_clip, BUZZ_BAND};
use fgcm::pipeline::{
    cmd_eval, cmd_extract, cmd_report, cmd_train, parse_manifest, write_corpus, PipelineConfig, RunDir, Subset,
};
use fgcm::FgcmError;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// 59 x 32 features so whole runs take seconds.
fn small_config(mode: Mode) -> PipelineConfig {
    let mut cfg: PipelineConfig = serde_json::from_str(
        r#"{
            "features": {"cqt": {"octaves": 5, "bins_per_octave": 12}, "frames": 32},
            "genuinizer_training": {"epochs": 2, "batch_size": 2},
            "lcnn_training": {"epochs": 3, "batch_size": 4}
        }"#,
    )
    .unwrap();
    cfg.mode = mode;
    cfg.seed = 11;
    cfg.validate().unwrap();
    cfg
}

fn corpus(dir: &Path, n: usize) -> fgcm::pipeline::Manifest {
    parse_manifest(&write_corpus(&dir.join("corpus"), n, 4, 16000).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_every_subset_and_class() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 3);
    assert_eq!(m.rows.len(), 18);
    for subset in Subset::ALL {
        for key in [Key::Bonafide, Key::Spoof] {
            let n = m.subset(subset).filter(|r| r.key == key).count();
            assert_eq!(n, 3, "{subset} {key}");
        }
    }
    assert_eq!(std::fs::read_dir(dir.path().join("corpus/audio")).unwrap().count(), 18);
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(a.path(), 2, 9, 16000).unwrap();
    write_corpus(b.path(), 2, 9, 16000).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

/// Share of energy inside the buzz band, in dB, by direct FFT.
fn band_share_db(clip: &AudioClip) -> f64 {
    let n = clip.samples.len();
    let mut buf: Vec<Complex<f64>> = clip.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let fs = clip.sample_rate as f64;
    let (mut band, mut total) = (0.0, 0.0);
    for (i, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = i as f64 * fs / n as f64;
        let e = c.norm_sqr();
        total += e;
        if (BUZZ_BAND.0..=BUZZ_BAND.1).contains(&f) {
            band += e;
        }
    }
    10.0 * (band / total).log10()
}

#[test]
fn classes_differ_in_the_artifact_band() {
    let avg = |key| {
        (0..8)
            .map(|i| band_share_db(&synth_clip(2, Subset::Train, key, i, 16000)))
            .sum::<f64>()
            / 8.0
    };
    let (bona, spoof) = (avg(Key::Bonafide), avg(Key::Spoof));
    assert!(spoof - bona >= 3.0, "bonafide {bona:.1} dB, spoof {spoof:.1} dB");
}

#[test]
fn extract_writes_caches_and_stats_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = corpus(dir.path(), 1);
    m.rows.truncate(5);
    let cfg = small_config(Mode::Fg);
    let run = RunDir::new(dir.path().join("run"));
    let s = cmd_extract(&m, &cfg, &run).unwrap();
    assert_eq!((s.extracted, s.stats_rows), (5, 1));
    let first = files(&run.root);
    assert_eq!(first.len(), 6);
    let f = load_cache(&run.cache(&m.rows[0].id)).unwrap();
    assert_eq!((f.rows, f.cols), (59, 32));
    cmd_extract(&m, &cfg, &run).unwrap();
    assert_eq!(files(&run.root), first);
}

#[test]
fn corrupt_audio_is_reported_and_the_rest_extracted() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 1);
    let bad = &m.rows[3];
    std::fs::write(&bad.audio_path, b"RIFF not really").unwrap();
    let run = RunDir::new(dir.path().join("run"));
    match cmd_extract(&m, &small_config(Mode::Fg), &run) {
        Err(FgcmError::Batch { failed, total, report }) => {
            assert_eq!((failed, total), (1, 6));
            assert!(report.contains(&bad.id), "{report}");
        }
        other => panic!("expected a batch failure, got {other:?}"),
    }
    for row in m.rows.iter().filter(|r| r.id != bad.id) {
        assert!(run.cache(&row.id).exists(), "{}", row.id);
    }
    assert!(run.stats().exists());
}

#[test]
fn training_without_caches_points_at_extract() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 1);
    let err = cmd_train(&m, &small_config(Mode::Baseline), &RunDir::new(dir.path().join("run"))).unwrap_err();
    assert!(err.to_string().contains("fgcm extract"), "{err}");
}

#[test]
fn three_mode_matrix_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 3);
    let run = RunDir::new(dir.path().join("run"));
    cmd_extract(&m, &small_config(Mode::Fg), &run).unwrap();

    let base = cmd_train(&m, &small_config(Mode::Baseline), &run).unwrap();
    assert_eq!(base.checkpoints, ["lcnn.fgt"]);
    assert!(!run.genuinizer(Mode::Baseline).exists());

    let fg = cmd_train(&m, &small_config(Mode::Fg), &run).unwrap();
    assert_eq!(fg.checkpoints, ["genuinizer.fgt", "lcnn.fgt"]);
    assert_eq!((fg.transformer_source, fg.transformer_rows), (Some(Key::Bonafide), 3));

    let fs = cmd_train(&m, &small_config(Mode::Fs), &run).unwrap();
    assert_eq!((fs.transformer_source, fs.transformer_rows), (Some(Key::Spoof), 3));
    assert_eq!(GenuinizerModel::load(&run.genuinizer(Mode::Fs)).unwrap().source(), Key::Spoof);

    for mode in Mode::ALL {
        let r = cmd_eval(&m, &small_config(mode), &run).unwrap();
        assert_eq!(r.mode, mode);
        assert_eq!(r.config_hash, small_config(mode).hash());
        let (dev, eval) = (r.dev.unwrap(), r.eval.unwrap());
        assert_eq!((dev.bonafide, dev.spoof, eval.bonafide, eval.spoof), (3, 3, 3, 3));
        assert_eq!(read_scores(&run.scores(mode, Subset::Dev)).unwrap().len(), 6);
        assert!(run.det(mode, Subset::Eval).exists() && run.timing(mode).exists());
    }
    let table = cmd_report(&run).unwrap();
    for mode in Mode::ALL {
        assert!(table.contains(mode.as_str()));
    }
    assert!(run.summary().exists());

    // evaluation is repeatable byte for byte
    let report = std::fs::read(run.report(Mode::Fg)).unwrap();
    let scores = std::fs::read(run.scores(Mode::Fg, Subset::Eval)).unwrap();
    cmd_eval(&m, &small_config(Mode::Fg), &run).unwrap();
    assert_eq!(std::fs::read(run.report(Mode::Fg)).unwrap(), report);
    assert_eq!(std::fs::read(run.scores(Mode::Fg, Subset::Eval)).unwrap(), scores);

    // a classifier from another mode is refused
    std::fs::copy(run.lcnn(Mode::Baseline), run.lcnn(Mode::Fg)).unwrap();
    assert!(matches!(cmd_eval(&m, &small_config(Mode::Fg), &run), Err(FgcmError::Contract(_))));
}

#[test]
fn cli_reports_failure_with_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.txt");
    std::fs::write(&manifest, "u1 nowhere.wav bonafide train\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fgcm"))
        .args(["eval", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(dir.path().join("run"))
        .args(["--mode", "baseline"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fgcm train"));
    let bad = Command::new(env!("CARGO_BIN_EXE_fgcm"))
        .args(["train", "--manifest", "m", "--out", "r", "--mode", "both"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
