use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use csts_core::audio::{read_wav, spectrogram_stack, write_wav, AudioTrack};
use csts_core::data::checkpoint::Checkpoint;
use csts_core::data::frames::{frames_tensor, write_packed, write_png_dir, FrameSet};
use csts_core::data::{
    load_checkpoint, load_clip, load_manifest, load_split, read_frames, read_gaze_csv, save_checkpoint, synth_generate,
    write_gaze_csv, ClipRecord, Split, SynthConfig, WindowConfig,
};
use csts_core::train::AdamState;
use csts_core::{CstsError, Graph, Model, ModelConfig, Tensor};
use tempfile::TempDir;

fn corpus(n: usize, seed: u64) -> (TempDir, Vec<csts_core::data::synth::SynthClip>) {
    let dir = TempDir::new().unwrap();
    let truth = synth_generate(&SynthConfig { clips: n, seed, ..Default::default() }, dir.path()).unwrap();
    (dir, truth)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn empty_manifest_is_empty() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("m.json");
    fs::write(&p, "[]").unwrap();
    assert!(load_manifest(&p).unwrap().is_empty());
}

#[test]
fn out_of_range_gaze_names_the_clip() {
    let (dir, _) = corpus(1, 0);
    let gaze = dir.path().join("clips/clip_0000/gaze.csv");
    let text = fs::read_to_string(&gaze).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[5] = "4,1.2,0.5,1".into();
    fs::write(&gaze, lines.join("\n")).unwrap();
    match load_manifest(&dir.path().join("manifest.json")) {
        Err(CstsError::Validation(msgs)) => {
            assert_eq!(msgs.len(), 1);
            assert!(msgs[0].contains("clip 0000") && msgs[0].contains("1.2"), "{msgs:?}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_bad_record_is_reported() {
    let dir = TempDir::new().unwrap();
    let rec = |id: &str| ClipRecord {
        id: id.into(),
        frames: "nope".into(),
        audio: "nope.wav".into(),
        gaze: "nope.csv".into(),
        fps: 20.0,
        split: Split::Train,
        anchor: None,
    };
    let p = dir.path().join("m.json");
    let mut v = serde_json::to_value(vec![rec("a"), rec("b")]).unwrap();
    v.as_array_mut().unwrap().push(serde_json::json!({"id": "c", "fps": 20}));
    fs::write(&p, v.to_string()).unwrap();
    let Err(CstsError::Validation(msgs)) = load_manifest(&p) else { panic!() };
    assert!(msgs.iter().any(|m| m.starts_with("clip a:")));
    assert!(msgs.iter().any(|m| m.starts_with("clip b:")));
    assert!(msgs.iter().any(|m| m.starts_with("clip c: malformed")));
    assert!(matches!(load_manifest(&dir.path().join("missing.json")), Err(CstsError::Io { .. })));
}

#[test]
fn synthetic_corpus_round_trips_through_the_manifest() {
    let (dir, truth) = corpus(5, 3);
    let clips = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(clips.len(), 5);
    assert_eq!(clips.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["0000", "0001", "0002", "0003", "0004"]);
    assert_eq!(truth.iter().filter(|t| t.split == Split::Test).count(), 1);
    assert_eq!(clips[4].split, Split::Test);
}

#[test]
fn single_clip_corpus_layout() {
    let (dir, _) = corpus(1, 0);
    let clips: Vec<_> = fs::read_dir(dir.path().join("clips")).unwrap().collect();
    assert_eq!(clips.len(), 1);
    let c = dir.path().join("clips/clip_0000");
    assert_eq!(fs::read_dir(c.join("frames")).unwrap().count(), 100);
    assert!(c.join("audio.wav").is_file() && c.join("gaze.csv").is_file());
    assert_eq!(load_manifest(&dir.path().join("manifest.json")).unwrap().len(), 1);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, _) = corpus(3, 11);
    let (b, _) = corpus(3, 11);
    let (c, _) = corpus(3, 12);
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn input_and_target_indices_follow_the_windows() {
    let (dir, _) = corpus(1, 0);
    let clips = load_manifest(&dir.path().join("manifest.json")).unwrap();
    let cfg = ModelConfig::desk();
    let s = load_clip(&clips[0], Some(3.0), &WindowConfig::default(), &cfg).unwrap();
    assert_eq!(s.input_indices, [0, 8, 17, 25, 34, 42, 51, 59]);
    assert_eq!(s.target_indices, [60, 66, 71, 77, 82, 88, 93, 99]);
    assert_eq!(s.frames.shape(), &[8, 32, 32, 3]);
    assert_eq!(s.spectrograms.shape(), &[8, 256, 256]);
    assert_eq!(s.gaze.len(), 8);
    assert_eq!(s.to_sample(&cfg).unwrap().spectrograms.shape(), &[8, 32, 32]);
    // 4 s leaves no full anticipation window in a 5 s clip
    assert!(matches!(load_clip(&clips[0], Some(4.0), &WindowConfig::default(), &cfg), Err(CstsError::Range(_))));
    assert!(matches!(load_clip(&clips[0], Some(2.0), &WindowConfig::default(), &cfg), Err(CstsError::Range(_))));
}

#[test]
fn loading_is_deterministic() {
    let (dir, _) = corpus(3, 5);
    let clips = load_manifest(&dir.path().join("manifest.json")).unwrap();
    let cfg = ModelConfig::desk();
    let a = load_split(&clips, Split::Train, &WindowConfig::default(), &cfg).unwrap();
    let b = load_split(&clips, Split::Train, &WindowConfig::default(), &cfg).unwrap();
    assert_eq!(a.len(), 3);
    for ((ia, sa), (ib, sb)) in a.iter().zip(&b) {
        assert_eq!(ia, ib);
        assert_eq!(sa.frames, sb.frames);
        assert_eq!(sa.spectrograms, sb.spectrograms);
        assert_eq!(sa.target, sb.target);
    }
}

fn sample_set() -> FrameSet {
    let data = (0..3 * 4 * 6 * 3).map(|i| (i * 7 % 256) as u8).collect();
    FrameSet { count: 3, height: 4, width: 6, data }
}

#[test]
fn resize_to_stored_size_is_identity() {
    let set = sample_set();
    let t = frames_tensor(&set, &[0, 1, 2], 4, 6).unwrap();
    let expect: Vec<f64> = set.data.iter().map(|&v| v as f64 / 255.0).collect();
    assert_eq!(t.data(), &expect[..]);
    assert_eq!(frames_tensor(&set, &[0], 8, 12).unwrap().shape(), &[1, 8, 12, 3]);
    assert!(matches!(frames_tensor(&set, &[3], 4, 6), Err(CstsError::Range(_))));
}

#[test]
fn png_and_packed_frames_agree() {
    let dir = TempDir::new().unwrap();
    let set = sample_set();
    write_png_dir(&dir.path().join("png"), &set).unwrap();
    write_packed(&dir.path().join("frames.bin"), &set).unwrap();
    assert_eq!(read_frames(&dir.path().join("png")).unwrap(), set);
    assert_eq!(read_frames(&dir.path().join("frames.bin")).unwrap(), set);
    fs::write(dir.path().join("bad.bin"), b"NOTFRAMES").unwrap();
    assert!(matches!(read_frames(&dir.path().join("bad.bin")), Err(CstsError::Format(_))));
}

#[test]
fn stereo_clip_audio_is_mixed_down() {
    let (dir, _) = corpus(1, 0);
    let clips = load_manifest(&dir.path().join("manifest.json")).unwrap();
    let cfg = ModelConfig::desk();
    // replace the audio with two different channels
    let rate = 16_000;
    let n = 5 * rate as usize;
    let l: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
    let r: Vec<f64> = (0..n).map(|i| 0.2 * (i as f64 * 0.31).sin()).collect();
    write_wav(&clips[0].audio, &[l.clone(), r.clone()], rate).unwrap();
    let s = load_clip(&clips[0], Some(3.0), &WindowConfig::default(), &cfg).unwrap();
    let q = |v: f64| (v.clamp(-1.0, 1.0) * 32767.0).round() / 32768.0;
    let mono = AudioTrack::new(l.iter().zip(&r).map(|(a, b)| (q(*a) + q(*b)) / 2.0).collect(), rate).unwrap();
    let times: Vec<f64> = s.input_indices.iter().map(|&i| i as f64 / 20.0).collect();
    let expect = spectrogram_stack(&mono, &times, &cfg.frontend).unwrap().values;
    assert!(s.spectrograms.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn gaze_csv_round_trip_with_missing_frames() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("g.csv");
    let g = vec![Some((0.25, 0.5)), None, Some((1.0, 0.0))];
    write_gaze_csv(&p, &g).unwrap();
    assert_eq!(read_gaze_csv(&p).unwrap(), g);
    fs::write(&p, "frame_index,x,y,valid\n0,0.5,0.5,1\n3,0.1,0.1,1\n").unwrap();
    assert_eq!(read_gaze_csv(&p).unwrap(), vec![Some((0.5, 0.5)), None, None, Some((0.1, 0.1))]);
}

/// Energy of `freq` in `x` by direct correlation.
fn tone_energy(x: &[f64], rate: f64, freq: f64) -> f64 {
    let (mut c, mut s) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let p = 2.0 * std::f64::consts::PI * freq * i as f64 / rate;
        c += v * p.cos();
        s += v * p.sin();
    }
    c * c + s * s
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.log2()).sum()
}

#[test]
fn audio_cue_carries_information_about_the_future_side() {
    let (dir, truth) = corpus(60, 21);
    let clips = load_manifest(&dir.path().join("manifest.json")).unwrap();
    let mut joint = [[0.0; 2]; 2];
    for (clip, t) in clips.iter().zip(&truth) {
        // tone side from the waveform alone
        let track = read_wav(&clip.audio).unwrap();
        let rate = track.sample_rate as f64;
        let seg = &track.samples[(1.9 * rate) as usize..(2.7 * rate) as usize];
        let tone = (tone_energy(seg, rate, 2500.0) > tone_energy(seg, rate, 1000.0)) as usize;
        // future side from the gaze labels alone
        let valid: Vec<(usize, f64)> = clip.gaze.iter().enumerate().filter_map(|(i, g)| g.map(|g| (i, g.0))).collect();
        let before = valid.iter().rev().find(|(i, _)| *i < 60).unwrap().1;
        let after = valid.iter().rev().find(|(i, _)| *i >= 90).unwrap().1;
        let side = (after > before) as usize;
        assert_eq!(tone == 1, t.cue_side > 0);
        assert_eq!(side == 1, t.drift_side > 0);
        joint[tone][side] += 1.0 / 60.0;
    }
    let pt = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let ps = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mi = entropy(&pt) + entropy(&ps) - entropy(&joint.concat());
    // cue validity 0.9 gives 1 - H(0.9) = 0.53 bits in expectation
    assert!(mi > 0.2, "mutual information {mi}");
}

fn fixed_sample(cfg: &ModelConfig) -> csts_core::Sample {
    let (dir, _) = corpus(1, 9);
    let clips = load_manifest(&dir.path().join("manifest.json")).unwrap();
    load_clip(&clips[0], None, &WindowConfig::default(), cfg).unwrap().to_sample(cfg).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = ModelConfig::desk();
    let (model, store) = Model::new(&cfg, 4).unwrap();
    let dir = TempDir::new().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let mut opt = AdamState::new(&store);
    opt.step = 17;
    opt.m[0].data_mut()[0] = 0.125;
    save_checkpoint(&p1, &cfg, &store, Some(&opt)).unwrap();
    let ck = load_checkpoint(&p1).unwrap();
    assert_eq!(ck.optimizer.as_ref(), Some(&opt));
    let (m2, s2) = ck.load_model().unwrap();
    save_checkpoint(&p2, &ck.model_config().unwrap(), &s2, ck.optimizer.as_ref()).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let sample = fixed_sample(&cfg);
    let loss = |m: &Model, s: &csts_core::ParamStore| {
        let mut g = Graph::with_params(s);
        let l = m.batch_loss(&mut g, &[&sample]).unwrap();
        g.value(l.total).item().to_bits()
    };
    assert_eq!(loss(&model, &store), loss(&m2, &s2));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = ModelConfig::desk().with_experiment("vision-only").unwrap();
    let (_, store) = Model::new(&cfg, 0).unwrap();
    let good = Checkpoint::new(&cfg, &store, None).unwrap().to_bytes().unwrap();
    let err = |b: &[u8]| match Checkpoint::from_bytes(b) {
        Err(CstsError::Checkpoint(m)) => m,
        other => panic!("{other:?}"),
    };
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(err(&bad).contains("magic"));
    let mut bad = good.clone();
    bad[8] = 9;
    assert!(err(&bad).contains("version"));
    assert!(err(&good[..good.len() - 3]).contains("truncated"));
    let mut long = good.clone();
    long.push(0);
    assert!(err(&long).contains("trailing"));
}

#[test]
fn restore_lists_extra_and_missing_tensors() {
    let vo = ModelConfig::desk().with_experiment("vision-only").unwrap();
    let full = ModelConfig::desk();
    let (_, small) = Model::new(&vo, 0).unwrap();
    let (_, mut big) = Model::new(&full, 0).unwrap();
    let mut ck = Checkpoint::new(&vo, &small, None).unwrap();
    ck.tensors.push(("bogus.weight".into(), Tensor::zeros(&[1])));
    let Err(CstsError::Checkpoint(m)) = ck.restore(&mut big) else { panic!() };
    assert!(m.contains("extra: [bogus.weight]"), "{m}");
    assert!(m.contains("audio.embed.weight"), "{m}");
}
