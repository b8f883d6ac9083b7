use csts_core::encoders::{Encoder, EncoderConfig, Modality, StageConfig};
use csts_core::model::{ContrastVariant, FusionStrategy, Model, ModelConfig, Sample, EXPERIMENTS};
use csts_core::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample(cfg: &ModelConfig, seed: u64) -> Sample {
    let mut r = rng(seed);
    let [h, w] = cfg.image();
    let frames = Tensor::uniform(&[8, h, w, 3], 0.0, 1.0, &mut r);
    let a = cfg.audio.input;
    let specs = Tensor::uniform(&[a[0], a[1], a[2]], 0.0, 2.0, &mut r);
    let gaze = (0..cfg.t_out).map(|k| Some((0.2 + 0.05 * k as f64, 0.6))).collect();
    Sample::new(frames, specs, gaze, cfg).unwrap()
}

#[test]
fn desk_forward_matches_closed_form_trace() {
    let cfg = ModelConfig::desk();
    let (model, store) = Model::new(&cfg, 1).unwrap();
    let s = sample(&cfg, 2);
    let mut g = Graph::with_params(&store);
    let out = model.forward(&mut g, &s.frames, &s.spectrograms).unwrap();
    assert_eq!(out.trace, cfg.trace());
    assert_eq!(g.shape(out.heatmaps), &[8, 32, 32]);
    let b = out.bundle.unwrap();
    assert_eq!(g.shape(b.u_v), &[4, 16, 32]);
    assert_eq!(g.shape(b.u_a), &[4, 16, 32]);
    assert_eq!(g.shape(b.u_t), &[8, 1, 32]);
    assert_eq!(g.shape(b.u_s), &[4, 17, 32]);
}

#[test]
fn desk_parameter_budget() {
    let (_, store) = Model::new(&ModelConfig::desk(), 0).unwrap();
    assert!(store.numel() <= 100_000, "{}", store.numel());
}

#[test]
fn paper_trace_dimensions() {
    let trace = ModelConfig::paper().trace();
    let get = |name: &str| trace.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone()).unwrap();
    assert_eq!(get("video token embedding"), vec![4, 64, 64, 96]);
    assert_eq!(get("video encoder block4"), vec![4, 8, 8, 768]);
    assert_eq!(get("audio encoder block4"), vec![4, 64, 768]);
    assert_eq!(get("cross-frame self-attention"), vec![8, 1, 768]);
    assert_eq!(get("head"), vec![8, 64, 64, 1]);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = ModelConfig::desk();
    let (model, store) = Model::new(&cfg, 3).unwrap();
    let (a, b) = (sample(&cfg, 4), sample(&cfg, 5));
    let mut g = Graph::with_params(&store);
    let loss = model.batch_loss(&mut g, &[&a, &b]).unwrap();
    let grads = g.backward(loss.total).unwrap().params(&g);
    assert_eq!(grads.len(), store.len());
    for (id, grad) in grads {
        assert!(grad.data().iter().any(|&v| v != 0.0), "{} has zero gradient", store.name(id));
    }
}

#[test]
fn ablated_branches_own_no_parameters() {
    let desk = ModelConfig::desk();
    let names = |exp: &str| {
        let (_, s) = Model::new(&desk.clone().with_experiment(exp).unwrap(), 0).unwrap();
        s.iter().map(|(_, n, _)| n.to_string()).collect::<Vec<_>>()
    };
    let vo = names("vision-only");
    assert!(vo.iter().all(|n| !n.starts_with("audio") && !n.starts_with("fusion") && !n.starts_with("contrast")));
    let sf = names("s-fusion");
    assert!(sf.iter().any(|n| n.starts_with("fusion.spatial")) && sf.iter().all(|n| !n.contains("temporal")));
    let tf = names("t-fusion");
    assert!(tf.iter().any(|n| n.starts_with("fusion.temporal")) && tf.iter().all(|n| !n.contains("spatial")));
    assert!(names("sts").iter().all(|n| !n.starts_with("contrast")));
    assert!(names("csts").iter().any(|n| n.starts_with("contrast")));
}

#[test]
fn vision_only_never_reads_audio() {
    let cfg = ModelConfig::desk().with_experiment("vision-only").unwrap();
    let (model, store) = Model::new(&cfg, 0).unwrap();
    assert!(model.audio.is_none());
    let s = sample(&cfg, 1);
    let mut g = Graph::with_params(&store);
    // a spectrogram of the wrong shape would be rejected by the audio encoder
    let out = model.forward(&mut g, &s.frames, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(g.shape(out.heatmaps), &[8, 32, 32]);
}

#[test]
fn every_experiment_runs_and_yields_distributions() {
    for exp in EXPERIMENTS {
        let cfg = ModelConfig::desk().with_experiment(exp).unwrap();
        let (model, store) = Model::new(&cfg, 0).unwrap();
        let s = sample(&cfg, 9);
        let mut g = Graph::with_params(&store);
        let l = model.batch_loss(&mut g, &[&s]).unwrap();
        assert!(g.value(l.total).item().is_finite(), "{exp}");
    }
    assert!(ModelConfig::desk().with_experiment("nope").is_err());
}

#[test]
fn contrastive_variants_and_compatibility() {
    for v in [ContrastVariant::Vanilla, ContrastVariant::Spatial, ContrastVariant::Temporal, ContrastVariant::Cross, ContrastVariant::Post] {
        let cfg = ModelConfig { contrast: v, ..ModelConfig::desk() };
        let (model, store) = Model::new(&cfg, 0).unwrap();
        let (a, b) = (sample(&cfg, 1), sample(&cfg, 2));
        let mut g = Graph::with_params(&store);
        let l = model.batch_loss(&mut g, &[&a, &b]).unwrap();
        let c = g.value(l.cntr.unwrap()).item();
        assert!(c > 0.0, "{v:?}");
        let expect = g.value(l.kld).item() + cfg.contrastive.alpha * c;
        assert!((g.value(l.total).item() - expect).abs() < 1e-9);
    }
    let bad = ModelConfig { fusion: FusionStrategy::Linear, contrast: ContrastVariant::Spatial, ..ModelConfig::desk() };
    assert!(matches!(Model::new(&bad, 0), Err(csts_core::CstsError::Config(_))));
    let sa = ModelConfig { fusion: FusionStrategy::VanillaSa, contrast: ContrastVariant::Post, ..ModelConfig::desk() };
    assert!(Model::new(&sa, 0).is_ok());
}

#[test]
fn contrastive_weight_changes_gradients() {
    let grads = |alpha: f64| {
        let mut cfg = ModelConfig::desk();
        cfg.contrastive.alpha = alpha;
        let (model, store) = Model::new(&cfg, 7).unwrap();
        let (a, b) = (sample(&cfg, 1), sample(&cfg, 2));
        let mut g = Graph::with_params(&store);
        let l = model.batch_loss(&mut g, &[&a, &b]).unwrap();
        let grads = g.backward(l.total).unwrap().params(&g);
        grads.into_iter().find(|(id, _)| store.name(*id) == "video.embed.weight").unwrap().1
    };
    assert!(grads(0.0).max_abs_diff(&grads(0.05)) > 0.0);
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    // non-overlapping patches so a patch-block permutation of the pixels is
    // a token permutation
    let cfg = EncoderConfig {
        input: [2, 8, 8, 1],
        kernel: [2, 4, 4],
        stride: [2, 4, 4],
        pad: [0, 0, 0],
        stages: vec![StageConfig { depth: 2, in_dim: 4, out_dim: 4, pool: 1 }],
        heads: 2,
        mlp_ratio: 2.0,
        pos_embed: false,
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "e", &cfg, Modality::Video, &mut rng(1)).unwrap();
    let x = Tensor::randn(&[2, 8, 8, 1], &mut rng(2));
    // swap the top-left and bottom-right 4x4 blocks
    let swap = |t: &Tensor| {
        let mut o = t.clone();
        for f in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    let a = t.offset_of(&[f, r, c, 0]);
                    let b = t.offset_of(&[f, r + 4, c + 4, 0]);
                    o.data_mut()[a] = t.data()[b];
                    o.data_mut()[b] = t.data()[a];
                }
            }
        }
        o
    };
    let run = |t: &Tensor| {
        let mut g = Graph::with_params(&store);
        let v = g.constant(t.clone());
        let e = enc.forward(&mut g, v).unwrap();
        g.value(e.out.tokens).clone()
    };
    let (base, moved) = (run(&x), run(&swap(&x)));
    let tok = |t: &Tensor, n: usize| t.data()[n * 4..(n + 1) * 4].to_vec();
    for (i, j) in [(0, 3), (3, 0), (1, 1), (2, 2)] {
        let (a, b) = (tok(&base, i), tok(&moved, j));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12), "token {i}");
    }
}

#[test]
fn zero_frames_with_zero_bias_embed_to_zero() {
    let cfg = ModelConfig::desk();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "e", &EncoderConfig { pos_embed: false, ..cfg.video.clone() }, Modality::Video, &mut rng(0)).unwrap();
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::zeros(&[8, 32, 32, 3]));
    let e = enc.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(e.embedding), &[4, 8, 8, 8]);
    assert!(g.value(e.embedding).data().iter().all(|&v| v == 0.0));
}
