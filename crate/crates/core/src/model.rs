//! Full gaze-anticipation model: encoders, a fusion strategy, the heatmap
//! decoder and an optional contrastive head, with named presets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FrontendConfig;
use crate::autograd::{Graph, ParamStore, Var};
use crate::encoders::{Encoder, EncoderConfig, Modality, StageConfig};
use crate::error::{CstsError, Result};
use crate::fusion::{merge_reweight, Baseline, BaselineFusion, FusionBundle, SpatialFusion, StsFusion, TemporalFusion};
use crate::heads::{gaussian_target, info_nce, kld_loss, total_loss, ContrastiveConfig, ContrastiveHead, Decoder, DecoderConfig, TargetConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    VisionOnly,
    SFusion,
    TFusion,
    Sts,
    Linear,
    Bilinear,
    Concat,
    VanillaSa,
}

impl FusionStrategy {
    pub fn uses_audio(self) -> bool {
        self != FusionStrategy::VisionOnly
    }

    fn baseline(self) -> Option<Baseline> {
        match self {
            FusionStrategy::Linear => Some(Baseline::Linear),
            FusionStrategy::Bilinear => Some(Baseline::Bilinear),
            FusionStrategy::Concat => Some(Baseline::Concat),
            FusionStrategy::VanillaSa => Some(Baseline::VanillaSA),
            _ => None,
        }
    }
}

/// Which representations feed the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastVariant {
    None,
    /// Fused `(u_v, u_a)`.
    Post,
    /// Raw encoder outputs.
    Vanilla,
    /// Spatial-fusion outputs `(u_vs, u_as)`.
    Spatial,
    /// Temporal-fusion outputs `(u_vt, u_at)`.
    Temporal,
    /// `(u_v, u_as * u_at)`.
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video: EncoderConfig,
    pub audio: EncoderConfig,
    pub frontend: FrontendConfig,
    pub fusion: FusionStrategy,
    pub contrast: ContrastVariant,
    pub contrastive: ContrastiveConfig,
    pub fusion_heads: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_ratio: f64,
    pub target: TargetConfig,
    /// Number of anticipated frames.
    pub t_out: usize,
    /// Token length the bilinear baseline reduces each modality to.
    pub bilinear_tokens: usize,
}

/// Experiment names accepted by [`ModelConfig::with_experiment`].
pub const EXPERIMENTS: &[&str] =
    &["vision-only", "s-fusion", "t-fusion", "sts", "csts", "linear", "bilinear", "concat", "vanilla-sa"];

impl ModelConfig {
    /// Small configuration used for tests and CPU training.
    pub fn desk() -> Self {
        let stages = vec![
            StageConfig { depth: 1, in_dim: 8, out_dim: 16, pool: 1 },
            StageConfig { depth: 1, in_dim: 16, out_dim: 32, pool: 2 },
        ];
        let enc = |c| EncoderConfig {
            input: [8, 32, 32, c],
            kernel: [3, 7, 7],
            stride: [2, 4, 4],
            pad: [1, 3, 3],
            stages: stages.clone(),
            heads: 2,
            mlp_ratio: 2.0,
            pos_embed: true,
        };
        Self {
            video: enc(3),
            audio: enc(1),
            frontend: FrontendConfig::default(),
            fusion: FusionStrategy::Sts,
            contrast: ContrastVariant::Post,
            contrastive: ContrastiveConfig { dim: 16, temperature: 0.05, alpha: 0.05 },
            fusion_heads: 1,
            decoder_heads: 2,
            decoder_mlp_ratio: 2.0,
            target: TargetConfig { kernel: 7, sigma: 1.2 },
            t_out: 8,
            bilinear_tokens: 16,
        }
    }

    /// Full-size configuration (shape tracing only; far too large to train here).
    pub fn paper() -> Self {
        let enc = |c, depths: [usize; 4]| EncoderConfig {
            input: [8, 256, 256, c],
            kernel: [3, 7, 7],
            stride: [2, 4, 4],
            pad: [1, 3, 3],
            stages: vec![
                StageConfig { depth: depths[0], in_dim: 96, out_dim: 192, pool: 1 },
                StageConfig { depth: depths[1], in_dim: 192, out_dim: 384, pool: 2 },
                StageConfig { depth: depths[2], in_dim: 384, out_dim: 768, pool: 2 },
                StageConfig { depth: depths[3], in_dim: 768, out_dim: 768, pool: 2 },
            ],
            heads: 1,
            mlp_ratio: 4.0,
            pos_embed: true,
        };
        Self {
            video: enc(3, [1, 2, 11, 2]),
            audio: enc(1, [1, 1, 1, 1]),
            frontend: FrontendConfig::default(),
            fusion: FusionStrategy::Sts,
            contrast: ContrastVariant::Post,
            contrastive: ContrastiveConfig::default(),
            fusion_heads: 1,
            decoder_heads: 1,
            decoder_mlp_ratio: 2.0,
            target: TargetConfig::default(),
            t_out: 8,
            bilinear_tokens: 256,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(CstsError::config(format!("unknown model preset '{name}' (expected desk or paper)"))),
        }
    }

    /// Sets fusion strategy and contrastive variant from an experiment name
    /// such as `csts`, `sts`, `vision-only` or `vanilla-sa`.
    pub fn with_experiment(mut self, name: &str) -> Result<Self> {
        let (fusion, contrast) = match name {
            "vision-only" => (FusionStrategy::VisionOnly, ContrastVariant::None),
            "s-fusion" => (FusionStrategy::SFusion, ContrastVariant::None),
            "t-fusion" => (FusionStrategy::TFusion, ContrastVariant::None),
            "sts" => (FusionStrategy::Sts, ContrastVariant::None),
            "csts" => (FusionStrategy::Sts, ContrastVariant::Post),
            "linear" => (FusionStrategy::Linear, ContrastVariant::None),
            "bilinear" => (FusionStrategy::Bilinear, ContrastVariant::None),
            "concat" => (FusionStrategy::Concat, ContrastVariant::None),
            "vanilla-sa" => (FusionStrategy::VanillaSa, ContrastVariant::None),
            _ => return Err(CstsError::config(format!("unknown experiment '{name}'; expected one of {EXPERIMENTS:?}"))),
        };
        self.fusion = fusion;
        self.contrast = contrast;
        Ok(self)
    }

    pub fn image(&self) -> [usize; 2] {
        [self.video.input[1], self.video.input[2]]
    }

    pub fn dim(&self) -> usize {
        self.video.out_dim()
    }

    pub fn visual_tokens(&self) -> usize {
        let [_, h, w] = self.video.out_grid();
        h * w
    }

    pub fn audio_tokens(&self) -> usize {
        let [_, h, w] = self.audio.out_grid();
        h * w
    }

    pub fn decoder(&self) -> DecoderConfig {
        let d = self.dim();
        let input = if self.fusion == FusionStrategy::Concat { 2 * d } else { d };
        DecoderConfig::mirror(&self.video, input, self.t_out, self.image(), self.decoder_heads, self.decoder_mlp_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        if self.fusion.uses_audio() {
            self.audio.validate()?;
            if self.audio.out_dim() != self.dim() || self.audio.out_grid()[0] != self.video.out_grid()[0] {
                return Err(CstsError::config("audio and video encoders must agree on T and D"));
            }
        }
        if self.video.input[0] != self.audio.input[0] {
            return Err(CstsError::config("audio and video inputs must have the same frame count"));
        }
        let t = self.video.out_grid()[0];
        if self.t_out == 0 || self.t_out % t != 0 {
            return Err(CstsError::config(format!("t_out {} must be a multiple of the token time extent {t}", self.t_out)));
        }
        if self.target.kernel % 2 == 0 || self.target.sigma <= 0.0 {
            return Err(CstsError::config("target kernel must be odd and sigma positive"));
        }
        let ok = match self.contrast {
            ContrastVariant::None => true,
            ContrastVariant::Vanilla => self.fusion.uses_audio(),
            ContrastVariant::Post => matches!(self.fusion, FusionStrategy::Sts | FusionStrategy::VanillaSa),
            ContrastVariant::Spatial | ContrastVariant::Temporal | ContrastVariant::Cross => self.fusion == FusionStrategy::Sts,
        };
        if !ok {
            return Err(CstsError::config(format!(
                "contrastive variant {:?} is not available with fusion {:?}",
                self.contrast, self.fusion
            )));
        }
        if self.contrast != ContrastVariant::None && (self.contrastive.temperature <= 0.0 || self.contrastive.alpha < 0.0) {
            return Err(CstsError::config("contrastive temperature must be positive and alpha non-negative"));
        }
        Ok(())
    }

    /// Closed-form shape of every named intermediate for the STS model.
    pub fn trace(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.video.trace("video", Modality::Video);
        out.extend(self.audio.trace("audio", Modality::Audio));
        let [t, _, _] = self.video.out_grid();
        let (n, d) = (self.visual_tokens(), self.dim());
        out.push(("conv1".into(), vec![t, 1, d]));
        out.push(("in-frame self-attention".into(), vec![t, n + 1, d]));
        out.push(("conv2".into(), vec![t, 1, d]));
        out.push(("conv3".into(), vec![t, 1, d]));
        out.push(("cross-frame self-attention".into(), vec![2 * t, 1, d]));
        out.extend(self.decoder().trace());
        out
    }
}

/// Inputs and supervision for one clip at model resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[T_in, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[T_in, F, S]` log spectrograms at encoder resolution.
    pub spectrograms: Tensor,
    /// Normalised gaze per anticipated frame.
    pub gaze: Vec<Option<(f64, f64)>>,
    /// `[T_out, H, W]`
    pub target: Tensor,
    pub valid: Vec<bool>,
}

impl Sample {
    pub fn new(frames: Tensor, spectrograms: Tensor, gaze: Vec<Option<(f64, f64)>>, cfg: &ModelConfig) -> Result<Self> {
        let [h, w] = cfg.image();
        let (target, valid) = gaussian_target(&gaze, h, w, &cfg.target)?;
        Ok(Self { frames, spectrograms, gaze, target, valid })
    }
}

#[derive(Clone, Debug)]
enum FusionModule {
    None,
    Spatial(SpatialFusion),
    Temporal(TemporalFusion),
    Sts(StsFusion),
    Baseline(BaselineFusion),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub video: Encoder,
    pub audio: Option<Encoder>,
    fusion: FusionModule,
    pub decoder: Decoder,
    pub contrast: Option<ContrastiveHead>,
}

pub struct SampleOutput {
    /// `[T_out, H, W]`
    pub heatmaps: Var,
    pub bundle: Option<FusionBundle>,
    /// `(w_v, w_a)`, each `[1, D']`.
    pub contrast: Option<(Var, Var)>,
    /// Shapes of named intermediates as executed.
    pub trace: Vec<(String, Vec<usize>)>,
}

pub struct BatchLoss {
    pub total: Var,
    pub kld: Var,
    pub cntr: Option<Var>,
}

impl Model {
    /// Builds the model and its parameters with Xavier-uniform init from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let video = Encoder::new(&mut store, "video", &cfg.video, Modality::Video, &mut rng)?;
        let audio = if cfg.fusion.uses_audio() {
            Some(Encoder::new(&mut store, "audio", &cfg.audio, Modality::Audio, &mut rng)?)
        } else {
            None
        };
        let (n, m, d) = (cfg.visual_tokens(), cfg.audio_tokens(), cfg.dim());
        let t = cfg.video.out_grid()[0];
        let fusion = match cfg.fusion {
            FusionStrategy::VisionOnly => FusionModule::None,
            FusionStrategy::SFusion => {
                FusionModule::Spatial(SpatialFusion::new(&mut store, "fusion.spatial", m, d, cfg.fusion_heads, &mut rng)?)
            }
            FusionStrategy::TFusion => FusionModule::Temporal(TemporalFusion::new(
                &mut store,
                "fusion.temporal",
                n,
                m,
                d,
                cfg.fusion_heads,
                &mut rng,
            )?),
            FusionStrategy::Sts => FusionModule::Sts(StsFusion::new(&mut store, "fusion", n, m, d, cfg.fusion_heads, &mut rng)?),
            other => {
                let kind = other.baseline().expect("baseline strategy");
                FusionModule::Baseline(BaselineFusion::new(
                    &mut store,
                    "fusion",
                    kind,
                    t,
                    n,
                    m,
                    d,
                    cfg.fusion_heads,
                    cfg.bilinear_tokens,
                    &mut rng,
                )?)
            }
        };
        let decoder = Decoder::new(&mut store, "decoder", &cfg.decoder(), &mut rng)?;
        let contrast = (cfg.contrast != ContrastVariant::None)
            .then(|| ContrastiveHead::new(&mut store, "contrast", d, cfg.contrastive, &mut rng));
        Ok((Self { cfg: cfg.clone(), video, audio, fusion, decoder, contrast }, store))
    }

    pub fn sts(&self) -> Option<&StsFusion> {
        match &self.fusion {
            FusionModule::Sts(s) => Some(s),
            _ => None,
        }
    }

    pub fn baseline(&self) -> Option<&BaselineFusion> {
        match &self.fusion {
            FusionModule::Baseline(b) => Some(b),
            _ => None,
        }
    }

    /// Forward pass for one clip.
    pub fn forward(&self, g: &mut Graph<'_>, frames: &Tensor, spectrograms: &Tensor) -> Result<SampleOutput> {
        let cfg = &self.cfg;
        let mut trace = Vec::new();
        let x = g.constant(frames.clone());
        let venc = self.video.forward(g, x)?;
        trace.push(("video token embedding".to_string(), g.shape(venc.embedding).to_vec()));
        for (s, v) in venc.stages.iter().enumerate() {
            let [t, h, w] = cfg.video.stage_grid(s);
            let shape = g.shape(*v).to_vec();
            let shape = if shape[..2] == [t, h * w] { vec![t, h, w, shape[2]] } else { shape };
            trace.push((format!("video encoder block{}", s + 1), shape));
        }
        let phi = venc.out.tokens;

        let aenc = match &self.audio {
            Some(enc) => {
                let a = g.constant(spectrograms.clone());
                let e = enc.forward(g, a)?;
                trace.push(("audio token embedding".to_string(), g.shape(e.embedding).to_vec()));
                for (s, v) in e.stages.iter().enumerate() {
                    trace.push((format!("audio encoder block{}", s + 1), g.shape(*v).to_vec()));
                }
                Some(e)
            }
            None => None,
        };
        let psi = aenc.as_ref().map(|e| e.out.tokens);

        let mut bundle = None;
        let mut fused_audio = None;
        let decoder_in = match (&self.fusion, psi) {
            (FusionModule::None, _) => phi,
            (FusionModule::Spatial(sp), Some(psi)) => {
                let z_as = sp.pool_audio(g, psi)?;
                trace.push(("conv1".into(), g.shape(z_as).to_vec()));
                let s = sp.forward(g, phi, z_as)?;
                trace.push(("in-frame self-attention".into(), g.shape(s.u_s).to_vec()));
                let n = g.shape(phi)[1];
                g.narrow(s.u_s, 1, 0, n)?
            }
            (FusionModule::Temporal(tf), Some(psi)) => {
                let (z_vt, z_at) = tf.pool_tokens(g, phi, psi)?;
                trace.push(("conv2".into(), g.shape(z_vt).to_vec()));
                trace.push(("conv3".into(), g.shape(z_at).to_vec()));
                let u_t = tf.forward(g, z_vt, z_at)?;
                trace.push(("cross-frame self-attention".into(), g.shape(u_t).to_vec()));
                let t = g.shape(phi)[0];
                let u_vt = g.narrow(u_t, 0, 0, t)?;
                g.mul(phi, u_vt)?
            }
            (FusionModule::Sts(sts), Some(psi)) => {
                let z_as = sts.spatial.pool_audio(g, psi)?;
                trace.push(("conv1".into(), g.shape(z_as).to_vec()));
                let s = sts.spatial.forward(g, phi, z_as)?;
                trace.push(("in-frame self-attention".into(), g.shape(s.u_s).to_vec()));
                let (z_vt, z_at) = sts.temporal.pool_tokens(g, phi, psi)?;
                trace.push(("conv2".into(), g.shape(z_vt).to_vec()));
                trace.push(("conv3".into(), g.shape(z_at).to_vec()));
                let u_t = sts.temporal.forward(g, z_vt, z_at)?;
                trace.push(("cross-frame self-attention".into(), g.shape(u_t).to_vec()));
                let (t, n) = (g.shape(phi)[0], g.shape(phi)[1]);
                let u_vs = g.narrow(s.u_s, 1, 0, n)?;
                let u_as = g.narrow(s.u_s, 1, n, 1)?;
                let u_vt = g.narrow(u_t, 0, 0, t)?;
                let u_at = g.narrow(u_t, 0, t, t)?;
                let (u_v, u_a) = merge_reweight(g, u_vs, u_vt, psi, u_at)?;
                bundle = Some(FusionBundle { u_s: s.u_s, u_t, u_vs, u_as, u_vt, u_at, u_v, u_a, spatial_probs: s.probs });
                u_v
            }
            (FusionModule::Baseline(b), Some(psi)) => {
                let out = b.forward(g, phi, psi)?;
                fused_audio = out.audio;
                out.visual
            }
            (_, None) => return Err(CstsError::State("fusion requires the audio encoder".into())),
        };

        let mut dec_trace = Vec::new();
        let logits = self.decoder.logits_traced(g, decoder_in, &venc.stages, &mut dec_trace)?;
        trace.extend(dec_trace);
        let heatmaps = crate::heads::heatmaps_from_logits(g, logits, self.decoder.cfg.output)?;

        let contrast = match &self.contrast {
            None => None,
            Some(head) => {
                let psi = psi.ok_or_else(|| CstsError::State("contrastive loss requires audio".into()))?;
                let (v, a) = match (cfg.contrast, bundle) {
                    (ContrastVariant::Vanilla, _) => (phi, psi),
                    (ContrastVariant::Post, Some(b)) => (b.u_v, b.u_a),
                    (ContrastVariant::Post, None) => {
                        let a = fused_audio.ok_or_else(|| CstsError::State("fusion produced no audio rows".into()))?;
                        (decoder_in, a)
                    }
                    (ContrastVariant::Spatial, Some(b)) => (b.u_vs, b.u_as),
                    (ContrastVariant::Temporal, Some(b)) => (b.u_vt, b.u_at),
                    (ContrastVariant::Cross, Some(b)) => (b.u_v, g.mul(b.u_as, b.u_at)?),
                    (variant, _) => {
                        return Err(CstsError::config(format!("contrastive variant {variant:?} needs the STS fusion outputs")))
                    }
                };
                Some(head.project(g, v, a)?)
            }
        };
        Ok(SampleOutput { heatmaps, bundle, contrast, trace })
    }

    /// Mean KLD over the batch plus `alpha` times the symmetric InfoNCE loss.
    pub fn batch_loss(&self, g: &mut Graph<'_>, batch: &[&Sample]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(CstsError::contract("empty batch"));
        }
        let mut klds = Vec::with_capacity(batch.len());
        let (mut wv, mut wa) = (Vec::new(), Vec::new());
        for s in batch {
            let out = self.forward(g, &s.frames, &s.spectrograms)?;
            klds.push(kld_loss(g, out.heatmaps, &s.target, &s.valid)?);
            if let Some((v, a)) = out.contrast {
                wv.push(v);
                wa.push(a);
            }
        }
        let mut kld = klds[0];
        for &k in &klds[1..] {
            kld = g.add(kld, k)?;
        }
        let kld = g.scale(kld, 1.0 / batch.len() as f64)?;
        let cntr = if wv.is_empty() {
            None
        } else {
            let v = g.concat(&wv, 0)?;
            let a = g.concat(&wa, 0)?;
            Some(info_nce(g, v, a, self.cfg.contrastive.temperature)?)
        };
        let total = total_loss(g, kld, cntr, self.cfg.contrastive.alpha)?;
        Ok(BatchLoss { total, kld, cntr })
    }
}
