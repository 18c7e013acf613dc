//! The full network: video and sentence encoders, one of five conditioning
//! methods, routing to class capsules, class masking and mask decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{CapsuleGrid, EmRoutingParams, PrimaryCapsuleHead, RoutingConfig, TransformationMatrices, POSE_DIM};
use crate::decoder::{argmax, binarize, classify, mask_poses, Decoder, DecoderConfig, MaskPyramid};
use crate::error::{Error, Result};
use crate::fusion::{
    condition_concat, condition_multiply, filter_activations, filter_poses, fuse_by_routing, route_video_only,
    Conditioning, RoutingVars,
};
use crate::graph::{Graph, Var};
use crate::param::{randn, ParamId, ParamStore};
use crate::sentence::{SentenceEncoder, SentenceEncoderConfig, TokenSeq};
use crate::tensor::{Real, Tensor};
use crate::video::{EncoderTaps, VideoEncoder, VideoEncoderConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub video: VideoEncoderConfig,
    pub sentence: SentenceEncoderConfig,
    pub video_types: usize,
    pub capsule_kernel: usize,
    /// Actor classes; routing emits one more type for background.
    pub classes: usize,
    pub routing: RoutingConfig,
    pub transform_noise: f64,
    pub decoder_channels: [usize; 3],
    pub use_skips: bool,
    pub conditioning: Conditioning,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            video: VideoEncoderConfig::desk(),
            sentence: SentenceEncoderConfig::desk(vocab_size),
            video_types: 8,
            capsule_kernel: 5,
            classes: 3,
            routing: RoutingConfig::default(),
            transform_noise: 0.1,
            decoder_channels: [32, 16, 8],
            use_skips: true,
            conditioning: Conditioning::Routing,
        }
    }

    pub fn n_out(&self) -> usize {
        self.classes + 1
    }

    pub fn background(&self) -> usize {
        self.classes
    }

    pub fn grid_size(&self) -> usize {
        self.video.feature_size() + 1 - self.capsule_kernel
    }

    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        if self.classes == 0 || self.video_types == 0 || self.sentence.capsule_types == 0 {
            return Err(Error::Config("class and capsule type counts must be positive".into()));
        }
        if self.capsule_kernel == 0 || self.capsule_kernel > self.video.feature_size() {
            return Err(Error::Config(format!(
                "capsule kernel {} does not fit {}x{} features",
                self.capsule_kernel,
                self.video.feature_size(),
                self.video.feature_size()
            )));
        }
        let out = (self.grid_size() + self.capsule_kernel - 1) * 4;
        if out != self.video.size {
            return Err(Error::Config(format!("decoder would emit {out}px masks for {}px video", self.video.size)));
        }
        Ok(())
    }
}

/// Parameters specific to one conditioning method.
#[derive(Clone, Debug)]
enum CondParams {
    Routing { sentence_transforms: TransformationMatrices },
    Concat { w: ParamId, b: ParamId },
    /// Linear map from the sentence vector to a filter (channels, pose
    /// entries or activations).
    Filter { w: ParamId, b: ParamId },
}

/// Graph-bound outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub taps: EncoderTaps,
    pub fused: CapsuleGrid,
    /// `[n_out]` class scores.
    pub scores: Var,
    /// Class whose poses were decoded.
    pub class: usize,
    /// `None` when background won at inference.
    pub pyramid: Option<MaskPyramid>,
}

/// Which class survives masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskClass {
    GroundTruth(usize),
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Predicted actor class, `None` when background wins.
    pub class: Option<usize>,
    pub scores: Vec<f32>,
    /// `[T * H * W]` binary mask; empty foreground when background wins.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    video: VideoEncoder,
    sentence: SentenceEncoder,
    head: PrimaryCapsuleHead,
    video_transforms: TransformationMatrices,
    routing: EmRoutingParams,
    cond: CondParams,
    decoder: Decoder,
}

impl<F: Real> Model<F> {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let video = VideoEncoder::new(&mut store, config.video.clone(), &mut rng)?;
        let sentence = SentenceEncoder::new(&mut store, config.sentence.clone(), &mut rng)?;
        let c = config.video.feature_channels();
        let t = config.video.frames;
        let (n, n_out, d) = (config.video_types, config.n_out(), config.sentence.branch_channels);
        // time is folded into channels, so the k x k head spans all frames
        let head = PrimaryCapsuleHead::new(&mut store, "capsules", c * t, n, config.capsule_kernel, &mut rng)?;
        let video_transforms =
            TransformationMatrices::new(&mut store, "routing.video_t", n, n_out, config.transform_noise, &mut rng)?;
        let routing = EmRoutingParams::new(&mut store, "routing", n_out, config.routing.clone())?;
        let std = (1.0 / d as f64).sqrt();
        let mut filter = |store: &mut ParamStore<F>, out: usize, bias: f64| -> Result<CondParams> {
            let w = store.add("cond.filter.w", randn(&mut rng, &[out, d], std * 0.1))?;
            let b = store.add("cond.filter.b", Tensor::full(&[out], F::from_f64c(bias)))?;
            Ok(CondParams::Filter { w, b })
        };
        // filters start close to the identity
        let cond = match config.conditioning {
            Conditioning::Routing => CondParams::Routing {
                sentence_transforms: TransformationMatrices::new(
                    &mut store,
                    "routing.sentence_t",
                    config.sentence.capsule_types,
                    n_out,
                    config.transform_noise,
                    &mut rng,
                )?,
            },
            Conditioning::Concat => {
                let w = store.add("cond.concat.w", crate::param::kaiming(&mut rng, &[c, c + d, 1, 1, 1], c + d))?;
                let b = store.add("cond.concat.b", Tensor::zeros(&[c]))?;
                CondParams::Concat { w, b }
            }
            Conditioning::Multiply => filter(&mut store, c, 1.0)?,
            Conditioning::FilterPoses => filter(&mut store, n * POSE_DIM, 1.0)?,
            Conditioning::FilterActs => filter(&mut store, n, 3.0)?,
        };
        let dcfg = DecoderConfig {
            capsule_types: n_out,
            grid_size: config.grid_size(),
            capsule_kernel: config.capsule_kernel,
            frames: t,
            channels: config.decoder_channels,
            skip_channels: config.video.skip_channels(),
            use_skips: config.use_skips,
        };
        let decoder = Decoder::new(&mut store, dcfg, &mut rng)?;
        Ok(Model { config, store, video, sentence, head, video_transforms, routing, cond, decoder })
    }

    /// Routes a video and query into the class capsule grid and decodes the
    /// poses of the chosen class.
    pub fn forward(&self, g: &mut Graph<F>, video: Var, tokens: &TokenSeq, mask: MaskClass) -> Result<Forward> {
        let store = &self.store;
        let taps = self.video.encode_video(g, store, video)?;
        let sent = self.sentence.forward(g, store, tokens)?;
        // time is folded into channels ahead of the capsule head
        let capsules = |g: &mut Graph<F>, x: Var| -> Result<CapsuleGrid> {
            let s = g.shape(x).to_vec();
            let folded = g.reshape(x, &[s[0] * s[1], s[2], s[3]])?;
            self.head.forward(g, store, folded)
        };
        let rv = RoutingVars {
            video_transforms: g.param(store, self.video_transforms.id),
            beta_a: g.param(store, self.routing.beta_a),
            beta_u: g.param(store, self.routing.beta_u),
        };
        let cfg = &self.routing.config;
        let filter = |g: &mut Graph<F>, w: ParamId, b: ParamId| -> Result<Var> {
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            let d = g.shape(sent.vector)[0];
            let row = g.reshape(sent.vector, &[1, d])?;
            let y = g.linear(row, wv, Some(bv))?;
            let out = g.shape(y)[1];
            g.reshape(y, &[out])
        };
        let fused = match (&self.cond, self.config.conditioning) {
            (CondParams::Routing { sentence_transforms }, _) => {
                let caps = capsules(g, taps.features)?;
                let ts = g.param(store, sentence_transforms.id);
                fuse_by_routing(g, &caps, &sent.capsules, ts, rv, cfg)?
            }
            (CondParams::Concat { w, b }, _) => {
                let (wv, bv) = (g.param(store, *w), g.param(store, *b));
                let x = condition_concat(g, taps.features, sent.vector, wv, bv)?;
                let caps = capsules(g, x)?;
                route_video_only(g, &caps, rv, cfg)?
            }
            (CondParams::Filter { w, b }, Conditioning::Multiply) => {
                let f = filter(g, *w, *b)?;
                let x = condition_multiply(g, taps.features, f)?;
                let caps = capsules(g, x)?;
                route_video_only(g, &caps, rv, cfg)?
            }
            (CondParams::Filter { w, b }, Conditioning::FilterPoses) => {
                let f = filter(g, *w, *b)?;
                let f = g.reshape(f, &[self.config.video_types, POSE_DIM])?;
                let caps = capsules(g, taps.features)?;
                let caps = filter_poses(g, &caps, f)?;
                route_video_only(g, &caps, rv, cfg)?
            }
            (CondParams::Filter { w, b }, Conditioning::FilterActs) => {
                let f = filter(g, *w, *b)?;
                let f = g.sigmoid(f);
                let caps = capsules(g, taps.features)?;
                let caps = filter_activations(g, &caps, f)?;
                route_video_only(g, &caps, rv, cfg)?
            }
            _ => return Err(Error::Contract("conditioning parameters do not match the method".into())),
        };
        let scores = classify(g, &fused)?;
        let class = match mask {
            MaskClass::GroundTruth(c) => {
                if c >= self.config.classes {
                    return Err(Error::Contract(format!("ground-truth class {c} out of {}", self.config.classes)));
                }
                c
            }
            MaskClass::Predicted => argmax(g.value(scores).data()),
        };
        let pyramid = if class == self.config.background() {
            None
        } else {
            let masked = mask_poses(g, &fused, class)?;
            Some(self.decoder.decode(g, store, masked, Some(&taps))?)
        };
        Ok(Forward { taps, fused, scores, class, pyramid })
    }

    /// Inference with the predicted class.
    pub fn predict(&self, video: &Tensor<F>, tokens: &TokenSeq) -> Result<Prediction> {
        let mut g = Graph::new();
        let v = g.constant(video.clone());
        let out = self.forward(&mut g, v, tokens, MaskClass::Predicted)?;
        let scores: Vec<f32> = g.value(out.scores).data().iter().map(|&s| s.as_f32()).collect();
        let s = self.config.video.size;
        let n = self.config.video.frames * s * s;
        match out.pyramid {
            Some(p) => Ok(Prediction { class: Some(out.class), scores, mask: binarize(g.value(p.final_logits())) }),
            None => Ok(Prediction { class: None, scores, mask: vec![false; n] }),
        }
    }
}
