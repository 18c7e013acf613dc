//! Flat `key = value` experiment configuration.
//!
//! Every tunable of the data generator, model, routing and training loop
//! has a key. Unknown keys, duplicate keys and malformed values are errors.
//! Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::{vocabulary, CollisionPolicy, SceneConfig};
use crate::error::{Error, Result};
use crate::fusion::Conditioning;
use crate::data::build_splits;
use crate::model::{Model, ModelConfig};
use crate::train::{Dataset, TrainConfig, Trainer};

/// Dynamic-filter baselines emit one filter per capsule type; this is the
/// only supported granularity.
pub const FILTER_GRANULARITY: &str = "per_type";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds data splits, weight initialization and batch order.
    pub seed: u64,
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            scene: SceneConfig::default(),
            n_train: 2000,
            n_val: 64,
            n_test: 200,
            model: ModelConfig::desk(vocabulary().size()),
            train: TrainConfig::default(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn parse_array3(key: &str, v: &str) -> Result<[usize; 3]> {
    parse_list::<usize>(key, v)?
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs exactly three values")))
}

impl RunConfig {
    /// A miniature setup (2 frames of 32x32, narrow layers, a few samples)
    /// for smoke tests. Every step takes milliseconds.
    pub fn smoke() -> Self {
        let mut c = RunConfig::default();
        let text = "scene.frames = 2\nscene.size = 32\nscene.min_radius = 3\nscene.max_radius = 6\n\
                    data.n_train = 16\ndata.n_val = 8\ndata.n_test = 8\n\
                    model.video_channels = 4,8,8,8\nmodel.video_types = 4\nmodel.capsule_kernel = 3\n\
                    model.embed_dim = 8\nmodel.branch_channels = 16\nmodel.sentence_types = 4\n\
                    model.decoder_channels = 8,8,4\n\
                    train.batch_size = 4\ntrain.max_steps = 10\ntrain.val_every = 5\ntrain.val_size = 8\n";
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            c.set(k.trim(), v.trim()).expect("smoke preset keys are valid");
        }
        c
    }

    /// Train, validation and test splits regenerated from the run seed.
    pub fn datasets(&self) -> Result<[Dataset; 3]> {
        let s = build_splits(&self.scene, self.n_train, self.n_val, self.n_test, self.seed)?;
        let vocab = vocabulary();
        let ds = |manifest| Dataset { scene: self.scene.clone(), manifest, vocab: vocab.clone() };
        Ok([ds(s.train), ds(s.val), ds(s.test)])
    }

    /// Freshly initialized model for this run.
    pub fn build_model(&self) -> Result<Model<f32>> {
        Model::new(self.model.clone(), self.seed)
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::new(self.build_model()?, TrainConfig { seed: self.seed, ..self.train.clone() })
    }

    pub fn to_text(&self) -> String {
        let (s, m, t) = (&self.scene, &self.model, &self.train);
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("scene.frames", s.frames.to_string()),
            ("scene.size", s.size.to_string()),
            ("scene.min_actors", s.min_actors.to_string()),
            ("scene.max_actors", s.max_actors.to_string()),
            ("scene.min_radius", s.min_radius.to_string()),
            ("scene.max_radius", s.max_radius.to_string()),
            ("scene.speed", s.speed.to_string()),
            ("scene.growth", s.growth.to_string()),
            ("scene.collision", s.collision.to_string()),
            ("scene.box_gt", s.box_gt.to_string()),
            ("data.n_train", self.n_train.to_string()),
            ("data.n_val", self.n_val.to_string()),
            ("data.n_test", self.n_test.to_string()),
            ("model.video_channels", list(&m.video.channels)),
            ("model.video_strides", list(&m.video.spatial_strides)),
            ("model.video_types", m.video_types.to_string()),
            ("model.capsule_kernel", m.capsule_kernel.to_string()),
            ("model.embed_dim", m.sentence.embed_dim.to_string()),
            ("model.branch_channels", m.sentence.branch_channels.to_string()),
            ("model.kernel_sizes", list(&m.sentence.kernel_sizes)),
            ("model.sentence_types", m.sentence.capsule_types.to_string()),
            ("model.classes", m.classes.to_string()),
            ("model.transform_noise", m.transform_noise.to_string()),
            ("model.decoder_channels", list(&m.decoder_channels)),
            ("model.use_skips", m.use_skips.to_string()),
            ("model.conditioning", m.conditioning.to_string()),
            ("model.filter_granularity", FILTER_GRANULARITY.to_string()),
            ("routing.iterations", m.routing.iterations.to_string()),
            ("routing.inv_temp", list(&m.routing.inv_temp)),
            ("routing.variance_floor", m.routing.variance_floor.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.margin_start", t.margin_start.to_string()),
            ("train.margin_end", t.margin_end.to_string()),
            ("train.margin_steps", t.margin_steps.map_or("auto".to_string(), |n| n.to_string())),
            ("train.lambda_initial", t.lambda_initial.to_string()),
            ("train.acc_threshold", t.acc_threshold.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.val_every", t.val_every.to_string()),
            ("train.val_size", t.val_size.to_string()),
            ("train.multi_resolution", t.multi_resolution.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses a config, starting from the defaults for keys left out.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if seen.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("duplicate key {k}")));
            }
        }
        let mut c = RunConfig::default();
        for (k, v) in &seen {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (s, m, t) = (&mut self.scene, &mut self.model, &mut self.train);
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
            }
            "scene.frames" => {
                s.frames = parse(key, v)?;
                m.video.frames = s.frames;
            }
            "scene.size" => {
                s.size = parse(key, v)?;
                m.video.size = s.size;
            }
            "scene.min_actors" => s.min_actors = parse(key, v)?,
            "scene.max_actors" => s.max_actors = parse(key, v)?,
            "scene.min_radius" => s.min_radius = parse(key, v)?,
            "scene.max_radius" => s.max_radius = parse(key, v)?,
            "scene.speed" => s.speed = parse(key, v)?,
            "scene.growth" => s.growth = parse(key, v)?,
            "scene.collision" => s.collision = v.parse::<CollisionPolicy>()?,
            "scene.box_gt" => s.box_gt = parse(key, v)?,
            "data.n_train" => self.n_train = parse(key, v)?,
            "data.n_val" => self.n_val = parse(key, v)?,
            "data.n_test" => self.n_test = parse(key, v)?,
            "model.video_channels" => m.video.channels = parse_list(key, v)?,
            "model.video_strides" => m.video.spatial_strides = parse_list(key, v)?,
            "model.video_types" => m.video_types = parse(key, v)?,
            "model.capsule_kernel" => m.capsule_kernel = parse(key, v)?,
            "model.embed_dim" => m.sentence.embed_dim = parse(key, v)?,
            "model.branch_channels" => m.sentence.branch_channels = parse(key, v)?,
            "model.kernel_sizes" => m.sentence.kernel_sizes = parse_list(key, v)?,
            "model.sentence_types" => m.sentence.capsule_types = parse(key, v)?,
            "model.classes" => m.classes = parse(key, v)?,
            "model.transform_noise" => m.transform_noise = parse(key, v)?,
            "model.decoder_channels" => m.decoder_channels = parse_array3(key, v)?,
            "model.use_skips" => m.use_skips = parse(key, v)?,
            "model.conditioning" => m.conditioning = v.parse::<Conditioning>()?,
            "model.filter_granularity" => {
                if v != FILTER_GRANULARITY {
                    return Err(Error::Config(format!("unsupported filter granularity {v}")));
                }
            }
            "routing.iterations" => m.routing.iterations = parse(key, v)?,
            "routing.inv_temp" => m.routing.inv_temp = parse_list(key, v)?,
            "routing.variance_floor" => m.routing.variance_floor = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.margin_start" => t.margin_start = parse(key, v)?,
            "train.margin_end" => t.margin_end = parse(key, v)?,
            "train.margin_steps" => t.margin_steps = if v == "auto" { None } else { Some(parse(key, v)?) },
            "train.lambda_initial" => t.lambda_initial = parse(key, v)?,
            "train.acc_threshold" => t.acc_threshold = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.val_every" => t.val_every = parse(key, v)?,
            "train.val_size" => t.val_size = parse(key, v)?,
            "train.multi_resolution" => t.multi_resolution = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Cross-checks the sections against each other.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let v = &self.model.video;
        if v.frames != self.scene.frames || v.size != self.scene.size {
            return Err(Error::Config(format!(
                "model expects {}x{}px videos, scenes are {}x{}px",
                v.frames, v.size, self.scene.frames, self.scene.size
            )));
        }
        if self.model.classes != crate::data::Shape::ALL.len() {
            return Err(Error::Config(format!("the generator has {} shape classes", crate::data::Shape::ALL.len())));
        }
        if self.n_train == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok(())
    }
}
