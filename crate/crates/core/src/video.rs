//! Trainable 3-D convolutional video backbone and raw video import.

use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{kaiming, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEncoderConfig {
    pub frames: usize,
    pub size: usize,
    /// Output channels of each 3x3x3 block.
    pub channels: Vec<usize>,
    /// Spatial stride of each block (temporal stride is always 1).
    pub spatial_strides: Vec<usize>,
}

impl VideoEncoderConfig {
    pub fn desk() -> Self {
        VideoEncoderConfig {
            frames: 4,
            size: 64,
            channels: vec![16, 32, 48, 64],
            spatial_strides: vec![2, 2, 1, 1],
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn feature_size(&self) -> usize {
        self.spatial_strides.iter().fold(self.size, |s, &st| s.div_ceil(st))
    }

    /// Channel count of each skip tap, highest resolution first.
    pub fn skip_channels(&self) -> [usize; 3] {
        [3, self.channels[0], self.feature_channels()]
    }
}

/// Backbone outputs: the capsule input `features: [C, T, h, w]` and skip
/// taps at full, half and quarter resolution (in that order).
#[derive(Clone, Debug)]
pub struct EncoderTaps {
    pub features: Var,
    pub skips: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub config: VideoEncoderConfig,
    blocks: Vec<(ParamId, ParamId, usize)>,
}

impl VideoEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, config: VideoEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.channels.len() != config.spatial_strides.len() || config.channels.len() < 2 {
            return Err(Error::Config("encoder needs >= 2 blocks with one stride each".into()));
        }
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.spatial_strides).enumerate() {
            let w = store.add(format!("video.block{i}.w"), kaiming(rng, &[c, c_in, 3, 3, 3], c_in * 27))?;
            let b = store.add(format!("video.block{i}.b"), Tensor::zeros(&[c]))?;
            blocks.push((w, b, s));
            c_in = c;
        }
        Ok(VideoEncoder { config, blocks })
    }

    /// `video: [3, T, H, W]` with the configured geometry.
    pub fn encode_video<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, video: Var) -> Result<EncoderTaps> {
        let expected = [3, self.config.frames, self.config.size, self.config.size];
        if g.shape(video) != expected {
            return Err(dim_err!("video must be {expected:?}, got {:?}", g.shape(video)));
        }
        let mut x = video;
        let mut first = None;
        for &(w, b, s) in &self.blocks {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            x = g.conv3d(x, wv, Some(bv), [1, s, s], [1, 1, 1])?;
            x = g.relu(x);
            first.get_or_insert(x);
        }
        Ok(EncoderTaps { features: x, skips: [video, first.unwrap(), x] })
    }
}

pub const RAW_VIDEO_MAGIC: &[u8; 4] = b"MMVD";

/// Reads a planar little-endian f32 video `[3, T, H, W]` preceded by a
/// 16-byte header: magic `MMVD`, then `T`, `H`, `W` as u32.
pub fn read_raw_video(mut r: impl Read) -> Result<Tensor<f32>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| Error::Format("truncated video header".into()))?;
    if &header[..4] != RAW_VIDEO_MAGIC {
        return Err(Error::Format("bad video magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let n = 3 * t * h * w;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(|_| Error::Format("truncated video payload".into()))?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&[3, t, h, w], data)
}

pub fn write_raw_video(video: &Tensor<f32>, mut w: impl std::io::Write) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(dim_err!("raw video must be [3, T, H, W], got {s:?}"));
    }
    w.write_all(RAW_VIDEO_MAGIC)?;
    for &d in &s[1..] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in video.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_raw_video(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_raw_video(std::io::BufReader::new(std::fs::File::open(path)?))
}
