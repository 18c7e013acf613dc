//! Classification from routed activations, class masking of poses, and the
//! transposed-convolution decoder that turns the surviving poses into
//! per-frame mask logits.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::capsule::{CapsuleGrid, POSE_DIM};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::TransposeSpec;
use crate::param::{kaiming, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::video::EncoderTaps;

/// Per-class score: the mean activation of that class over all locations.
/// Returns `[n_out]`.
pub fn classify<F: Real>(g: &mut Graph<F>, grid: &CapsuleGrid) -> Result<Var> {
    let a = g.reshape(grid.activations, &[grid.locations(), grid.types])?;
    let m = g.mean_axis(a, 0)?;
    g.reshape(m, &[grid.types])
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<F: Real>(scores: &[F]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Zeroes the poses of every capsule type except `class_id`. The result is
/// `[H, W, n_out, 4, 4]`; masked entries are written as literal zeros.
pub fn mask_poses<F: Real>(g: &mut Graph<F>, grid: &CapsuleGrid, class_id: usize) -> Result<Var> {
    if class_id >= grid.types {
        return Err(Error::Contract(format!("class {class_id} out of range for {} types", grid.types)));
    }
    let n = g.value(grid.poses).len();
    let mask: Vec<bool> = (0..n).map(|i| (i / POSE_DIM) % grid.types != class_id).collect();
    g.select_const(grid.poses, &mask, F::zero())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub capsule_types: usize,
    pub grid_size: usize,
    /// Kernel of the capsule head this decoder inverts.
    pub capsule_kernel: usize,
    pub frames: usize,
    /// Channels after the first three transposed convolutions.
    pub channels: [usize; 3],
    pub skip_channels: [usize; 3],
    pub use_skips: bool,
}

impl DecoderConfig {
    pub fn output_size(&self) -> usize {
        (self.grid_size + self.capsule_kernel - 1) * 4
    }
}

/// Mask logits per pyramid level, coarse to fine: `[T, s, s]` for
/// s = 16, 32, 64 (auxiliary heads) and the final `[T, 64, 64]` output.
#[derive(Clone, Debug)]
pub struct MaskPyramid {
    pub levels: Vec<Var>,
}

impl MaskPyramid {
    pub fn final_logits(&self) -> Var {
        *self.levels.last().unwrap()
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn bind<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>) -> (Var, Var) {
        (g.param(store, self.w), g.param(store, self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    up: [Conv; 4],
    skips: [Conv; 3],
    heads: [Conv; 3],
}

impl Decoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let c_in = config.capsule_types * POSE_DIM;
        let [c1, c2, c3] = config.channels;
        let k = config.capsule_kernel;
        let t = config.frames;
        let mut conv = |name: &str, shape: [usize; 5], fan_in: usize, c_out: usize| -> Result<Conv> {
            let w = store.add(format!("decoder.{name}.w"), kaiming(rng, &shape, fan_in))?;
            let b = store.add(format!("decoder.{name}.b"), Tensor::zeros(&[c_out]))?;
            Ok(Conv { w, b })
        };
        // transposed weights are [C_in, C_out, k...]; fan-in is taken per output tap
        let up = [
            conv("up0", [c_in, c1, t, k, k], c_in * k * k, c1)?,
            conv("up1", [c1, c2, 3, 3, 3], c1 * 27 / 4, c2)?,
            conv("up2", [c2, c3, 3, 3, 3], c2 * 27 / 4, c3)?,
            conv("up3", [c3, 1, 3, 3, 3], c3 * 27, 1)?,
        ];
        let [s0, s1, s2] = config.skip_channels;
        let skips = [
            conv("skip16", [c1, s2, 1, 1, 1], s2, c1)?,
            conv("skip32", [c2, s1, 1, 1, 1], s1, c2)?,
            conv("skip64", [c3, s0, 1, 1, 1], s0, c3)?,
        ];
        let heads = [
            conv("head16", [1, c1, 1, 1, 1], c1, 1)?,
            conv("head32", [1, c2, 1, 1, 1], c2, 1)?,
            conv("head64", [1, c3, 1, 1, 1], c3, 1)?,
        ];
        Ok(Decoder { config, up, skips, heads })
    }

    /// Decodes masked poses `[H, W, n_out, 4, 4]` into a [`MaskPyramid`].
    ///
    /// The first transposed convolution has kernel `(T, k, k)` and inverts the
    /// capsule head (grid -> feature resolution, one time step -> T). The
    /// next two double the spatial extent with stride-2 3x3x3 kernels, and a
    /// final stride-1 3x3x3 layer emits the output logits. After each of the
    /// first three stages the matching encoder tap is projected by a 1x1x1
    /// convolution and added, and a 1x1x1 head emits auxiliary logits.
    pub fn decode<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        masked_poses: Var,
        taps: Option<&EncoderTaps>,
    ) -> Result<MaskPyramid> {
        let cfg = &self.config;
        let expected = [cfg.grid_size, cfg.grid_size, cfg.capsule_types, 4, 4];
        if g.shape(masked_poses) != expected {
            return Err(dim_err!("decoder expects poses {expected:?}, got {:?}", g.shape(masked_poses)));
        }
        let (gs, n) = (cfg.grid_size, cfg.capsule_types);
        let x = g.reshape(masked_poses, &[gs * gs, n * POSE_DIM])?;
        let x = g.permute(x, &[1, 0])?;
        let mut x = g.reshape(x, &[n * POSE_DIM, 1, gs, gs])?;
        let specs = [
            TransposeSpec::unit(),
            TransposeSpec { stride: [1, 2, 2], padding: [1, 1, 1], output_padding: [0, 1, 1] },
            TransposeSpec { stride: [1, 2, 2], padding: [1, 1, 1], output_padding: [0, 1, 1] },
        ];
        let mut levels = Vec::with_capacity(4);
        for stage in 0..3 {
            let (w, b) = self.up[stage].bind(g, store);
            x = g.conv_transpose3d(x, w, Some(b), specs[stage])?;
            if cfg.use_skips {
                let taps = taps.ok_or_else(|| Error::Contract("decoder configured with skips needs encoder taps".into()))?;
                let tap = taps.skips[2 - stage];
                if g.shape(tap)[1..] != g.shape(x)[1..] {
                    return Err(dim_err!(
                        "skip tap {:?} does not match decoder stage {:?}",
                        g.shape(tap),
                        g.shape(x)
                    ));
                }
                let (sw, sb) = self.skips[stage].bind(g, store);
                let proj = g.conv3d(tap, sw, Some(sb), [1; 3], [0; 3])?;
                x = g.add(x, proj)?;
            }
            x = g.relu(x);
            let (hw, hb) = self.heads[stage].bind(g, store);
            let logits = g.conv3d(x, hw, Some(hb), [1; 3], [0; 3])?;
            levels.push(squeeze_channel(g, logits)?);
        }
        let (w, b) = self.up[3].bind(g, store);
        let spec = TransposeSpec { stride: [1; 3], padding: [1; 3], output_padding: [0; 3] };
        let out = g.conv_transpose3d(x, w, Some(b), spec)?;
        levels.push(squeeze_channel(g, out)?);
        Ok(MaskPyramid { levels })
    }
}

fn squeeze_channel<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &s[1..])
}

/// Binary mask from logits: `sigmoid(x) >= 0.5`, i.e. `x >= 0`.
pub fn binarize<F: Real>(logits: &Tensor<F>) -> Vec<bool> {
    logits.data().iter().map(|&x| x >= F::zero()).collect()
}

/// Binary PGM (P5) bytes, 255 for foreground.
pub fn pgm_bytes(mask: &[bool], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

/// Writes one `<sample>_<frame>.pgm` per frame of a `[T, H, W]` mask and
/// returns the paths written.
pub fn export_pgm_frames(
    dir: impl AsRef<Path>,
    sample: &str,
    mask: &[bool],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<std::path::PathBuf>> {
    if mask.len() != frames * height * width {
        return Err(dim_err!("mask of {} values is not {frames}x{height}x{width}", mask.len()));
    }
    let mut paths = Vec::with_capacity(frames);
    for t in 0..frames {
        let path = dir.as_ref().join(format!("{sample}_{t}.pgm"));
        let mut f = std::fs::File::create(&path)?;
        f.write_all(&pgm_bytes(&mask[t * height * width..(t + 1) * height * width], width, height))?;
        paths.push(path);
    }
    Ok(paths)
}
