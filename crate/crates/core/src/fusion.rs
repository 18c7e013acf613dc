//! Conditioning video capsules on a query.
//!
//! [`fuse_by_routing`] routes sentence and per-location video capsules
//! jointly. The four other methods condition either the pre-capsule feature
//! maps (concatenation, multiplication) or the video capsules themselves
//! (pose filter, activation filter) and then route video capsules alone.
//! All five produce the same [`CapsuleGrid`] shape.

use std::fmt;
use std::str::FromStr;

use crate::capsule::{compute_votes, em_routing, CapsuleGrid, RoutingConfig, POSE_DIM};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::sentence::SentenceCapsules;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Conditioning {
    #[default]
    Routing,
    Concat,
    Multiply,
    FilterPoses,
    FilterActs,
}

impl Conditioning {
    pub const ALL: [Conditioning; 5] = [
        Conditioning::Routing,
        Conditioning::FilterPoses,
        Conditioning::FilterActs,
        Conditioning::Multiply,
        Conditioning::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Conditioning::Routing => "routing",
            Conditioning::Concat => "concat",
            Conditioning::Multiply => "multiply",
            Conditioning::FilterPoses => "filter_poses",
            Conditioning::FilterActs => "filter_acts",
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Conditioning::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown conditioning method {s}")))
    }
}

/// Routing weights shared by every conditioning method.
#[derive(Clone, Copy, Debug)]
pub struct RoutingVars {
    pub video_transforms: Var,
    pub beta_a: Var,
    pub beta_u: Var,
}

/// Copies of the sentence capsules at every grid location:
/// poses `[H, W, m, 4, 4]`, activations `[H, W, m]`.
pub fn tile_sentence_capsules<F: Real>(
    g: &mut Graph<F>,
    s: &SentenceCapsules,
    height: usize,
    width: usize,
) -> Result<(Var, Var)> {
    if height == 0 || width == 0 {
        return Err(dim_err!("cannot tile over an empty {height}x{width} grid"));
    }
    let p = g.tile_axis(s.poses, 0, width)?;
    let p = g.tile_axis(p, 0, height)?;
    let a = g.tile_axis(s.activations, 0, width)?;
    let a = g.tile_axis(a, 0, height)?;
    Ok((p, a))
}

/// Joint routing of sentence and video capsules at every location.
///
/// Sentence votes are cast once and reused at every location; at each
/// `(x, y)` the sentence activations/votes are concatenated (first) with that
/// location's video activations/votes and routed to `n_out` capsules.
pub fn fuse_by_routing<F: Real>(
    g: &mut Graph<F>,
    video: &CapsuleGrid,
    sentence: &SentenceCapsules,
    sentence_transforms: Var,
    routing: RoutingVars,
    cfg: &RoutingConfig,
) -> Result<CapsuleGrid> {
    let ts = g.shape(sentence_transforms).to_vec();
    let tv = g.shape(routing.video_transforms).to_vec();
    if ts[0] != sentence.types || tv[0] != video.types || ts[1] != tv[1] {
        return Err(dim_err!(
            "transforms {ts:?}/{tv:?} do not map {} sentence and {} video types to one output set",
            sentence.types,
            video.types
        ));
    }
    let n_out = tv[1];
    let (h, w, n, m) = (video.height, video.width, video.types, sentence.types);
    let l = h * w;
    let s_votes = compute_votes(g, sentence.poses, sentence_transforms)?; // [m, n_out, 4, 4]
    let s_votes = g.reshape(s_votes, &[m, n_out, POSE_DIM])?;
    let s_votes = g.tile_axis(s_votes, 0, l)?;
    let v_votes = compute_votes(g, video.poses, routing.video_transforms)?;
    let v_votes = g.reshape(v_votes, &[l, n, n_out, POSE_DIM])?;
    let votes = g.concat(&[s_votes, v_votes], 1)?;
    let s_act = g.tile_axis(sentence.activations, 0, l)?;
    let v_act = g.reshape(video.activations, &[l, n])?;
    let acts = g.concat(&[s_act, v_act], 1)?;
    let routed = em_routing(g, acts, votes, routing.beta_a, routing.beta_u, cfg)?;
    grid_from_routed(g, routed.poses, routed.activations, h, w, n_out)
}

/// Routes a video capsule grid alone to `n_out` capsules per location.
pub fn route_video_only<F: Real>(
    g: &mut Graph<F>,
    video: &CapsuleGrid,
    routing: RoutingVars,
    cfg: &RoutingConfig,
) -> Result<CapsuleGrid> {
    let n_out = g.shape(routing.video_transforms)[1];
    let (h, w, n) = (video.height, video.width, video.types);
    let l = h * w;
    let votes = compute_votes(g, video.poses, routing.video_transforms)?;
    let votes = g.reshape(votes, &[l, n, n_out, POSE_DIM])?;
    let acts = g.reshape(video.activations, &[l, n])?;
    let routed = em_routing(g, acts, votes, routing.beta_a, routing.beta_u, cfg)?;
    grid_from_routed(g, routed.poses, routed.activations, h, w, n_out)
}

fn grid_from_routed<F: Real>(g: &mut Graph<F>, poses: Var, acts: Var, h: usize, w: usize, n_out: usize) -> Result<CapsuleGrid> {
    let poses = g.reshape(poses, &[h, w, n_out, 4, 4])?;
    let activations = g.reshape(acts, &[h, w, n_out])?;
    Ok(CapsuleGrid { poses, activations, height: h, width: w, types: n_out })
}

/// Tiles a `[D]` vector over `[D, T, H, W]`.
pub fn tile_vector<F: Real>(g: &mut Graph<F>, v: Var, t: usize, h: usize, w: usize) -> Result<Var> {
    let d = g.shape(v)[0];
    let x = g.reshape(v, &[d, 1])?;
    let x = g.expand(x, 1, t * h * w)?;
    g.reshape(x, &[d, t, h, w])
}

/// Concatenates a tiled sentence vector with `features: [C, T, H, W]` along
/// channels and mixes them with a 1x1x1 convolution `w: [C', C + D, 1, 1, 1]`.
pub fn condition_concat<F: Real>(g: &mut Graph<F>, features: Var, sentence: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let tiled = tile_vector(g, sentence, s[1], s[2], s[3])?;
    let cat = g.concat(&[features, tiled], 0)?;
    let y = g.conv3d(cat, w, Some(b), [1; 3], [0; 3])?;
    Ok(g.relu(y))
}

/// Multiplies `features: [C, T, H, W]` channel-wise by a `[C]` filter
/// tiled over every position.
pub fn condition_multiply<F: Real>(g: &mut Graph<F>, features: Var, filter: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if g.shape(filter) != [s[0]] {
        return Err(dim_err!("filter {:?} for {} channels", g.shape(filter), s[0]));
    }
    let tiled = tile_vector(g, filter, s[1], s[2], s[3])?;
    g.mul(features, tiled)
}

/// Multiplies every pose entry by a per-capsule-type filter `[n, 16]`.
pub fn filter_poses<F: Real>(g: &mut Graph<F>, video: &CapsuleGrid, filter: Var) -> Result<CapsuleGrid> {
    let (h, w, n) = (video.height, video.width, video.types);
    if g.shape(filter) != [n, POSE_DIM] {
        return Err(dim_err!("pose filter {:?}, expected [{n}, 16]", g.shape(filter)));
    }
    let f = g.reshape(filter, &[n, 4, 4])?;
    let f = g.tile_axis(f, 0, w)?;
    let f = g.tile_axis(f, 0, h)?;
    let poses = g.mul(video.poses, f)?;
    Ok(CapsuleGrid { poses, ..*video })
}

/// Multiplies every activation by a per-capsule-type filter `[n]` in `[0, 1]`.
pub fn filter_activations<F: Real>(g: &mut Graph<F>, video: &CapsuleGrid, filter: Var) -> Result<CapsuleGrid> {
    let (h, w, n) = (video.height, video.width, video.types);
    if g.shape(filter) != [n] {
        return Err(dim_err!("activation filter {:?}, expected [{n}]", g.shape(filter)));
    }
    let f = g.tile_axis(filter, 0, w)?;
    let f = g.tile_axis(f, 0, h)?;
    let activations = g.mul(video.activations, f)?;
    Ok(CapsuleGrid { activations, ..*video })
}
