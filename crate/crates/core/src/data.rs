//! Procedural referring-segmentation scenes: hard-edged coloured shapes
//! moving over a black background, a templated query naming one of them,
//! and its exact per-frame visible mask.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sentence::Vocabulary;
use crate::tensor::Tensor;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::Config(format!(concat!("unknown ", stringify!($name), " {}"), s)))
            }
        }
    };
}

named_enum!(Shape { Square => "square", Circle => "circle", Triangle => "triangle" });
named_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
named_enum!(Action {
    Left => "left",
    Right => "right",
    Up => "up",
    Down => "down",
    Grow => "grow",
    Shrink => "shrink",
    Static => "static",
});

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Action {
    pub fn phrase(self) -> &'static str {
        match self {
            Action::Left => "moving left",
            Action::Right => "moving right",
            Action::Up => "moving up",
            Action::Down => "moving down",
            Action::Grow => "growing",
            Action::Shrink => "shrinking",
            Action::Static => "standing still",
        }
    }

    fn velocity(self, speed: f64) -> (f64, f64) {
        match self {
            Action::Left => (-speed, 0.0),
            Action::Right => (speed, 0.0),
            Action::Up => (0.0, -speed),
            Action::Down => (0.0, speed),
            _ => (0.0, 0.0),
        }
    }
}

/// What happens when two actors' shapes overlap in some frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollisionPolicy {
    /// Resample the scene until no two shapes overlap.
    Reject,
    /// Keep overlaps; the later actor in z-order hides the earlier.
    Occlude,
}

impl FromStr for CollisionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reject" => Ok(CollisionPolicy::Reject),
            "occlude" => Ok(CollisionPolicy::Occlude),
            _ => Err(Error::Config(format!("unknown collision policy {s}"))),
        }
    }
}

impl fmt::Display for CollisionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CollisionPolicy::Reject => "reject",
            CollisionPolicy::Occlude => "occlude",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub frames: usize,
    pub size: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    /// Smallest half-extent any shape may reach in any frame.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Pixels per frame for translating actions; integral values keep
    /// rasterized masks exact translates of each other.
    pub speed: f64,
    /// Radius change per frame for grow/shrink.
    pub growth: f64,
    pub collision: CollisionPolicy,
    /// Ground truth is the bounding box of the visible target pixels.
    pub box_gt: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 4,
            size: 64,
            min_actors: 1,
            max_actors: 3,
            min_radius: 5.0,
            max_radius: 10.0,
            speed: 3.0,
            growth: 1.5,
            collision: CollisionPolicy::Reject,
            box_gt: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 || self.size < 8 {
            return bad("scene needs at least one frame and 8x8 pixels");
        }
        if self.min_actors == 0 || self.min_actors > self.max_actors {
            return bad("actor count range must satisfy 1 <= min <= max");
        }
        if !(self.min_radius >= 1.0 && self.min_radius + self.growth * (self.frames - 1) as f64 <= self.max_radius) {
            return bad("radius range must admit a full grow or shrink action");
        }
        let travel = self.speed * (self.frames - 1) as f64 + 2.0 * self.max_radius;
        if travel + 2.0 > self.size as f64 {
            return bad("largest moving shape does not fit in the frame");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub shape: Shape,
    pub color: Color,
    pub action: Action,
    /// `(x, y)` centre per frame.
    pub centers: Vec<(f64, f64)>,
    pub radii: Vec<f64>,
}

impl Actor {
    pub fn attributes(&self) -> (Color, Shape, Action) {
        (self.color, self.shape, self.action)
    }

    /// Per-frame velocity in pixels.
    pub fn velocity(&self) -> (f64, f64) {
        if self.centers.len() < 2 {
            return (0.0, 0.0);
        }
        (self.centers[1].0 - self.centers[0].0, self.centers[1].1 - self.centers[0].1)
    }
}

/// Whether pixel `(x, y)` (its centre at `x + 0.5, y + 0.5`) lies inside the
/// shape.
pub fn covers(shape: Shape, cx: f64, cy: f64, r: f64, x: usize, y: usize) -> bool {
    let dx = x as f64 + 0.5 - cx;
    let dy = y as f64 + 0.5 - cy;
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Circle => dx * dx + dy * dy <= r * r,
        // apex up, base of width 2r at the bottom
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    /// Back to front.
    pub actors: Vec<Actor>,
    pub target: usize,
    /// `[actor][frame]` full shape masks, row-major `size * size`.
    pub rendered: Vec<Vec<Vec<bool>>>,
    /// `[actor][frame]` pixels where the actor is frontmost.
    pub visible: Vec<Vec<Vec<bool>>>,
}

impl Scene {
    /// `[3, T, S, S]` RGB video.
    pub fn video(&self) -> Tensor<f32> {
        let (t, s) = (self.config.frames, self.config.size);
        let plane = s * s;
        let mut data = vec![0.0f32; 3 * t * plane];
        for (a, actor) in self.actors.iter().enumerate() {
            let rgb = actor.color.rgb();
            for f in 0..t {
                for (p, &on) in self.visible[a][f].iter().enumerate() {
                    if on {
                        for (c, &v) in rgb.iter().enumerate() {
                            data[(c * t + f) * plane + p] = v;
                        }
                    }
                }
            }
        }
        Tensor::new(&[3, t, s, s], data).expect("video geometry")
    }

    /// `[T, S, S]` target mask in `{0, 1}`.
    pub fn gt_masks(&self) -> Tensor<f32> {
        let (t, s) = (self.config.frames, self.config.size);
        let mut data = Vec::with_capacity(t * s * s);
        for f in 0..t {
            let vis = &self.visible[self.target][f];
            if self.config.box_gt {
                data.extend(bounding_box(vis, s).into_iter().map(f32::from));
            } else {
                data.extend(vis.iter().map(|&b| f32::from(u8::from(b))));
            }
        }
        Tensor::new(&[t, s, s], data).expect("mask geometry")
    }
}

fn bounding_box(mask: &[bool], s: usize) -> Vec<u8> {
    let mut out = vec![0u8; s * s];
    let on: Vec<(usize, usize)> = (0..s * s).filter(|&p| mask[p]).map(|p| (p % s, p / s)).collect();
    if on.is_empty() {
        return out;
    }
    let (x0, x1) = (on.iter().map(|p| p.0).min().unwrap(), on.iter().map(|p| p.0).max().unwrap());
    let (y0, y1) = (on.iter().map(|p| p.1).min().unwrap(), on.iter().map(|p| p.1).max().unwrap());
    for y in y0..=y1 {
        for x in x0..=x1 {
            out[y * s + x] = 1;
        }
    }
    out
}

fn render(config: &SceneConfig, actors: &[Actor]) -> (Vec<Vec<Vec<bool>>>, Vec<Vec<Vec<bool>>>) {
    let s = config.size;
    let rendered: Vec<Vec<Vec<bool>>> = actors
        .iter()
        .map(|a| {
            (0..config.frames)
                .map(|f| {
                    let (cx, cy) = a.centers[f];
                    let r = a.radii[f];
                    (0..s * s).map(|p| covers(a.shape, cx, cy, r, p % s, p / s)).collect()
                })
                .collect()
        })
        .collect();
    let mut visible = rendered.clone();
    for f in 0..config.frames {
        for p in 0..s * s {
            let mut front = None;
            for a in 0..actors.len() {
                if rendered[a][f][p] {
                    front = Some(a);
                }
            }
            for (a, vis) in visible.iter_mut().enumerate() {
                vis[f][p] = front == Some(a);
            }
        }
    }
    (rendered, visible)
}

fn sample_actor(config: &SceneConfig, attrs: (Color, Shape, Action), rng: &mut impl Rng) -> Actor {
    let (color, shape, action) = attrs;
    let span = config.growth * (config.frames - 1) as f64;
    let r0 = match action {
        Action::Grow => rng.gen_range(config.min_radius..=config.max_radius - span),
        Action::Shrink => rng.gen_range(config.min_radius + span..=config.max_radius),
        _ => rng.gen_range(config.min_radius..=config.max_radius),
    };
    let radii: Vec<f64> = (0..config.frames)
        .map(|f| match action {
            Action::Grow => r0 + config.growth * f as f64,
            Action::Shrink => r0 - config.growth * f as f64,
            _ => r0,
        })
        .collect();
    let (vx, vy) = action.velocity(config.speed);
    let last = (config.frames - 1) as f64;
    let rmax = radii.iter().cloned().fold(0.0, f64::max) + 1.0;
    let s = config.size as f64;
    let range = |v: f64| {
        let lo = rmax - v.min(0.0) * last;
        let hi = s - rmax - v.max(0.0) * last;
        (lo, hi.max(lo))
    };
    let (xlo, xhi) = range(vx);
    let (ylo, yhi) = range(vy);
    // integral centres keep translated masks exact copies
    let x0 = rng.gen_range(xlo.ceil()..=xhi.floor().max(xlo.ceil()));
    let y0 = rng.gen_range(ylo.ceil()..=yhi.floor().max(ylo.ceil()));
    let centers = (0..config.frames).map(|f| (x0 + vx * f as f64, y0 + vy * f as f64)).collect();
    Actor { shape, color, action, centers, radii }
}

fn random_attrs(rng: &mut impl Rng) -> (Color, Shape, Action) {
    (
        *Color::ALL.choose(rng).unwrap(),
        *Shape::ALL.choose(rng).unwrap(),
        *Action::ALL.choose(rng).unwrap(),
    )
}

/// Attributes for the distractors of a target. The first distractor always
/// shares the target's colour or shape; when it shares both, its action
/// differs. No distractor copies all three target attributes.
fn distractor_attrs(target: (Color, Shape, Action), count: usize, rng: &mut impl Rng) -> Vec<(Color, Shape, Action)> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        loop {
            let mut a = random_attrs(rng);
            if i == 0 {
                match rng.gen_range(0..3) {
                    0 => a.0 = target.0,
                    1 => a.1 = target.1,
                    _ => {
                        a.0 = target.0;
                        a.1 = target.1;
                    }
                }
            }
            if a != target {
                out.push(a);
                break;
            }
        }
    }
    out
}

fn overlaps(rendered: &[Vec<Vec<bool>>]) -> bool {
    let frames = rendered.first().map_or(0, |r| r.len());
    for f in 0..frames {
        let pixels = rendered[0][f].len();
        for p in 0..pixels {
            if rendered.iter().filter(|r| r[f][p]).count() > 1 {
                return true;
            }
        }
    }
    false
}

const MAX_ATTEMPTS: usize = 10_000;

/// Deterministic scene for `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(config.min_actors..=config.max_actors);
    let target_attrs = random_attrs(&mut rng);
    let mut attrs = vec![target_attrs];
    attrs.extend(distractor_attrs(target_attrs, n - 1, &mut rng));
    for _ in 0..MAX_ATTEMPTS {
        let mut actors: Vec<Actor> = attrs.iter().map(|&a| sample_actor(config, a, &mut rng)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let target = order.iter().position(|&i| i == 0).unwrap();
        actors = order.iter().map(|&i| actors[i].clone()).collect();
        let (rendered, visible) = render(config, &actors);
        if config.collision == CollisionPolicy::Reject && n > 1 && overlaps(&rendered) {
            continue;
        }
        if visible[target].iter().any(|f| !f.iter().any(|&b| b)) {
            continue;
        }
        return Ok(Scene { config: config.clone(), actors, target, rendered, visible });
    }
    Err(Error::Config(format!("no valid scene after {MAX_ATTEMPTS} attempts for seed {seed}")))
}

/// Parsed query: colour and shape are always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryPredicate {
    pub color: Color,
    pub shape: Shape,
    pub action: Option<Action>,
}

impl QueryPredicate {
    pub fn matches(&self, actor: &Actor) -> bool {
        actor.color == self.color && actor.shape == self.shape && self.action.is_none_or(|a| a == actor.action)
    }

    pub fn text(&self) -> String {
        match self.action {
            Some(a) => format!("the {} {} {}", self.color, self.shape, a.phrase()),
            None => format!("the {} {}", self.color, self.shape),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::Format(format!("query outside the grammar: {text:?}"));
        if words.len() < 3 || words[0] != "the" {
            return Err(bad());
        }
        let color = words[1].parse().map_err(|_| bad())?;
        let shape = words[2].parse().map_err(|_| bad())?;
        let action = if words.len() == 3 {
            None
        } else {
            let phrase = words[3..].join(" ");
            Some(Action::ALL.iter().copied().find(|a| a.phrase() == phrase).ok_or_else(bad)?)
        };
        Ok(QueryPredicate { color, shape, action })
    }
}

/// Query for `target`: colour and shape, plus the action phrase when another
/// actor shares both. With no such actor the phrase is added at random.
pub fn generate_query(scene: &Scene, target: usize, rng: &mut impl Rng) -> Result<(String, usize)> {
    let t = scene
        .actors
        .get(target)
        .ok_or_else(|| Error::Contract(format!("target {target} out of {} actors", scene.actors.len())))?;
    let base = QueryPredicate { color: t.color, shape: t.shape, action: None };
    let ambiguous = scene.actors.iter().enumerate().any(|(i, a)| i != target && base.matches(a));
    let with_action = QueryPredicate { action: Some(t.action), ..base };
    let pred = if ambiguous || rng.gen_bool(0.5) { with_action } else { base };
    let hits = scene.actors.iter().filter(|a| pred.matches(a)).count();
    if hits != 1 {
        return Err(Error::Contract(format!("query {:?} matches {hits} actors", pred.text())));
    }
    Ok((pred.text(), t.shape.index()))
}

/// Every token the query grammar can produce.
pub fn grammar_tokens() -> Vec<&'static str> {
    let mut t = vec!["the"];
    t.extend(Color::ALL.iter().map(|c| c.as_str()));
    t.extend(Shape::ALL.iter().map(|s| s.as_str()));
    for a in Action::ALL {
        t.extend(a.phrase().split(' '));
    }
    t
}

pub fn vocabulary() -> Vocabulary {
    Vocabulary::from_tokens(grammar_tokens())
}

/// One synthetic sample.
#[derive(Clone, Debug)]
pub struct QuerySample {
    pub seed: u64,
    pub video: Tensor<f32>,
    pub query: String,
    pub target_class: usize,
    pub target_index: usize,
    pub gt_masks: Tensor<f32>,
    pub actors: Vec<Actor>,
}

/// Scene and query for `seed`; the query rng is derived from the same seed.
pub fn generate_sample(config: &SceneConfig, seed: u64) -> Result<QuerySample> {
    let scene = generate_scene(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (query, target_class) = generate_query(&scene, scene.target, &mut rng)?;
    Ok(QuerySample {
        seed,
        video: scene.video(),
        query,
        target_class,
        target_index: scene.target,
        gt_masks: scene.gt_masks(),
        actors: scene.actors,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub target: usize,
    pub query: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\t{}\n", e.seed, e.target, e.query)).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Format(format!("manifest line {}: {line:?}", n + 1));
            let mut parts = line.splitn(3, '\t');
            let seed = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let target = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let query = parts.next().ok_or_else(bad)?.to_string();
            entries.push(ManifestEntry { seed, target, query });
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Regenerates sample `i` and checks it against the recorded target and query.
    pub fn sample(&self, config: &SceneConfig, i: usize) -> Result<QuerySample> {
        let e = &self.entries[i];
        let s = generate_sample(config, e.seed)?;
        if s.target_index != e.target || s.query != e.query {
            return Err(Error::Format(format!("manifest entry for seed {} does not regenerate", e.seed)));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Seeds of split `k` start at `seed * 2^32 + k * 2^28`, so splits never share a seed.
pub fn split_seed(seed: u64, split: u64, index: usize) -> u64 {
    (seed << 32).wrapping_add(split << 28).wrapping_add(index as u64)
}

pub fn build_manifest(config: &SceneConfig, seed: u64, split: u64, n: usize) -> Result<Manifest> {
    if n >= 1 << 28 {
        return Err(Error::Config("split too large".into()));
    }
    let entries = (0..n)
        .map(|i| {
            let s = split_seed(seed, split, i);
            let sample = generate_sample(config, s)?;
            Ok(ManifestEntry { seed: s, target: sample.target_index, query: sample.query })
        })
        .collect::<Result<_>>()?;
    Ok(Manifest { entries })
}

pub fn build_splits(config: &SceneConfig, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Splits> {
    Ok(Splits {
        train: build_manifest(config, seed, 0, n_train)?,
        val: build_manifest(config, seed, 1, n_val)?,
        test: build_manifest(config, seed, 2, n_test)?,
    })
}
