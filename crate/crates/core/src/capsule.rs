//! Matrix capsules: primary capsule extraction, vote casting and EM routing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::gradcheck::{self, CheckReport};
use crate::graph::{Graph, Var};
use crate::param::{randn, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const POSE_DIM: usize = 16;

/// Assignment mass at or below which an output capsule is treated as
/// receiving none.
pub const DEGENERATE_MASS: f64 = 1e-10;

/// Spatial grid of capsules bound to a graph.
///
/// `poses` is `[H, W, n, 4, 4]` and `activations` is `[H, W, n]` with values
/// in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleGrid {
    pub poses: Var,
    pub activations: Var,
    pub height: usize,
    pub width: usize,
    pub types: usize,
}

impl CapsuleGrid {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

/// Learned `[n_in, n_out, 4, 4]` transformation matrices, shared across
/// every spatial location.
#[derive(Clone, Copy, Debug)]
pub struct TransformationMatrices {
    pub id: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl TransformationMatrices {
    /// Identity matrices plus Gaussian noise of standard deviation `noise`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_out: usize,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut t = randn::<F>(rng, &[n_in, n_out, 4, 4], noise);
        for ij in 0..n_in * n_out {
            for d in 0..4 {
                let v = &mut t.data_mut()[ij * 16 + d * 5];
                *v = *v + F::one();
            }
        }
        let id = store.add(name, t)?;
        Ok(TransformationMatrices { id, n_in, n_out })
    }
}

/// Non-learned routing settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingConfig {
    pub iterations: usize,
    /// Inverse temperature per iteration; must cover `iterations` entries.
    pub inv_temp: Vec<f64>,
    /// Added to every variance before its logarithm is taken.
    pub variance_floor: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { iterations: 3, inv_temp: vec![1.0, 2.0, 3.0], variance_floor: 1e-4 }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("routing iterations must be >= 1".into()));
        }
        if self.inv_temp.len() < self.iterations {
            return Err(Error::Config(format!(
                "inverse temperature schedule has {} entries for {} iterations",
                self.inv_temp.len(),
                self.iterations
            )));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-output-type routing biases plus the routing settings.
#[derive(Clone, Debug)]
pub struct EmRoutingParams {
    pub beta_a: ParamId,
    pub beta_u: ParamId,
    pub config: RoutingConfig,
}

impl EmRoutingParams {
    /// Both biases start at zero.
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, n_out: usize, config: RoutingConfig) -> Result<Self> {
        config.validate()?;
        let beta_a = store.add(format!("{prefix}.beta_a"), Tensor::zeros(&[n_out]))?;
        let beta_u = store.add(format!("{prefix}.beta_u"), Tensor::zeros(&[n_out]))?;
        Ok(EmRoutingParams { beta_a, beta_u, config })
    }
}

/// Convolutional pose and activation heads producing primary capsules.
#[derive(Clone, Copy, Debug)]
pub struct PrimaryCapsuleHead {
    pub pose_w: ParamId,
    pub pose_b: ParamId,
    pub act_w: ParamId,
    pub act_b: ParamId,
    pub kernel: usize,
    pub types: usize,
}

impl PrimaryCapsuleHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        channels: usize,
        types: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = channels * kernel * kernel;
        let std = (1.0 / fan_in as f64).sqrt();
        let pose_w = store.add(format!("{prefix}.pose_w"), randn(rng, &[types * POSE_DIM, channels, kernel, kernel], std))?;
        let pose_b = store.add(format!("{prefix}.pose_b"), Tensor::zeros(&[types * POSE_DIM]))?;
        let act_w = store.add(format!("{prefix}.act_w"), randn(rng, &[types, channels, kernel, kernel], std))?;
        let act_b = store.add(format!("{prefix}.act_b"), Tensor::zeros(&[types]))?;
        Ok(PrimaryCapsuleHead { pose_w, pose_b, act_w, act_b, kernel, types })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, features: Var) -> Result<CapsuleGrid> {
        let pw = g.param(store, self.pose_w);
        let pb = g.param(store, self.pose_b);
        let aw = g.param(store, self.act_w);
        let ab = g.param(store, self.act_b);
        make_primary_capsules(g, features, pw, pb, aw, ab)
    }
}

/// Unpadded k x k convolutions over `features: [C, H, W]`: a linear head for
/// the `n` pose matrices and a sigmoid head for the `n` activations.
pub fn make_primary_capsules<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    pose_w: Var,
    pose_b: Var,
    act_w: Var,
    act_b: Var,
) -> Result<CapsuleGrid> {
    let types = g.shape(act_w)[0];
    if g.shape(pose_w)[0] != types * POSE_DIM {
        return Err(dim_err!(
            "pose head emits {} channels, expected {} for {types} types",
            g.shape(pose_w)[0],
            types * POSE_DIM
        ));
    }
    let poses = g.conv2d(features, pose_w, Some(pose_b))?;
    let (h, w) = (g.shape(poses)[1], g.shape(poses)[2]);
    let poses = g.reshape(poses, &[types, POSE_DIM, h, w])?;
    let poses = g.permute(poses, &[2, 3, 0, 1])?;
    let poses = g.reshape(poses, &[h, w, types, 4, 4])?;
    let acts = g.conv2d(features, act_w, Some(act_b))?;
    let acts = g.sigmoid(acts);
    let acts = g.permute(acts, &[1, 2, 0])?;
    Ok(CapsuleGrid { poses, activations: acts, height: h, width: w, types })
}

/// Votes `V[..., i, j] = M[..., i] T[i, j]` for poses `[..., n_in, 4, 4]` and
/// transforms `[n_in, n_out, 4, 4]`; returns `[..., n_in, n_out, 4, 4]`.
pub fn compute_votes<F: Real>(g: &mut Graph<F>, poses: Var, transforms: Var) -> Result<Var> {
    let ps = g.shape(poses).to_vec();
    let ts = g.shape(transforms).to_vec();
    let r = ps.len();
    if r < 3 || ps[r - 2..] != [4, 4] || ts.len() != 4 || ts[2..] != [4, 4] {
        return Err(dim_err!("compute_votes: poses {ps:?} / transforms {ts:?} need trailing 4x4"));
    }
    let n_in = ps[r - 3];
    if ts[0] != n_in {
        return Err(dim_err!("compute_votes: {n_in} input types but transforms for {}", ts[0]));
    }
    let n_out = ts[1];
    let lead: usize = ps[..r - 3].iter().product();
    let m = g.reshape(poses, &[lead, n_in, 1, 4, 4])?;
    let m = g.expand(m, 2, n_out)?;
    let t = g.reshape(transforms, &[1, n_in, n_out, 4, 4])?;
    let t = g.expand(t, 0, lead)?;
    let v = g.matmul(m, t)?;
    let mut out = ps[..r - 3].to_vec();
    out.extend_from_slice(&[n_in, n_out, 4, 4]);
    g.reshape(v, &out)
}

/// Output of [`em_routing`]: poses `[..., n_out, 4, 4]`, activations `[..., n_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    pub poses: Var,
    pub activations: Var,
}

/// EM routing between `N_in` input capsules and `N_out` output capsules,
/// batched over any leading location axes.
///
/// `a_in` is `[..., N_in]`, `votes` is `[..., N_in, N_out, 16]`, `beta_a` and
/// `beta_u` are `[N_out]`. Each round runs an M-step (weighted Gaussian fit
/// per output capsule, activation `logistic(λ(β_a - Σ_h (β_u + ln σ_h) Σr))`)
/// followed, except in the last round, by an E-step reassigning each input to
/// outputs in proportion to `a_j N(V_ij; μ_j, σ_j)`.
///
/// An output capsule whose assignment mass `Σr` is at most [`DEGENERATE_MASS`] gets μ = 0,
/// σ² = 1 and activation `logistic(λ β_a)`.
pub fn em_routing<F: Real>(
    g: &mut Graph<F>,
    a_in: Var,
    votes: Var,
    beta_a: Var,
    beta_u: Var,
    cfg: &RoutingConfig,
) -> Result<Routed> {
    cfg.validate()?;
    let vs = g.shape(votes).to_vec();
    let r = vs.len();
    if r < 3 || vs[r - 1] != POSE_DIM {
        return Err(dim_err!("em_routing: votes {vs:?} must end in [N_in, N_out, 16]"));
    }
    let (n_in, n_out) = (vs[r - 3], vs[r - 2]);
    let lead_shape = vs[..r - 3].to_vec();
    let mut expected_a = lead_shape.clone();
    expected_a.push(n_in);
    if g.shape(a_in) != expected_a.as_slice() {
        return Err(dim_err!("em_routing: activations {:?}, expected {expected_a:?}", g.shape(a_in)));
    }
    if n_in == 0 {
        return Err(Error::Contract("em_routing needs at least one input capsule".into()));
    }
    if g.shape(beta_a) != [n_out] || g.shape(beta_u) != [n_out] {
        return Err(dim_err!("em_routing: routing biases must be [{n_out}]"));
    }
    if !g.value(votes).all_finite() || !g.value(a_in).all_finite() {
        return Err(Error::Numeric("em_routing: non-finite votes or activations".into()));
    }
    let l: usize = lead_shape.iter().product();
    let h = POSE_DIM;
    let votes = g.reshape(votes, &[l, n_in, n_out, h])?;
    let a_in = g.reshape(a_in, &[l, n_in, 1])?;
    let a_in = g.expand(a_in, 2, n_out)?;
    let beta_a = g.reshape(beta_a, &[1, n_out])?;
    let beta_a = g.expand(beta_a, 0, l)?;
    let beta_u = g.reshape(beta_u, &[1, n_out, 1])?;
    let beta_u = g.expand(beta_u, 0, l)?;
    let beta_u = g.expand(beta_u, 2, h)?;
    let floor = F::from_f64c(cfg.variance_floor);
    let min_mass = F::from_f64c(DEGENERATE_MASS);
    let half_ln_2pi = F::from_f64c(0.5 * (2.0 * std::f64::consts::PI).ln());

    let mut assign = g.constant(Tensor::full(&[l, n_in, n_out], F::one() / F::from_usize(n_out).unwrap()));
    let mut mu = None;
    let mut act = None;
    for it in 0..cfg.iterations {
        let lambda = F::from_f64c(cfg.inv_temp[it]);
        // M-step
        let rr = g.mul(assign, a_in)?;
        let rsum = g.sum_axis(rr, 1)?; // [l, 1, n_out]
        let rsum_e = g.expand(rsum, 1, n_in)?;
        let w = g.safe_div(rr, rsum_e, min_mass)?;
        let w = g.reshape(w, &[l, n_in, n_out, 1])?;
        let w = g.expand(w, 3, h)?;
        let wv = g.mul(w, votes)?;
        let m = g.sum_axis(wv, 1)?; // [l, 1, n_out, h]
        let m_e = g.expand(m, 1, n_in)?;
        let diff = g.sub(votes, m_e)?;
        let sq = g.square(diff);
        let wsq = g.mul(w, sq)?;
        let var = g.sum_axis(wsq, 1)?;
        let var = g.add_scalar(var, floor);
        let degenerate: Vec<bool> = g
            .value(rsum)
            .data()
            .iter()
            .flat_map(|&s| std::iter::repeat(s <= min_mass).take(h))
            .collect();
        let var = g.select_const(var, &degenerate, F::one())?; // [l, 1, n_out, h]
        let var = g.reshape(var, &[l, n_out, h])?;
        let log_var = g.ln(var);
        let log_sigma = g.mul_scalar(log_var, F::from_f64c(0.5));
        let per_dim = g.add(beta_u, log_sigma)?;
        let rsum_h = g.reshape(rsum, &[l, n_out, 1])?;
        let rsum_h = g.expand(rsum_h, 2, h)?;
        let cost = g.mul(per_dim, rsum_h)?;
        let cost = g.sum_axis(cost, 2)?;
        let cost = g.reshape(cost, &[l, n_out])?;
        let logit = g.sub(beta_a, cost)?;
        let logit = g.mul_scalar(logit, lambda);
        let a_out = g.sigmoid(logit);
        let m = g.reshape(m, &[l, n_out, h])?;
        mu = Some(m);
        act = Some(a_out);
        if it + 1 == cfg.iterations {
            break;
        }
        // E-step, in log space
        let var_e = g.reshape(var, &[l, 1, n_out, h])?;
        let var_e = g.expand(var_e, 1, n_in)?;
        let z = g.div(sq, var_e)?;
        let z = g.mul_scalar(z, F::from_f64c(-0.5));
        let lv = g.reshape(log_var, &[l, 1, n_out, h])?;
        let lv = g.expand(lv, 1, n_in)?;
        let lv = g.mul_scalar(lv, F::from_f64c(-0.5));
        let logp = g.add(z, lv)?;
        let logp = g.sum_axis(logp, 3)?;
        let logp = g.reshape(logp, &[l, n_in, n_out])?;
        let logp = g.add_scalar(logp, -half_ln_2pi * F::from_usize(h).unwrap());
        let log_a = g.log_sigmoid(logit);
        let log_a = g.reshape(log_a, &[l, 1, n_out])?;
        let log_a = g.expand(log_a, 1, n_in)?;
        let scores = g.add(logp, log_a)?;
        assign = g.softmax(scores, 2)?;
    }
    let mut pose_shape = lead_shape.clone();
    pose_shape.extend_from_slice(&[n_out, 4, 4]);
    let mut act_shape = lead_shape;
    act_shape.push(n_out);
    let poses = g.reshape(mu.unwrap(), &pose_shape)?;
    let activations = g.reshape(act.unwrap(), &act_shape)?;
    Ok(Routed { poses, activations })
}

/// Finite-difference check of a two-round routing composite including vote
/// computation, with respect to activations, poses, transforms and biases.
pub fn check_em_routing_gradients(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, n_out) = (3, 2);
    let a = Tensor::from_fn(&[2, n_in], |_| rng.gen_range(0.2..0.9));
    let poses = Tensor::from_fn(&[2, n_in, 4, 4], |_| rng.gen_range(-1.0..1.0));
    let mut t = Tensor::from_fn(&[n_in, n_out, 4, 4], |_| rng.gen_range(-0.3..0.3));
    for ij in 0..n_in * n_out {
        for d in 0..4 {
            t.data_mut()[ij * 16 + d * 5] += 1.0;
        }
    }
    let beta_a = Tensor::from_fn(&[n_out], |_| rng.gen_range(-0.5..0.5));
    let beta_u = Tensor::from_fn(&[n_out], |_| rng.gen_range(-0.5..0.5));
    let cfg = RoutingConfig { iterations: 2, inv_temp: vec![1.0, 2.0], variance_floor: 1e-4 };
    gradcheck::check(
        "em_routing",
        &[a, poses, t, beta_a, beta_u],
        gradcheck::ROUTING_TOLERANCE,
        seed,
        move |g, v| {
            let votes = compute_votes(g, v[1], v[2])?;
            let votes = g.reshape(votes, &[2, n_in, n_out, POSE_DIM])?;
            let out = em_routing(g, v[0], votes, v[3], v[4], &cfg)?;
            let p = g.reshape(out.poses, &[2, n_out * 16])?;
            let both = g.concat(&[p, out.activations], 1)?;
            Ok(both)
        },
    )
}
