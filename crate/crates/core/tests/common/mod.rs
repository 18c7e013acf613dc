//! Scalar reference implementations and constructed cases shared by the
//! integration tests. The oracles use plain loops and never call the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat4 = [[f64; 4]; 4];

pub fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn mat_inv(m: &Mat4) -> Mat4 {
    let mut a = *m;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        assert!(d.abs() > 1e-9, "singular matrix");
        for j in 0..4 {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for r in 0..4 {
            if r != col {
                let f = a[r][col];
                for j in 0..4 {
                    a[r][j] -= f * a[col][j];
                    inv[r][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

pub fn flat(m: &Mat4) -> [f64; 16] {
    let mut out = [0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            out[i * 4 + j] = m[i][j];
        }
    }
    out
}

pub fn unflat(v: &[f64]) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = v[i * 4 + j];
        }
    }
    m
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct EmSettings {
    pub inv_temp: Vec<f64>,
    pub floor: f64,
    pub degenerate_mass: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings { inv_temp: vec![1.0, 2.0, 3.0], floor: 1e-4, degenerate_mass: 1e-10 }
    }
}

/// Scalar EM routing. `votes[i][j]` is the flattened vote of input `i` for
/// output `j`. Returns `(mu[j], a[j])`.
pub fn em_oracle(
    a_in: &[f64],
    votes: &[Vec<[f64; 16]>],
    beta_a: &[f64],
    beta_u: &[f64],
    s: &EmSettings,
) -> (Vec<[f64; 16]>, Vec<f64>) {
    let n_in = a_in.len();
    let n_out = beta_a.len();
    let mut r = vec![vec![1.0 / n_out as f64; n_out]; n_in];
    let mut mu = vec![[0.0; 16]; n_out];
    let mut a = vec![0.0; n_out];
    let iters = s.inv_temp.len();
    for (it, &lambda) in s.inv_temp.iter().enumerate() {
        let mut var = vec![[0.0; 16]; n_out];
        for j in 0..n_out {
            let mass: f64 = (0..n_in).map(|i| r[i][j] * a_in[i]).sum();
            if mass <= s.degenerate_mass {
                mu[j] = [0.0; 16];
                var[j] = [1.0; 16];
            } else {
                for h in 0..16 {
                    let m: f64 = (0..n_in).map(|i| r[i][j] * a_in[i] * votes[i][j][h]).sum::<f64>() / mass;
                    let v: f64 =
                        (0..n_in).map(|i| r[i][j] * a_in[i] * (votes[i][j][h] - m).powi(2)).sum::<f64>() / mass;
                    mu[j][h] = m;
                    var[j][h] = v + s.floor;
                }
            }
            let cost: f64 = (0..16).map(|h| (beta_u[j] + 0.5 * var[j][h].ln()) * mass).sum();
            a[j] = sigmoid(lambda * (beta_a[j] - cost));
        }
        if it + 1 == iters {
            break;
        }
        for i in 0..n_in {
            let logp: Vec<f64> = (0..n_out)
                .map(|j| {
                    let ll: f64 = (0..16)
                        .map(|h| {
                            let d = votes[i][j][h] - mu[j][h];
                            -d * d / (2.0 * var[j][h]) - 0.5 * var[j][h].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                        })
                        .sum();
                    ll + a[j].ln()
                })
                .collect();
            let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..n_out {
                r[i][j] = (logp[j] - mx).exp() / z;
            }
        }
    }
    (mu, a)
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_mat(rng: &mut impl Rng, std: f64) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for row in &mut m {
        for v in row {
            *v = std * normal(rng);
        }
    }
    m
}

/// Identity plus Gaussian noise.
pub fn near_identity(rng: &mut impl Rng, std: f64) -> Mat4 {
    let mut m = random_mat(rng, std);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    m
}

/// Sentence and video capsules at two locations. For output `class`, the
/// sentence votes and the video votes at location A cluster tightly around
/// one pose; the video votes at location B scatter around unrelated poses.
/// All routing parameters are shared between the two locations.
pub struct AgreementCase {
    pub class: usize,
    pub n_out: usize,
    pub sentence_poses: Vec<Mat4>,
    pub sentence_acts: Vec<f64>,
    /// `[location][type]`
    pub video_poses: [Vec<Mat4>; 2],
    pub video_acts: [Vec<f64>; 2],
    /// `[in][out]`
    pub t_sentence: Vec<Vec<Mat4>>,
    pub t_video: Vec<Vec<Mat4>>,
    pub beta_a: Vec<f64>,
    pub beta_u: Vec<f64>,
}

pub fn agreement_case(seed: u64) -> AgreementCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, n_out) = (8, 8, 4);
    let class = (seed % 3) as usize;
    let t_sentence: Vec<Vec<Mat4>> = (0..m).map(|_| (0..n_out).map(|_| near_identity(&mut rng, 0.2)).collect()).collect();
    let t_video: Vec<Vec<Mat4>> = (0..n).map(|_| (0..n_out).map(|_| near_identity(&mut rng, 0.2)).collect()).collect();
    let target = random_mat(&mut rng, 1.0);
    let tight = 0.01;
    let jitter = |rng: &mut ChaCha8Rng, base: &Mat4, std: f64| -> Mat4 {
        let noise = random_mat(rng, std);
        let mut out = *base;
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] += noise[i][j];
            }
        }
        out
    };
    let sentence_poses: Vec<Mat4> =
        (0..m).map(|k| mat_mul(&jitter(&mut rng, &target, tight), &mat_inv(&t_sentence[k][class]))).collect();
    let agree: Vec<Mat4> =
        (0..n).map(|i| mat_mul(&jitter(&mut rng, &target, tight), &mat_inv(&t_video[i][class]))).collect();
    let disagree: Vec<Mat4> = (0..n)
        .map(|i| {
            let other = random_mat(&mut rng, 1.0);
            mat_mul(&other, &mat_inv(&t_video[i][class]))
        })
        .collect();
    // weak inputs and a beta_u near the tight-cluster log-variance keep the
    // output activations away from saturation
    let sentence_acts = (0..m).map(|_| rng.gen_range(0.02..0.06)).collect();
    let acts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.06)).collect();
    let beta_a = (0..n_out).map(|_| rng.gen_range(-3.5..-2.5)).collect();
    let beta_u = (0..n_out).map(|_| rng.gen_range(3.9..4.1)).collect();
    AgreementCase {
        class,
        n_out,
        sentence_poses,
        sentence_acts,
        video_poses: [agree, disagree],
        video_acts: [acts.clone(), acts],
        t_sentence,
        t_video,
        beta_a,
        beta_u,
    }
}

impl AgreementCase {
    /// Oracle output activations at each location.
    pub fn oracle(&self, settings: &EmSettings) -> [Vec<f64>; 2] {
        let loc = |l: usize| {
            let mut a_in = self.sentence_acts.clone();
            a_in.extend(&self.video_acts[l]);
            let mut votes: Vec<Vec<[f64; 16]>> = Vec::new();
            for (k, p) in self.sentence_poses.iter().enumerate() {
                votes.push((0..self.n_out).map(|j| flat(&mat_mul(p, &self.t_sentence[k][j]))).collect());
            }
            for (i, p) in self.video_poses[l].iter().enumerate() {
                votes.push((0..self.n_out).map(|j| flat(&mat_mul(p, &self.t_video[i][j]))).collect());
            }
            em_oracle(&a_in, &votes, &self.beta_a, &self.beta_u, settings).1
        };
        [loc(0), loc(1)]
    }
}

/// Same case through the library's joint routing on a 1x2 grid.
pub fn library_activations(case: &AgreementCase, iterations: usize) -> [Vec<f64>; 2] {
    use mmcaps::capsule::RoutingConfig;
    use mmcaps::fusion::{fuse_by_routing, RoutingVars};
    use mmcaps::sentence::SentenceCapsules;
    use mmcaps::{capsule::CapsuleGrid, Graph, Tensor};

    let mats = |ms: &[Mat4]| -> Vec<f64> { ms.iter().flat_map(|m| flat(m)).collect() };
    let transforms = |t: &[Vec<Mat4>]| -> Tensor<f64> {
        let data: Vec<f64> = t.iter().flat_map(|row| row.iter().flat_map(|m| flat(m))).collect();
        Tensor::new(&[t.len(), t[0].len(), 4, 4], data).unwrap()
    };
    let (m, n) = (case.sentence_poses.len(), case.video_poses[0].len());
    let mut g = Graph::<f64>::new();
    let sp = g.input(Tensor::new(&[m, 4, 4], mats(&case.sentence_poses)).unwrap());
    let sa = g.input(Tensor::new(&[m], case.sentence_acts.clone()).unwrap());
    let mut vp = mats(&case.video_poses[0]);
    vp.extend(mats(&case.video_poses[1]));
    let mut va = case.video_acts[0].clone();
    va.extend(&case.video_acts[1]);
    let video = CapsuleGrid {
        poses: g.input(Tensor::new(&[1, 2, n, 4, 4], vp).unwrap()),
        activations: g.input(Tensor::new(&[1, 2, n], va).unwrap()),
        height: 1,
        width: 2,
        types: n,
    };
    let sentence = SentenceCapsules { poses: sp, activations: sa, types: m };
    let ts = g.input(transforms(&case.t_sentence));
    let routing = RoutingVars {
        video_transforms: g.input(transforms(&case.t_video)),
        beta_a: g.input(Tensor::new(&[case.n_out], case.beta_a.clone()).unwrap()),
        beta_u: g.input(Tensor::new(&[case.n_out], case.beta_u.clone()).unwrap()),
    };
    let cfg = RoutingConfig {
        iterations,
        inv_temp: (1..=iterations).map(|i| i as f64).collect(),
        variance_floor: 1e-4,
    };
    let fused = fuse_by_routing(&mut g, &video, &sentence, ts, routing, &cfg).unwrap();
    let a = g.value(fused.activations).data().to_vec();
    [a[..case.n_out].to_vec(), a[case.n_out..].to_vec()]
}

/// Pixel-loop IoU with the empty/empty convention.
pub fn iou_oracle(pred: &[bool], gt: &[bool]) -> f64 {
    let mut i = 0u64;
    let mut u = 0u64;
    for k in 0..pred.len() {
        if pred[k] && gt[k] {
            i += 1;
        }
        if pred[k] || gt[k] {
            u += 1;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn counts_oracle(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    let mut i = 0;
    let mut u = 0;
    for k in 0..pred.len() {
        i += (pred[k] && gt[k]) as u64;
        u += (pred[k] || gt[k]) as u64;
    }
    (i, u)
}

pub fn precision_oracle(ious: &[f64], tau: f64) -> f64 {
    let mut hits = 0;
    for &v in ious {
        if v > tau {
            hits += 1;
        }
    }
    hits as f64 / ious.len() as f64
}

pub fn map_oracle(ious: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..10 {
        total += precision_oracle(ious, (50 + 5 * k) as f64 / 100.0);
    }
    total / 10.0
}
