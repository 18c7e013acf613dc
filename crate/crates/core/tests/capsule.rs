mod common;

use common::*;
use mmcaps::capsule::{compute_votes, em_routing, make_primary_capsules, RoutingConfig};
use mmcaps::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn default_cfg() -> RoutingConfig {
    RoutingConfig::default()
}

/// Runs library routing on one location and returns `(mu, a)`.
fn route(a_in: &[f64], votes: &[Vec<[f64; 16]>], beta_a: &[f64], beta_u: &[f64], cfg: &RoutingConfig) -> (Vec<f64>, Vec<f64>) {
    let (n_in, n_out) = (a_in.len(), beta_a.len());
    let flat_votes: Vec<f64> = votes.iter().flat_map(|row| row.iter().flat_map(|v| v.iter().copied())).collect();
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new(&[n_in], a_in.to_vec()).unwrap());
    let v = g.input(Tensor::new(&[n_in, n_out, 16], flat_votes).unwrap());
    let ba = g.input(Tensor::new(&[n_out], beta_a.to_vec()).unwrap());
    let bu = g.input(Tensor::new(&[n_out], beta_u.to_vec()).unwrap());
    let out = em_routing(&mut g, a, v, ba, bu, cfg).unwrap();
    (g.value(out.poses).data().to_vec(), g.value(out.activations).data().to_vec())
}

fn random_votes(rng: &mut impl Rng, n_in: usize, n_out: usize, std: f64) -> Vec<Vec<[f64; 16]>> {
    (0..n_in).map(|_| (0..n_out).map(|_| std::array::from_fn(|_| std * rng.gen_range(-1.0..1.0))).collect()).collect()
}

#[test]
fn zero_heads_give_zero_poses_and_half_activations() {
    let mut g = Graph::<f64>::new();
    let f = g.input(Tensor::zeros(&[4, 8, 8]));
    let pw = g.input(Tensor::zeros(&[2 * 16, 4, 5, 5]));
    let pb = g.input(Tensor::zeros(&[2 * 16]));
    let aw = g.input(Tensor::zeros(&[2, 4, 5, 5]));
    let ab = g.input(Tensor::zeros(&[2]));
    let grid = make_primary_capsules(&mut g, f, pw, pb, aw, ab).unwrap();
    assert!(g.value(grid.poses).data().iter().all(|&v| v == 0.0));
    assert!(g.value(grid.activations).data().iter().all(|&v| v == 0.5));
}

#[test]
fn primary_capsule_geometry() {
    for (size, k, expected) in [(16, 5, 12), (28, 9, 20)] {
        let mut g = Graph::<f64>::new();
        let f = g.input(Tensor::zeros(&[2, size, size]));
        let pw = g.input(Tensor::zeros(&[8 * 16, 2, k, k]));
        let pb = g.input(Tensor::zeros(&[8 * 16]));
        let aw = g.input(Tensor::zeros(&[8, 2, k, k]));
        let ab = g.input(Tensor::zeros(&[8]));
        let grid = make_primary_capsules(&mut g, f, pw, pb, aw, ab).unwrap();
        assert_eq!((grid.height, grid.width, grid.types), (expected, expected, 8));
        assert_eq!(g.shape(grid.poses), [expected, expected, 8, 4, 4]);
        assert_eq!(g.shape(grid.activations), [expected, expected, 8]);
    }
}

#[test]
fn kernel_larger_than_features_is_a_dimension_error() {
    let mut g = Graph::<f64>::new();
    let f = g.input(Tensor::zeros(&[2, 4, 4]));
    let pw = g.input(Tensor::zeros(&[16, 2, 5, 5]));
    let pb = g.input(Tensor::zeros(&[16]));
    let aw = g.input(Tensor::zeros(&[1, 2, 5, 5]));
    let ab = g.input(Tensor::zeros(&[1]));
    let err = make_primary_capsules(&mut g, f, pw, pb, aw, ab).unwrap_err();
    assert!(matches!(err, mmcaps::Error::Dimension(_)), "{err}");
}

#[test]
fn pose_and_activation_heads_match_a_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, s, k, n) = (2, 6, 3, 2);
    let feat = rand_tensor(&mut rng, &[c, s, s], -1.0, 1.0);
    let pw = rand_tensor(&mut rng, &[n * 16, c, k, k], -1.0, 1.0);
    let pb = rand_tensor(&mut rng, &[n * 16], -1.0, 1.0);
    let aw = rand_tensor(&mut rng, &[n, c, k, k], -1.0, 1.0);
    let ab = rand_tensor(&mut rng, &[n], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = [&feat, &pw, &pb, &aw, &ab].iter().map(|t| g.input((*t).clone())).collect();
    let grid = make_primary_capsules(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
    let o = s - k + 1;
    let conv = |w: &Tensor<f64>, b: &Tensor<f64>, oc: usize, y: usize, x: usize| {
        let mut acc = b.data()[oc];
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    acc += w.data()[((oc * c + ci) * k + dy) * k + dx] * feat.data()[(ci * s + y + dy) * s + x + dx];
                }
            }
        }
        acc
    };
    let poses = g.value(grid.poses).data();
    let acts = g.value(grid.activations).data();
    for y in 0..o {
        for x in 0..o {
            for t in 0..n {
                for e in 0..16 {
                    let got = poses[((y * o + x) * n + t) * 16 + e];
                    assert!((got - conv(&pw, &pb, t * 16 + e, y, x)).abs() < 1e-12);
                }
                let got = acts[(y * o + x) * n + t];
                assert!((got - sigmoid(conv(&aw, &ab, t, y, x))).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identity_transforms_replicate_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let poses = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let mut eye = Tensor::zeros(&[3, 2, 4, 4]);
    for ij in 0..6 {
        for d in 0..4 {
            eye.data_mut()[ij * 16 + d * 5] = 1.0;
        }
    }
    let mut g = Graph::<f64>::new();
    let p = g.input(poses.clone());
    let t = g.input(eye);
    let v = compute_votes(&mut g, p, t).unwrap();
    assert_eq!(g.shape(v), [2, 3, 2, 4, 4]);
    let vd = g.value(v).data();
    for l in 0..2 {
        for i in 0..3 {
            for j in 0..2 {
                for e in 0..16 {
                    assert_eq!(vd[((l * 3 + i) * 2 + j) * 16 + e], poses.data()[(l * 3 + i) * 16 + e]);
                }
            }
        }
    }
    let z = g.input(Tensor::zeros(&[3, 4, 4]));
    let t2 = g.input(rand_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0));
    let v0 = compute_votes(&mut g, z, t2).unwrap();
    assert!(g.value(v0).data().iter().all(|&x| x == 0.0));
}

#[test]
fn votes_match_triple_loop_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let poses = rand_tensor(&mut rng, &[3, 4, 4], -2.0, 2.0);
    let trans = rand_tensor(&mut rng, &[3, 2, 4, 4], -2.0, 2.0);
    let mut g = Graph::<f64>::new();
    let p = g.input(poses.clone());
    let t = g.input(trans.clone());
    let v = compute_votes(&mut g, p, t).unwrap();
    let vd = g.value(v).data();
    for i in 0..3 {
        let m = unflat(&poses.data()[i * 16..(i + 1) * 16]);
        for j in 0..2 {
            let tm = unflat(&trans.data()[(i * 2 + j) * 16..(i * 2 + j + 1) * 16]);
            let expected = flat(&mat_mul(&m, &tm));
            assert_eq!(&vd[(i * 2 + j) * 16..(i * 2 + j + 1) * 16], &expected[..]);
        }
    }
}

#[test]
fn vote_shape_errors() {
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::zeros(&[3, 4, 3]));
    let t = g.input(Tensor::zeros(&[3, 2, 4, 4]));
    assert!(compute_votes(&mut g, p, t).is_err());
    let p = g.input(Tensor::zeros(&[2, 4, 4]));
    assert!(compute_votes(&mut g, p, t).is_err());
}

#[test]
fn single_input_capsule_pose_is_its_vote() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let votes = random_votes(&mut rng, 1, 4, 1.0);
    let (mu, a) = route(&[1.0], &votes, &[0.0; 4], &[0.0; 4], &default_cfg());
    for j in 0..4 {
        assert_eq!(&mu[j * 16..(j + 1) * 16], &votes[0][j][..]);
        assert!(a[j] > 0.5);
    }
}

#[test]
fn routing_matches_scalar_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = rng.gen_range(1..10);
        let n_out = rng.gen_range(1..5);
        let iters = rng.gen_range(1..4);
        let votes = random_votes(&mut rng, n_in, n_out, 1.0);
        let a_in: Vec<f64> = (0..n_in).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ba: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bu: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = RoutingConfig { iterations: iters, inv_temp: (1..=iters).map(|i| i as f64).collect(), variance_floor: 1e-4 };
        let settings = EmSettings { inv_temp: cfg.inv_temp.clone(), ..Default::default() };
        let (mu, a) = route(&a_in, &votes, &ba, &bu, &cfg);
        let (mu_o, a_o) = em_oracle(&a_in, &votes, &ba, &bu, &settings);
        for j in 0..n_out {
            assert!((a[j] - a_o[j]).abs() < 1e-10, "seed {seed}: a {} vs {}", a[j], a_o[j]);
            for h in 0..16 {
                assert!((mu[j * 16 + h] - mu_o[j][h]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn identical_votes_beat_dispersed_votes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shared: [f64; 16] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let same = vec![vec![shared], vec![shared]];
    let spread = vec![vec![std::array::from_fn(|h| shared[h] + 1.0)], vec![std::array::from_fn(|h| shared[h] - 1.0)]];
    let cfg = default_cfg();
    let (_, a_same) = route(&[1.0, 1.0], &same, &[0.0], &[0.0], &cfg);
    let (_, a_spread) = route(&[1.0, 1.0], &spread, &[0.0], &[0.0], &cfg);
    let s = EmSettings::default();
    let (_, o_same) = em_oracle(&[1.0, 1.0], &same, &[0.0], &[0.0], &s);
    let (_, o_spread) = em_oracle(&[1.0, 1.0], &spread, &[0.0], &[0.0], &s);
    assert!(a_same[0] > a_spread[0]);
    assert!(o_same[0] > o_spread[0]);
    assert!((a_same[0] - o_same[0]).abs() < 1e-12 && (a_spread[0] - o_spread[0]).abs() < 1e-12);
}

#[test]
fn zero_input_activations_use_the_degenerate_continuation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let votes = random_votes(&mut rng, 3, 2, 1.0);
    let ba = [0.3, -0.7];
    let (mu, a) = route(&[0.0; 3], &votes, &ba, &[0.2, 0.1], &default_cfg());
    assert!(mu.iter().all(|&v| v == 0.0));
    for j in 0..2 {
        assert!((a[j] - sigmoid(3.0 * ba[j])).abs() < 1e-15);
    }
    let mut g = Graph::<f64>::new();
    let a_in = g.input(Tensor::zeros(&[3]));
    let v = g.input(Tensor::zeros(&[3, 2, 16]));
    let b = g.input(Tensor::zeros(&[2]));
    let out = em_routing(&mut g, a_in, v, b, b, &default_cfg()).unwrap();
    let loss = g.sum_all(out.activations);
    let grad = g.grad_of(loss, v).unwrap();
    assert!(grad.all_finite());
}

#[test]
fn routing_errors() {
    let mut g = Graph::<f64>::new();
    let b = g.input(Tensor::zeros(&[2]));
    let a0 = g.input(Tensor::zeros(&[0]));
    let v0 = g.input(Tensor::zeros(&[0, 2, 16]));
    assert!(matches!(em_routing(&mut g, a0, v0, b, b, &default_cfg()), Err(mmcaps::Error::Contract(_))));
    let a = g.input(Tensor::ones(&[1]));
    let mut bad = Tensor::zeros(&[1, 2, 16]);
    bad.data_mut()[3] = f64::NAN;
    let v = g.input(bad);
    assert!(matches!(em_routing(&mut g, a, v, b, b, &default_cfg()), Err(mmcaps::Error::Numeric(_))));
    let cfg = RoutingConfig { iterations: 0, ..default_cfg() };
    let v = g.input(Tensor::zeros(&[1, 2, 16]));
    assert!(em_routing(&mut g, a, v, b, b, &cfg).is_err());
}

#[test]
fn tighter_agreement_never_lowers_activation() {
    let mut violations = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = 6;
        let center: [f64; 16] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let noise = random_votes(&mut rng, n_in, 1, 1.0);
        let a_in: Vec<f64> = (0..n_in).map(|_| rng.gen_range(0.3..1.0)).collect();
        let votes_at = |scale: f64| -> Vec<Vec<[f64; 16]>> {
            noise.iter().map(|row| vec![std::array::from_fn(|h| center[h] + scale * row[0][h])]).collect()
        };
        let cfg = default_cfg();
        let mut prev = 0.0;
        for scale in [1.0, 0.5, 0.25, 0.1, 0.01] {
            let (_, a) = route(&a_in, &votes_at(scale), &[0.0], &[0.0], &cfg);
            if a[0] < prev {
                violations += 1;
            }
            prev = a[0];
        }
    }
    assert_eq!(violations, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn routing_is_permutation_invariant(seed in any::<u64>(), n_in in 2usize..7, shift in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes = random_votes(&mut rng, n_in, 3, 2.0);
        let a_in: Vec<f64> = (0..n_in).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ba: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bu: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm: Vec<usize> = (0..n_in).map(|i| (i * (2 * shift + 1) + shift) % n_in).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == n_in });
        let pv: Vec<_> = perm.iter().map(|&i| votes[i].clone()).collect();
        let pa: Vec<f64> = perm.iter().map(|&i| a_in[i]).collect();
        let cfg = default_cfg();
        let (mu, a) = route(&a_in, &votes, &ba, &bu, &cfg);
        let (mu_p, a_p) = route(&pa, &pv, &ba, &bu, &cfg);
        for j in 0..3 {
            prop_assert!((a[j] - a_p[j]).abs() < 1e-12);
        }
        for (x, y) in mu.iter().zip(&mu_p) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_stay_in_unit_interval(seed in any::<u64>(), scale in 1.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes = random_votes(&mut rng, 5, 4, scale);
        let a_in: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, a) = route(&a_in, &votes, &b, &[0.0; 4], &default_cfg());
        prop_assert!(a.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
    }
}
