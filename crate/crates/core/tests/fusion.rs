mod common;

use common::*;
use mmcaps::capsule::{compute_votes, em_routing, CapsuleGrid, RoutingConfig};
use mmcaps::fusion::*;
use mmcaps::sentence::SentenceCapsules;
use mmcaps::{Conditioning, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rt(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

struct Setup {
    g: Graph<f64>,
    video: CapsuleGrid,
    sentence: SentenceCapsules,
    ts: Var,
    rv: RoutingVars,
}

fn setup(seed: u64, h: usize, w: usize, n: usize, m: usize, n_out: usize) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let video = CapsuleGrid {
        poses: g.input(rt(&mut rng, &[h, w, n, 4, 4], -1.0, 1.0)),
        activations: g.input(rt(&mut rng, &[h, w, n], 0.0, 1.0)),
        height: h,
        width: w,
        types: n,
    };
    let sentence = SentenceCapsules {
        poses: g.input(rt(&mut rng, &[m, 4, 4], -1.0, 1.0)),
        activations: g.input(rt(&mut rng, &[m], 0.0, 1.0)),
        types: m,
    };
    let ts = g.input(rt(&mut rng, &[m, n_out, 4, 4], -1.0, 1.0));
    let rv = RoutingVars {
        video_transforms: g.input(rt(&mut rng, &[n, n_out, 4, 4], -1.0, 1.0)),
        beta_a: g.input(rt(&mut rng, &[n_out], -1.0, 1.0)),
        beta_u: g.input(rt(&mut rng, &[n_out], -1.0, 1.0)),
    };
    Setup { g, video, sentence, ts, rv }
}

#[test]
fn conditioning_names_round_trip() {
    for c in Conditioning::ALL {
        assert_eq!(c.to_string().parse::<Conditioning>().unwrap(), c);
    }
    assert_eq!("filter_acts".parse::<Conditioning>().unwrap(), Conditioning::FilterActs);
    assert!("attention".parse::<Conditioning>().is_err());
}

#[test]
fn tiled_sentence_capsules_are_identical_everywhere() {
    let mut s = setup(1, 3, 2, 2, 5, 4);
    let (p, a) = tile_sentence_capsules(&mut s.g, &s.sentence, 3, 2).unwrap();
    assert_eq!(s.g.shape(p), [3, 2, 5, 4, 4]);
    let src_p = s.g.value(s.sentence.poses).data().to_vec();
    let src_a = s.g.value(s.sentence.activations).data().to_vec();
    for loc in 0..6 {
        assert_eq!(&s.g.value(p).data()[loc * 80..(loc + 1) * 80], &src_p[..]);
        assert_eq!(&s.g.value(a).data()[loc * 5..(loc + 1) * 5], &src_a[..]);
    }
    let (p1, _) = tile_sentence_capsules(&mut s.g, &s.sentence, 1, 1).unwrap();
    assert_eq!(s.g.value(p1).data(), &src_p[..]);
    assert!(tile_sentence_capsules(&mut s.g, &s.sentence, 0, 2).is_err());
}

#[test]
fn tile_gradient_is_the_sum_over_locations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses = rt(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let weights = rt(&mut rng, &[3, 2, 2, 4, 4], -1.0, 1.0);
    let f = |p: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let s = SentenceCapsules { poses: g.input(p.clone()), activations: g.input(Tensor::ones(&[2])), types: 2 };
        let (tp, _) = tile_sentence_capsules(&mut g, &s, 3, 2).unwrap();
        let wv = g.constant(weights.clone());
        let y = g.mul(tp, wv).unwrap();
        let l = g.sum_all(y);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let s = SentenceCapsules { poses: g.input(poses.clone()), activations: g.input(Tensor::ones(&[2])), types: 2 };
    let (tp, _) = tile_sentence_capsules(&mut g, &s, 3, 2).unwrap();
    let wv = g.constant(weights.clone());
    let y = g.mul(tp, wv).unwrap();
    let loss = g.sum_all(y);
    let grad = g.grad_of(loss, s.poses).unwrap();
    for e in 0..32 {
        let mut summed = 0.0;
        for loc in 0..6 {
            summed += weights.data()[loc * 32 + e];
        }
        let (mut plus, mut minus) = (poses.clone(), poses.clone());
        plus.data_mut()[e] += 1e-6;
        minus.data_mut()[e] -= 1e-6;
        let fd = (f(&plus) - f(&minus)) / 2e-6;
        assert!((grad.data()[e] - summed).abs() < 1e-12);
        assert!((grad.data()[e] - fd).abs() < 1e-6);
    }
}

#[test]
fn one_location_fusion_is_one_routing_call() {
    let mut s = setup(3, 1, 1, 3, 2, 4);
    let cfg = RoutingConfig::default();
    let fused = fuse_by_routing(&mut s.g, &s.video, &s.sentence, s.ts, s.rv, &cfg).unwrap();
    let g = &mut s.g;
    let sv = compute_votes(g, s.sentence.poses, s.ts).unwrap();
    let sv = g.reshape(sv, &[2, 4, 16]).unwrap();
    let vp = g.reshape(s.video.poses, &[3, 4, 4]).unwrap();
    let vv = compute_votes(g, vp, s.rv.video_transforms).unwrap();
    let vv = g.reshape(vv, &[3, 4, 16]).unwrap();
    let votes = g.concat(&[sv, vv], 0).unwrap();
    let va = g.reshape(s.video.activations, &[3]).unwrap();
    let acts = g.concat(&[s.sentence.activations, va], 0).unwrap();
    let direct = em_routing(g, acts, votes, s.rv.beta_a, s.rv.beta_u, &cfg).unwrap();
    assert_eq!(g.value(fused.activations).data(), g.value(direct.activations).data());
    assert_eq!(g.value(fused.poses).data(), g.value(direct.poses).data());
}

#[test]
fn silent_inputs_route_degenerately_everywhere() {
    let mut s = setup(4, 2, 2, 3, 2, 4);
    s.video.activations = s.g.input(Tensor::zeros(&[2, 2, 3]));
    s.sentence.activations = s.g.input(Tensor::zeros(&[2]));
    let cfg = RoutingConfig::default();
    let fused = fuse_by_routing(&mut s.g, &s.video, &s.sentence, s.ts, s.rv, &cfg).unwrap();
    let ba = s.g.value(s.rv.beta_a).data().to_vec();
    let acts = s.g.value(fused.activations).data();
    for loc in 0..4 {
        for j in 0..4 {
            assert!((acts[loc * 4 + j] - sigmoid(3.0 * ba[j])).abs() < 1e-15);
        }
    }
    assert!(s.g.value(fused.poses).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sentence_agreement_raises_activation_at_the_matching_location() {
    for seed in 0..10 {
        let case = agreement_case(seed);
        let lib = library_activations(&case, 3);
        let oracle = case.oracle(&EmSettings::default());
        for l in 0..2 {
            for j in 0..case.n_out {
                assert!((lib[l][j] - oracle[l][j]).abs() < 1e-9, "seed {seed}");
            }
        }
        assert!(lib[0][case.class] > lib[1][case.class], "seed {seed}: {lib:?}");
    }
}

#[test]
fn fusion_is_local_and_spatially_equivariant() {
    let mut s = setup(5, 2, 3, 3, 2, 4);
    let cfg = RoutingConfig::default();
    let fused = fuse_by_routing(&mut s.g, &s.video, &s.sentence, s.ts, s.rv, &cfg).unwrap();
    let base_a = s.g.value(fused.activations).data().to_vec();
    let base_p = s.g.value(fused.poses).data().to_vec();
    // reverse the 6 locations
    let rev = |t: &Tensor<f64>, per: usize| -> Tensor<f64> {
        let mut out = t.data().to_vec();
        for loc in 0..6 {
            out[loc * per..(loc + 1) * per].copy_from_slice(&t.data()[(5 - loc) * per..(6 - loc) * per]);
        }
        Tensor::new(t.shape(), out).unwrap()
    };
    let vp = rev(s.g.value(s.video.poses), 48);
    let va = rev(s.g.value(s.video.activations), 3);
    let mut moved = s.video;
    moved.poses = s.g.input(vp);
    moved.activations = s.g.input(va);
    let f2 = fuse_by_routing(&mut s.g, &moved, &s.sentence, s.ts, s.rv, &cfg).unwrap();
    assert_eq!(rev(s.g.value(f2.activations), 4).data(), &base_a[..]);
    assert_eq!(rev(s.g.value(f2.poses), 64).data(), &base_p[..]);
    // perturbing one location leaves the others untouched
    let mut vp = s.g.value(s.video.poses).clone();
    vp.data_mut()[..48].iter_mut().for_each(|v| *v += 0.5);
    let mut touched = s.video;
    touched.poses = s.g.input(vp);
    let f3 = fuse_by_routing(&mut s.g, &touched, &s.sentence, s.ts, s.rv, &cfg).unwrap();
    let (a3, p3) = (s.g.value(f3.activations).data(), s.g.value(f3.poses).data());
    assert_ne!(&p3[..64], &base_p[..64]);
    assert_eq!(&p3[64..], &base_p[64..]);
    assert_eq!(&a3[4..], &base_a[4..]);
}

#[test]
fn mismatched_transforms_are_rejected() {
    let mut s = setup(6, 1, 1, 3, 2, 4);
    let bad = s.g.input(Tensor::zeros(&[2, 3, 4, 4]));
    let cfg = RoutingConfig::default();
    assert!(fuse_by_routing(&mut s.g, &s.video, &s.sentence, bad, s.rv, &cfg).is_err());
}

#[test]
fn concat_with_a_zero_sentence_is_a_linear_map_of_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, d) = (3, 2);
    let feats = rt(&mut rng, &[c, 2, 3, 3], -1.0, 1.0);
    let w = rt(&mut rng, &[c, c + d, 1, 1, 1], -1.0, 1.0);
    let b = rt(&mut rng, &[c], -1.0, 1.0);
    let mut g = Graph::new();
    let fv = g.input(feats.clone());
    let sv = g.input(Tensor::zeros(&[d]));
    let wv = g.input(w.clone());
    let bv = g.input(b.clone());
    let y = condition_concat(&mut g, fv, sv, wv, bv).unwrap();
    assert_eq!(g.shape(y), [c, 2, 3, 3]);
    let pos = 18;
    for o in 0..c {
        for p in 0..pos {
            let mut acc = b.data()[o];
            for i in 0..c {
                acc += w.data()[o * (c + d) + i] * feats.data()[i * pos + p];
            }
            assert!((g.value(y).data()[o * pos + p] - acc.max(0.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn multiply_filter_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feats = rt(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let fv = g.input(feats.clone());
    let ones = g.input(Tensor::ones(&[3]));
    let zeros = g.input(Tensor::zeros(&[3]));
    let y1 = condition_multiply(&mut g, fv, ones).unwrap();
    let y0 = condition_multiply(&mut g, fv, zeros).unwrap();
    assert_eq!(g.value(y1).data(), feats.data());
    assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    let wrong = g.input(Tensor::ones(&[2]));
    assert!(condition_multiply(&mut g, fv, wrong).is_err());
}

#[test]
fn pose_and_activation_filters() {
    let mut s = setup(9, 2, 2, 3, 2, 4);
    let ones_p = s.g.input(Tensor::ones(&[3, 16]));
    let ones_a = s.g.input(Tensor::ones(&[3]));
    let zeros_a = s.g.input(Tensor::zeros(&[3]));
    let fp = filter_poses(&mut s.g, &s.video, ones_p).unwrap();
    assert_eq!(s.g.value(fp.poses).data(), s.g.value(s.video.poses).data());
    assert_eq!(s.g.shape(fp.poses), s.g.shape(s.video.poses));
    let fa = filter_activations(&mut s.g, &s.video, ones_a).unwrap();
    assert_eq!(s.g.value(fa.activations).data(), s.g.value(s.video.activations).data());
    let cfg = RoutingConfig::default();
    let plain = route_video_only(&mut s.g, &s.video, s.rv, &cfg).unwrap();
    let filtered = route_video_only(&mut s.g, &fa, s.rv, &cfg).unwrap();
    assert_eq!(s.g.value(plain.activations).data(), s.g.value(filtered.activations).data());
    let silenced = filter_activations(&mut s.g, &s.video, zeros_a).unwrap();
    let routed = route_video_only(&mut s.g, &silenced, s.rv, &cfg).unwrap();
    let ba = s.g.value(s.rv.beta_a).data().to_vec();
    for (k, &a) in s.g.value(routed.activations).data().iter().enumerate() {
        assert!((a - sigmoid(3.0 * ba[k % 4])).abs() < 1e-15);
    }
    let bad = s.g.input(Tensor::ones(&[3, 15]));
    assert!(filter_poses(&mut s.g, &s.video, bad).is_err());
    let bad = s.g.input(Tensor::ones(&[4]));
    assert!(filter_activations(&mut s.g, &s.video, bad).is_err());
}

#[test]
fn routing_with_sentence_and_video_only_share_output_shape() {
    let mut s = setup(10, 3, 3, 3, 2, 4);
    let cfg = RoutingConfig::default();
    let a = fuse_by_routing(&mut s.g, &s.video, &s.sentence, s.ts, s.rv, &cfg).unwrap();
    let b = route_video_only(&mut s.g, &s.video, s.rv, &cfg).unwrap();
    assert_eq!(s.g.shape(a.poses), s.g.shape(b.poses));
    assert_eq!(s.g.shape(a.activations), s.g.shape(b.activations));
}
