//! Whole-model gradient checks against central differences.

use cecr::data::{sample_intra_class_pairs, synthetic_blobs, PairBatch};
use cecr::layers::Activation;
use cecr::models::{build_cec, build_class_encoder, build_classifier, build_dcec, CnnLayer, LossOptions, Network, SoftmaxMembers};
use cecr::training::gradient_check_with_floor;
use cecr::{Rng, Tensor};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
/// Random instances regularly hold entries near 1e-8, where central-difference
/// roundoff alone exceeds the tolerance; below this floor the comparison is
/// absolute (1e-10).
const FLOOR: f64 = 1e-5;

fn batch(classes: usize, dim: usize, rows: usize, seed: u64) -> PairBatch {
    let mut rng = Rng::new(seed);
    let ds = synthetic_blobs(classes, 8, dim, 0.15, &mut rng).unwrap();
    let pairs = sample_intra_class_pairs(&ds, rows.div_ceil(classes), true, &mut rng).unwrap();
    PairBatch::gather(&ds, &pairs[..rows]).unwrap()
}

fn check(net: &Network, b: &PairBatch, opts: &LossOptions) -> f64 {
    let r = gradient_check_with_floor(net, b, opts, EPS, FLOOR, false).unwrap();
    assert_eq!(r.checked, checked_count(net));
    r.max_relative_error
}

/// Every parameter except the mirrored half of a tied pair.
fn checked_count(net: &Network) -> usize {
    let mirrored: usize = net
        .ties()
        .iter()
        .map(|&(_, b)| {
            let s = net.params()[b].as_ref().unwrap().weights.shape();
            s[0] * (s[1] - 1)
        })
        .sum();
    net.num_params() - mirrored
}

fn opts(lambda: f64, members: SoftmaxMembers, detach_target: bool) -> LossOptions {
    LossOptions {
        lambda,
        softmax_members: members,
        detach_target,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cec_joint_gradient(seed in 0u64..1000, lambda in 0.0f64..2.0, both in any::<bool>()) {
        let net = build_cec(&[6, 4, 3], 2, Activation::Sigmoid, false, &mut Rng::new(seed)).unwrap();
        let members = if both { SoftmaxMembers::Both } else { SoftmaxMembers::First };
        let err = check(&net, &batch(2, 6, 4, seed + 1), &opts(lambda, members, false));
        prop_assert!(err < TOL, "max relative error {err}");
    }

    #[test]
    fn tied_cec_gradient(seed in 0u64..1000, detach in any::<bool>()) {
        let net = build_cec(&[6, 4], 2, Activation::Sigmoid, true, &mut Rng::new(seed)).unwrap();
        let err = check(&net, &batch(2, 6, 4, seed + 1), &opts(0.7, SoftmaxMembers::Both, detach));
        prop_assert!(err < TOL, "max relative error {err}");
    }

    #[test]
    fn class_encoder_gradient(seed in 0u64..1000, tied in any::<bool>()) {
        let sizes: &[usize] = if tied { &[6, 4] } else { &[6, 4, 3] };
        let net = build_class_encoder(sizes, Activation::Sigmoid, tied, &mut Rng::new(seed)).unwrap();
        let err = check(&net, &batch(2, 6, 4, seed + 1), &LossOptions::default());
        prop_assert!(err < TOL, "max relative error {err}");
    }
}

#[test]
fn classifier_gradient() {
    let net = build_classifier(&[6, 4, 3], 3, Activation::Sigmoid, &mut Rng::new(3)).unwrap();
    assert!(check(&net, &batch(3, 6, 6, 4), &opts(0.0, SoftmaxMembers::Both, false)) < TOL);
}

/// Gives every bias (separate tensors and merged FC columns) a random value so
/// no ReLU pre-activation sits exactly on its kink, which zero biases produce
/// whenever a unit's whole input is zero.
fn jitter_biases(net: &mut Network, rng: &mut Rng) {
    for p in net.params_mut().iter_mut().flatten() {
        match &mut p.bias {
            Some(b) => {
                *b = Tensor::new(b.shape().to_vec(), b.data().iter().map(|_| rng.uniform_range(-0.2, 0.2)).collect()).unwrap();
            }
            None => {
                let shape = p.weights.shape().to_vec();
                let cols = shape[1];
                let data = p
                    .weights
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| if i % cols == cols - 1 { rng.uniform_range(-0.2, 0.2) } else { w })
                    .collect();
                p.weights = Tensor::new(shape, data).unwrap();
            }
        }
    }
}

#[test]
fn dcec_gradient_with_and_without_detached_target() {
    let tokens: Vec<CnnLayer> = ["conv3x3/1x2", "pool2x2/2", "local3x3/1x2", "pool2x2/2"]
        .iter()
        .map(|t| t.parse().unwrap())
        .collect();
    for seed in 1u64..=6 {
        let mut rng = Rng::new(seed);
        let mut net = build_dcec([6, 6, 1], &tokens, 5, 3, 2, &mut rng).unwrap();
        jitter_biases(&mut net, &mut rng);
        let b = batch(2, 36, 4, seed + 100);
        for detach in [false, true] {
            for members in [SoftmaxMembers::Both, SoftmaxMembers::First] {
                let err = check(&net, &b, &opts(0.5, members, detach));
                assert!(err < TOL, "seed {seed} detach {detach} {members:?}: {err}");
            }
        }
    }
}
