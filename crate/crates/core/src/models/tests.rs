use super::*;
use crate::data::{synthetic_blobs, PairBatch};
use crate::layers::{fc_block, Activation};
use crate::objectives::class_encoder_cost;
use crate::tensor::transpose;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.uniform()).collect()).unwrap()
}

fn mnist_dcec_tokens() -> Vec<CnnLayer> {
    ["conv3x3/1x8", "pool2x2/2", "local3x3/1x16", "pool2x2/2"]
        .iter()
        .map(|t| t.parse().unwrap())
        .collect()
}

fn blob_batch(classes: usize, dim: usize, rows: usize, seed: u64) -> PairBatch {
    let mut rng = Rng::new(seed);
    let ds = synthetic_blobs(classes, 10, dim, 0.1, &mut rng).unwrap();
    let pairs = crate::data::sample_intra_class_pairs(&ds, rows.div_ceil(classes), true, &mut rng).unwrap();
    PairBatch::gather(&ds, &pairs[..rows]).unwrap()
}

#[test]
fn tied_class_encoder_mirrors_weights_at_init() {
    let net = build_class_encoder(&[784, 250], Activation::Sigmoid, true, &mut Rng::new(1)).unwrap();
    let w1 = fc_block(&net.params()[0].as_ref().unwrap().weights);
    let w2 = fc_block(&net.params()[1].as_ref().unwrap().weights);
    assert_eq!(transpose(&w1).unwrap(), w2);
    assert_eq!(net.ties(), &[(0, 1)]);
}

#[test]
fn deep_class_encoder_has_mirrored_decoder() {
    let net = build_class_encoder(&[784, 2000, 1000, 500, 250], Activation::Sigmoid, false, &mut Rng::new(2)).unwrap();
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.as_ref().unwrap().weights.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![2000, 785],
            vec![1000, 2001],
            vec![500, 1001],
            vec![250, 501],
            vec![500, 251],
            vec![1000, 501],
            vec![2000, 1001],
            vec![784, 2001],
        ]
    );
    assert!(net.ties().is_empty());
    assert_eq!(net.layer_names(), ["h1", "h2", "h3", "h4", "z1", "z2", "z3", "z4"]);
}

#[test]
fn small_untied_class_encoder_shapes() {
    let net = build_class_encoder(&[10, 3], Activation::Sigmoid, false, &mut Rng::new(3)).unwrap();
    assert_eq!(net.params()[0].as_ref().unwrap().weights.shape(), &[3, 11]);
    assert_eq!(net.params()[1].as_ref().unwrap().weights.shape(), &[10, 4]);
    let w1 = fc_block(&net.params()[0].as_ref().unwrap().weights);
    let w2 = fc_block(&net.params()[1].as_ref().unwrap().weights);
    assert_ne!(transpose(&w1).unwrap(), w2);
}

#[test]
fn builder_configuration_errors() {
    let mut rng = Rng::new(4);
    assert!(matches!(
        build_class_encoder(&[10, 5, 3], Activation::Sigmoid, true, &mut rng),
        Err(Error::Config(_))
    ));
    assert!(matches!(build_class_encoder(&[10], Activation::Sigmoid, false, &mut rng), Err(Error::Config(_))));
    assert!(matches!(build_cec(&[10, 4], 1, Activation::Sigmoid, false, &mut rng), Err(Error::Config(_))));
    assert!(matches!(
        dcec_layout([28, 28, 1], &mnist_dcec_tokens(), 64, 32, 10, 63),
        Err(Error::Config(_))
    ));
}

#[test]
fn cec_heads_branch_from_the_code() {
    let mut rng = Rng::new(5);
    let net = build_cec(&[784, 200, 200], 10, Activation::Sigmoid, false, &mut rng).unwrap();
    assert_eq!(net.layer_names(), ["h1", "h2", "softmax", "z"]);
    assert_eq!(net.params()[3].as_ref().unwrap().weights.shape(), &[784, 201]);
    assert_eq!(net.params()[2].as_ref().unwrap().weights.shape(), &[10, 201]);
    assert_eq!(net.specs()[2].in_shape, net.specs()[3].in_shape);
    let x = random(&[3, 784], &mut rng);
    let out = net.forward_pair(&x, &x).unwrap();
    assert_eq!(out.recon.unwrap().shape(), &[3, 784]);
    let (probs, _) = net.predict(&x).unwrap();
    assert_eq!(probs.shape(), &[3, 10]);
    for i in 0..3 {
        assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn large_colour_input_shape_audit() {
    let tokens: Vec<CnnLayer> = ["conv3x3/1x32", "pool2x2/2", "local3x3/1x64", "pool2x2/2", "local3x3/1x128", "pool2x2/2"]
        .iter()
        .map(|t| t.parse().unwrap())
        .collect();
    let audit = dcec_shape_audit([100, 100, 3], &tokens, 512, 256, 3500).unwrap();
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("conv1", vec![100, 100, 32]),
        ("pool1", vec![50, 50, 32]),
        ("local2", vec![50, 50, 64]),
        ("pool2", vec![25, 25, 64]),
        ("local3", vec![25, 25, 128]),
        ("pool3", vec![13, 13, 128]),
        ("h1", vec![512]),
        ("h2", vec![256]),
        ("softmax", vec![3500]),
        ("z", vec![512]),
    ];
    let got: Vec<(&str, Vec<usize>)> = audit.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    assert_eq!(got, expected);
}

#[test]
fn cnn_tokens_round_trip() {
    for t in ["conv3x3/1x8", "pool2x2/2", "local5x3/2x16"] {
        assert_eq!(t.parse::<CnnLayer>().unwrap().to_string(), t);
    }
    assert!("conv3x3".parse::<CnnLayer>().is_err());
    assert!("dense3x3/1x8".parse::<CnnLayer>().is_err());
}

#[test]
fn mnist_dcec_pair_shapes() {
    let mut rng = Rng::new(6);
    let net = build_dcec([28, 28, 1], &mnist_dcec_tokens(), 64, 32, 10, &mut rng).unwrap();
    assert_eq!(net.specs().last().unwrap().out_shape, vec![64]);
    let x1 = random(&[2, 28, 28, 1], &mut rng);
    let x2 = random(&[2, 28, 28, 1], &mut rng);
    let out = net.forward_pair(&x1, &x2).unwrap();
    assert_eq!(out.recon.unwrap().shape(), &[2, 64]);
    assert_eq!(out.target.unwrap().shape(), &[2, 64]);
    assert_eq!(out.logits.unwrap().shape(), &[2, 10]);
    let wrong = random(&[2, 27, 28, 1], &mut rng);
    assert!(matches!(net.forward_pair(&wrong, &x2), Err(Error::Dimension(_))));
}

#[test]
fn architecture_text_round_trip() {
    let archs = [
        Architecture::Cec {
            sizes: vec![784, 200, 200],
            classes: 10,
            activation: Activation::Sigmoid,
            tied: false,
        },
        Architecture::Dcec {
            input: [28, 28, 1],
            cnn: mnist_dcec_tokens(),
            h1: 64,
            h2: 32,
            classes: 10,
        },
        Architecture::ClassEncoder {
            sizes: vec![6, 3],
            activation: Activation::Relu,
            tied: true,
        },
    ];
    for a in archs {
        assert_eq!(Architecture::from_text(&a.to_text()).unwrap(), a);
    }
}

#[test]
fn pair_cost_is_asymmetric_and_reproducible() {
    let batch = blob_batch(2, 6, 4, 7);
    let net = build_cec(&[6, 4, 3], 2, Activation::Sigmoid, false, &mut Rng::new(8)).unwrap();
    let opts = LossOptions::default();
    let a = net.loss(&batch, &opts, None).unwrap();
    let again = net.loss(&batch, &opts, None).unwrap();
    assert_eq!(a.total.to_bits(), again.total.to_bits());
    let swapped = net.loss(&batch.swapped(), &opts, None).unwrap();
    assert_ne!(a.total, swapped.total);
}

#[test]
fn self_pair_reduces_to_auto_encoding() {
    let mut rng = Rng::new(9);
    let net = build_class_encoder(&[6, 3], Activation::Sigmoid, false, &mut rng).unwrap();
    let x = random(&[5, 6], &mut rng);
    let batch = PairBatch {
        x1: x.clone(),
        x2: x.clone(),
        labels: vec![0; 5],
    };
    let cost = net.loss(&batch, &LossOptions::default(), None).unwrap();
    let (recon, target) = net.self_reconstruction(&x).unwrap();
    let ae = class_encoder_cost(&recon, &target).unwrap();
    assert_eq!(cost.total, ae.cost.total);
}

#[test]
fn heads_are_isolated() {
    let mut rng = Rng::new(10);
    let net = build_cec(&[6, 4, 3], 2, Activation::Sigmoid, false, &mut rng).unwrap();
    let x = random(&[4, 6], &mut rng);
    let (probs, _) = net.predict(&x).unwrap();
    let (recon, _) = net.self_reconstruction(&x).unwrap();

    let mut other = net.clone();
    let z = other.layer_index("z").unwrap();
    other.params_mut()[z] = other.specs()[z].init_params(&mut rng);
    assert_eq!(other.predict(&x).unwrap().0, probs);

    let mut other = net.clone();
    let s = other.layer_index("softmax").unwrap();
    other.params_mut()[s] = other.specs()[s].init_params(&mut rng);
    assert_eq!(other.self_reconstruction(&x).unwrap().0, recon);
}

#[test]
fn saturated_softmax_picks_its_class() {
    let mut rng = Rng::new(11);
    let mut net = build_classifier(&[5, 4], 3, Activation::Sigmoid, &mut rng).unwrap();
    let w = &mut net.params_mut()[1].as_mut().unwrap().weights;
    w.data_mut()[2 * 5 + 4] = 1e3;
    let (probs, labels) = net.predict(&random(&[6, 5], &mut rng)).unwrap();
    assert!(labels.iter().all(|&l| l == 2));
    assert!(probs.data().chunks(3).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
}

#[test]
fn unknown_layer_lists_valid_names() {
    let net = build_cec(&[6, 4], 2, Activation::Sigmoid, false, &mut Rng::new(12)).unwrap();
    let err = net.features(&Tensor::zeros(&[1, 6]), "h9").unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("h1, softmax, z")), "{err}");
}

#[test]
fn gradient_reaches_the_second_member_path() {
    let batch = blob_batch(2, 16, 4, 13);
    let tokens: Vec<CnnLayer> = ["conv3x3/1x2", "pool2x2/2"].iter().map(|t| t.parse().unwrap()).collect();
    let net = build_dcec([4, 4, 1], &tokens, 5, 3, 2, &mut Rng::new(14)).unwrap();
    let opts = LossOptions {
        lambda: 1.0,
        softmax_members: SoftmaxMembers::First,
        detach_target: false,
    };
    let (_, attached) = net.loss_and_grad(&batch, &opts, None).unwrap();
    let (_, detached) = net
        .loss_and_grad(&batch, &LossOptions { detach_target: true, ..opts }, None)
        .unwrap();
    // With x′-only softmax, the difference between the two is exactly the x″ path.
    let conv = attached.layers[0].as_ref().unwrap();
    let conv_detached = detached.layers[0].as_ref().unwrap();
    assert!(conv.weights.max_abs_diff(&conv_detached.weights) > 0.0);
    let h2 = net.layer_index("h2").unwrap();
    assert_eq!(attached.layers[h2], detached.layers[h2]);
}

#[test]
fn pretraining_cases() {
    let mut rng = Rng::new(15);
    let data = random(&[40, 8], &mut rng);
    let net = build_cec(&[8, 5, 4], 2, Activation::Sigmoid, false, &mut rng).unwrap();
    let opts = |method, epochs| PretrainOptions {
        method,
        epochs,
        lr: 0.05,
        momentum: 0.5,
        batch_size: 8,
    };
    let (same, report) = pretrain_layerwise(&net, &data, &opts(PretrainMethod::Ae, 0), &mut Rng::new(1)).unwrap();
    assert_eq!(same, net);
    assert!(report.layers.is_empty());

    let (ae, report) = pretrain_layerwise(&net, &data, &opts(PretrainMethod::Ae, 1), &mut Rng::new(1)).unwrap();
    assert_eq!(report.layers.len(), 2);
    for (name, before, after) in &report.layers {
        assert!(after < before, "{name}: {before} -> {after}");
    }
    let s = net.layer_index("softmax").unwrap();
    assert_eq!(ae.params()[s], net.params()[s]);

    let (dae, _) = pretrain_layerwise(&net, &data, &opts(PretrainMethod::Dae { mask_prob: 0.0 }, 1), &mut Rng::new(1)).unwrap();
    assert_eq!(dae, ae);

    let (cae, _) = pretrain_layerwise(&net, &data, &opts(PretrainMethod::Cae { coefficient: 0.1 }, 1), &mut Rng::new(1)).unwrap();
    assert_ne!(cae, ae);

    assert!(matches!(PretrainMethod::parse("cae", -1.0), Err(Error::Config(_))));
    assert!(matches!(PretrainMethod::parse("dae", 1.0), Err(Error::Config(_))));
    let dcec = build_dcec([4, 4, 1], &["conv3x3/1x2".parse().unwrap()], 5, 3, 2, &mut rng).unwrap();
    assert!(matches!(
        pretrain_layerwise(&dcec, &random(&[4, 16], &mut rng), &opts(PretrainMethod::Ae, 1), &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn pretraining_keeps_tied_pairs_mirrored() {
    let mut rng = Rng::new(16);
    let net = build_class_encoder(&[8, 4], Activation::Sigmoid, true, &mut rng).unwrap();
    let opts = PretrainOptions {
        method: PretrainMethod::Ae,
        epochs: 2,
        lr: 0.1,
        momentum: 0.0,
        batch_size: 4,
    };
    let (out, _) = pretrain_layerwise(&net, &random(&[12, 8], &mut rng), &opts, &mut rng).unwrap();
    let w1 = fc_block(&out.params()[0].as_ref().unwrap().weights);
    let w2 = fc_block(&out.params()[1].as_ref().unwrap().weights);
    assert_eq!(transpose(&w1).unwrap(), w2);
    assert_ne!(out, net);
}
