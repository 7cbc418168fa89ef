use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{Backward, Leaf};

fn tiny() -> ModelConfig {
    ModelConfig::new(32, 1, 6, 4, 5, 4)
}

fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = cfg.image_shape(batch);
    let n: usize = shape.iter().product();
    Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

/// `sum(r * x)` for a fixed `r`.
struct Project {
    r: Tensor<f64>,
}

impl Backward<f64> for Project {
    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>, _: &[bool]) -> Vec<Option<Tensor<f64>>> {
        let g = grad.item();
        vec![Some(self.r.map(|v| v * g))]
    }
}

fn project(g: &mut Graph<f64>, x: NodeId) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let value: f64 = r.data().iter().zip(g.value(x).data()).map(|(a, b)| a * b).sum();
    g.record(&[x], Tensor::scalar(value), Project { r })
}

#[test]
fn outputs_have_the_documented_shapes() {
    let cfg = tiny();
    let model: ModelBundle<f64> = build_networks(&cfg, 0).unwrap();
    let x = images(&cfg, 3, 1);
    let (zs, zr) = model.encode(&x).unwrap();
    assert_eq!(zs.shape(), &[3, 6]);
    assert_eq!(zr.unwrap().shape(), &[3, 6]);

    let xh = model.reconstruct(&x).unwrap();
    assert_eq!(xh.shape(), &[3, 1, 32, 32]);
    assert!(xh.data().iter().all(|v| (-1.0..=1.0).contains(v)), "decoder ends in tanh");

    let (real, feat) = model.discriminate(&x).unwrap();
    assert_eq!(real.shape(), &[3]);
    assert!(real.data().iter().all(|p| *p > 0.0 && *p < 1.0));
    assert_eq!(feat.shape(), &[3, cfg.feature_dim()]);

    assert_eq!(model.classify(&zs).unwrap().shape(), &[3, 4]);
}

#[test]
fn feature_width_follows_the_image_size() {
    // 32 -> 2 needs four stride-2 stages; channels double after each but the first.
    assert_eq!(tiny().downsampling_stages(), 4);
    assert_eq!(tiny().feature_dim(), 4 * 8 * 4);
    let big = ModelConfig::new(64, 3, 6, 4, 5, 2);
    assert_eq!(big.downsampling_stages(), 5);
    assert_eq!(big.feature_dim(), 2 * 16 * 4);
    let model: ModelBundle<f64> = build_networks(&big, 0).unwrap();
    let (_, feat) = model.discriminate(&images(&big, 2, 0)).unwrap();
    assert_eq!(feat.shape(), &[2, 128]);
}

#[test]
fn construction_is_seeded() {
    let cfg = tiny();
    let a: ModelBundle<f64> = build_networks(&cfg, 7).unwrap();
    let b: ModelBundle<f64> = build_networks(&cfg, 7).unwrap();
    let c: ModelBundle<f64> = build_networks(&cfg, 8).unwrap();
    let same = |p: &ModelBundle<f64>, q: &ModelBundle<f64>| {
        p.store.entries().iter().zip(q.store.entries()).all(|(e, f)| e.name == f.name && e.value == f.value)
    };
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn encoders_share_no_parameters() {
    let cfg = tiny();
    let mut model: ModelBundle<f64> = build_networks(&cfg, 0).unwrap();
    assert_eq!(model.store.count(Network::EncoderS), model.store.count(Network::EncoderR));
    assert!(model.store.entries().iter().all(|e| e.name.starts_with(e.network.prefix())));

    let x = images(&cfg, 2, 3);
    let (zs, zr) = model.encode(&x).unwrap();
    assert!(!close(&zs, zr.as_ref().unwrap(), 1e-9), "independent initializations");

    // Perturbing E_r moves only the residual code.
    let id = model.store.trainable(|n| n == Network::EncoderR)[0];
    let bumped = model.store.value(id).map(|v| v + 0.5);
    *model.store.value_mut(id) = bumped;
    assert_eq!(model.encode_semantic(&x).unwrap(), zs);
    assert!(!close(&model.encode_residual(&x).unwrap(), zr.as_ref().unwrap(), 1e-9));
}

#[test]
fn evaluation_mode_treats_samples_independently() {
    let cfg = tiny();
    let model: ModelBundle<f64> = build_networks(&cfg, 2).unwrap();
    let x = images(&cfg, 4, 9);
    let batch = model.encode_semantic(&x).unwrap();
    let xh = model.reconstruct(&x).unwrap();
    for i in 0..4 {
        let one = x.select_rows(&[i]);
        let row = model.encode_semantic(&one).unwrap();
        assert!(row.data().iter().zip(batch.row(i)).all(|(a, b)| (a - b).abs() < 1e-12));
        let rec = model.reconstruct(&one).unwrap();
        assert!(rec.data().iter().zip(xh.row(i)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn decoding_the_codes_reproduces_the_reconstruction() {
    let cfg = tiny();
    let model: ModelBundle<f64> = build_networks(&cfg, 4).unwrap();
    let x = images(&cfg, 2, 4);
    let (zs, zr) = model.encode(&x).unwrap();
    assert_eq!(model.decode(&zs, zr.as_ref()).unwrap(), model.reconstruct(&x).unwrap());
    assert!(matches!(model.decode(&zs, None), Err(YganError::Input(_))));
}

#[test]
fn shared_encoder_splits_its_output() {
    let cfg = tiny();
    let arch = Architecture { dual_encoders: false, ..Architecture::FULL };
    let model: ModelBundle<f64> = ModelBundle::build(&cfg, arch, 0).unwrap();
    assert_eq!(model.store.count(Network::EncoderR), 0);
    let x = images(&cfg, 2, 5);
    let (zs, zr) = model.encode(&x).unwrap();
    assert_eq!(zs.shape(), &[2, 6]);
    assert_eq!(zr.unwrap().shape(), &[2, 6]);
    assert_eq!(model.encode_semantic(&x).unwrap(), zs);
}

#[test]
fn architectures_without_optional_parts() {
    let cfg = tiny();
    let arch = Architecture {
        dual_encoders: false,
        residual_code: false,
        classifier: false,
        discriminator: false,
    };
    let model: ModelBundle<f64> = ModelBundle::build(&cfg, arch, 0).unwrap();
    assert!(!model.has_classifier() && !model.has_discriminator());
    assert_eq!(model.store.count(Network::Classifier) + model.store.count(Network::Discriminator), 0);
    let x = images(&cfg, 2, 6);
    let (zs, zr) = model.encode(&x).unwrap();
    assert!(zr.is_none());
    assert_eq!(model.decode(&zs, None).unwrap().shape(), &[2, 1, 32, 32]);
    assert!(matches!(model.decode(&zs, Some(&zs)), Err(YganError::Input(_))));
    assert!(matches!(model.encode_residual(&x), Err(YganError::Config(_))));
    assert!(matches!(model.discriminate(&x), Err(YganError::Config(_))));
    assert!(matches!(model.classify(&zs), Err(YganError::Config(_))));

    let bad = Architecture { residual_code: false, ..Architecture::FULL };
    assert!(matches!(ModelBundle::<f64>::build(&cfg, bad, 0), Err(YganError::Config(_))));
}

#[test]
fn invalid_configurations_are_rejected() {
    for cfg in [
        ModelConfig::new(48, 1, 6, 4, 5, 4),
        ModelConfig::new(32, 2, 6, 4, 5, 4),
        ModelConfig::new(32, 1, 0, 4, 5, 4),
        ModelConfig::new(32, 1, 6, 1, 5, 4),
        ModelConfig::new(32, 1, 6, 4, 0, 4),
        ModelConfig::new(32, 1, 6, 4, 5, 0),
    ] {
        assert!(matches!(build_networks::<f64>(&cfg, 0), Err(YganError::Config(_))), "{cfg:?}");
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let cfg = tiny();
    let model: ModelBundle<f64> = build_networks(&cfg, 0).unwrap();
    let wrong = images(&ModelConfig::new(64, 1, 6, 4, 5, 4), 1, 0);
    assert!(matches!(model.encode(&wrong), Err(YganError::Input(_))));
    let rgb = images(&ModelConfig::new(32, 3, 6, 4, 5, 4), 1, 0);
    assert!(matches!(model.discriminate(&rgb), Err(YganError::Input(_))));
    let z = Tensor::<f64>::zeros(&[2, 5]);
    assert!(matches!(model.classify(&z), Err(YganError::Input(_))));
    let zs = Tensor::<f64>::zeros(&[2, 6]);
    let zr = Tensor::<f64>::zeros(&[3, 6]);
    assert!(matches!(model.decode(&zs, Some(&zr)), Err(YganError::Input(_))));
}

#[test]
fn gradient_reversal_is_identity_forward_and_negated_backward() {
    let z = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 3.5, -0.25]).unwrap();
    let lambda = 0.75;

    let mut g = Graph::new();
    let zn = g.variable(z.clone());
    let r = grad_reverse(&mut g, zn, lambda).unwrap();
    assert_eq!(g.value(r), &z);
    let root = project(&mut g, r);
    let reversed = g.backward(root, |l| matches!(l, Leaf::Variable));

    let mut g = Graph::new();
    let zn2 = g.variable(z);
    let root = project(&mut g, zn2);
    let plain = g.backward(root, |l| matches!(l, Leaf::Variable));

    let expect = plain.node(zn2).unwrap().map(|v| -lambda * v);
    assert_eq!(reversed.node(zn).unwrap(), &expect);

    let mut g = Graph::<f64>::new();
    let zn = g.variable(Tensor::zeros(&[1, 1]));
    assert!(matches!(grad_reverse(&mut g, zn, -0.1), Err(YganError::Input(_))));
    assert!(matches!(grad_reverse(&mut g, zn, f64::NAN), Err(YganError::Input(_))));
}

#[test]
fn classifier_gradients_match_central_differences() {
    let cfg = tiny();
    let model: ModelBundle<f64> = build_networks(&cfg, 1).unwrap();
    let z = images(&ModelConfig::new(32, 1, 6, 4, 5, 4), 1, 2).data()[..12].to_vec();
    let z = Tensor::from_f64(&[2, 6], &z).unwrap();
    let eval = |z: &Tensor<f64>| {
        let mut g = Graph::new();
        let zn = g.variable(z.clone());
        let logits = model.classify_node(&mut g, zn).unwrap();
        let root = project(&mut g, logits);
        (g, zn, root)
    };
    let (g, zn, root) = eval(&z);
    let grads = g.backward(root, |l| matches!(l, Leaf::Variable));
    let analytic = grads.node(zn).unwrap();
    let h = 1e-6;
    for i in 0..z.len() {
        let (mut p, mut m) = (z.clone(), z.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let (gp, _, rp) = eval(&p);
        let (gm, _, rm) = eval(&m);
        let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * h);
        assert!((analytic.data()[i] - numeric).abs() < 1e-6 + 1e-5 * numeric.abs());
    }
}

#[test]
fn load_store_copies_matching_arrays() {
    let cfg = tiny();
    let src: ModelBundle<f64> = build_networks(&cfg, 1).unwrap();
    let mut dst: ModelBundle<f64> = build_networks(&cfg, 2).unwrap();
    dst.load_store(&src.store).unwrap();
    let x = images(&cfg, 2, 0);
    assert_eq!(dst.reconstruct(&x).unwrap(), src.reconstruct(&x).unwrap());

    let other: ModelBundle<f64> = build_networks(&ModelConfig::new(32, 1, 7, 4, 5, 4), 0).unwrap();
    assert!(matches!(dst.load_store(&other.store), Err(YganError::Checkpoint(_))));
    let no_disc = Architecture { discriminator: false, ..Architecture::FULL };
    let partial: ModelBundle<f64> = ModelBundle::build(&cfg, no_disc, 0).unwrap();
    assert!(matches!(dst.load_store(&partial.store), Err(YganError::Checkpoint(_))));
}

#[test]
fn single_precision_matches_double_precision() {
    let cfg = tiny();
    let m64: ModelBundle<f64> = build_networks(&cfg, 3).unwrap();
    let m32: ModelBundle<f32> = build_networks(&cfg, 3).unwrap();
    let x = images(&cfg, 2, 1);
    let a = m64.reconstruct(&x).unwrap();
    let b: Tensor<f64> = m32.reconstruct(&x.cast()).unwrap().cast();
    assert!(close(&a, &b, 1e-4));
}
