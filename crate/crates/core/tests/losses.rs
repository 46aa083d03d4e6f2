mod common;

use common::*;
use dayolo::adaptation::{
    mlcr_loss, ria_loss, AdaptationConfig, DomainClassifiers, DomainProbMap, ScaleWeights,
    ADAPTATION_PREFIX,
};
use dayolo::autograd::Graph;
use dayolo::model::ModelConfig;
use dayolo::sample::DomainLabel;
use dayolo::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * b.abs().max(1.0)
}

#[test]
fn fixtures() {
    let one = |p: f64, d: u8| lib_ria(&[vec![vec![p]]], &[(1, 1)], &[d], [1.0, 1.0, 1.0]);
    assert!((one(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-4);
    assert!((one(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-4);
    let two = lib_ria(&[vec![vec![0.8, 0.6]]], &[(1, 2)], &[1], [1.0, 1.0, 1.0]);
    assert!((two - 0.7340).abs() < 1e-4);

    assert!((lib_msia(&[(0, 0, 0.9)], &[1], [1.0; 3]) - 0.1054).abs() < 1e-4);
    assert_eq!(lib_msia(&[], &[1], [1.0; 3]), 0.0);
    assert!((lib_msia(&[(0, 0, 0.5), (0, 0, 0.5)], &[0], [2.0; 3]) - 2.7726).abs() < 1e-4);

    let maps = |m: f64| vec![vec![vec![m], vec![m], vec![m]]];
    let sizes = [(1, 1); 3];
    assert!(lib_mlcr(&maps(0.7), &sizes, &[(0, 0, 0.7)]).abs() < 1e-6);
    assert!((lib_mlcr(&maps(0.8), &sizes, &[(0, 0, 0.6)]) - 0.2).abs() < 1e-6);
    assert!((lib_mlcr(&maps(0.5), &sizes, &[(0, 1, 0.4), (0, 1, 0.7)]) - 0.3).abs() < 1e-6);
}

#[test]
fn saturated_logits_keep_their_gradient() {
    // A target image scored as confidently source: the clamped loss still
    // pushes the logit up, with the unclamped log-sigmoid slope of about 1.
    let mut g = Graph::new();
    let z = g.variable(Tensor::new(vec![1, 1, 1, 2], vec![-40.0, 3.0]).unwrap());
    let var = g.sigmoid(z);
    let maps = [DomainProbMap {
        scale: 0,
        var,
        logit: Some(z),
    }];
    let l = ria_loss(
        &mut g,
        &maps,
        &[DomainLabel::Target],
        &ScaleWeights([1.0; 3]),
    )
    .unwrap();
    let value = g.value(l).to_scalar().unwrap() as f64;
    assert!(close(value, bce(0.0, 1.0) + bce(common::sigmoid(3.0), 1.0)));
    let grads = g.backward(l).unwrap();
    let dz = grads.get(z).unwrap().data().to_vec();
    assert!((dz[0] + 1.0).abs() < 1e-6, "{dz:?}");
    assert!(
        (dz[1] as f64 + common::sigmoid(-3.0)).abs() < 1e-6,
        "{dz:?}"
    );
}

#[test]
fn saturated_probabilities_are_clamped() {
    let v = lib_ria(&[vec![vec![0.0, 1.0]]], &[(1, 2)], &[1], [1.0; 3]);
    assert!(v.is_finite());
    assert!(close(v, bce(0.0, 1.0) + bce(1.0, 1.0)));
}

/// Weights that are exact in binary, so flipping is lossless in f32.
fn dyadic(case: &mut AlignCase) {
    let snap = |p: f64| ((p * 1024.0).round().clamp(1.0, 1023.0)) / 1024.0;
    for m in case.maps.iter_mut() {
        for cells in m.iter_mut() {
            cells.iter_mut().for_each(|p| *p = snap(*p));
        }
    }
    case.instances.iter_mut().for_each(|x| x.2 = snap(x.2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_losses_match_scalar_oracles(seed in any::<u64>()) {
        let c = random_align_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let lib = lib_ria(&c.maps, &c.sizes, &c.labels, c.weights);
        prop_assert!(close(lib, ria(&c.maps, &c.labels, c.weights)), "ria {lib}");
        let lib = lib_msia(&c.instances, &c.labels, c.weights);
        prop_assert!(close(lib, msia(&c.instances, &c.labels, c.weights)), "msia {lib}");
        let lib = lib_mlcr(&c.maps, &c.sizes, &c.instances);
        prop_assert!(close(lib, mlcr(&c.maps, &c.instances)), "mlcr {lib}");
    }

    #[test]
    fn logit_inputs_match_scalar_oracles(seed in any::<u64>()) {
        let c = random_align_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let (z, p) = as_logits(&c);
        let lib = ria_via(&z.maps, &z.sizes, &z.labels, z.weights, true);
        prop_assert!(close(lib, ria(&p.maps, &p.labels, p.weights)), "ria {lib}");
        let lib = msia_via(&z.instances, &z.labels, z.weights, true);
        prop_assert!(close(lib, msia(&p.instances, &p.labels, p.weights)), "msia {lib}");
        let lib = mlcr_via(&z.maps, &z.sizes, &z.instances, true);
        prop_assert!(close(lib, mlcr(&p.maps, &p.instances)), "mlcr {lib}");
    }

    #[test]
    fn label_flip_symmetry(seed in any::<u64>()) {
        let mut c = random_align_case(&mut ChaCha8Rng::seed_from_u64(seed));
        dyadic(&mut c);
        let flipped_labels: Vec<u8> = c.labels.iter().map(|d| 1 - d).collect();
        let flipped_maps: Vec<Vec<Vec<f64>>> =
            c.maps.iter().map(|m| m.iter().map(|cells| cells.iter().map(|p| 1.0 - p).collect()).collect()).collect();
        let flipped_inst: Vec<Inst> = c.instances.iter().map(|&(i, k, p)| (i, k, 1.0 - p)).collect();
        let a = lib_ria(&c.maps, &c.sizes, &c.labels, c.weights);
        let b = lib_ria(&flipped_maps, &c.sizes, &flipped_labels, c.weights);
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        let a = lib_msia(&c.instances, &c.labels, c.weights);
        let b = lib_msia(&flipped_inst, &flipped_labels, c.weights);
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
    }

    #[test]
    fn batch_losses_add_up_over_images(seed in any::<u64>()) {
        let c = random_align_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = c.labels.len() as f64;
        let batch_ria = lib_ria(&c.maps, &c.sizes, &c.labels, c.weights);
        let batch_msia = lib_msia(&c.instances, &c.labels, c.weights);
        let (mut ria_sum, mut msia_sum) = (0.0, 0.0);
        for i in 0..c.labels.len() {
            ria_sum += lib_ria(&c.maps[i..=i], &c.sizes, &c.labels[i..=i], c.weights);
            let mine: Vec<Inst> = c.instances.iter().filter(|x| x.0 == i).map(|&(_, k, p)| (0, k, p)).collect();
            msia_sum += lib_msia(&mine, &c.labels[i..=i], c.weights);
        }
        // The batch value is normalized by the batch size.
        prop_assert!(close(batch_ria * b, ria_sum));
        prop_assert!(close(batch_msia * b, msia_sum));
    }

    #[test]
    fn consensus_is_nonnegative_and_zero_at_agreement(seed in any::<u64>()) {
        let c = random_align_case(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(lib_mlcr(&c.maps, &c.sizes, &c.instances) >= 0.0);
        let agreeing: Vec<Inst> = c
            .instances
            .iter()
            .map(|&(i, k, _)| {
                let cells = &c.maps[i][k];
                (i, k, f32ish(cells.iter().sum::<f64>() / cells.len() as f64))
            })
            .collect();
        prop_assert!(lib_mlcr(&c.maps, &c.sizes, &agreeing) < 1e-6);
    }
}

fn classifier_setup() -> (DomainClassifiers, dayolo::autograd::ParamStore, Vec<Tensor>) {
    let model = ModelConfig::default();
    let dc = DomainClassifiers::new(&model, AdaptationConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = dc.init_params(&mut rng);
    // Larger output weights so the classifiers are far from 0.5 everywhere.
    for k in 0..3 {
        let w = params
            .get_mut(&format!("{ADAPTATION_PREFIX}image{k}.conv2.weight"))
            .unwrap();
        *w = Tensor::randn(w.shape().to_vec(), 0.3, &mut rng);
    }
    let feats = (0..3)
        .map(|k| {
            Tensor::randn(
                vec![2, model.tap_channels(k), 4 >> k, 4 >> k],
                1.0,
                &mut rng,
            )
        })
        .collect();
    (dc, params, feats)
}

#[test]
fn zero_scale_weight_zeroes_that_scale() {
    let (dc, params, feats) = classifier_setup();
    let labels = [DomainLabel::Source, DomainLabel::Target];
    for dead in 0..3 {
        let mut w = [1.0, 0.5, 0.1];
        w[dead] = 0.0;
        let mut g = Graph::new();
        let xs: Vec<_> = feats.iter().map(|f| g.variable(f.clone())).collect();
        let maps: Vec<DomainProbMap> = (0..3)
            .map(|k| dc.image_classifier(&mut g, &params, k, xs[k], 1.0).unwrap())
            .collect();
        let loss = ria_loss(&mut g, &maps, &labels, &ScaleWeights(w)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads
            .get(xs[dead])
            .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        let named = grads.params(&g);
        for (name, t) in &named {
            let zero = t.data().iter().all(|&v| v == 0.0);
            if name.starts_with(&format!("{ADAPTATION_PREFIX}image{dead}.")) {
                assert!(zero, "{name} should get no gradient");
            }
        }
        let live = (dead + 1) % 3;
        assert!(grads
            .get(xs[live])
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }
}

#[test]
fn reversal_makes_classifier_and_features_pull_apart() {
    let (dc, params, feats) = classifier_setup();
    let labels = [DomainLabel::Source, DomainLabel::Target];
    let w = ScaleWeights([1.0, 0.5, 0.1]);
    let eval = |params: &dayolo::autograd::ParamStore,
                feats: &[Tensor]|
     -> (f64, Vec<Tensor>, std::collections::BTreeMap<String, Tensor>) {
        let mut g = Graph::new();
        let xs: Vec<_> = feats.iter().map(|f| g.variable(f.clone())).collect();
        let maps: Vec<DomainProbMap> = (0..3)
            .map(|k| dc.image_classifier(&mut g, params, k, xs[k], 1.0).unwrap())
            .collect();
        let loss = ria_loss(&mut g, &maps, &labels, &w).unwrap();
        let grads = g.backward(loss).unwrap();
        let xg = xs.iter().map(|&x| grads.get(x).unwrap().clone()).collect();
        (
            g.value(loss).to_scalar().unwrap() as f64,
            xg,
            grads.params(&g),
        )
    };
    let (before, xg, pg) = eval(&params, &feats);
    let lr = 1e-4f32;

    let mut stepped = params.clone();
    for (name, g) in &pg {
        let p = stepped.get_mut(name).unwrap();
        p.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(w, g)| *w -= lr * g);
    }
    let (after_classifier, _, _) = eval(&stepped, &feats);
    assert!(
        after_classifier < before,
        "classifier step should lower the loss: {before} -> {after_classifier}"
    );

    let moved: Vec<Tensor> = feats
        .iter()
        .zip(&xg)
        .map(|(f, g)| {
            Tensor::new(
                f.shape().to_vec(),
                f.data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| x - lr * g)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let (after_features, _, _) = eval(&params, &moved);
    assert!(
        after_features > before,
        "feature step should raise the loss: {before} -> {after_features}"
    );
}

#[test]
fn consensus_gradient_reaches_both_levels() {
    let mut g = Graph::new();
    let map = g.variable(Tensor::new(vec![1, 1, 1, 2], vec![0.6, 0.8]).unwrap());
    let inst = g.variable(Tensor::new(vec![1], vec![0.3]).unwrap());
    let maps = [DomainProbMap {
        scale: 0,
        var: map,
        logit: None,
    }];
    let probs = [dayolo::adaptation::InstanceProbs {
        scale: 0,
        var: inst,
        logit: None,
        images: vec![0],
    }];
    let l = mlcr_loss(&mut g, &maps, &probs, 1).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(inst).unwrap().data(), &[-1.0]);
    assert_eq!(grads.get(map).unwrap().data(), &[0.5, 0.5]);
}
