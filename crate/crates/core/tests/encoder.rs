use blockptq::dependency::pairwise_dependency;
use blockptq::encoder::*;
use blockptq::quantizer::LayerSpecs;
use blockptq::search::{search_layerwise, SearchConfig};
use blockptq::tensor::{Activation, CalibrationSet, Layer, Model, Tensor};
use blockptq::Error;

mod common;

fn eye(n: usize) -> Layer {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    Layer::new(
        Tensor::matrix(&rows).unwrap(),
        Tensor::vector(vec![0.0; n]).unwrap(),
        Activation::Identity,
    )
    .unwrap()
}

/// Identity model on integer inputs with specs whose levels contain every
/// value it sees, strictly inside the activation clip range.
fn lossless_identity() -> (Model, CalibrationSet, Vec<LayerSpecs>) {
    let m = Model::new(vec![eye(2), eye(2), eye(2)], 1).unwrap();
    let c = CalibrationSet::from_vectors(
        vec![
            vec![0.0, 15.0],
            vec![3.0, 7.0],
            vec![12.0, 1.0],
            vec![5.0, 5.0],
        ],
        0,
    )
    .unwrap();
    let specs = vec![
        LayerSpecs::new(
            common::integer_spec(4, 0.0, 1.0),
            common::integer_spec(5, -8.0, 23.0)
        );
        3
    ];
    (m, c, specs)
}

/// A seeded model with layer-wise specs whose bounds are widened by 10% so
/// that no value sits on a clip boundary.
fn seeded(
    dims: &[usize],
    encoder_len: usize,
    seed: u64,
) -> (Model, CalibrationSet, Vec<LayerSpecs>) {
    use blockptq::quantizer::RoundingSpec;
    let m = common::encoder_model(dims, encoder_len, seed);
    let c = common::calib(dims[0], 6, seed + 1000);
    let widen = |s: RoundingSpec| {
        let pad = 0.1 * (s.upper() - s.lower());
        RoundingSpec::new(s.bits(), s.lower() - pad, s.upper() + pad, s.percentile()).unwrap()
    };
    let specs = search_layerwise(&m, &c, &SearchConfig::default())
        .unwrap()
        .specs()
        .into_iter()
        .map(|s| LayerSpecs::new(widen(s.weight), widen(s.activation)))
        .collect();
    (m, c, specs)
}

fn assert_grad_close(a: &EncoderGradient, b: &EncoderGradient, what: &str) {
    let (fa, fb) = (a.flatten(), b.flatten());
    let scale = fa
        .iter()
        .chain(&fb)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    for (x, y) in fa.iter().zip(&fb) {
        assert!(
            (x - y).abs() <= 1e-4 * scale,
            "{what}: {x} vs {y} (scale {scale})"
        );
    }
}

#[test]
fn lossless_identity_has_zero_error_and_weights() {
    let (m, c, specs) = lossless_identity();
    let w = jacobian_weights(&m, &specs, &c, GradMode::Analytic).unwrap();
    assert!(w.weights.iter().all(|v| *v == 0.0), "{w:?}");
    // differences of h^2 terms leave rounding noise only
    let fd = jacobian_weights(&m, &specs, &c, GradMode::FiniteDifference).unwrap();
    assert!(fd.weights.iter().all(|v| *v < 1e-12), "{fd:?}");
    assert_eq!(err_loss(&m, &specs, &c, 0.5).unwrap(), 0.0);
    let targets = teacher_targets(&m, &c);
    assert_eq!(reg_loss(&m, &specs, &c, &targets).unwrap(), 0.0);
    let w = jacobian_weights(&m, &specs, &c, GradMode::Analytic).unwrap();
    let total = total_loss(&m, &specs, &w, &c, &targets, &VeoConfig::default()).unwrap();
    assert_eq!(total.total, 0.0);
}

#[test]
fn zero_downstream_weights_give_zero_jacobian_weights() {
    let (m, c, specs) = seeded(&[3, 4, 4, 2], 1, 5);
    let mut layers = m.layers().to_vec();
    let last = layers.pop().unwrap();
    layers.push(
        Layer::new(
            Tensor::new(
                last.weight().shape().to_vec(),
                vec![0.0; last.weight().len()],
            )
            .unwrap(),
            last.bias().clone(),
            last.activation(),
        )
        .unwrap(),
    );
    let zeroed = Model::new(layers, 1).unwrap();
    // zero must be a weight level for the quantized weights to vanish too
    let mut specs = specs;
    specs[2].weight = common::integer_spec(4, 0.0, 1.0);
    let w = jacobian_weights(&zeroed, &specs, &c, GradMode::Analytic).unwrap();
    assert!(w.weights.iter().all(|v| *v == 0.0), "{w:?}");
}

#[test]
fn zero_weights_give_zero_entropy_loss() {
    let (m, c, specs) = seeded(&[3, 4, 4, 2], 1, 7);
    let w = JacobianWeights {
        weights: vec![0.0; 3],
    };
    assert_eq!(entropy_loss(&m, &specs, &w, &c, None).unwrap(), 0.0);
}

#[test]
fn entropy_loss_combines_weights_and_dependencies() {
    let (m, c, specs) = seeded(&[3, 4, 4, 2], 1, 9);
    let w = jacobian_weights(&m, &specs, &c, GradMode::Analytic).unwrap();
    assert!(w.weights.iter().all(|v| *v >= 0.0));
    let want: f64 = (0..2)
        .map(|k| w.weights[k] * pairwise_dependency(&m, k, &specs, &c, None).unwrap())
        .sum();
    assert!(common::rel_close(
        entropy_loss(&m, &specs, &w, &c, None).unwrap(),
        want,
        1e-12
    ));
}

#[test]
fn err_loss_matches_scalar_recompute() {
    let (m, c, specs) = seeded(&[3, 4, 4, 2], 2, 11);
    let (mut enc, mut out) = (0.0, 0.0);
    for x in c.samples() {
        let q = common::forward(&m, x.data(), Some(&specs));
        let r = common::forward(&m, x.data(), None);
        enc += common::sq_dist(&q[1].1, &r[1].1).sqrt();
        out += common::sq_dist(&q[2].1, &r[2].1).sqrt();
    }
    assert!(common::rel_close(
        err_loss(&m, &specs, &c, 0.0).unwrap(),
        enc,
        1e-10
    ));
    assert!(common::rel_close(
        err_loss(&m, &specs, &c, 0.5).unwrap(),
        enc + 0.5 * out,
        1e-10
    ));
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let (m, c, specs) = seeded(&[3, 4, 4, 2], 1, 13);
    let targets: Vec<Vec<f64>> = c
        .samples()
        .iter()
        .map(|x| vec![x.data()[0], -x.data()[1]])
        .collect();
    let w = jacobian_weights(&m, &specs, &c, GradMode::Analytic).unwrap();
    let cfg = VeoConfig {
        lambda1: 0.3,
        lambda2: 0.7,
        ..VeoConfig::default()
    };
    let l = total_loss(&m, &specs, &w, &c, &targets, &cfg).unwrap();
    let reg = reg_loss(&m, &specs, &c, &targets).unwrap();
    let ent = entropy_loss(&m, &specs, &w, &c, None).unwrap();
    let err = err_loss(&m, &specs, &c, cfg.eta).unwrap();
    assert_eq!((l.reg, l.ent, l.err), (reg, ent, err));
    assert_eq!(l.total, reg + 0.3 * ent + 0.7 * err);
    let plain = VeoConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..cfg
    };
    assert_eq!(
        total_loss(&m, &specs, &w, &c, &targets, &plain)
            .unwrap()
            .total,
        reg
    );
    let reg_oracle: f64 = c
        .samples()
        .iter()
        .zip(&targets)
        .map(|(x, t)| common::sq_dist(&common::forward(&m, x.data(), Some(&specs))[2].1, t))
        .sum();
    assert!(common::rel_close(reg, reg_oracle, 1e-10));
    let short = &targets[..2];
    assert!(matches!(
        reg_loss(&m, &specs, &c, short),
        Err(Error::Shape(_))
    ));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (m, c, specs) = seeded(&[3, 4, 4, 2], 1 + (seed as usize % 2), 20 + seed);
        let targets = teacher_targets(&m, &c);
        let cfg = VeoConfig::default();
        let w = jacobian_weights(&m, &specs, &c, GradMode::Analytic).unwrap();
        let fd_w = jacobian_weights(&m, &specs, &c, GradMode::FiniteDifference).unwrap();
        for (a, b) in w.weights.iter().zip(&fd_w.weights) {
            assert!(
                (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-8),
                "{a} vs {b}"
            );
        }
        let analytic = loss_gradients(&m, &specs, &w, &c, &targets, &cfg).unwrap();
        let numeric = finite_difference_gradients(&m, &specs, &w, &c, &targets, &cfg).unwrap();
        assert_grad_close(&analytic.reg, &numeric.reg, "reg");
        assert_grad_close(&analytic.ent, &numeric.ent, "ent");
        assert_grad_close(&analytic.err, &numeric.err, "err");
        assert!(
            analytic.reg.norm() > 0.0 && analytic.ent.norm() > 0.0 && analytic.err.norm() > 0.0
        );
    }
}

#[test]
fn zero_learning_rate_keeps_model_and_flat_trace() {
    let (m, c, specs) = seeded(&[3, 4, 4, 2], 1, 30);
    let cfg = VeoConfig {
        lr: 0.0,
        epochs: 3,
        ..VeoConfig::default()
    };
    let out = optimize_encoder(&m, &specs, &c, &teacher_targets(&m, &c), &cfg).unwrap();
    assert_eq!(out.model, m);
    assert_eq!(out.trace.len(), 4);
    assert!(out.trace.iter().all(|r| r.total == out.trace[0].total));
    assert_eq!(
        out.trace.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        vec![0, 1, 2, 3]
    );
}

#[test]
fn lossless_teacher_is_a_stationary_point() {
    let (m, c, specs) = lossless_identity();
    let cfg = VeoConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lr: 0.1,
        epochs: 2,
        batch: 2,
        ..VeoConfig::default()
    };
    let targets = teacher_targets(&m, &c);
    let w = jacobian_weights(&m, &specs, &c, GradMode::Analytic).unwrap();
    let g = loss_gradients(&m, &specs, &w, &c, &targets, &cfg).unwrap();
    assert_eq!(g.total(&cfg).norm(), 0.0);
    let out = optimize_encoder(&m, &specs, &c, &targets, &cfg).unwrap();
    assert_eq!(out.model, m);
    assert!(out.trace.iter().all(|r| r.total == 0.0));
}

#[test]
fn only_encoder_layers_change() {
    let (m, c, specs) = seeded(&[3, 4, 4, 4, 2], 2, 40);
    let out = optimize_encoder(
        &m,
        &specs,
        &c,
        &teacher_targets(&m, &c),
        &VeoConfig::default(),
    )
    .unwrap();
    assert_ne!(out.model.layers()[0], m.layers()[0]);
    for k in 2..4 {
        let (a, b) = (&out.model.layers()[k], &m.layers()[k]);
        let bits = |l: &Layer| {
            l.weight()
                .data()
                .iter()
                .chain(l.bias().data())
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(out.trace.len(), 11);
    let again = optimize_encoder(
        &m,
        &specs,
        &c,
        &teacher_targets(&m, &c),
        &VeoConfig::default(),
    )
    .unwrap();
    assert_eq!(again.trace, out.trace);
}

#[test]
fn huge_step_is_reported_as_divergence() {
    let (m, c, specs) = seeded(&[3, 4, 4, 2], 1, 50);
    let cfg = VeoConfig {
        lr: 1e3,
        ..VeoConfig::default()
    };
    let err = optimize_encoder(&m, &specs, &c, &teacher_targets(&m, &c), &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn finite_differences_respect_budget() {
    let m = common::encoder_model(&[64, 64, 2], 1, 1);
    let c = common::calib(64, 256, 2);
    let s = blockptq::quantizer::RoundingSpec::new(4, -4.0, 4.0, 1.0).unwrap();
    let specs = vec![LayerSpecs::new(s, s); 2];
    let w = JacobianWeights {
        weights: vec![0.0; 2],
    };
    let targets = teacher_targets(&m, &c);
    let err = finite_difference_gradients(&m, &specs, &w, &c, &targets, &VeoConfig::default())
        .unwrap_err();
    assert!(
        matches!(err, Error::InvalidInput(ref msg) if msg.contains("budget")),
        "{err}"
    );
}

#[test]
fn models_without_encoder_are_rejected() {
    let m = common::model(&[3, 4, 2], 1);
    let c = common::calib(3, 4, 2);
    let specs = search_layerwise(&m, &c, &SearchConfig::default())
        .unwrap()
        .specs();
    assert!(err_loss(&m, &specs, &c, 0.5).is_err());
    assert!(optimize_encoder(
        &m,
        &specs,
        &c,
        &teacher_targets(&m, &c),
        &VeoConfig::default()
    )
    .is_err());
}

#[test]
fn config_validation_and_parsing() {
    assert!(VeoConfig {
        epochs: 0,
        ..VeoConfig::default()
    }
    .validate()
    .is_err());
    assert!(VeoConfig {
        batch: 0,
        ..VeoConfig::default()
    }
    .validate()
    .is_err());
    assert!(VeoConfig {
        lambda1: -1.0,
        ..VeoConfig::default()
    }
    .validate()
    .is_err());
    assert!(VeoConfig::default().validate().is_ok());
    assert_eq!(GradMode::parse("fd").unwrap(), GradMode::FiniteDifference);
    assert_eq!(GradMode::parse("analytic").unwrap(), GradMode::Analytic);
    assert!(GradMode::parse("exact").is_err());
}
