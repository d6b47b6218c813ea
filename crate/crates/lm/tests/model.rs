use ndarray::Array2;
use regla_core::attention::{ForwardMode, GateKind};
use regla_core::gradients::{finite_difference_grad, relative_error, FD_EPSILON};
use regla_core::Params;
use regla_lm::config::{LayerKind, ModelConfig};
use regla_lm::model::{cross_entropy, Model};

fn tiny(pattern: Vec<LayerKind>) -> ModelConfig {
    ModelConfig::new(pattern.len(), 2, 4, 12, 7).with_pattern(pattern)
}

fn batch() -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
    let inputs = vec![vec![1, 4, 2, 6, 0], vec![3, 3, 5, 1, 2]];
    let targets = vec![Some(4), None, Some(6), Some(0), Some(1), Some(3), Some(5), None, Some(2), Some(2)];
    (inputs, targets)
}

fn check_model_grad(config: ModelConfig) {
    let model = Model::<f64>::build(config, 3).unwrap();
    let (inputs, targets) = batch();
    let mut rng = regla_core::rng::stream(0, &[]);
    let (logits, tape) = model.forward_train(&inputs, 0.0, &mut rng).unwrap();
    let (_, _, _, dlogits) = cross_entropy(logits.view(), &targets).unwrap();
    let grads = model.backward(&tape, dlogits.view()).unwrap();
    let analytic = grads.flatten();
    let mut probe = model.clone();
    let numeric = finite_difference_grad(
        |flat: &[f64]| {
            probe.assign_flat(flat);
            let logits = probe.forward(&inputs, ForwardMode::Parallel).unwrap();
            cross_entropy(logits.view(), &targets).unwrap().0
        },
        &model.flatten(),
        FD_EPSILON,
    )
    .unwrap();
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| if (a - n).abs() < 1e-9 { 0.0 } else { relative_error(a, n) })
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn linear_model_gradients_match_differences() {
    check_model_grad(tiny(vec![LayerKind::Linear, LayerKind::Linear]));
}

#[test]
fn hybrid_model_gradients_match_differences() {
    check_model_grad(tiny(vec![LayerKind::Softmax, LayerKind::Linear]));
    check_model_grad(tiny(vec![LayerKind::Linear, LayerKind::Softmax]).with_gate(GateKind::FastDecay));
}

#[test]
fn decoder_matches_full_forward() {
    for pattern in [vec![LayerKind::Linear; 2], vec![LayerKind::Softmax, LayerKind::Linear]] {
        let model = Model::<f64>::build(tiny(pattern), 11).unwrap();
        let seq = vec![1, 5, 2, 2, 6, 0, 3];
        let full = model.forward(&[seq.clone()], ForwardMode::Parallel).unwrap();
        let mut dec = model.decoder();
        let mut stepped = Array2::zeros(full.raw_dim());
        for (t, &tok) in seq.iter().enumerate() {
            stepped.column_mut(t).assign(&dec.step(&model, tok).unwrap());
        }
        let diff = (&full - &stepped).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-10, "{diff}");
    }
}

#[test]
fn chunked_forward_matches_parallel() {
    let model = Model::<f64>::build(tiny(vec![LayerKind::Linear; 2]), 5).unwrap();
    let (inputs, _) = batch();
    let a = model.forward(&inputs, ForwardMode::Parallel).unwrap();
    let b = model.forward(&inputs, ForwardMode::Chunked(2)).unwrap();
    let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
    assert!(diff < 1e-10);
}

#[test]
fn initial_loss_near_uniform() {
    let model = Model::<f64>::build(tiny(vec![LayerKind::Linear; 2]), 1).unwrap();
    let (inputs, targets) = batch();
    let logits = model.forward(&inputs, ForwardMode::Parallel).unwrap();
    let (loss, ..) = cross_entropy(logits.view(), &targets).unwrap();
    assert!((loss - 7f64.ln()).abs() < 0.1, "{loss}");
}

#[test]
fn parameter_names_are_unique() {
    let model = Model::<f32>::build(tiny(vec![LayerKind::Softmax, LayerKind::Linear]), 0).unwrap();
    let names: Vec<String> = model.layout().into_iter().map(|(n, _)| n).collect();
    let set: std::collections::BTreeSet<_> = names.iter().collect();
    assert_eq!(set.len(), names.len());
    assert!(names.contains(&"layer1.attn.head0.gate.w_g".to_string()));
}
