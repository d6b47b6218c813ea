use ndarray::Array2;
use regla_core::attention::{AttentionConfig, ForwardMode, GateKind, ScalingKind};
use regla_core::gradients::{backward, forward_with_tape, gradcheck_block, gradient_pairs, relative_error, FD_EPSILON};
use regla_core::rng::{normal_matrix, stream};
use regla_core::{AttentionBlock, FeatureMapKind};

fn config(gate: GateKind, feature: FeatureMapKind, sum_norm: bool, stable: bool, rope: bool) -> AttentionConfig {
    AttentionConfig {
        d: 4,
        n_heads: 2,
        feature,
        gate,
        sum_norm,
        stable_norm: stable,
        scaling: ScalingKind::VarianceReduction,
        rope,
    }
}

fn instance(cfg: AttentionConfig, seed: u64, len: usize) -> (AttentionBlock<f64>, Array2<f64>) {
    let mut rng = stream(seed, &[1]);
    let block = AttentionBlock::<f64>::init(cfg, 6, &mut rng).unwrap();
    let x: Array2<f64> = normal_matrix(&mut rng, 6, len, 1.0);
    (block, x)
}

fn check(cfg: AttentionConfig, seed: u64, len: usize) -> f64 {
    let (block, x) = instance(cfg, seed, len);
    gradcheck_block(&block, x.view(), ForwardMode::Recurrent, seed, FD_EPSILON).unwrap().max_rel_err
}

#[test]
fn every_gate_matches_finite_differences() {
    for gate in GateKind::ALL {
        for seed in 0..20 {
            let err = check(config(gate, FeatureMapKind::SafeExp, false, true, false), seed, 12);
            assert!(err <= 1e-4, "{gate:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn feature_maps_norms_and_rope_match_finite_differences() {
    let mut seed = 100;
    for feature in FeatureMapKind::ALL {
        for (sum_norm, stable) in [(true, false), (false, true), (true, true), (false, false)] {
            for gate in [GateKind::ScalarRfa, GateKind::FastDecay, GateKind::DeltaRule] {
                // ReLU features can vanish entirely, which is a genuine degenerate denominator.
                // The delta-rule accumulator can overshoot below zero for the same reason.
                if sum_norm && (!feature.is_non_negative() || feature == FeatureMapKind::Relu || gate == GateKind::DeltaRule) {
                    continue;
                }
                seed += 1;
                // Piecewise-linear features can make some gradients exactly zero, where
                // central differences only see rounding noise; accept a tight absolute bound there.
                let (block, x) = instance(config(gate, feature, sum_norm, stable, seed % 2 == 0), seed, 8);
                let pairs = gradient_pairs(&block, x.view(), ForwardMode::Recurrent, seed, FD_EPSILON).unwrap();
                for p in &pairs {
                    for (&a, &f) in p.analytic.iter().zip(&p.numeric) {
                        assert!(
                            relative_error(a, f) <= 1e-4 || (a - f).abs() <= 1e-9,
                            "{feature:?} {gate:?} sum={sum_norm} stable={stable} {}: {a:e} vs {f:e}",
                            p.name
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn regla_long_sequence() {
    let cfg = AttentionConfig { d: 8, n_heads: 1, ..AttentionConfig::regla(8, 1) };
    let mut rng = stream(7, &[2]);
    let block = AttentionBlock::<f64>::init(cfg, 8, &mut rng).unwrap();
    let x: Array2<f64> = normal_matrix(&mut rng, 8, 32, 1.0);
    let report = gradcheck_block(&block, x.view(), ForwardMode::Parallel, 7, FD_EPSILON).unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = stream(3, &[]);
    let block = AttentionBlock::<f64>::init(AttentionConfig::regla(4, 2), 6, &mut rng).unwrap();
    let x: Array2<f64> = normal_matrix(&mut rng, 6, 10, 1.0);
    let (y, tape) = forward_with_tape(&block, x.view()).unwrap();
    let g = backward(&block, &tape, Array2::zeros(y.raw_dim()).view()).unwrap();
    assert!(g.dx.iter().all(|&v| v == 0.0));
    use regla_core::Params;
    assert!(g.params.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn tape_forward_matches_block_forward() {
    for gate in GateKind::ALL {
        let mut rng = stream(11, &[gate as u64]);
        let cfg = config(gate, FeatureMapKind::SafeExp, false, true, true);
        let block = AttentionBlock::<f64>::init(cfg, 6, &mut rng).unwrap();
        let x: Array2<f64> = normal_matrix(&mut rng, 6, 20, 1.0);
        let (y, _) = forward_with_tape(&block, x.view()).unwrap();
        let r = block.forward(x.view(), ForwardMode::Recurrent).unwrap();
        let diff = (&y - &r).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(diff < 1e-12, "{gate:?}: {diff:e}");
    }
}
