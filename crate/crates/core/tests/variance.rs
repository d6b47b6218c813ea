use regla_core::variance_lab::*;
use regla_core::FeatureMapKind;

#[test]
fn closed_form_examples() {
    let id = simulate_inner_product_std(64, InnerProductFeature::Identity, 100_000, 1).unwrap();
    assert!((id / 8.0 - 1.0).abs() < 0.03, "{id}");
    let ex = simulate_inner_product_std(64, InnerProductFeature::Exp, 100_000, 1).unwrap();
    assert!((ex / 54.97 - 1.0).abs() < 0.05, "{ex}");
}

#[test]
fn sweep_rows_track_theory() {
    for feature in InnerProductFeature::ALL {
        let rows = sweep_std_vs_dim(&[16, 64, 256], feature, 50_000, 4).unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert!((0.9..=1.1).contains(&r.ratio), "{r:?}");
        }
    }
}

#[test]
fn shifted_std_matches_and_is_below_unshifted() {
    for d in [2, 16] {
        let expected = shifted_theoretical_std(d).unwrap();
        let shifted = simulate_shifted_std(d, 200_000, 2).unwrap();
        assert!((shifted / expected - 1.0).abs() < 0.05, "d={d}: {shifted} vs {expected}");
        let plain = simulate_inner_product_std(d, InnerProductFeature::Exp, 200_000, 2).unwrap();
        assert!(shifted < plain);
    }
    assert!(simulate_shifted_std(1, 10, 0).is_err());
}

#[test]
fn error_shrinks_with_more_samples() {
    let d = 16;
    let truth = theoretical_std(d, InnerProductFeature::Identity);
    let median_err = |n: usize, offset: u64| {
        let mut errs: Vec<f64> = (0..20)
            .map(|s| (simulate_inner_product_std(d, InnerProductFeature::Identity, n, offset + s).unwrap() - truth).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        (errs[9] + errs[10]) / 2.0
    };
    assert!(median_err(20_000, 1000) < median_err(10_000, 0));
}

#[test]
fn layer_std_ordering() {
    let corpus = random_token_corpus(32, 64, 256, 0);
    let cfg = LayerStdConfig::default();
    let rows = layer_activation_std(&cfg, &corpus, 32).unwrap();
    let get = |d: usize, f: FeatureMapKind| rows.iter().find(|r| r.d == d && r.feature == f).unwrap().clone();
    for d in [16, 32, 64] {
        assert!(get(d, FeatureMapKind::SafeExp).raw_std > get(d, FeatureMapKind::Identity).raw_std);
        let scaled = get(d, FeatureMapKind::SafeExp).variance_reduction_std;
        assert!((0.5..=2.0).contains(&scaled), "d={d}: {scaled}");
    }
    for f in [FeatureMapKind::Identity, FeatureMapKind::SafeExp] {
        assert!(get(16, f).raw_std <= get(32, f).raw_std && get(32, f).raw_std <= get(64, f).raw_std);
    }
}
