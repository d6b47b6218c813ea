use regla_lm::bench::{decode_benchmark, BenchConfig, DecodeKind, NoProbe};

fn tiny() -> BenchConfig {
    BenchConfig {
        gen_lens: vec![4, 8, 16],
        trials: 2,
        n_layers: 2,
        n_heads: 2,
        head_dim: 8,
        mlp_dim: 16,
        vocab: 32,
        ..BenchConfig::default()
    }
}

#[test]
fn bench_rows_have_structural_byte_counts() {
    let rows = decode_benchmark::<f32>(&tiny(), &NoProbe).unwrap();
    assert_eq!(rows.len(), 9);
    let bytes = |k: DecodeKind, g: usize| rows.iter().find(|r| r.kind == k && r.gen_len == g).unwrap().analytic_state_bytes;
    assert_eq!(bytes(DecodeKind::Softmax, 16), 4 * bytes(DecodeKind::Softmax, 4));
    assert_eq!(bytes(DecodeKind::Regla, 16), bytes(DecodeKind::Regla, 4));
    assert_eq!(bytes(DecodeKind::Regla, 4), bytes(DecodeKind::FastDecay, 4));
    assert!(rows.iter().all(|r| r.measured_peak_bytes.is_none() && r.median_ms >= 0.0));
}

#[test]
fn bench_rejects_bad_lengths() {
    let mut cfg = tiny();
    cfg.gen_lens = vec![0, 4];
    assert!(decode_benchmark::<f32>(&cfg, &NoProbe).is_err());
    cfg.gen_lens = vec![8, 4];
    assert!(decode_benchmark::<f32>(&cfg, &NoProbe).is_err());
}
