//! Monte Carlo measurements of inner-product spread: random Gaussian vectors
//! under identity and exponential features, the shifted-mean variant, and the
//! pre-normalization inner products of a randomly initialized attention layer.

use std::f64::consts::E;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_maps::{elementwise_features, variance_reduction_factor, FeatureMapKind};
use crate::rng::{normal_matrix, stream};

/// Feature applied to both vectors before the inner product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerProductFeature {
    Identity,
    Exp,
}

impl InnerProductFeature {
    pub const ALL: [InnerProductFeature; 2] = [InnerProductFeature::Identity, InnerProductFeature::Exp];

    pub fn name(self) -> &'static str {
        match self {
            InnerProductFeature::Identity => "identity",
            InnerProductFeature::Exp => "exp",
        }
    }
}

impl std::str::FromStr for InnerProductFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(InnerProductFeature::Identity),
            "exp" | "safe_exp" => Ok(InnerProductFeature::Exp),
            other => Err(Error::Domain(format!("unknown inner-product feature {other:?}"))),
        }
    }
}

/// Streaming mean and variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample standard deviation.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64).sqrt()
    }
}

/// Standard deviation of `xᵀy` (identity) or `Σ e^{x_i} e^{y_i}` (exp) for
/// i.i.d. standard normal `x, y ∈ R^d`: `sqrt(d)` and `e·sqrt(d(e²−1))`.
pub fn theoretical_std(d: usize, feature: InnerProductFeature) -> f64 {
    let d = d as f64;
    match feature {
        InnerProductFeature::Identity => d.sqrt(),
        InnerProductFeature::Exp => E * (d * (E * E - 1.0)).sqrt(),
    }
}

/// Expected std of `Σ e^{x_i} e^{y_i}` with `x_i, y_i ~ N(−sqrt(2 ln d), 1)`.
pub fn shifted_theoretical_std(d: usize) -> Result<f64> {
    let mu = shift(d)?;
    Ok((-2.0 * mu).exp() * theoretical_std(d, InnerProductFeature::Exp))
}

fn shift(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::Domain(format!("shifted mean needs d >= 2 (ln d > 0), got {d}")));
    }
    Ok((2.0 * (d as f64).ln()).sqrt())
}

fn check_sampling(d: usize, n_samples: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::Domain("d must be >= 1".into()));
    }
    if n_samples < 2 {
        return Err(Error::Domain("need at least two samples for a std".into()));
    }
    Ok(())
}

fn feature_tag(feature: InnerProductFeature) -> u64 {
    feature as u64 + 1
}

fn sampled_std<R: Rng>(rng: &mut R, d: usize, n_samples: usize, mean: f64, exp: bool) -> f64 {
    let mut acc = Welford::default();
    for _ in 0..n_samples {
        let mut s = 0.0;
        for _ in 0..d {
            let x: f64 = rng.sample::<f64, _>(StandardNormal) + mean;
            let y: f64 = rng.sample::<f64, _>(StandardNormal) + mean;
            s += if exp { (x + y).exp() } else { x * y };
        }
        acc.push(s);
    }
    acc.std()
}

/// Empirical std of the inner product over `n_samples` vector pairs. The
/// generator is derived from `(seed, d, feature)`.
pub fn simulate_inner_product_std(d: usize, feature: InnerProductFeature, n_samples: usize, seed: u64) -> Result<f64> {
    check_sampling(d, n_samples)?;
    let mut rng = stream(seed, &[d as u64, feature_tag(feature)]);
    Ok(sampled_std(&mut rng, d, n_samples, 0.0, feature == InnerProductFeature::Exp))
}

/// Empirical std of `Σ e^{x_i} e^{y_i}` with the means shifted to
/// `−sqrt(2 ln d)`.
pub fn simulate_shifted_std(d: usize, n_samples: usize, seed: u64) -> Result<f64> {
    let mu = shift(d)?;
    check_sampling(d, n_samples)?;
    let mut rng = stream(seed, &[d as u64, 0x5348_4946]);
    Ok(sampled_std(&mut rng, d, n_samples, -mu, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdRow {
    pub d: usize,
    pub feature: InnerProductFeature,
    pub n: usize,
    pub empirical_std: f64,
    pub theoretical_std: f64,
    pub ratio: f64,
}

/// One row per dimension in `d_list`.
pub fn sweep_std_vs_dim(d_list: &[usize], feature: InnerProductFeature, n_samples: usize, seed: u64) -> Result<Vec<StdRow>> {
    d_list
        .iter()
        .map(|&d| {
            let empirical_std = simulate_inner_product_std(d, feature, n_samples, seed)?;
            let theoretical_std = theoretical_std(d, feature);
            Ok(StdRow {
                d,
                feature,
                n: n_samples,
                empirical_std,
                theoretical_std,
                ratio: empirical_std / theoretical_std,
            })
        })
        .collect()
}

/// Setup of the one-layer activation measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStdConfig {
    pub dims: Vec<usize>,
    pub features: Vec<FeatureMapKind>,
    /// Width of the token embedding feeding the query/key projections.
    pub model_dim: usize,
    pub seed: u64,
}

impl Default for LayerStdConfig {
    fn default() -> Self {
        Self {
            dims: vec![16, 32, 64],
            features: vec![FeatureMapKind::Identity, FeatureMapKind::SafeExp],
            model_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStdRow {
    pub d: usize,
    pub feature: FeatureMapKind,
    /// Std of the unscaled inner products `φ(q_i)ᵀφ(k_j)`, `j ≤ i`.
    pub raw_std: f64,
    /// Same products times `1/sqrt(d)`.
    pub inv_sqrt_d_std: f64,
    /// Same products times the variance-reduction factor.
    pub variance_reduction_std: f64,
}

/// Feature map used for spread measurements. SafeExp is measured through the
/// unshifted kernel `exp(q)ᵀexp(k)`: the max shift is a per-row constant
/// factor chosen for overflow safety, not part of the kernel whose spread the
/// scaling factor targets.
pub fn unshifted_features(kind: FeatureMapKind, z: ndarray::ArrayView2<f64>) -> Array2<f64> {
    match kind {
        FeatureMapKind::SafeExp => z.mapv(f64::exp),
        other => elementwise_features(other, z).expect("elementwise map"),
    }
}

/// Pushes every causal inner product `φ(q_i)ᵀφ(k_j)` (`j ≤ i`) into `acc`.
pub fn accumulate_causal_products(acc: &mut Welford, phi_q: &Array2<f64>, phi_k: &Array2<f64>) {
    let gram = phi_q.t().dot(phi_k);
    for i in 0..gram.nrows() {
        for j in 0..=i.min(gram.ncols().saturating_sub(1)) {
            acc.push(gram[[i, j]]);
        }
    }
}

/// Random token sequences (uniform over `vocab`), the default corpus sample.
pub fn random_token_corpus(n_seqs: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, &[0x746f_6b73]);
    (0..n_seqs).map(|_| (0..len).map(|_| rng.random_range(0..vocab.max(1))).collect()).collect()
}

/// Randomly initialized one-layer measurement: token embeddings `N(0, 1)`,
/// query/key projections with std `1/sqrt(model_dim)`, statistics over the
/// first `n_inputs` sequences of `corpus` (cycled if shorter).
pub fn layer_activation_std(config: &LayerStdConfig, corpus: &[Vec<usize>], n_inputs: usize) -> Result<Vec<LayerStdRow>> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(Error::Domain("empty corpus".into()));
    }
    if n_inputs == 0 || config.model_dim == 0 {
        return Err(Error::Domain("n_inputs and model_dim must be positive".into()));
    }
    let vocab = corpus.iter().flatten().copied().max().unwrap_or(0) + 1;
    let mut rows = Vec::new();
    for &d in &config.dims {
        if d == 0 {
            return Err(Error::Domain("d must be >= 1".into()));
        }
        let mut rng = stream(config.seed, &[d as u64, 0x6c61_7972]);
        let embed: Array2<f64> = normal_matrix(&mut rng, config.model_dim, vocab, 1.0);
        let std_w = 1.0 / (config.model_dim as f64).sqrt();
        let w_q: Array2<f64> = normal_matrix(&mut rng, d, config.model_dim, std_w);
        let w_k: Array2<f64> = normal_matrix(&mut rng, d, config.model_dim, std_w);
        for &feature in &config.features {
            let mut acc = Welford::default();
            for seq in corpus.iter().filter(|s| !s.is_empty()).cycle().take(n_inputs) {
                let x = embed.select(Axis(1), seq);
                let phi_q = unshifted_features(feature, w_q.dot(&x).view());
                let phi_k = unshifted_features(feature, w_k.dot(&x).view());
                accumulate_causal_products(&mut acc, &phi_q, &phi_k);
            }
            let raw_std = acc.std();
            rows.push(LayerStdRow {
                d,
                feature,
                raw_std,
                inv_sqrt_d_std: raw_std / (d as f64).sqrt(),
                variance_reduction_std: raw_std * variance_reduction_factor(d),
            });
        }
    }
    Ok(rows)
}
