use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_maps::FeatureMapKind;

/// State update rule of a linear attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Ungated additive update `S += v φ(k)ᵀ`.
    None,
    /// Scalar sigmoid gate interpolating old state and new write.
    ScalarRfa,
    /// Delta rule: erase along the write key, then write.
    DeltaRule,
    /// Outer-product gate `σ(z) σ(f)ᵀ`.
    FastDecay,
    /// Refined forget gate: `g` sharpened/softened by the refining gate `r`.
    #[serde(rename = "regla", alias = "regla_refined")]
    ReglaRefined,
}

impl GateKind {
    pub const ALL: [GateKind; 5] = [
        GateKind::None,
        GateKind::ScalarRfa,
        GateKind::DeltaRule,
        GateKind::FastDecay,
        GateKind::ReglaRefined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::None => "none",
            GateKind::ScalarRfa => "scalar_rfa",
            GateKind::DeltaRule => "delta_rule",
            GateKind::FastDecay => "fast_decay",
            GateKind::ReglaRefined => "regla",
        }
    }

    /// Rules whose state is linear in the key features and decays
    /// elementwise; these have parallel and chunked forms.
    pub fn has_parallel_form(self) -> bool {
        !matches!(self, GateKind::DeltaRule)
    }
}

impl std::str::FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" | "ungated" => GateKind::None,
            "rfa" | "scalar" | "scalar_rfa" => GateKind::ScalarRfa,
            "delta" | "delta_rule" | "deltanet" => GateKind::DeltaRule,
            "fast_decay" | "fastdecay" | "gla" => GateKind::FastDecay,
            "regla" | "regla_refined" | "refined" => GateKind::ReglaRefined,
            other => return Err(Error::Domain(format!("unknown gate kind {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    /// `1/sqrt(d)` regardless of the feature map.
    InvSqrtD,
    /// Feature-map specific factor from [`crate::feature_maps::scaling_factor`].
    VarianceReduction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Parallel,
    Recurrent,
    Chunked(usize),
}

impl ForwardMode {
    pub fn name(self) -> &'static str {
        match self {
            ForwardMode::Parallel => "parallel",
            ForwardMode::Recurrent => "recurrent",
            ForwardMode::Chunked(_) => "chunked",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Head dimension.
    pub d: usize,
    pub n_heads: usize,
    pub feature: FeatureMapKind,
    pub gate: GateKind,
    pub sum_norm: bool,
    pub stable_norm: bool,
    pub scaling: ScalingKind,
    /// Rotary position embedding on q/k before the feature map.
    #[serde(default)]
    pub rope: bool,
}

impl AttentionConfig {
    /// The refined-gate configuration: safe exp features, variance-reduction
    /// scaling, stable normalization, no sum normalization.
    pub fn regla(d: usize, n_heads: usize) -> Self {
        Self {
            d,
            n_heads,
            feature: FeatureMapKind::SafeExp,
            gate: GateKind::ReglaRefined,
            sum_norm: false,
            stable_norm: true,
            scaling: ScalingKind::VarianceReduction,
            rope: false,
        }
    }

    pub fn with_gate(mut self, gate: GateKind) -> Self {
        self.gate = gate;
        self
    }

    pub fn with_feature(mut self, feature: FeatureMapKind) -> Self {
        self.feature = feature;
        self
    }

    /// Feature dimension `m`.
    pub fn m(&self) -> usize {
        self.feature.feature_dim(self.d)
    }

    pub fn scale<T: crate::Scalar>(&self) -> T {
        match self.scaling {
            ScalingKind::InvSqrtD => T::lit(1.0 / (self.d as f64).sqrt()),
            ScalingKind::VarianceReduction => crate::feature_maps::scaling_factor(self.feature, self.d)
                .expect("d validated to be positive"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 {
            return Err(Error::Config("d and n_heads must be positive".into()));
        }
        if self.gate == GateKind::ReglaRefined && (self.sum_norm || !self.stable_norm) {
            return Err(Error::Config(
                "the refined gate requires stable_norm on and sum_norm off".into(),
            ));
        }
        Ok(())
    }
}
