//! Linear attention: configuration, update rules, the three forward modes
//! and the multi-head block.

pub mod block;
pub mod chunked;
pub mod config;
pub mod gates;
pub mod norm;
pub mod parallel;
pub mod rope;
pub mod rules;
pub mod softmax;
pub mod state;

pub use block::{AttentionBlock, BlockDecoder, HeadParams};
pub use chunked::{chunked_decay_attention, regla_chunked};
pub use config::{AttentionConfig, ForwardMode, GateKind, ScalingKind};
pub use gates::{
    refined_forget_gate, Decays, GateActivations, GateParams, DEFAULT_FORGET_BIAS, DEFAULT_REFINE_BIAS,
};
pub use norm::{rms_floor, stable_norm, stable_norm_backward, stable_norm_inplace, STABLE_NORM_EPS};
pub use parallel::{gated_parallel, linear_attention_parallel};
pub use rope::{apply_rope, apply_rope_inverse, ROPE_BASE};
pub use rules::{
    delta_rule_step, fast_decay_step, linear_attention_step, refined_gate_value, regla_step, rfa_gate_step,
    SUM_NORM_EPS,
};
pub use softmax::softmax_attention;
pub use state::RecurrentState;
