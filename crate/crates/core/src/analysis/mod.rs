//! Hidden-state similarity profiling and analytic FLOPs accounting.

pub mod flops;
pub mod simscore;

pub use flops::{
    breakdown_rows, calibrate_attn_context, flops_decode_token, flops_prefill_token, render_csv, render_table,
    AttnContext, FlopsBreakdown, ModelDesc,
};
pub use simscore::{sim_score, SimScoreProfile};
