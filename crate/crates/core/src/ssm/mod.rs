//! Selective state-space core: input-dependent discretization, sequential and
//! work-efficient parallel scans, the differentiable SSM block, and the
//! cross-attention baseline it is compared against.

mod attention;
mod block;
mod params;
pub mod scan;

pub use attention::{cross_attention, AttentionOp, CrossAttentionParams, CrossAttentionVars};
pub use block::{discretize, ssm_block, ssm_forward, Discretized, SelectiveScanOp};
pub use params::{ScanMode, SsmConfig, SsmParams, SsmVars};
pub use scan::{scan_parallel, scan_sequential, ScanElement};
