//! Selective state-space layers and the models built from them.

pub mod attention;
pub mod block;
pub mod config;
pub mod conv;
pub mod discretize;
pub mod model;
pub mod scan;
pub mod ssd;

pub use attention::sliding_window_attention;
pub use block::block_forward;
pub use config::{BlockVariant, ModelConfig, ModelVariant, PRESET_NAMES};
pub use conv::causal_conv1d;
pub use discretize::discretize_zoh;
pub use model::{RunCtx, SsmModel, PAD_ROW};
pub use scan::{selective_scan_op, selective_scan_parallel, selective_scan_sequential, ScanKernel};
pub use ssd::{ssd_op, ssd_scalar_head, DEFAULT_CHUNK_LEN};
