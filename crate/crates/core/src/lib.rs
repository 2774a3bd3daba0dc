//! Bit-exact simulator and performance model for a ternary-weight CNN
//! accelerator with 8-bit dynamic fixed-point activations.

pub mod config;
pub mod dfp;
pub mod engine;
pub mod layout;
pub mod quantizer;
pub mod regs;
pub mod tensor;
pub mod graph;
pub mod oracle;
pub mod model;
pub mod perf;
pub mod validation;
