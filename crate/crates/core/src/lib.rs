//! Post-training quantization of transformer weights with learnable
//! singular value increments.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod lsi;
pub mod model;
pub mod nn;
pub mod quant;
pub mod smooth;
pub mod tensor;
pub mod train;

pub use error::{LsiError, Result};
pub use io::{read_model, write_model};
pub use lsi::{capture, fold, lsi_fake_quantize, reconstruct, LsiParams};
pub use quant::{dequantize, fake_quantize, quantize, Granularity, QuantConfig, QuantizedTensor};
pub use smooth::SmoothParams;
pub use tensor::{Matrix, SvdFactors};
