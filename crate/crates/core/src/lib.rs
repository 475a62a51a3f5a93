//! Block-aware post-training quantization search for small feed-forward
//! networks.
//!
//! The crate chooses per-layer rounding functions (uniform quantizers with
//! percentile clip bounds) for a frozen model from a calibration set:
//!
//! * [`quantizer`]: hard and soft rounding, percentile bounds.
//! * [`tensor`]: tensors, affine layers and forward passes.
//! * [`search`]: layer-wise, block-wise and exhaustive searches.
//! * [`dependency`]: cross-layer dependency, block partitioning, DED probe.
//! * [`encoder`]: gradient-based tuning of an encoder prefix.
//! * [`harness`]: generation, I/O, the pipeline and reports.
//!
//! ```
//! use blockptq::harness::generate::{generate_calibration, generate_model, InputDistribution, ModelSpec};
//! use blockptq::harness::pipeline::{execute, PipelineConfig};
//!
//! let model = generate_model(&ModelSpec::random(vec![3, 4, 4, 2], 0)).unwrap();
//! let calib = generate_calibration(3, 32, 1, InputDistribution::Normal).unwrap();
//! let artifacts = execute(&PipelineConfig::default(), &model, &calib).unwrap();
//! assert!(artifacts.passed());
//! ```

pub mod dependency;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod quantizer;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};

// book chapters run as doctests
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantizer.md")]
    mod quantizer {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/dependency.md")]
    mod dependency {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
