//! The decoder family: configuration, parameters, forward pass and the
//! analytic cost model.

pub mod complexity;
pub mod config;
pub mod decoder;
pub mod params;

pub use complexity::{analyze, ComplexityReport, StageCost};
pub use config::{ParamSpec, VariantConfig};
pub use decoder::{decode, decode_on_graph, positional_encode, BoundParams, DecodeOutput};
pub use params::{is_weight_name, ModelParams};
