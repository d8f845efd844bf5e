//! Grouped amodal semantic segmentation.
//!
//! Every pixel gets a visible-group distribution plus, for each group of
//! mutually non-occluding categories, a distribution over that group's
//! categories and a void slot. Occluded surfaces are thereby labeled along
//! with the visible one.

pub mod dataset;
pub mod head;
pub mod metrics;
pub mod net;
pub mod scenegen;
pub mod schema;

pub use dataset::{regions_from_sample, RegionSets, Sample};
pub use net::{Mode, Model, ModelConfig};
pub use schema::{CategoryRef, GroupSchema, SchemaError};
