//! Anchorless defect detection for synthetic line-space SEM images.
//!
//! The pipeline runs end to end on a CPU: [`synthgen`] renders reproducible
//! line-space images with stochastic defects, [`codec`] turns annotations into
//! stride-R heatmap/offset/size targets and decodes network output back into
//! scored detections, [`netcore`] is a small convolutional encoder-decoder
//! with manual backprop, [`evaluator`] scores detections COCO-style,
//! [`harness`] runs training and transfer experiments, and [`bench`] measures
//! per-image inference latency.

pub mod bench;
pub mod cli;
pub mod codec;
pub mod evaluator;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod netcore;
pub mod synthgen;

pub use geometry::{Annotation, BBox, ClassId, Detection};
pub use image::GrayImage;
