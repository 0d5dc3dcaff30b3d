//! Core library for generating validated synthetic instance-segmentation
//! datasets: model backends, system-prompt optimization, mask geometry,
//! verdict parsing, compositing and COCO output.

pub mod backend;
pub mod compositor;
pub mod dataset;
pub mod fsutil;
pub mod image;
pub mod mask;
pub mod optimizer;
pub mod prompts;
pub mod validation;
