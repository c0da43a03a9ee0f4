//! Certainty-based active learning for object detection.
//!
//! Detections from repeated stochastic forward passes over an image are
//! grouped into instance sets. Each set gets a semantic, spatial and
//! occurrence certainty; their product is the set certainty and the minimum
//! over an image's sets ranks the unlabeled pool. The images the detector is
//! least certain about are annotated next.
//!
//! Modules, bottom-up:
//!
//! * [`geometry`]: boxes, IoU, mean box, NMS;
//! * [`detection_io`]: data model and line-delimited file formats;
//! * [`grouping`]: instance sets across passes;
//! * [`certainty`]: per-set certainties and pool ranking;
//! * [`sampling`]: minimum-certainty and random batch selection;
//! * [`evaluation`]: F1, COCO-style mAP, Student's t-test;
//! * [`simulator`]: synthetic world and stochastic detector;
//! * [`orchestrator`]: the iterative loop, run directories, adapters.

pub mod certainty;
pub mod detection_io;
pub mod error;
pub mod evaluation;
mod fsutil;
pub mod geometry;
pub mod grouping;
pub mod orchestrator;
pub mod sampling;
pub mod simulator;

pub use error::{Error, Result};
pub use fsutil::{read_id_list, write_id_list};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/instance-sets.md")]
    mod instance_sets {}
    #[doc = include_str!("../../../book/src/certainty.md")]
    mod certainty {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/run-directory.md")]
    mod run_directory {}
    #[doc = include_str!("../../../book/src/adapter-protocol.md")]
    mod adapter_protocol {}
}
