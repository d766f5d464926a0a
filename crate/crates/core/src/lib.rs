//! Two-stage weakly supervised classification of tiny regions of interest.
//!
//! The pipeline trains a small CNN with a Two-WAM attention layer on whole
//! images (the Bag Model), turns its activation maps into saliency maps,
//! crops the highest-scoring patches into a label-inheriting instance
//! dataset, trains a second classifier on those patches (the Instance
//! Model), and combines per-patch probabilities with a rank-weighted average
//! to predict the bag. Saliency maps double as a localization source:
//! thresholding plus connected components yields one bounding box per image.
//!
//! Everything runs at desk scale on synthetic tiny-ROI data; see the
//! `milguided` binary for the end-to-end commands.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod localization;
pub mod mil;
pub mod model;
pub mod optim;
pub mod patch;
pub mod pipeline;
pub mod saliency;
pub mod synthetic;
pub mod tensor;
pub mod two_wam;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use error::{Error, Result};
pub use graph::{Activation, NodeId, Tape};
pub use model::{ModelSpec, TinyCnn};
pub use pipeline::{evaluate, extract_patches, train_bag, train_instance, RunReport};
pub use synthetic::{gen_synthetic, GeneratedImage, NoiseMode, SyntheticSpec};
pub use localization::{iou, saliency_to_bbox, BBox, LocalizedBox};
pub use mil::{
    compute_metrics, inherit_labels, weighted_evaluation, Bag, Dataset, PredictionReport, Split,
};
pub use optim::{finite_diff_check, SgdState};
pub use patch::{
    build_instance_dataset, crop_patch, select_points, Instance, PatchSpec, SelectedPoint,
};
pub use saliency::{
    cam, grad_cam, render_thermal, render_thermal_over, to_saliency, CamActivation, SaliencyMap,
    SaliencySource,
};
pub use tensor::Tensor;
pub use two_wam::{
    rgb_fuse_image, rgb_fuse_pixel, two_wam_forward, two_wam_mask, two_wam_numerator,
    ActivationMap, TwoWamLayer,
};
