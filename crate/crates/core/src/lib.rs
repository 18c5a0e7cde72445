//! Scene-text image synthesis: semantic region detection, geometry-aligned
//! text placement, and GAN-based appearance adaptation.

pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod gan;
pub mod geometry;
pub mod imaging;
pub mod pipeline;
pub mod segmentation;
pub mod text;

pub use error::{Error, Result};
pub use fusion::{CandidateRegion, SelectionParams, SemanticMap};
pub use gan::{Alphabet, AppearanceModel, Gan, GanConfig, LossReport, PretrainConfig, Recognizer, TrainingSample};
pub use geometry::{Homography, PlacedText, PlacementParams, Quad};
pub use imaging::{Mask, RasterImage};
pub use pipeline::{Annotation, BatchSummary, Resources, SynthesisConfig, SynthesisRecord};
pub use segmentation::{Region, RegionMap, SegmentationParams};
pub use text::{Corpus, Font, TextMask, TextMode};
