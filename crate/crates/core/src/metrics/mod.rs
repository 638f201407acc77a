//! Sample-quality metrics and mask visualization.

pub mod evaluate;
pub mod extractor;
pub mod fid;
pub mod inception;
pub mod masks;

pub use evaluate::{evaluate_model, EvalReport};
pub use extractor::{load_extractor, FeatureExtractor, ToyExtractor};
pub use fid::{frechet_distance, summarize_features, GaussianSummary, PSD_TOLERANCE};
pub use inception::inception_score;
pub use masks::{mask_spatial_variance, visualize_masks, MaskGrid};
