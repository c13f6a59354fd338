//! Size-binned, orientation-verified bag-of-words retrieval and localization
//! for downward-facing ground texture images.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bow;
mod codec;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod index;
pub mod localize;
pub mod synth;
pub mod vocab;

pub use bow::{transform, transform_assigned, BowRow, BowVector, Posting, RowId};
pub use descriptor::{hamming_distance, Descriptor, DescriptorMatrix};
pub use error::{Error, FormatError, Result};
pub use features::{read_feature_file, write_feature_file, ImageFeatures, Keypoint};
pub use geometry::{angle_diff, normalize_deg, CameraModel, Pose2D};
pub use vocab::{assign_hard, assign_soft, size_bin_of, train_akm, train_hkm, Vocabulary};
