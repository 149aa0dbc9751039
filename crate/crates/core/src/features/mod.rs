//! Scene representation shared by the robot and the station.

mod backbone;
mod roi;
mod similarity;
mod tensor;

pub use backbone::{
    decode_image, extract_features, extract_raw_features, standardize_channels, BackboneConfig, ChannelStat,
};
pub(crate) use roi::l2_normalize;
pub use roi::{generate_proposals, roi_pool, AnchorConfig, ProposalFeature};
pub(crate) use similarity::cosine_unchecked;
pub use similarity::{cosine_sim, max_shift_sim, ShiftCorrelator, ShiftMatch, Spectrum, NORM_EPS};
pub use tensor::{BBox, FeatureTensor};
