//! Stage 3: gradient-boosted trees over beat descriptors, record-wide
//! aggregates and RR features.

pub mod boost;
pub mod features;

pub use boost::{
    exact_best_split, gbdt_predict, histogram_best_split, logloss, train_gbdt, Binned, GbdtConfig, GbdtModel, Node, SplitChoice,
    Tree,
};
pub use features::{build_features, feature_names, local_window, rr_intervals, FeatureConfig, FeatureMatrix, DEFAULT_RR_MS};
