//! Score network, noise-aware classifier, their training loops and
//! checkpoint format.

pub mod checkpoint;
mod networks;
mod train;
mod transformer;

pub use networks::{softmax, ClassGuide, GraphClassifier, ScoreEstimate, ScoreModel, ScoreNetwork};
pub use train::{
    argmax, classifier_accuracy, train_classifier, train_score, TrainConfig, TrainReport,
};
pub use transformer::{time_features, ArchConfig, GraphDims};
