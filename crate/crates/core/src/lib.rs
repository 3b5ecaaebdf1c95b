//! Multi-view stereo by plane sweeping: learned cost maps, recurrent cost
//! regularization with block-level depth attention, classification depth
//! inference and consistency-checked depth-map fusion.

pub mod camera;
pub mod cloud;
pub mod config;
pub mod depth;
pub mod error;
pub mod features;
pub mod fusion;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod regularizer;
pub mod scene;
pub mod stream;
pub mod sweep;
pub mod train;

pub use camera::{
    plane_homography, relative_pose, sample_inverse_depth, warp_features, Camera, CameraView, DepthHypothesisSet,
    PixelWindow,
};
pub use config::{EvalConfig, InferConfig, RunConfig};
pub use cloud::{PlyEncoding, PointCloud, Provenance};
pub use depth::DepthMap;
pub use error::{MvsError, Result};
pub use fusion::{
    consistency_errors, dynamic_accept, dynamic_threshold, fixed_accept, fuse, static_consistency_set, ConsistencyRecord,
    Fusion, FusionConfig, FusionMode, FusionReport,
};
pub use metrics::{evaluate, GridIndex, ReconMetrics};
pub use io::{load_scene, save_scene, CheckpointMeta, LoadedScene, SceneManifest};
pub use features::{FeatureConfig, FEATURE_CHANNELS};
pub use regularizer::{Regularizer, RegularizerConfig, RegularizerState};
pub use scene::{generate_scene, Primitive, Scene, SceneSpec, SyntheticScene};
pub use stream::{regularize_stream, CostSource, CostVolume, Direction, StreamOrder};
pub use sweep::PlaneSweep;
pub use inference::{infer_depth, DepthEstimate, GroundTruthDepth, ModelConfig};
pub use train::{evaluate_loss, train, TrainConfig, TrainDirection};

pub use nlmvs_tensor::{ParameterStore, Scalar, Tensor};

/// Single-precision aliases used for training and inference runs.
pub type SceneF32 = Scene<f32>;
pub type ParamsF32 = ParameterStore<f32>;
/// Double-precision aliases used for gradient checks.
pub type SceneF64 = Scene<f64>;
pub type ParamsF64 = ParameterStore<f64>;
