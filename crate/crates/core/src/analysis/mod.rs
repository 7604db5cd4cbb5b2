//! Image-quality metrics, center interference and routing statistics.

pub mod interference;
pub mod metrics;
pub mod routing;

pub use interference::{
    delta_loss, interference, interference_from_gradients, network_interference, sample_center_batches, DeltaLoss, InterferenceMatrix,
    LossLandscape, NetworkLandscape, QuadraticTasks,
};
pub use metrics::{lesion_bias, mse, psnr, psnr_vs_reference};
pub use routing::{routing_histogram, RoutingHistogram};
