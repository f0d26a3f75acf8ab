//! The tracker model: configuration, parameters, network, head, losses,
//! gradient checks, training and serialization.

pub mod config;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod loss;
pub mod net;
pub mod params;
pub mod train;

pub use config::ModelConfig;
pub use head::{decode_box, encode_target, BoxPrediction, HeadOutput};
pub use loss::{compute_loss, LossBreakdown};
pub use net::Model;
pub use params::ParamStore;
pub use train::{train_toy, TrainConfig, TrainReport, TrainSequence};
