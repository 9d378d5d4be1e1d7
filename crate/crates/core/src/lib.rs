//! Spatio-temporal forecasting engine built around spatially-enhanced rotary
//! attention and a memory-retrieval mixture-of-experts feed-forward block.

pub mod data;
pub mod error;
pub mod model;
pub mod mrffn;
pub mod numerics;
pub mod revin;
pub mod rope;
pub mod runner;
pub mod se_attention;

pub use error::{Result, StlinkError};


pub use data::{DatasetBundle, HorizonTable, Metrics, Scaler, SplitRatio, SynthConfig};
pub use model::{Ablation, Model, ModelConfig};
pub use numerics::{Precision, Tensor};
pub use runner::{RunConfig, RunLog, TrainOutcome};
