pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod init;
pub mod labels;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod relation;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_LABEL};
pub use network::{Network, NetworkConfig};
pub use relation::IntegrationMode;
pub use tensor::{Graph, OpKind, Tensor, Var};
