//! Parameter storage, layers and the Adam optimizer.

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::Mode;
pub use optim::{Adam, AdamConfig};
pub use params::{Network, ParamId, ParamStore};
