//! Neural-network, optimization and policy-gradient stack.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod mlp;
pub mod ppo;
pub mod toy;

pub use adam::Adam;
pub use checkpoint::{config_hash, Checkpoint, Tensor};
pub use loss::{gaussian_nll, GaussianHead, VAR_MIN};
pub use mlp::Mlp;
pub use ppo::{ActorCritic, PpoConfig, PpoTrainer, VecEnv};
