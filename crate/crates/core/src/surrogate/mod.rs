//! Reduced-space neural time steppers: a direct one-step network, an RK4
//! network whose core learns the right-hand side, and a direct network that
//! also takes the step size as input.

mod mlp;
mod net;
mod normalizer;
mod train;

pub use mlp::{Activation, Dense, ForwardCache, Gradients, MlpCore};
pub use net::{Mode, SurrogateNet};
pub use normalizer::{Affine, Normalizer};
pub use train::{fit, train, TrainOutcome, TrainingConfig, TransitionSet, WeightInit};
