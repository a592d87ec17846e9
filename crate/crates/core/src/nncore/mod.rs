//! Feed-forward regression network: parameters, forward/backward passes, SGD
//! and checkpoints.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{decode, encode, read_checkpoint, write_checkpoint};
pub(crate) use model::per_example_gradients_with_predictions;
pub use model::{
    backward, forward, forward_train, init_model, input_dim, loss_mse, per_example_gradients, predict, rmse, sgd_step,
    sgd_step_in_place, update_running_stats, Activation, Batch, ForwardCache, HiddenLayer, Mode, ModelSpec,
    BN_EPS, BN_MOMENTUM,
};
pub use params::{EntryKind, GradEntry, GradientSet, ParamEntry, ParameterSet};
