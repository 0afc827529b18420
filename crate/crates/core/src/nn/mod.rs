//! Parameterised building blocks shared by every architecture module.

mod attention;
mod layers;
mod params;

pub use attention::{add_mha_params, mha, mha_param_count, MhaOutput};
pub use layers::{add_linear, linear, MlpSpec};
pub use params::{Bindings, Init, Param, ParamStore};
