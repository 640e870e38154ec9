//! Small neural-network toolkit: autodiff tape, parameters, MLPs, Fourier
//! positional encodings, AdamW and the learning-rate schedule.

mod mlp;
mod optim;
mod params;
mod rff;
mod schedule;
mod tape;

pub use mlp::{mlp_forward, Linear, Mlp};
pub use optim::AdamW;
pub use params::{Param, ParamId, ParamStore};
pub use rff::{rff_embed, FourierFeatures, PositionalNet, RffConfig};
pub use schedule::{lr_at, CosineWarmup};
pub use tape::{Activation, Aggregation, ConvGeometry, Tape, Var};

pub(crate) use mlp::join;
