//! Flow-matching action decoder.

mod chunk;
mod model;

pub use chunk::{temporal_ensemble, ActionChunk, AgedChunk, ACTION_DIM, CHUNK_LEN, FLAT_DIM, GRIPPER};
pub use model::{
    denormalize, euler_integrate, interpolate, noise, normalize, ActionExpert, Conditioning, ExpertConfig,
    FlowDraw, Moe, RouterLayer, RouterTrace, ACTION_SCALE, TIME_EMBED_DIM,
};
