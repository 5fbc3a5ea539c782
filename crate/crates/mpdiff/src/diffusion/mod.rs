//! Noise schedule, forward corruption, Tweedie inversion, the compact
//! denoising network, and the conditional training loop.

mod adam;
mod net;
mod schedule;
mod train;

pub use adam::AdamState;
pub use net::{ArchDescriptor, Denoiser, HIDDEN_WIDTHS};
pub use schedule::{forward_diffuse, tweedie_x0hat, NoiseSchedule};
pub use train::{
    flow_masks, load_checkpoint, prep_conditioning, save_checkpoint, train, train_loop, C2Data,
    ChannelNorm, CheckpointMeta, DatasetNorm, Split, TrainConfig, TrainOutcome, TrajectoryRecord,
};
