//! A small feature-binding segmentation network and its two training
//! stages.
//!
//! The network reads a blended image and produces three logit maps: the
//! dominant scene (S_t), the phantom scene mixed underneath (S_p), and a
//! bound prediction (S_fb) fusing both. Stage 1 trains all of it on
//! blended batches, weighting the dominant/phantom supervision by the
//! blend ratio. Stage 2 fine-tunes on clean images while actively pushing
//! the phantom branch toward zero, with the binding head frozen.
//!
//! Everything is plain f64 on the CPU with hand-written reverse-mode
//! gradients, verified against finite differences in the tests.

mod checkpoint;
mod layers;
mod loss;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{relu, relu_backward, ConvGrad, ConvLayer, FeatMap};
pub use loss::{
    cross_entropy_with_grad, loss_stage1, loss_stage2, phantom_mass, pixel_cross_entropy,
    ppa_loss, ppa_with_grad, LossBreakdown, PPA_EPSILON,
};
pub use net::{
    backward, forward, forward_cached, BindNetGrads, BindNetParams, ForwardCache,
    PredictionMaps, StageTarget, DEFAULT_WIDTH, ENCODER_DEPTH, FBH_HIDDEN,
};
pub use train::{
    poly_lr, poly_schedule, sgd_step, train_plain, train_stage1, train_stage2, write_trace,
    TrainConfig, TrainOutput, TrainSet,
};
