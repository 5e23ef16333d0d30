//! Lookahead pruning toolkit: a small f64 tensor core, a feed-forward
//! network engine, magnitude/lookahead/Hessian saliency scoring, mask
//! selection with sparsity schedules, independent verification oracles,
//! and the experiment pipeline behind the `lapnet` binary.

// Numeric kernels here index several arrays with one loop variable; the
// explicit-index form tracks the math more closely than zipped iterators.
#![allow(clippy::needless_range_loop)]

pub mod arch;
pub mod criteria;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod model_io;
pub mod network;
pub mod oracle;
pub mod select;
pub mod stats;
pub mod tensor;
pub mod train;

pub use arch::{build, build_spec, Arch};
pub use criteria::{
    bn_factors, fast_lap_squared, score_lap, score_lap_act, score_lap_all, score_mp,
    score_network, score_obd, score_obd_lap, score_random, Criterion, PruneContext, ScoreTensor,
};
pub use data::{load_mnist, load_mnist_idx, synthetic_blobs, Dataset, MnistSplit};
pub use error::{LapError, Result};
pub use experiment::{
    benchmark_scoring, emit_report, iterative_pipeline, render_report, report_rows, run_pipeline,
    BlobsConfig, DatasetKind, ExperimentResult, ExperimentSpec, ReportFormat, ReportRow,
    TrialRecord,
};
pub use mask::Mask;
pub use model_io::{load_model, read_model, save_model, write_model};
pub use network::{glorot_init, ActKind, Grads, Layer, LayerGrads, LayerSpec, Mode, NetSpec, Network};
pub use oracle::{
    block_distortion, bqp_reduce, brute_force_mask, circulant_jacobian, distortion_bound_check,
    finite_diff_hessian_diag, jacobi_eigh, whole_chain_distortion, BlockInstance, BqpInstance,
};
pub use select::{
    keep_fractions, prune, prune_plan, select_channels, select_global, select_layerwise,
    ChannelAgg, Order, PruneConfig, PrunePlan, Scope, SparsitySchedule, Structure,
};
pub use stats::{estimate_activation_probs, hessian_diagonal, ActivationStats, HessianDiag};
pub use tensor::{conv2d, matmul, Padding, Shape, Tensor};
pub use train::{accuracy, adam_step, evaluate, loss_and_grads, train, AdamState, TrainConfig};
