//! Mixed-precision post-training quantization between output features.
//!
//! Output channels of every linear layer are ranked globally by an estimate
//! of the loss increase their 4-bit quantization causes; the top fraction is
//! kept at 8 bits. Each layer then splits into an 8-bit symmetric and a 4-bit
//! asymmetric sub-problem that a reference integer GEMM engine executes with
//! two-step dequantization and the biased integer-to-float conversion.

pub mod analysis;
pub mod calibration;
pub mod error;
pub mod gemm;
pub mod linalg;
pub mod mixed_layer;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod salience;
pub mod tensor_store;

pub use analysis::{
    compute_intensity, distribution_report, proxy_eval, DistributionReport, IntensityQuery,
    ProxyReport,
};
pub use calibration::{
    compute_gradients, forward, make_synthetic_dataset, CalibrationSet, GradientBundle,
    GradientMode, LinearStack, Sensitivity, ToyModel,
};
pub use error::{Error, Result};
pub use gemm::{
    execute_mixed_linear, execute_prepared, fast_i2f, group_gemm_twostep, I2fMode, PreparedLayer,
    TileConfig,
};
pub use linalg::Matrix;
pub use mixed_layer::{
    memory_footprint, partition_and_quantize, FootprintReport, LayerSchemes, MixedLinearLayer,
};
pub use pipeline::{quantize_model, search_model, DatasetSpec, PipelineConfig, QuantizedModel};
pub use quant::{
    dequantize_tensor, quantize_group_asym, quantize_group_sym, quantize_tensor, Codes,
    GroupQuantParams, QuantScheme, QuantizedTensor, ScaleStorage,
};
pub use salience::{
    channel_salience, global_search, random_assignment, ChannelSalience, LayerAssignment,
    PrecisionAssignment, SalienceMode,
};
pub use tensor_store::{
    load_model, pack_nibbles, save_model, unpack_nibbles, DenseTensor, Dtype, LayerEntry,
    LayerKind, ModelManifest, StoredModel, TensorData, TensorEntry,
};
