//! Seq2seq GRU deconvolution of fluorescence decays, plus quantized
//! students and a fixed-point inference engine.

pub mod datagen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod training;

pub use datagen::{DatasetSpec, DecayParams, DecayRecord, FliDataset, IdxImages, Irf, TimeGrid};
pub use error::{Error, Result};
pub use io::{LoadedModel, ModelArtifact};
pub use metrics::{EngineTag, MetricsReport};
pub use model::{GruLayerWeights, ModelConfig, ModelKind, SeqModel};
pub use quant::{int_infer, ptq_model, Bits, IntEngine, QuantizedModel, ScaleMode};
pub use tensor::{adam_step, grad_check, matmul, AdamState, Tensor};
pub use training::{train_student_qat_kd, train_teacher, TrainConfig, TrainHistory};
