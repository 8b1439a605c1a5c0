//! Transformer language models, the encoder-decoder built from them, and
//! their optimizers.

pub mod encdec;
pub mod generate;
pub mod kernels;
pub mod lm;
pub mod optim;
pub mod params;
pub mod train;
mod transformer;

pub use encdec::{EncoderDecoder, Seq2SeqItem};
pub use generate::Decoding;
pub use lm::LanguageModel;
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamSet, Slot, TensorSpec};
pub use train::{linear_decay, pretrain_mlm, step_rng, warmup_lr, DivergenceGuard, PretrainConfig, PretrainReport};
pub use transformer::{AttentionMode, Segment, TransformerConfig, INIT_STD};
