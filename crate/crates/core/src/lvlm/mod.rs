//! Closed-vocabulary language side: tokenizer, prompts, multimodal input
//! assembly, the causal decoder, instruction tuning and greedy generation.

pub mod decoder;
pub mod tune;
pub mod vocab;

pub use decoder::{generation_loss, Decoder, DecoderConfig, Role, TokenSequence};
pub use tune::{instruct_loss, instruct_tune, instruct_tune_until, training_targets, InstructConfig, InstructReport, PromptMode, Vlm};
pub use vocab::{PromptKind, Vocabulary};
