//! Difference-token inversion: extract the edit between an image pair into a
//! small set of optimized difference tokens, then apply those tokens
//! plug-and-play to new images.
//!
//! The crate is organized around a backend bundle abstraction
//! ([`backends::BackendBundle`]): all algorithms — delta extraction and
//! interpolation ([`delta`]), anchor prompts ([`anchoring`]), token
//! optimization ([`inversion`]), generation ([`pipeline`]), and scoring
//! ([`evalharness`]) — run unchanged on any backend. A fully deterministic
//! mock backend ([`backends::mock`]) makes every stage testable in closed
//! form on CPU.

pub mod anchoring;
pub mod artifact;
pub mod backends;
pub mod config;
pub mod delta;
pub mod embedding;
pub mod error;
pub mod evalharness;
pub mod inversion;
pub mod limits;
pub mod pipeline;
pub mod tensor_io;

pub use anchoring::{AnchorPrompt, AnchorSource, HardPromptSettings, hard_prompt_invert};
pub use inversion::{DiffTokens, InversionInputs, InversionOutcome, TraceRow, optimize};
pub use pipeline::{FullPrompt, GenerationOutcome, PromptPart, assemble_full_prompt, generate_bprime};
pub use backends::registry::{EvalEncoders, build_backend, eval_encoders};
pub use backends::{BackendBundle, Latent, NoiseSchedule, TokenId, VocabTable};
pub use config::{
    AnchorConfig, AnchorMode, BackendConfig, ClipBridge, InversionConfig, PipelineConfig,
    TokenMode,
};
pub use delta::{Delta, DeltaSource, cosine_alignment_loss, image_delta, slerp, text_delta};
pub use embedding::EmbeddingVector;
pub use error::{Error, Result};
pub use evalharness::{DirectionalScoreReport, ScoredTriplet, directional_score, score_triplet};
