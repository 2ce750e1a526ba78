//! Backend construction from configuration.

use std::sync::Arc;

use crate::backends::mock::{MockBundleBuilder, MockImageEncoder, MockDims};
use crate::backends::{BackendBundle, ImageEncoder};
use crate::config::BackendConfig;
use crate::error::{Error, Result};

/// Image encoders used for directional scoring, with stable identifier
/// strings for reports.
pub struct EvalEncoders {
    pub clip: Arc<dyn ImageEncoder>,
    pub clip_id: String,
    pub dino: Option<Arc<dyn ImageEncoder>>,
    pub dino_id: Option<String>,
}

/// Seed offset separating the secondary (structure-oriented) eval encoder
/// from the primary one on the mock backend.
const MOCK_DINO_SEED_OFFSET: u64 = 0x5d17_0b1e;

/// Build the backend named in the config.
///
/// `mock` is fully functional and CPU-only. `sd21` and `sdxl` are recognized
/// adapter slots: their checkpoint identifiers are validated and passed
/// through, but this build ships no deep-learning runtime, so loading them
/// reports [`Error::BackendUnavailable`]. Any other name is a configuration
/// error.
pub fn build_backend(cfg: &BackendConfig) -> Result<BackendBundle> {
    match cfg.name.as_str() {
        "mock" => MockBundleBuilder::new(cfg.mock_seed).build(),
        "sd21" | "sdxl" => Err(Error::BackendUnavailable {
            name: cfg.name.clone(),
            reason: format!(
                "no diffusion runtime is compiled into this build; configured checkpoints: {:?}. \
                 Register real adapters with BackendBundle::new to enable this backend",
                cfg.checkpoints
            ),
        }),
        _ => Err(Error::UnknownBackend { name: cfg.name.clone() }),
    }
}

/// Build the scoring encoders for the configured backend. With the mock,
/// the secondary encoder is a differently seeded instance of the same
/// architecture; `with_dino = false` omits it.
pub fn eval_encoders(cfg: &BackendConfig, with_dino: bool) -> Result<EvalEncoders> {
    match cfg.name.as_str() {
        "mock" => {
            let dims = MockDims::default();
            let [s_img, ..] = MockBundleBuilder::component_seeds(cfg.mock_seed);
            let clip: Arc<dyn ImageEncoder> =
                Arc::new(MockImageEncoder::from_seed(dims, s_img));
            let (dino, dino_id) = if with_dino {
                let [s_dino, ..] =
                    MockBundleBuilder::component_seeds(cfg.mock_seed ^ MOCK_DINO_SEED_OFFSET);
                let enc: Arc<dyn ImageEncoder> =
                    Arc::new(MockImageEncoder::from_seed(dims, s_dino));
                (Some(enc), Some(format!("mock-structure-s{}", cfg.mock_seed)))
            } else {
                (None, None)
            };
            Ok(EvalEncoders {
                clip,
                clip_id: format!("mock-semantic-s{}", cfg.mock_seed),
                dino,
                dino_id,
            })
        }
        "sd21" | "sdxl" => Err(Error::BackendUnavailable {
            name: cfg.name.clone(),
            reason: "no scoring encoders available without a diffusion runtime".into(),
        }),
        _ => Err(Error::UnknownBackend { name: cfg.name.clone() }),
    }
}
