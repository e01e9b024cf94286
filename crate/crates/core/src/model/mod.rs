//! The three-mode architecture.
//!
//! A conv image encoder produces tokens from its last two stages and a
//! pooled vector from the final map. A text decoder and a multimodal decoder
//! are shared by three modes, selected by the token that leads every text:
//!
//! | mode | text decoder input | multimodal decoder context | output |
//! |------|--------------------|----------------------------|--------|
//! | `[ALIGN]` | caption | image | `g(t)` at `[EOS]`; caption logits |
//! | `[RELCAP]` | relative caption | reference, gated target | relative-caption logits |
//! | `[FUSE]` | relative caption | reference | `h(m)` at `[EOS]` |
//!
//! ```
//! use fadvlp::model::{FadVlpModel, ModelConfig, Session, TextBatch, Mode};
//! use fadvlp::Tensor;
//!
//! let model = FadVlpModel::<f32>::new(ModelConfig::default(), 0).unwrap();
//! let mut s = Session::eval(&model);
//! let img = s.encode_images(&Tensor::zeros(&[2, 32, 32, 3])).unwrap();
//! assert_eq!(s.tape.shape(img.tokens), &[2, 20, 64]);
//! let text = TextBatch::captions(vec![vec![1, 9, 2], vec![1, 2]], 24).unwrap();
//! let t = s.encode_text(&text, Mode::Align).unwrap();
//! let k = s.kappa(img.pooled, t.pooled).unwrap();
//! assert_eq!(s.tape.shape(k), &[2, 2]);
//! ```

mod config;
mod forward;
mod generate;
mod params;
pub mod vocab;

pub use config::ModelConfig;
pub use forward::{ImageEncoding, Session, TextBatch, TextEncoding};
pub use generate::{generate, nucleus_filter, Decode, GenerateOptions};
pub use params::FadVlpModel;
pub use vocab::{tokenize, Mode, Vocabulary};
