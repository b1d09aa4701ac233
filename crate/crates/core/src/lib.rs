//! Concept naming over an analytic text-to-image pipeline.
//!
//! A namecon is a keyword bound to embeddings found by gradient search: start
//! from the embeddings of an initial concept, render, score against a target
//! (text or face identity), backpropagate, repeat. Prompts refer to namecons
//! as `<guiding concept | keyword>`; the guiding concept is encoded in place
//! and its embeddings are then swapped for the namecon's.
//!
//! ```
//! use elodin::naming::{name_concept, NamingConfig, TargetSpec};
//! use elodin::pipeline::Pipeline;
//! use elodin::prompt::generate;
//! use elodin::vocabulary::Vocabulary;
//!
//! let pipeline = Pipeline::default();
//! let target = TargetSpec::text("a yellow hawk");
//! let config = NamingConfig { steps: 20, seed: 42, ..NamingConfig::for_target(&target) };
//! let hawk = name_concept(&pipeline, &["bird"], &target, "my_hawk", &config).unwrap();
//!
//! let mut vocab = Vocabulary::new(pipeline.dim());
//! vocab.insert(hawk, false).unwrap();
//! let image = generate(&pipeline, "<a bird | my_hawk> amidst white flowers", &vocab, 7).unwrap();
//! assert_eq!(image.width(), 32);
//! ```

pub mod autodiff;
mod error;
pub mod eval;
pub mod image;
pub mod kv;
pub mod naming;
pub mod pipeline;
pub mod prompt;
pub mod vocabulary;

pub use error::Error;
