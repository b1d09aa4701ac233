//! An analytic text-to-image pipeline: a lookup-and-mix text encoder that
//! emits a fixed number of embeddings, a differentiable soft-mask renderer,
//! and differentiable scorers standing in for text-image and face similarity.
//!
//! Every embedding row starts with [`ATTR_DIM`] semantic attributes (see
//! [`attr`]) followed by a seeded random tail. The decoder pools the
//! attributes of the object phrase (slot A) and the surroundings phrase
//! (slot B), turns them into scene parameters and renders them.

mod render;
mod score;
mod table;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use render::{ImageVars, Noise, Nuisance, Rendering, SceneParams, SceneVars};
pub use score::{check_identity, identity_similarity, text_similarity, TextTarget, TEXT_FEATURES};
pub use table::{attr, TokenTable, VocabEntry, ATTR_DIM, IDENTITY_DIM};

use render::Geometry;

/// Words that separate the object phrase from the surroundings phrase.
pub const CONNECTIVES: [&str; 4] = ["amidst", "with", "on", "at"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("prompt has {len} tokens but the encoder emits at most {max}")]
    TooLong { len: usize, max: usize },
    #[error("token table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("embedding dimension {got} does not match pipeline dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("identity target must have {expected} components in [0, 1], got {got:?}")]
    InvalidIdentity { expected: usize, got: Vec<f64> },
    #[error("image is {got_h}x{got_w}, pipeline renders {h}x{w}")]
    ImageSize {
        h: usize,
        w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Embeddings per prompt `L`.
    pub max_len: usize,
    /// Context mixing weight `beta`.
    pub mixing: f64,
    pub height: usize,
    pub width: usize,
    /// Sigmoid sharpness of the object mask, in inverse normalized units.
    pub sharpness: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_len: 8,
            mixing: 0.15,
            height: 32,
            width: 32,
            sharpness: 25.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.dim <= ATTR_DIM {
            return bad(format!("dim must exceed the {ATTR_DIM} attribute dimensions, got {}", self.dim));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if !self.mixing.is_finite() || self.mixing < 0.0 {
            return bad(format!("mixing must be finite and >= 0, got {}", self.mixing));
        }
        if self.height < 8 || self.width < 8 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!(
                "image size must be a positive multiple of 8, got {}x{}",
                self.height, self.width
            ));
        }
        if !self.sharpness.is_finite() || self.sharpness <= 0.0 {
            return bad(format!("sharpness must be > 0, got {}", self.sharpness));
        }
        Ok(())
    }

    pub fn gaussian_norm(&self) -> f64 {
        (self.dim as f64).sqrt()
    }
}

/// Grammatical role of an embedding position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    /// First noun phrase: the object.
    Object,
    /// Second noun phrase: the surroundings.
    Surroundings,
    Connective,
    Pad,
}

/// Exactly `L` embedding rows, the first `occupied` of which came from text
/// (or were spliced in); the rest are the pad embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingList {
    rows: Vec<Vec<f64>>,
    slots: Vec<Slot>,
    occupied: usize,
}

impl EmbeddingList {
    /// Builds a list from occupied rows, padding to `max_len` with `pad`.
    pub fn from_occupied(
        rows: Vec<Vec<f64>>,
        slots: Vec<Slot>,
        pad: &[f64],
        max_len: usize,
    ) -> Result<Self, PipelineError> {
        assert_eq!(rows.len(), slots.len(), "one slot per row");
        if rows.len() > max_len {
            return Err(PipelineError::TooLong {
                len: rows.len(),
                max: max_len,
            });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != pad.len()) {
            return Err(PipelineError::DimensionMismatch {
                expected: pad.len(),
                got: r.len(),
            });
        }
        let occupied = rows.len();
        let mut rows = rows;
        let mut slots = slots;
        rows.resize(max_len, pad.to_vec());
        slots.resize(max_len, Slot::Pad);
        Ok(Self { rows, slots, occupied })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn occupied(&self) -> usize {
        self.occupied
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Replaces row `i` (keeping its slot).
    pub fn set_row(&mut self, i: usize, row: Vec<f64>) {
        assert_eq!(row.len(), self.dim());
        self.rows[i] = row;
    }
}

/// Splits a prompt into lowercase whitespace-separated tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Slot of each token under the `NP1 CONNECTIVE NP2` template: everything up
/// to the first connective is the object phrase, everything after it the
/// surroundings phrase.
pub fn assign_slots<S: AsRef<str>>(tokens: &[S]) -> Vec<Slot> {
    let mut seen_connective = false;
    tokens
        .iter()
        .map(|t| {
            if CONNECTIVES.contains(&t.as_ref()) {
                seen_connective = true;
                Slot::Connective
            } else if seen_connective {
                Slot::Surroundings
            } else {
                Slot::Object
            }
        })
        .collect()
}

/// The analytic pipeline. Immutable after construction and `Sync`.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    table: TokenTable,
    table_rows: Vec<Vec<f64>>,
    pad: Vec<f64>,
    geometry: Geometry,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self::new(PipelineConfig::default(), TokenTable::default()).expect("default config is valid")
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, table: TokenTable) -> Result<Self, PipelineError> {
        config.validate()?;
        let table_rows = table.entries().iter().map(|e| e.embedding(config.dim)).collect();
        let mut pad = vec![0.0; config.dim];
        pad[..ATTR_DIM].fill(0.5);
        let geometry = Geometry::new(config.height, config.width);
        Ok(Self {
            config,
            table,
            table_rows,
            pad,
            geometry,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn table(&self) -> &TokenTable {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn pad_embedding(&self) -> &[f64] {
        &self.pad
    }

    /// Unmixed table row for `token`.
    pub fn lookup(&self, token: &str) -> Result<&[f64], PipelineError> {
        self.table
            .position(token)
            .map(|i| self.table_rows[i].as_slice())
            .ok_or_else(|| PipelineError::UnknownToken(token.to_string()))
    }

    /// Attribute value the decoder treats as "unspecified" after mixing.
    pub fn attribute_center(&self) -> f64 {
        0.5 * (1.0 + self.config.mixing)
    }

    /// Encodes tokens into exactly `L` embeddings. Occupied position `i` is
    /// the table row of token `i` plus `beta` times the mean of all occupied
    /// table rows.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<EmbeddingList, PipelineError> {
        if tokens.len() > self.config.max_len {
            return Err(PipelineError::TooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        let raw: Vec<&[f64]> = tokens
            .iter()
            .map(|t| self.lookup(t.as_ref()))
            .collect::<Result<_, _>>()?;
        let d = self.config.dim;
        let mut mean = vec![0.0; d];
        for r in &raw {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        if !raw.is_empty() {
            let n = raw.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
        }
        let beta = self.config.mixing;
        let rows = raw
            .iter()
            .map(|r| {
                if beta == 0.0 {
                    r.to_vec()
                } else {
                    r.iter().zip(&mean).map(|(x, m)| x + beta * m).collect()
                }
            })
            .collect();
        EmbeddingList::from_occupied(rows, assign_slots(tokens), &self.pad, self.config.max_len)
    }

    pub fn encode_text(&self, text: &str) -> Result<EmbeddingList, PipelineError> {
        self.encode(&tokenize(text))
    }

    fn check_list(&self, list: &EmbeddingList) -> Result<(), PipelineError> {
        if list.dim() != self.config.dim {
            return Err(PipelineError::DimensionMismatch {
                expected: self.config.dim,
                got: list.dim(),
            });
        }
        if list.len() != self.config.max_len {
            return Err(PipelineError::TooLong {
                len: list.len(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mixing_is_pure_lookup() {
        let cfg = PipelineConfig {
            mixing: 0.0,
            ..Default::default()
        };
        let p = Pipeline::new(cfg, TokenTable::default()).unwrap();
        let e = p.encode(&["bird"]).unwrap();
        assert_eq!(e.row(0), p.table().get("bird").unwrap().embedding(32).as_slice());
        assert_eq!(e.occupied(), 1);
        assert_eq!(e.len(), 8);
    }

    #[test]
    fn mixing_adds_context_mean() {
        // Hand computation for "yellow hawk amidst white flowers": the
        // flowers position is flowers + 0.15 * (sum of the five rows) / 5.
        let p = Pipeline::default();
        let toks = ["yellow", "hawk", "amidst", "white", "flowers"];
        let e = p.encode(&toks).unwrap();
        let rows: Vec<Vec<f64>> = toks.iter().map(|t| p.table().get(t).unwrap().embedding(32)).collect();
        for j in 0..32 {
            let sum = rows[0][j] + rows[1][j] + rows[2][j] + rows[3][j] + rows[4][j];
            let expected = rows[4][j] + 0.15 * (sum / 5.0);
            assert!((e.row(4)[j] - expected).abs() < 1e-14);
        }
        // The blue hue of "flowers" carries 0.15 * 0.0 / 5 from "yellow" and the
        // red hue carries 0.15 * 1.0 / 5.
        let without_yellow = p.encode(&["hawk", "amidst", "white", "flowers"]).unwrap();
        assert!(e.row(3)[0] != without_yellow.row(2)[0]);
        assert_eq!(
            e.slots()[..5],
            [Slot::Object, Slot::Object, Slot::Connective, Slot::Surroundings, Slot::Surroundings]
        );
    }

    #[test]
    fn empty_prompt_is_all_pad() {
        let p = Pipeline::default();
        let e = p.encode::<&str>(&[]).unwrap();
        assert_eq!(e.occupied(), 0);
        assert!(e.rows().iter().all(|r| r == p.pad_embedding()));
        assert!(e.slots().iter().all(|&s| s == Slot::Pad));
    }

    #[test]
    fn unknown_and_long_prompts_rejected() {
        let p = Pipeline::default();
        assert_eq!(
            p.encode(&["bird", "griffin"]).unwrap_err(),
            PipelineError::UnknownToken("griffin".into())
        );
        let long = vec!["a"; 9];
        assert_eq!(p.encode(&long).unwrap_err(), PipelineError::TooLong { len: 9, max: 8 });
    }

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::default();
        c.dim = 10;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.height = 30;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.mixing = -0.1;
        assert!(c.validate().is_err());
    }
}
