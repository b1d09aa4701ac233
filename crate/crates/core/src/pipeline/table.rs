//! Token table: the ground-truth semantics behind the text encoder.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PipelineError;

/// Number of semantic attribute dimensions at the head of every embedding.
pub const ATTR_DIM: usize = 14;
/// Dimension of the identity code rendered into face patches.
pub const IDENTITY_DIM: usize = 4;

/// Attribute layout within the first [`ATTR_DIM`] embedding dimensions.
pub mod attr {
    use std::ops::Range;

    pub const HUE: Range<usize> = 0..3;
    pub const SURROUND: Range<usize> = 3..6;
    pub const SIZE: usize = 6;
    pub const SHAPE: usize = 7;
    pub const FACE: usize = 8;
    pub const SPECIFICITY: usize = 9;
    pub const IDENTITY: Range<usize> = 10..14;
}

const DEFAULT_TABLE: &str = include_str!("../../assets/tokens.txt");

#[derive(Clone, Debug, PartialEq)]
pub struct VocabEntry {
    pub token: String,
    pub attributes: [f64; ATTR_DIM],
    pub tail_seed: u64,
}

impl VocabEntry {
    /// Full embedding row `[attributes; tail]` of dimension `dim`. The tail is
    /// a seeded standard-normal draw scaled so the row norm is `sqrt(dim)`.
    pub fn embedding(&self, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.tail_seed);
        let tail: Vec<f64> = (ATTR_DIM..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let attr_sq: f64 = self.attributes.iter().map(|a| a * a).sum();
        let tail_sq: f64 = tail.iter().map(|t| t * t).sum();
        let room = (dim as f64 - attr_sq).max(0.0);
        let scale = if tail_sq > 0.0 { (room / tail_sq).sqrt() } else { 0.0 };
        self.attributes
            .iter()
            .copied()
            .chain(tail.into_iter().map(|t| t * scale))
            .collect()
    }
}

/// Fixed vocabulary of the toy encoder.
#[derive(Clone, Debug)]
pub struct TokenTable {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
}

impl Default for TokenTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped token table is valid")
    }
}

impl TokenTable {
    pub fn new(entries: Vec<VocabEntry>) -> Result<Self, PipelineError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.token.is_empty() || e.token.chars().any(char::is_whitespace) {
                return Err(PipelineError::Table {
                    line: i + 1,
                    message: format!("invalid token {:?}", e.token),
                });
            }
            if let Some(a) = e.attributes.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(PipelineError::Table {
                    line: i + 1,
                    message: format!("attribute {a} of {:?} outside [0, 1]", e.token),
                });
            }
            if index.insert(e.token.clone(), i).is_some() {
                return Err(PipelineError::Table {
                    line: i + 1,
                    message: format!("duplicate token {:?}", e.token),
                });
            }
        }
        Ok(Self { entries, index })
    }

    /// Parses the plain-text definition format (see `assets/tokens.txt`).
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut entries = Vec::new();
        let mut seen = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PipelineError::Table { line: n + 1, message };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != ATTR_DIM + 2 {
                return Err(err(format!("expected {} fields, found {}", ATTR_DIM + 2, fields.len())));
            }
            let token = fields[0].to_lowercase();
            let mut attributes = [0.0; ATTR_DIM];
            for (slot, f) in attributes.iter_mut().zip(&fields[1..=ATTR_DIM]) {
                *slot = f.parse().map_err(|_| err(format!("bad attribute {f:?}")))?;
                if !(0.0..=1.0).contains(slot) {
                    return Err(err(format!("attribute {f} outside [0, 1]")));
                }
            }
            let tail_seed = fields[ATTR_DIM + 1]
                .parse()
                .map_err(|_| err(format!("bad tail seed {:?}", fields[ATTR_DIM + 1])))?;
            if seen.insert(token.clone(), n).is_some() {
                return Err(err(format!("duplicate token {token:?}")));
            }
            entries.push(VocabEntry {
                token,
                attributes,
                tail_seed,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, token: &str) -> Option<&VocabEntry> {
        self.index.get(token).map(|&i| &self.entries[i])
    }

    pub(crate) fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
