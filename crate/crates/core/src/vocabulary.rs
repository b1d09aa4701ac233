//! Persistent keyword -> namecon store, saved as versioned JSON.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::naming::{validate_keyword, Namecon, NameconMeta};

pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of a stored row norm from `sqrt(d)`.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed vocabulary: {0}")]
    Format(String),
    #[error("unsupported vocabulary version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("entry {keyword:?}: expected dimension {expected}, found {got}")]
    Dimension { keyword: String, expected: usize, got: usize },
    #[error("entry {keyword:?}: row {row} has norm {norm}, expected {expected}")]
    Norm {
        keyword: String,
        row: usize,
        norm: f64,
        expected: f64,
    },
    #[error("invalid keyword {0:?}")]
    InvalidKeyword(String),
    #[error("keyword {0:?} already exists")]
    Duplicate(String),
    #[error("keyword {0:?} is defined in both vocabularies")]
    Conflict(String),
    #[error("entry {0:?} contains non-finite values")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergePolicy {
    KeepA,
    KeepB,
    Fail,
}

impl std::str::FromStr for MergePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keep-a" => Ok(Self::KeepA),
            "keep-b" => Ok(Self::KeepB),
            "fail" => Ok(Self::Fail),
            _ => Err(format!("unknown merge policy {s:?} (keep-a, keep-b, fail)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    dim: usize,
    entries: BTreeMap<String, Namecon>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    keyword: String,
    k: usize,
    embeddings: Vec<f64>,
    initial_concept: String,
    target: String,
    seed: u64,
    steps: usize,
    final_loss: f64,
    created: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileFormat {
    version: u32,
    dim: usize,
    entries: Vec<FileEntry>,
}

fn check_namecon(n: &Namecon, dim: usize) -> Result<(), VocabError> {
    validate_keyword(&n.keyword).map_err(|_| VocabError::InvalidKeyword(n.keyword.clone()))?;
    let dimension = |got| VocabError::Dimension {
        keyword: n.keyword.clone(),
        expected: dim,
        got,
    };
    if n.meta.dim != dim {
        return Err(dimension(n.meta.dim));
    }
    if n.embeddings.is_empty() {
        return Err(VocabError::Format(format!("entry {:?} has no embeddings", n.keyword)));
    }
    let expected = (dim as f64).sqrt();
    for (row, e) in n.embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(dimension(e.len()));
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(VocabError::NonFinite(n.keyword.clone()));
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - expected).abs() > NORM_TOLERANCE {
            return Err(VocabError::Norm {
                keyword: n.keyword.clone(),
                row,
                norm,
                expected,
            });
        }
    }
    Ok(())
}

impl Vocabulary {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, keyword: &str) -> Option<&Namecon> {
        self.entries.get(keyword)
    }

    /// Entries in keyword order.
    pub fn iter(&self) -> impl Iterator<Item = &Namecon> {
        self.entries.values()
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, namecon: Namecon, overwrite: bool) -> Result<(), VocabError> {
        check_namecon(&namecon, self.dim)?;
        if !overwrite && self.entries.contains_key(&namecon.keyword) {
            return Err(VocabError::Duplicate(namecon.keyword));
        }
        self.entries.insert(namecon.keyword.clone(), namecon);
        Ok(())
    }

    pub fn remove(&mut self, keyword: &str) -> Option<Namecon> {
        self.entries.remove(keyword)
    }

    pub fn merge(a: &Self, b: &Self, policy: MergePolicy) -> Result<Self, VocabError> {
        if a.dim != b.dim {
            let keyword = b.keywords().next().unwrap_or_default().to_string();
            return Err(VocabError::Dimension {
                keyword,
                expected: a.dim,
                got: b.dim,
            });
        }
        let mut out = a.clone();
        for (k, n) in &b.entries {
            match (out.entries.contains_key(k), policy) {
                (false, _) | (true, MergePolicy::KeepB) => {
                    out.entries.insert(k.clone(), n.clone());
                }
                (true, MergePolicy::KeepA) => {}
                (true, MergePolicy::Fail) => return Err(VocabError::Conflict(k.clone())),
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String, VocabError> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for n in self.entries.values() {
            if n.embeddings.iter().flatten().any(|x| !x.is_finite()) || !n.meta.final_loss.is_finite() {
                return Err(VocabError::NonFinite(n.keyword.clone()));
            }
            entries.push(FileEntry {
                keyword: n.keyword.clone(),
                k: n.k(),
                embeddings: n.embeddings.iter().flatten().copied().collect(),
                initial_concept: n.meta.initial_concept.clone(),
                target: n.meta.target.clone(),
                seed: n.meta.seed,
                steps: n.meta.steps,
                final_loss: n.meta.final_loss,
                created: n.meta.created,
            });
        }
        let file = FileFormat {
            version: FORMAT_VERSION,
            dim: self.dim,
            entries,
        };
        serde_json::to_string_pretty(&file).map_err(|e| VocabError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let file: FileFormat = serde_json::from_str(text).map_err(|e| VocabError::Format(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(VocabError::Version {
                found: file.version,
                supported: FORMAT_VERSION,
            });
        }
        if file.dim == 0 {
            return Err(VocabError::Format("dim must be positive".into()));
        }
        let mut vocab = Self::new(file.dim);
        for e in file.entries {
            if e.k == 0 || e.embeddings.len() != e.k * file.dim {
                return Err(VocabError::Dimension {
                    keyword: e.keyword,
                    expected: e.k * file.dim,
                    got: e.embeddings.len(),
                });
            }
            let namecon = Namecon {
                embeddings: e.embeddings.chunks(file.dim).map(<[f64]>::to_vec).collect(),
                keyword: e.keyword,
                meta: NameconMeta {
                    initial_concept: e.initial_concept,
                    target: e.target,
                    seed: e.seed,
                    steps: e.steps,
                    final_loss: e.final_loss,
                    created: e.created,
                    dim: file.dim,
                },
            };
            vocab.insert(namecon, false)?;
        }
        Ok(vocab)
    }

    /// Writes through a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let json = self.to_json()?;
        let io = |e: std::io::Error| VocabError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(json.as_bytes()).map_err(io)?;
            f.write_all(b"\n").map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|e| VocabError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Loads `path`, or returns an empty vocabulary if it does not exist.
    pub fn load_or_new(path: &Path, dim: usize) -> Result<Self, VocabError> {
        if path.exists() {
            let v = Self::load(path)?;
            if v.dim != dim {
                return Err(VocabError::Dimension {
                    keyword: String::new(),
                    expected: dim,
                    got: v.dim,
                });
            }
            Ok(v)
        } else {
            Ok(Self::new(dim))
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::naming::normalize_to_gaussian_norm;

    pub(crate) fn namecon(keyword: &str, k: usize, dim: usize, salt: f64) -> Namecon {
        let embeddings = (0..k)
            .map(|r| {
                let raw: Vec<f64> = (0..dim).map(|j| ((j + 3 * r) as f64 * 0.7 + salt).sin() + 0.1).collect();
                normalize_to_gaussian_norm(&raw).unwrap()
            })
            .collect();
        Namecon {
            keyword: keyword.into(),
            embeddings,
            meta: NameconMeta {
                initial_concept: "bird".into(),
                target: "text:a yellow hawk".into(),
                seed: 1,
                steps: 10,
                final_loss: -0.5,
                created: 1_700_000_000,
                dim,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let mut v = Vocabulary::new(32);
        v.insert(namecon("my_hawk", 1, 32, 0.1), false).unwrap();
        v.insert(namecon("lucy", 2, 32, 0.2), false).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn empty_vocabulary_file() {
        let v = Vocabulary::new(32);
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 32);
    }

    #[test]
    fn entries_sorted_by_keyword() {
        let mut v = Vocabulary::new(16);
        for k in ["zeta", "alpha", "mid"] {
            v.insert(namecon(k, 1, 16, 0.3), false).unwrap();
        }
        let json: serde_json::Value = serde_json::from_str(&v.to_json().unwrap()).unwrap();
        let keys: Vec<&str> = json["entries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["keyword"].as_str().unwrap())
            .collect();
        assert_eq!(keys, ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn tampered_norm_names_keyword() {
        let mut v = Vocabulary::new(16);
        v.insert(namecon("my_hawk", 1, 16, 0.0), false).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&v.to_json().unwrap()).unwrap();
        let emb = json["entries"][0]["embeddings"].as_array_mut().unwrap();
        for x in emb.iter_mut() {
            *x = serde_json::json!(x.as_f64().unwrap() * 2.0);
        }
        let err = Vocabulary::from_json(&json.to_string()).unwrap_err();
        assert!(matches!(&err, VocabError::Norm { keyword, .. } if keyword == "my_hawk"), "{err}");
        assert!(err.to_string().contains("my_hawk"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = r#"{"version": 2, "dim": 32, "entries": []}"#;
        assert_eq!(
            Vocabulary::from_json(text).unwrap_err(),
            VocabError::Version { found: 2, supported: 1 }
        );
    }

    #[test]
    fn non_finite_values_not_saved() {
        let mut v = Vocabulary::new(16);
        let mut n = namecon("x", 1, 16, 0.0);
        v.insert(n.clone(), false).unwrap();
        n.meta.final_loss = f64::NAN;
        v.insert(n, true).unwrap();
        assert_eq!(v.to_json().unwrap_err(), VocabError::NonFinite("x".into()));
    }

    #[test]
    fn insert_rules() {
        let mut v = Vocabulary::new(16);
        v.insert(namecon("a", 1, 16, 0.0), false).unwrap();
        assert!(v.get("a").is_some());
        assert_eq!(
            v.insert(namecon("a", 1, 16, 1.0), false).unwrap_err(),
            VocabError::Duplicate("a".into())
        );
        let mut replacement = namecon("a", 1, 16, 1.0);
        replacement.meta.seed = 77;
        v.insert(replacement.clone(), true).unwrap();
        assert_eq!(v.get("a"), Some(&replacement));
        assert!(matches!(
            v.insert(namecon("b", 1, 8, 0.0), false),
            Err(VocabError::Dimension { .. })
        ));
    }

    #[test]
    fn merge_policies() {
        let mut a = Vocabulary::new(16);
        let mut b = Vocabulary::new(16);
        a.insert(namecon("x", 1, 16, 0.0), false).unwrap();
        b.insert(namecon("y", 1, 16, 0.5), false).unwrap();
        let u = Vocabulary::merge(&a, &b, MergePolicy::Fail).unwrap();
        assert_eq!(u.keywords().collect::<Vec<_>>(), ["x", "y"]);

        let bx = namecon("x", 1, 16, 0.9);
        b.insert(bx.clone(), false).unwrap();
        assert_eq!(
            Vocabulary::merge(&a, &b, MergePolicy::Fail).unwrap_err(),
            VocabError::Conflict("x".into())
        );
        assert_eq!(Vocabulary::merge(&a, &b, MergePolicy::KeepB).unwrap().get("x"), Some(&bx));
        assert_eq!(
            Vocabulary::merge(&a, &b, MergePolicy::KeepA).unwrap().get("x"),
            a.get("x")
        );
        assert!(Vocabulary::merge(&a, &Vocabulary::new(8), MergePolicy::KeepA).is_err());
    }
}
