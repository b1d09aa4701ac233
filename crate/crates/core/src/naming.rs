//! Concept naming: gradient search over the embeddings of an initial concept
//! until its renderings match a target, then binding the result to a keyword.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{adam_step, AdamState, AutodiffError, Tape, Value};
use crate::image::Image;
use crate::pipeline::{check_identity, EmbeddingList, Pipeline, PipelineError, TextTarget, IDENTITY_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NamingError {
    #[error("initial concept is empty")]
    EmptyConcept,
    #[error("invalid naming config: {0}")]
    InvalidConfig(String),
    #[error("invalid keyword {0:?}: use letters, digits and underscores")]
    InvalidKeyword(String),
    #[error("invalid target {0:?}")]
    InvalidTarget(String),
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// What the named concept should look like.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    /// A textual description scored with the text scorer.
    Text(Vec<String>),
    /// An identity code in `[0, 1]^q` scored with the identity scorer.
    Identity(Vec<f64>),
}

impl TargetSpec {
    pub fn text(s: &str) -> Self {
        Self::Text(crate::pipeline::tokenize(s))
    }

    /// Identity target read from a reference face image.
    pub fn identity_from_image(pipeline: &Pipeline, image: &Image) -> Result<Self, NamingError> {
        let v = pipeline.extract_identity(image)?;
        Ok(Self::Identity(v.iter().map(|x| x.clamp(0.0, 1.0)).collect()))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity(_))
    }

    pub(crate) fn resolve(&self, pipeline: &Pipeline) -> Result<ResolvedTarget, NamingError> {
        Ok(match self {
            Self::Text(tokens) => {
                if tokens.is_empty() {
                    return Err(NamingError::InvalidTarget(String::new()));
                }
                ResolvedTarget::Text(pipeline.text_target(tokens)?)
            }
            Self::Identity(v) => ResolvedTarget::Identity(check_identity(v)?),
        })
    }
}

/// `text:<words>` or `identity:<v1>,<v2>,...`.
impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Text(t) => write!(f, "text:{}", t.join(" ")),
            Self::Identity(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "identity:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for TargetSpec {
    type Err = NamingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NamingError::InvalidTarget(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "text" => {
                let t = crate::pipeline::tokenize(rest);
                if t.is_empty() {
                    return Err(bad());
                }
                Ok(Self::Text(t))
            }
            "identity" => {
                let v = rest
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad())?;
                if v.len() != IDENTITY_DIM || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(bad());
                }
                Ok(Self::Identity(v))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum ResolvedTarget {
    Text(TextTarget),
    Identity([f64; IDENTITY_DIM]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoisePolicy {
    /// A new noise seed every step, drawn from a stream seeded by the config seed.
    #[default]
    FreshPerStep,
    /// The config seed at every step.
    Fixed,
}

impl FromStr for NoisePolicy {
    type Err = NamingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fresh" | "fresh-per-step" => Ok(Self::FreshPerStep),
            "fixed" => Ok(Self::Fixed),
            _ => Err(NamingError::InvalidConfig(format!("unknown noise policy {s:?}"))),
        }
    }
}

pub const TEXT_LEARNING_RATE: f64 = 4e-2;
pub const IDENTITY_LEARNING_RATE: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NamingConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the norm penalty.
    pub lambda: f64,
    pub seed: u64,
    pub noise: NoisePolicy,
    pub batch_size: usize,
}

impl Default for NamingConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: TEXT_LEARNING_RATE,
            lambda: 0.05,
            seed: 0,
            noise: NoisePolicy::FreshPerStep,
            batch_size: 1,
        }
    }
}

impl NamingConfig {
    /// Defaults with the learning rate matching the target modality.
    pub fn for_target(target: &TargetSpec) -> Self {
        let lr = if target.is_identity() {
            IDENTITY_LEARNING_RATE
        } else {
            TEXT_LEARNING_RATE
        };
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NamingError> {
        let bad = |m: String| Err(NamingError::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size != 1 {
            return bad(format!("only batch size 1 is supported, got {}", self.batch_size));
        }
        Ok(())
    }

    /// Noise seed used at each step.
    pub fn step_seeds(&self) -> Vec<u64> {
        match self.noise {
            NoisePolicy::Fixed => vec![self.seed; self.steps],
            NoisePolicy::FreshPerStep => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.steps).map(|_| rng.next_u64()).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NameconMeta {
    pub initial_concept: String,
    /// Target in [`TargetSpec`]'s display form.
    pub target: String,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    /// Unix seconds.
    pub created: u64,
    pub dim: usize,
}

/// A named concept: a keyword bound to `k` optimized embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Namecon {
    pub keyword: String,
    pub embeddings: Vec<Vec<f64>>,
    pub meta: NameconMeta,
}

impl Namecon {
    pub fn k(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }
}

/// Keywords are non-empty runs of ASCII letters, digits and underscores.
pub fn validate_keyword(keyword: &str) -> Result<(), NamingError> {
    if keyword.is_empty() || !keyword.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(NamingError::InvalidKeyword(keyword.to_string()));
    }
    Ok(())
}

/// Rescales `v` to norm `sqrt(len)`.
pub fn normalize_to_gaussian_norm(v: &[f64]) -> Result<Vec<f64>, NamingError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(NamingError::ZeroVector);
    }
    let scale = (v.len() as f64).sqrt() / norm;
    Ok(v.iter().map(|x| x * scale).collect())
}

/// Records the naming loss on `tape`.
///
/// `rows` are the full `L` embedding positions of the initial concept and the
/// first `k` of them are the optimized ones. The loss is the negative
/// similarity of the decoded image to the target plus
/// `lambda * sum_k (|row| - sqrt(d))^2`.
pub(crate) fn loss_on_tape(
    pipeline: &Pipeline,
    tape: &mut Tape,
    rows: &[Value],
    list: &EmbeddingList,
    k: usize,
    target: &ResolvedTarget,
    seed: u64,
    lambda: f64,
) -> Result<Value, NamingError> {
    let noise = pipeline.noise(seed);
    let image = pipeline.decode_on_tape(tape, rows, list.slots(), &noise)?;
    let sim = match target {
        ResolvedTarget::Text(t) => pipeline.text_score_on_tape(tape, &image, t)?,
        ResolvedTarget::Identity(v) => pipeline.identity_score_on_tape(tape, &image, v)?,
    };
    let mut loss = tape.scale(sim, -1.0)?;
    let norm_target = pipeline.config().gaussian_norm();
    for &row in &rows[..k] {
        let n = tape.l2_norm(row)?;
        let gap = tape.offset(n, -norm_target)?;
        let pen = tape.square(gap)?;
        let pen = tape.scale(pen, lambda)?;
        loss = tape.add(loss, pen)?;
    }
    Ok(loss)
}

/// Loss value and gradients with respect to the first `k` rows of `list`.
pub fn naming_loss(
    pipeline: &Pipeline,
    list: &EmbeddingList,
    k: usize,
    target: &TargetSpec,
    seed: u64,
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>), NamingError> {
    let resolved = target.resolve(pipeline)?;
    loss_and_grad(pipeline, list, k, &resolved, seed, lambda)
}

fn loss_and_grad(
    pipeline: &Pipeline,
    list: &EmbeddingList,
    k: usize,
    target: &ResolvedTarget,
    seed: u64,
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>), NamingError> {
    let mut tape = Tape::new();
    let rows: Vec<Value> = list.rows().iter().map(|r| tape.vector(r.clone())).collect();
    let loss = loss_on_tape(pipeline, &mut tape, &rows, list, k, target, seed, lambda)?;
    let grads = tape.backward(loss)?;
    let g = rows[..k].iter().map(|&r| grads.wrt(r).to_vec()).collect();
    Ok((tape.scalar(loss), g))
}

/// Runs the naming loop and returns the normalized namecon. `on_step`
/// receives `(step, loss)` after every update.
pub fn name_concept_with<S: AsRef<str>>(
    pipeline: &Pipeline,
    initial: &[S],
    target: &TargetSpec,
    keyword: &str,
    config: &NamingConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Namecon, NamingError> {
    if initial.is_empty() {
        return Err(NamingError::EmptyConcept);
    }
    validate_keyword(keyword)?;
    config.validate()?;
    let resolved = target.resolve(pipeline)?;
    let mut list = pipeline.encode(initial)?;
    let k = list.occupied();
    let d = pipeline.dim();

    let mut params: Vec<f64> = list.rows()[..k].iter().flatten().copied().collect();
    let mut state = AdamState::new(params.len());
    let mut last = f64::NAN;
    for (step, seed) in config.step_seeds().into_iter().enumerate() {
        let (loss, grads) = loss_and_grad(pipeline, &list, k, &resolved, seed, config.lambda)?;
        let flat: Vec<f64> = grads.into_iter().flatten().collect();
        if !loss.is_finite() || flat.iter().any(|g| !g.is_finite()) {
            return Err(NamingError::NonFinite { step });
        }
        adam_step(&mut state, &mut params, &flat, config.lr)?;
        for (i, chunk) in params.chunks(d).enumerate() {
            list.set_row(i, chunk.to_vec());
        }
        last = loss;
        on_step(step, loss);
    }

    let embeddings = params
        .chunks(d)
        .map(normalize_to_gaussian_norm)
        .collect::<Result<Vec<_>, _>>()?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |t| t.as_secs());
    Ok(Namecon {
        keyword: keyword.to_string(),
        embeddings,
        meta: NameconMeta {
            initial_concept: initial.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" "),
            target: target.to_string(),
            seed: config.seed,
            steps: config.steps,
            final_loss: last,
            created,
            dim: d,
        },
    })
}

pub fn name_concept<S: AsRef<str>>(
    pipeline: &Pipeline,
    initial: &[S],
    target: &TargetSpec,
    keyword: &str,
    config: &NamingConfig,
) -> Result<Namecon, NamingError> {
    name_concept_with(pipeline, initial, target, keyword, config, |_, _| {})
}

/// Similarity of `list` decoded under `seed` to `target`.
pub fn similarity(pipeline: &Pipeline, list: &EmbeddingList, target: &TargetSpec, seed: u64) -> Result<f64, NamingError> {
    let image = pipeline.decode(list, seed)?;
    Ok(match target.resolve(pipeline)? {
        ResolvedTarget::Text(t) => pipeline.score_text(&image, &t)?,
        ResolvedTarget::Identity(v) => pipeline.score_identity(&image, &v)?,
    })
}

/// The initial concept's embeddings with the namecon's rows in its place.
pub fn namecon_list(pipeline: &Pipeline, namecon: &Namecon) -> Result<EmbeddingList, NamingError> {
    let base = pipeline.encode_text(&namecon.meta.initial_concept)?;
    let mut rows = namecon.embeddings.clone();
    rows.extend(base.rows()[namecon.k()..base.occupied()].iter().cloned());
    let slots = base.slots()[..rows.len()].to_vec();
    Ok(EmbeddingList::from_occupied(
        rows,
        slots,
        pipeline.pad_embedding(),
        pipeline.max_len(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let v = normalize_to_gaussian_norm(&[3.0, 4.0]).unwrap();
        let r2 = 2f64.sqrt();
        assert!((v[0] - 3.0 * r2 / 5.0).abs() < 1e-12);
        assert!((v[1] - 4.0 * r2 / 5.0).abs() < 1e-12);
        assert!((v[0] - 0.8485).abs() < 1e-4 && (v[1] - 1.1314).abs() < 1e-4);
        let u = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(normalize_to_gaussian_norm(&u).unwrap(), u.to_vec());
        assert_eq!(normalize_to_gaussian_norm(&[0.0; 3]), Err(NamingError::ZeroVector));
    }

    #[test]
    fn keywords() {
        assert!(validate_keyword("my_hawk").is_ok());
        assert!(validate_keyword("Lucy2").is_ok());
        for bad in ["", "my hawk", "a|b", "<x>", "tab\t", "é"] {
            assert!(validate_keyword(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn target_spec_round_trip() {
        for s in ["text:a yellow hawk", "identity:0.85,0.2,0.7,0.3"] {
            let t: TargetSpec = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        for bad in ["hawk", "text:", "identity:1,2,3,4", "identity:0.1,0.2", "colour:red"] {
            assert!(bad.parse::<TargetSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn step_seeds_follow_policy() {
        let mut c = NamingConfig {
            steps: 5,
            seed: 9,
            ..Default::default()
        };
        let fresh = c.step_seeds();
        assert_eq!(fresh.len(), 5);
        assert_eq!(fresh, c.step_seeds());
        assert!(fresh.windows(2).all(|w| w[0] != w[1]));
        c.noise = NoisePolicy::Fixed;
        assert_eq!(c.step_seeds(), vec![9; 5]);
    }

    #[test]
    fn config_validation() {
        let p = Pipeline::default();
        let t = TargetSpec::text("a yellow hawk");
        let c = NamingConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(
            name_concept(&p, &["bird"], &t, "my_hawk", &c),
            Err(NamingError::InvalidConfig(_))
        ));
        let c = NamingConfig::default();
        assert_eq!(
            name_concept::<&str>(&p, &[], &t, "my_hawk", &c),
            Err(NamingError::EmptyConcept)
        );
        assert!(matches!(
            name_concept(&p, &["bird"], &t, "my hawk", &c),
            Err(NamingError::InvalidKeyword(_))
        ));
        let bad = TargetSpec::Text(vec!["griffin".into()]);
        assert!(matches!(
            name_concept(&p, &["bird"], &bad, "x", &c),
            Err(NamingError::Pipeline(PipelineError::UnknownToken(_)))
        ));
        assert_eq!(NamingConfig::for_target(&TargetSpec::Identity(vec![0.5; 4])).lr, 2e-2);
    }

    #[test]
    fn loss_terms_recomputed_independently() {
        let p = Pipeline::default();
        let t = TargetSpec::text("a yellow hawk");
        let mut list = p.encode(&["bird"]).unwrap();
        let row: Vec<f64> = list.row(0).iter().enumerate().map(|(i, x)| x * (1.0 + 0.01 * i as f64)).collect();
        list.set_row(0, row.clone());
        let (loss, _) = naming_loss(&p, &list, 1, &t, 3, 0.05).unwrap();

        let img = p.decode(&list, 3).unwrap();
        let sim = p.score_text(&img, &p.text_target_from_text("a yellow hawk").unwrap()).unwrap();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = -sim + 0.05 * (norm - 32f64.sqrt()).powi(2);
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn penalty_vanishes_at_gaussian_norm() {
        let p = Pipeline::default();
        let t = TargetSpec::text("a yellow hawk");
        let mut list = p.encode(&["bird"]).unwrap();
        let row = normalize_to_gaussian_norm(list.row(0)).unwrap();
        list.set_row(0, row);
        let (with, _) = naming_loss(&p, &list, 1, &t, 0, 0.05).unwrap();
        let (without, _) = naming_loss(&p, &list, 1, &t, 0, 0.0).unwrap();
        assert!((with - without).abs() < 1e-12);
    }

    #[test]
    fn optimal_embedding_reaches_minus_one() {
        // A face whose prompt identity equals the target scores exactly 1.
        let p = Pipeline::default();
        let mut list = p.encode(&["woman"]).unwrap();
        let mut row = list.row(0).to_vec();
        let target = [0.9, 0.1, 0.8, 0.2];
        let center = p.attribute_center();
        row[crate::pipeline::attr::SPECIFICITY] = center + 0.5;
        for (j, t) in target.iter().enumerate() {
            row[crate::pipeline::attr::IDENTITY.start + j] = center + t - 0.5;
        }
        list.set_row(0, row);
        let (loss, _) = naming_loss(&p, &list, 1, &TargetSpec::Identity(target.to_vec()), 4, 0.0).unwrap();
        assert!((loss + 1.0).abs() < 1e-9, "{loss}");
    }
}
