//! Control-vs-proposal experiments: paired-seed generation, pairwise
//! coherence, contamination, and CSV reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::cosine;
use crate::image::Image;
use crate::kv::{KvError, KvFile};
use crate::naming::{name_concept, NamingConfig, NamingError, TargetSpec};
use crate::pipeline::{identity_similarity, Pipeline, PipelineError, Rendering, TEXT_FEATURES};
use crate::prompt::{generate_full, PromptError};
use crate::vocabulary::{VocabError, Vocabulary};

/// Identity similarity above which two faces count as the same person.
pub const SAME_IDENTITY_THRESHOLD: f64 = 0.45;
/// Pixels with object mask below this belong to the surroundings.
pub const SURROUNDINGS_MASK: f64 = 0.01;

pub const BIRD_SPEC: &str = include_str!("../../../experiments/bird.spec");
pub const FACE_SPEC: &str = include_str!("../../../experiments/face.spec");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("contamination region is empty")]
    EmptyRegion,
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{group} image {index} (seed {seed}): {source}")]
    Generation {
        group: Group,
        index: usize,
        seed: u64,
        source: PromptError,
    },
    #[error("naming {keyword:?}: {source}")]
    Naming { keyword: String, source: NamingError },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Control,
    Proposal,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Control => "control",
            Self::Proposal => "proposal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Text,
    Identity,
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "identity" => Ok(Self::Identity),
            _ => Err(format!("unknown scorer {s:?} (text, identity)")),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Identity => "identity",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpretation {
    SameIdentity,
    DifferentIdentity,
}

impl fmt::Display for Interpretation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SameIdentity => "same-identity",
            Self::DifferentIdentity => "different-identity",
        })
    }
}

/// Strictly above the threshold reads as the same person.
pub fn interpret_similarity(mean: f64) -> Interpretation {
    if mean > SAME_IDENTITY_THRESHOLD {
        Interpretation::SameIdentity
    } else {
        Interpretation::DifferentIdentity
    }
}

/// How to build a namecon the proposal needs when the vocabulary lacks it.
#[derive(Clone, Debug, PartialEq)]
pub struct NameconRecipe {
    pub keyword: String,
    pub initial: String,
    pub target: TargetSpec,
    pub seed: u64,
    pub steps: usize,
}

impl NameconRecipe {
    pub fn config(&self) -> NamingConfig {
        NamingConfig {
            seed: self.seed,
            steps: self.steps,
            ..NamingConfig::for_target(&self.target)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub control: String,
    pub proposal: String,
    /// Recorded in the report only.
    pub negative: String,
    pub n: usize,
    pub base_seed: u64,
    pub scorer: ScorerKind,
    /// Colour the surroundings should have; used with the text scorer.
    pub contamination_target: [f64; 3],
    pub recipe: Option<NameconRecipe>,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [r, g, b] if v.iter().all(|x| (0.0..=1.0).contains(x)) => Ok([*r, *g, *b]),
        _ => Err(format!("expected three values in [0, 1], got {s:?}")),
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut kv = KvFile::parse(text)?;
        let control = kv.require_str("control")?;
        let proposal = kv.require_str("proposal")?;
        let negative = kv.take_str("negative").unwrap_or_default();
        let n = kv.take("n")?.unwrap_or(100);
        let base_seed = kv.take("base_seed")?.unwrap_or(0);
        let scorer = kv.take("scorer")?.unwrap_or(ScorerKind::Text);
        let contamination_target = match kv.take_str("contamination_target") {
            Some(s) => parse_rgb(&s).map_err(EvalError::InvalidSpec)?,
            None => [1.0; 3],
        };
        let recipe = if kv.has_prefix("name.") {
            let target_text = kv.require_str("name.target")?;
            let target = target_text
                .parse()
                .map_err(|e: NamingError| EvalError::InvalidSpec(e.to_string()))?;
            Some(NameconRecipe {
                keyword: kv.require_str("name.keyword")?,
                initial: kv.require_str("name.initial")?,
                target,
                seed: kv.take("name.seed")?.unwrap_or(0),
                steps: kv.take("name.steps")?.unwrap_or(200),
            })
        } else {
            None
        };
        kv.finish()?;
        let spec = Self {
            control,
            proposal,
            negative,
            n,
            base_seed,
            scorer,
            contamination_target,
            recipe,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n < 2 {
            return Err(EvalError::TooFewImages(self.n));
        }
        if self.control.trim().is_empty() || self.proposal.trim().is_empty() {
            return Err(EvalError::InvalidSpec("prompts must be non-empty".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n as u64).map(|i| self.base_seed + i).collect()
    }
}

/// Mean and population standard deviation of `sim` over all unordered pairs.
pub fn pairwise_coherence<T>(items: &[T], sim: impl Fn(&T, &T) -> f64) -> Result<(f64, f64), EvalError> {
    if items.len() < 2 {
        return Err(EvalError::TooFewImages(items.len()));
    }
    let values: Vec<f64> = (0..items.len())
        .flat_map(|i| (i + 1..items.len()).map(move |j| (i, j)))
        .map(|(i, j)| sim(&items[i], &items[j]))
        .collect();
    Ok(mean_std(&values))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean Euclidean RGB distance between the pixels in `region` and `target`.
pub fn contamination(image: &Image, region: &[bool], target: [f64; 3]) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        let p = image.pixel(i);
        sum += p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Contamination of the surroundings of a rendering.
pub fn surroundings_contamination(r: &Rendering, target: [f64; 3]) -> Result<f64, EvalError> {
    contamination(&r.image, &r.background_region(SURROUNDINGS_MASK), target)
}

fn text_image_similarity(a: &[f64; TEXT_FEATURES], b: &[f64; TEXT_FEATURES]) -> f64 {
    let c = |v: &[f64; TEXT_FEATURES]| v.iter().map(|x| x - 0.5).collect::<Vec<_>>();
    cosine(&c(a), &c(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub prompt: String,
    pub coherence_mean: f64,
    pub coherence_std: f64,
    /// Per-image contamination, text scorer only.
    pub contamination: Option<Vec<f64>>,
}

impl GroupReport {
    pub fn contamination_stats(&self) -> Option<(f64, f64)> {
        self.contamination.as_deref().map(mean_std)
    }

    pub fn interpretation(&self) -> Interpretation {
        interpret_similarity(self.coherence_mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub spec: ExperimentSpec,
    pub seeds: Vec<u64>,
    pub pairs: usize,
    pub control: GroupReport,
    pub proposal: GroupReport,
}

impl EvalReport {
    /// Fraction of seeds where the proposal is strictly less contaminated.
    pub fn proposal_lower_fraction(&self) -> Option<f64> {
        let c = self.control.contamination.as_ref()?;
        let p = self.proposal.contamination.as_ref()?;
        let lower = c.iter().zip(p).filter(|(c, p)| p < c).count();
        Some(lower as f64 / c.len() as f64)
    }

    /// CSV with columns `group,metric,value,n,seed_base`.
    pub fn to_csv(&self) -> String {
        let (n, base) = (self.spec.n, self.spec.base_seed);
        let mut out = String::from("group,metric,value,n,seed_base\n");
        let mut row = |g: &str, m: &str, v: f64| out.push_str(&format!("{g},{m},{v},{n},{base}\n"));
        for (name, g) in [("control", &self.control), ("proposal", &self.proposal)] {
            row(name, "coherence_mean", g.coherence_mean);
            row(name, "coherence_std", g.coherence_std);
            row(name, "pairs", self.pairs as f64);
            if self.spec.scorer == ScorerKind::Identity {
                let same = g.interpretation() == Interpretation::SameIdentity;
                row(name, "same_identity", if same { 1.0 } else { 0.0 });
            }
            if let Some((m, s)) = g.contamination_stats() {
                row(name, "contamination_mean", m);
                row(name, "contamination_std", s);
            }
        }
        if let Some(f) = self.proposal_lower_fraction() {
            row("paired", "proposal_lower_fraction", f);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, self.to_csv()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} images per group, seeds {}..{}, {} pairs, scorer {}",
            self.spec.n,
            self.spec.base_seed,
            self.spec.base_seed + self.spec.n as u64 - 1,
            self.pairs,
            self.spec.scorer
        )?;
        if !self.spec.negative.is_empty() {
            writeln!(f, "negative prompt (recorded only): {}", self.spec.negative)?;
        }
        for (name, g) in [("control", &self.control), ("proposal", &self.proposal)] {
            write!(
                f,
                "{name:<9} {:.4} +/- {:.4}  {:?}",
                g.coherence_mean, g.coherence_std, g.prompt
            )?;
            if self.spec.scorer == ScorerKind::Identity {
                write!(f, "  [{}]", g.interpretation())?;
            }
            if let Some((m, s)) = g.contamination_stats() {
                write!(f, "  contamination {m:.4} +/- {s:.4}")?;
            }
            writeln!(f)?;
        }
        if let Some(fr) = self.proposal_lower_fraction() {
            writeln!(f, "proposal less contaminated in {:.1}% of seed pairs", 100.0 * fr)?;
        }
        Ok(())
    }
}

/// Adds the experiment's namecon to `vocab` if the proposal needs it and it is
/// missing. Returns whether anything was added.
pub fn ensure_namecon(pipeline: &Pipeline, vocab: &mut Vocabulary, spec: &ExperimentSpec) -> Result<bool, EvalError> {
    let Some(r) = &spec.recipe else {
        return Ok(false);
    };
    if vocab.get(&r.keyword).is_some() {
        return Ok(false);
    }
    let initial = crate::pipeline::tokenize(&r.initial);
    let namecon = name_concept(pipeline, &initial, &r.target, &r.keyword, &r.config()).map_err(|source| {
        EvalError::Naming {
            keyword: r.keyword.clone(),
            source,
        }
    })?;
    vocab.insert(namecon, false)?;
    Ok(true)
}

fn render_group(
    pipeline: &Pipeline,
    vocab: &Vocabulary,
    prompt: &str,
    group: Group,
    seeds: &[u64],
) -> Result<Vec<Rendering>, EvalError> {
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| generate_full(pipeline, prompt, vocab, seed))
        .collect();
    results
        .into_iter()
        .zip(seeds)
        .enumerate()
        .map(|(index, (r, &seed))| {
            r.map_err(|source| EvalError::Generation {
                group,
                index,
                seed,
                source,
            })
        })
        .collect()
}

fn group_report(
    pipeline: &Pipeline,
    spec: &ExperimentSpec,
    prompt: &str,
    images: &[Rendering],
) -> Result<GroupReport, EvalError> {
    let (coherence_mean, coherence_std) = match spec.scorer {
        ScorerKind::Identity => {
            let ids = images
                .iter()
                .map(|r| pipeline.extract_identity(&r.image))
                .collect::<Result<Vec<_>, _>>()?;
            pairwise_coherence(&ids, |a, b| identity_similarity(a, b))?
        }
        ScorerKind::Text => {
            let feats = images
                .iter()
                .map(|r| pipeline.text_features(&r.image))
                .collect::<Result<Vec<_>, _>>()?;
            pairwise_coherence(&feats, text_image_similarity)?
        }
    };
    let contamination = match spec.scorer {
        ScorerKind::Text => Some(
            images
                .iter()
                .map(|r| surroundings_contamination(r, spec.contamination_target))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        ScorerKind::Identity => None,
    };
    Ok(GroupReport {
        prompt: prompt.to_string(),
        coherence_mean,
        coherence_std,
        contamination,
    })
}

/// Generates both groups with shared seeds `base_seed + i` and scores them.
/// With `dump`, every image is written there as PPM.
pub fn run_experiment(
    pipeline: &Pipeline,
    vocab: &Vocabulary,
    spec: &ExperimentSpec,
    dump: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    let seeds = spec.seeds();
    let control = render_group(pipeline, vocab, &spec.control, Group::Control, &seeds)?;
    let proposal = render_group(pipeline, vocab, &spec.proposal, Group::Proposal, &seeds)?;
    if let Some(dir) = dump {
        dump_images(dir, &seeds, &control, &proposal)?;
    }
    Ok(EvalReport {
        spec: spec.clone(),
        pairs: spec.n * (spec.n - 1) / 2,
        control: group_report(pipeline, spec, &spec.control, &control)?,
        proposal: group_report(pipeline, spec, &spec.proposal, &proposal)?,
        seeds,
    })
}

fn dump_images(dir: &Path, seeds: &[u64], control: &[Rendering], proposal: &[Rendering]) -> Result<(), EvalError> {
    let io = |p: &Path, e: std::io::Error| EvalError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, group) in [("control", control), ("proposal", proposal)] {
        for (seed, r) in seeds.iter().zip(group) {
            let path: PathBuf = dir.join(format!("{name}_{seed:04}.ppm"));
            r.image.save_ppm(&path).map_err(|e| io(&path, e))?;
        }
    }
    Ok(())
}
