//! Run configuration: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use elodin::kv::KvFile;
use elodin::naming::NoisePolicy;
use elodin::pipeline::{Pipeline, PipelineConfig, TokenTable};

use crate::error::CliError;

pub const VOCAB_ENV: &str = "ELODIN_VOCAB";

#[derive(Clone, Debug, Default)]
pub struct Config {
    pub pipeline: PipelineConfig,
    /// Alternative token table file.
    pub tokens: Option<PathBuf>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub noise: Option<NoisePolicy>,
    pub vocab: Option<PathBuf>,
}

impl Config {
    /// Recognized keys: `dim`, `max_len`, `mixing`, `height`, `width`,
    /// `sharpness`, `tokens`, `steps`, `lr`, `lambda`, `noise`, `vocab`.
    /// Relative paths resolve against the file's directory.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut kv = KvFile::parse(text)?;
        let mut c = Self::default();
        let p = &mut c.pipeline;
        p.dim = kv.take("dim")?.unwrap_or(p.dim);
        p.max_len = kv.take("max_len")?.unwrap_or(p.max_len);
        p.mixing = kv.take("mixing")?.unwrap_or(p.mixing);
        p.height = kv.take("height")?.unwrap_or(p.height);
        p.width = kv.take("width")?.unwrap_or(p.width);
        p.sharpness = kv.take("sharpness")?.unwrap_or(p.sharpness);
        c.tokens = kv.take_str("tokens").map(|s| base.join(s));
        c.steps = kv.take("steps")?;
        c.lr = kv.take("lr")?;
        c.lambda = kv.take("lambda")?;
        c.noise = kv.take("noise")?;
        c.vocab = kv.take_str("vocab").map(|s| base.join(s));
        kv.finish()?;
        c.pipeline.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn pipeline(&self) -> Result<Pipeline, CliError> {
        let table = match &self.tokens {
            Some(p) => TokenTable::load(p)?,
            None => TokenTable::default(),
        };
        Ok(Pipeline::new(self.pipeline.clone(), table)?)
    }

    /// Flag, then `ELODIN_VOCAB`, then the config file.
    pub fn vocab_path(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(VOCAB_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .or_else(|| self.vocab.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let text = "dim = 24\nmax_len = 10\nmixing = 0\nheight = 16\nwidth = 24\nsharpness = 10\n\
                    tokens = t.txt\nsteps = 50\nlr = 0.1\nlambda = 0\nnoise = fixed\nvocab = v.json\n";
        let c = Config::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.pipeline.dim, 24);
        assert_eq!(c.pipeline.width, 24);
        assert_eq!(c.tokens.as_deref(), Some(Path::new("/cfg/t.txt")));
        assert_eq!(c.steps, Some(50));
        assert_eq!(c.noise, Some(NoisePolicy::Fixed));
        assert_eq!(c.vocab.as_deref(), Some(Path::new("/cfg/v.json")));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Config::parse("colour = red", Path::new(".")).is_err());
        assert!(Config::parse("dim = 8", Path::new(".")).is_err());
        assert!(Config::parse("noise = sometimes", Path::new(".")).is_err());
        assert!(Config::parse("height = 12", Path::new(".")).is_err());
    }
}
