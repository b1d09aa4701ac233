use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use elodin::eval::{ensure_namecon, run_experiment, ExperimentSpec};
use elodin::image::Image;
use elodin::naming::{name_concept_with, NamingConfig, NoisePolicy, TargetSpec};
use elodin::pipeline::Pipeline;
use elodin::prompt::{embed, parse};
use elodin::vocabulary::{MergePolicy, Vocabulary};

mod config;
mod error;
mod selftest;

use config::Config;
use error::{positioned, CliError};

#[derive(Parser, Debug)]
#[command(name = "elodin", version, about = "Name visual concepts and reuse them in prompts")]
struct Cli {
    /// key = value file with pipeline and naming defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize a namecon for a keyword and store it in a vocabulary file.
    Name(NameArgs),
    /// Render images for a prompt that may reference namecons.
    Generate(GenerateArgs),
    /// Run a control-versus-proposal experiment and report coherence.
    Eval(EvalArgs),
    /// Inspect or combine vocabulary files.
    Vocab {
        #[command(subcommand)]
        action: VocabAction,
    },
    /// Gradient and oracle checks on the configured pipeline.
    Selftest,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("goal").required(true).args(["target", "target_identity"]))]
struct NameArgs {
    /// Initial concept, e.g. "bird".
    #[arg(long)]
    initial: String,
    /// Text description to match.
    #[arg(long)]
    target: Option<String>,
    /// Identity code "a,b,c,d" or a PPM image to extract it from.
    #[arg(long, value_name = "CODE|IMAGE")]
    target_identity: Option<String>,
    #[arg(long)]
    keyword: String,
    /// Vocabulary file; falls back to ELODIN_VOCAB.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    /// Defaults to 4e-2 for text targets and 2e-2 for identity targets.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the norm penalty.
    #[arg(long)]
    lambda: Option<f64>,
    /// "fresh" noise every step or the "fixed" seed.
    #[arg(long)]
    noise: Option<NoisePolicy>,
    /// Replace an existing namecon with the same keyword.
    #[arg(long)]
    overwrite: bool,
    /// Print the loss every N steps.
    #[arg(long, value_name = "N")]
    log_every: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    /// Vocabulary file; falls back to ELODIN_VOCAB.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// First seed; image i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// Images per group, overriding the experiment file.
    #[arg(long)]
    n: Option<usize>,
    /// Vocabulary file; namecons the experiment file can build are added and saved.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// CSV report path; printed to stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Directory for every generated image.
    #[arg(long, value_name = "DIR")]
    dump: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum VocabAction {
    /// Keywords with their length and target.
    List {
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
    },
    /// Metadata and row norms of one namecon.
    Show {
        keyword: String,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Also print the embedding rows.
        #[arg(long)]
        rows: bool,
    },
    /// Union of two vocabularies.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// keep-a, keep-b or fail.
        #[arg(long, default_value = "fail")]
        policy: MergePolicy,
    },
}

fn require_vocab(config: &Config, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    config
        .vocab_path(flag)
        .ok_or_else(|| CliError::Validation(format!("no vocabulary: pass --vocab or set {}", config::VOCAB_ENV)))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    Vocabulary::load(path).map_err(|e| CliError::from(e).context(path))
}

fn check_dim(vocab: &Vocabulary, pipeline: &Pipeline) -> Result<(), CliError> {
    if vocab.dim() != pipeline.dim() {
        return Err(CliError::Validation(format!(
            "vocabulary dimension {} does not match pipeline dimension {}",
            vocab.dim(),
            pipeline.dim()
        )));
    }
    Ok(())
}

fn parse_identity(pipeline: &Pipeline, raw: &str) -> Result<TargetSpec, CliError> {
    if raw.contains(',') {
        return Ok(format!("identity:{raw}").parse::<TargetSpec>()?);
    }
    let image = Image::load_ppm(Path::new(raw)).map_err(|e| CliError::Validation(format!("{raw}: {e}")))?;
    Ok(TargetSpec::identity_from_image(pipeline, &image)?)
}

fn cmd_name(config: &Config, args: NameArgs) -> Result<(), CliError> {
    let pipeline = config.pipeline()?;
    let target = match (&args.target, &args.target_identity) {
        (Some(t), _) => TargetSpec::text(t),
        (None, Some(raw)) => parse_identity(&pipeline, raw)?,
        (None, None) => unreachable!("clap requires one target"),
    };
    let path = require_vocab(config, args.vocab.as_deref())?;
    let mut vocab = if path.exists() {
        load_vocab(&path)?
    } else {
        Vocabulary::new(pipeline.dim())
    };
    check_dim(&vocab, &pipeline)?;
    elodin::naming::validate_keyword(&args.keyword)?;
    if vocab.get(&args.keyword).is_some() && !args.overwrite {
        return Err(CliError::Validation(format!(
            "keyword {:?} already exists in {} (use --overwrite to replace it)",
            args.keyword,
            path.display()
        )));
    }

    let defaults = NamingConfig::for_target(&target);
    let naming = NamingConfig {
        seed: args.seed,
        steps: args.steps.or(config.steps).unwrap_or(defaults.steps),
        lr: args.lr.or(config.lr).unwrap_or(defaults.lr),
        lambda: args.lambda.or(config.lambda).unwrap_or(defaults.lambda),
        noise: args.noise.or(config.noise).unwrap_or(defaults.noise),
        ..defaults
    };
    let initial = elodin::pipeline::tokenize(&args.initial);
    let every = args.log_every.unwrap_or(0);
    let namecon = name_concept_with(&pipeline, &initial, &target, &args.keyword, &naming, |step, loss| {
        if every > 0 && (step + 1) % every == 0 {
            eprintln!("step {:>5}  loss {loss:.6}", step + 1);
        }
    })?;

    let norms: Vec<String> = namecon
        .embeddings
        .iter()
        .map(|r| format!("{:.6}", r.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    println!(
        "named {} from {:?} ({} rows, {} steps, lr {}): final loss {:.6}, row norms {}",
        namecon.keyword,
        namecon.meta.initial_concept,
        namecon.k(),
        naming.steps,
        naming.lr,
        namecon.meta.final_loss,
        norms.join(", ")
    );
    vocab.insert(namecon, args.overwrite)?;
    vocab.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_generate(config: &Config, args: GenerateArgs) -> Result<(), CliError> {
    let ast = parse(&args.prompt).map_err(|e| positioned(&args.prompt, &e))?;
    if args.count == 0 {
        return Err(CliError::Validation("--count must be at least 1".into()));
    }
    let pipeline = config.pipeline()?;
    let vocab = match config.vocab_path(args.vocab.as_deref()) {
        Some(p) => load_vocab(&p)?,
        None if ast.references().next().is_some() => {
            return Err(CliError::Validation(format!(
                "prompt references namecons but no vocabulary was given (--vocab or {})",
                config::VOCAB_ENV
            )))
        }
        None => Vocabulary::new(pipeline.dim()),
    };
    check_dim(&vocab, &pipeline)?;
    let list = embed(&pipeline, &args.prompt, &vocab)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;

    let seeds: Vec<u64> = (0..args.count).map(|i| args.seed + i).collect();
    let written = seeds
        .par_iter()
        .map(|&seed| {
            let image = pipeline.decode(&list, seed)?;
            let path = args.out.join(format!("seed_{seed:04}.ppm"));
            image
                .save_ppm(&path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_eval(config: &Config, args: EvalArgs) -> Result<(), CliError> {
    let mut spec = ExperimentSpec::load(&args.spec).map_err(|e| CliError::Validation(e.to_string()).context(&args.spec))?;
    if let Some(n) = args.n {
        spec.n = n;
    }
    spec.validate()?;
    let pipeline = config.pipeline()?;
    let path = config.vocab_path(args.vocab.as_deref());
    let mut vocab = match &path {
        Some(p) if p.exists() => load_vocab(p)?,
        _ => Vocabulary::new(pipeline.dim()),
    };
    check_dim(&vocab, &pipeline)?;
    if ensure_namecon(&pipeline, &mut vocab, &spec)? {
        if let (Some(p), Some(r)) = (&path, &spec.recipe) {
            vocab.save(p)?;
            eprintln!("named {} from the experiment recipe and saved it to {}", r.keyword, p.display());
        }
    }
    if let Some(dir) = &args.dump {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let report = run_experiment(&pipeline, &vocab, &spec, args.dump.as_deref())?;
    match &args.out {
        Some(out) => {
            report.write_csv(out)?;
            print!("{report}");
            println!("wrote {}", out.display());
        }
        None => {
            eprint!("{report}");
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn cmd_vocab(config: &Config, action: VocabAction) -> Result<(), CliError> {
    match action {
        VocabAction::List { vocab } => {
            let v = load_vocab(&require_vocab(config, vocab.as_deref())?)?;
            println!("{} namecons, dimension {}", v.len(), v.dim());
            for n in v.iter() {
                println!("{:<20} k={}  {:<24} {}", n.keyword, n.k(), n.meta.initial_concept, n.meta.target);
            }
        }
        VocabAction::Show { keyword, vocab, rows } => {
            let v = load_vocab(&require_vocab(config, vocab.as_deref())?)?;
            let n = v
                .get(&keyword)
                .ok_or_else(|| CliError::Validation(format!("keyword {keyword:?} not found")))?;
            let m = &n.meta;
            println!("keyword     {}", n.keyword);
            println!("initial     {}", m.initial_concept);
            println!("target      {}", m.target);
            println!("seed        {}", m.seed);
            println!("steps       {}", m.steps);
            println!("final_loss  {}", m.final_loss);
            println!("created     {}", m.created);
            println!("dim         {}", m.dim);
            for (i, r) in n.embeddings.iter().enumerate() {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                println!("row {i}       norm {norm:.9}");
                if rows {
                    let vals: Vec<String> = r.iter().map(|x| format!("{x:.6}")).collect();
                    println!("  [{}]", vals.join(", "));
                }
            }
        }
        VocabAction::Merge { a, b, out, policy } => {
            let (va, vb) = (load_vocab(&a)?, load_vocab(&b)?);
            let merged = Vocabulary::merge(&va, &vb, policy)?;
            merged.save(&out)?;
            println!("{} namecons written to {}", merged.len(), out.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Name(args) => cmd_name(&config, args),
        Command::Generate(args) => cmd_generate(&config, args),
        Command::Eval(args) => cmd_eval(&config, args),
        Command::Vocab { action } => cmd_vocab(&config, action),
        Command::Selftest => {
            let failed = selftest::run(&config.pipeline()?);
            if failed == 0 {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("{failed} self-checks failed")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
