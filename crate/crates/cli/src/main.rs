use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcs_sql::eval::render_ablation;
use mcs_sql::llm::{cache_export, cache_import, cache_prune, cache_stats, Gateway};
use mcs_sql::pipeline::{ablation_run, ConfigDelta, Pipeline, SelectOptions, Stage};
use mcs_sql::{Error, RunConfig};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "mcs-sql", about = "Multi-prompt text-to-SQL runs over Spider/BIRD-style benchmarks")]
struct Cli {
    /// Log filter, e.g. `info` or `mcs_sql=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run link, generate, select and eval; resumes an existing run dir.
    Run(Box<RunArgs>),
    /// Run exactly one stage inside an existing run directory.
    Stage(StageArgs),
    /// Inspect or move the on-disk response cache.
    Cache(CacheArgs),
    /// Run one configuration per named override set and compare EX.
    Ablate(AblateArgs),
    /// Print version information.
    Version,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long = "p-t")]
    p_t: Option<usize>,
    #[arg(long = "p-c")]
    p_c: Option<usize>,
    #[arg(long = "p-q")]
    p_q: Option<usize>,
    /// Samples per prompt.
    #[arg(long)]
    n: Option<usize>,
    /// Few-shot examples per prompt.
    #[arg(long)]
    k: Option<usize>,
    /// Confidence threshold for candidate filtering.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    exec_timeout_ms: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["live", "replay", "strict_replay"])]
    backend: Option<String>,
    #[arg(long, value_parser = ["train", "dev", "test"])]
    split: Option<String>,
    /// Any other config key, as `key=value` with a JSON value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn to_map(&self) -> Result<Map<String, Value>, Error> {
        let mut map = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        put("p_t", self.p_t.map(Value::from));
        put("p_c", self.p_c.map(Value::from));
        put("p_q", self.p_q.map(Value::from));
        put("n", self.n.map(Value::from));
        put("k", self.k.map(Value::from));
        put("threshold", self.threshold.map(Value::from));
        put("temperature", self.temperature.map(Value::from));
        put("exec_timeout_ms", self.exec_timeout_ms.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("backend", self.backend.clone().map(Value::from));
        put("eval_split", self.split.clone().map(Value::from));
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.trim().to_string(), value);
        }
        Ok(map)
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; relative paths inside resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict the run to these example ids.
    #[arg(long, value_delimiter = ',')]
    examples: Vec<String>,
    /// Directory for the new run (default: timestamped under runs_dir).
    #[arg(long, conflicts_with = "resume")]
    run_dir: Option<PathBuf>,
    /// Continue the run in this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageName {
    Link,
    Generate,
    Select,
    Eval,
}

impl From<StageName> for Stage {
    fn from(s: StageName) -> Stage {
        match s {
            StageName::Link => Stage::Link,
            StageName::Generate => Stage::Generate,
            StageName::Select => Stage::Select,
            StageName::Eval => Stage::Eval,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    stage: StageName,
    #[arg(long)]
    run_dir: PathBuf,
    /// select: threshold for this pass (needs --into when it differs).
    #[arg(long)]
    threshold: Option<f64>,
    /// select: write into variants/<NAME> instead of the run itself.
    #[arg(long, value_name = "NAME")]
    into: Option<String>,
    /// eval: score variants/<NAME> instead of the run itself.
    #[arg(long, value_name = "NAME")]
    variant: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheAction {
    Stats,
    Prune,
    Export,
    Import,
}

#[derive(Args)]
struct CacheArgs {
    action: CacheAction,
    #[arg(long)]
    dir: PathBuf,
    /// prune: stage tag whose entries are removed (`embed` for embeddings).
    #[arg(long)]
    tag: Option<String>,
    /// export/import: bundle directory.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON list of `{"name": ..., "overrides": {...}}`.
    #[arg(long)]
    deltas: PathBuf,
    /// Parent directory for the per-configuration runs.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Error> {
    let mut config = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&overrides.to_map()?)?;
    config.validate()?;
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let filter = (!args.examples.is_empty()).then_some(args.examples.as_slice());
    let mut pipeline = match &args.resume {
        Some(dir) => {
            let expected = match &args.config {
                Some(_) => Some(load_config(args.config.as_deref(), &args.overrides)?),
                None => None,
            };
            Pipeline::open(dir, None, expected.as_ref())?
        }
        None => {
            let config = load_config(args.config.as_deref(), &args.overrides)?;
            Pipeline::create(config, None, filter, args.run_dir.as_deref())?
        }
    };
    eprintln!("run directory: {}", pipeline.run_dir().display());
    let report = pipeline.run_all()?;
    print!("{}", report.to_text());
    pipeline.check_budget(&report)
}

fn cmd_stage(args: StageArgs) -> Result<(), Error> {
    let mut pipeline = Pipeline::open(&args.run_dir, None, None)?;
    match Stage::from(args.stage) {
        Stage::Select => pipeline.select(&SelectOptions {
            threshold: args.threshold,
            into: args.into,
        }),
        Stage::Eval => {
            let report = pipeline.eval(args.variant.as_deref())?;
            print!("{}", report.to_text());
            pipeline.check_budget(&report)
        }
        other => pipeline.run_stage(other),
    }
}

fn cmd_cache(args: CacheArgs) -> Result<(), Error> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e: std::io::Error| Error::Io { path, source: e }
    };
    let need_dir = |dir: &Path| {
        if dir.is_dir() {
            Ok(())
        } else {
            Err(Error::Config(format!("cache directory {} does not exist", dir.display())))
        }
    };
    let bundle = || {
        args.bundle
            .clone()
            .ok_or_else(|| Error::Config("--bundle is required".into()))
    };
    match args.action {
        CacheAction::Stats => {
            need_dir(&args.dir)?;
            let stats = cache_stats(&args.dir).map_err(io(&args.dir))?;
            println!("{:<14}{:>9}{:>12}", "tag", "entries", "bytes");
            for (tag, s) in &stats.completions {
                println!("{tag:<14}{:>9}{:>12}", s.entries, s.bytes);
            }
            println!("{:<14}{:>9}{:>12}", "embed", stats.embeddings.entries, stats.embeddings.bytes);
            println!("{:<14}{:>9}", "total", stats.total_entries());
            for path in &stats.corrupt {
                eprintln!("corrupt entry skipped: {path}");
            }
        }
        CacheAction::Prune => {
            need_dir(&args.dir)?;
            let tag = args.tag.as_deref().ok_or_else(|| Error::Config("--tag is required".into()))?;
            let removed = cache_prune(&args.dir, tag).map_err(io(&args.dir))?;
            println!("removed {removed} entries tagged `{tag}`");
        }
        CacheAction::Export => {
            need_dir(&args.dir)?;
            let bundle = bundle()?;
            let n = cache_export(&args.dir, &bundle).map_err(io(&bundle))?;
            println!("exported {n} entries to {}", bundle.display());
        }
        CacheAction::Import => {
            let bundle = bundle()?;
            need_dir(&bundle)?;
            let n = cache_import(&bundle, &args.dir).map_err(io(&args.dir))?;
            println!("imported {n} entries into {}", args.dir.display());
        }
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let base = load_config(args.config.as_deref(), &Overrides::default())?;
    let text = std::fs::read_to_string(&args.deltas).map_err(|e| Error::Io {
        path: args.deltas.clone(),
        source: e,
    })?;
    let deltas: Vec<ConfigDelta> = serde_json::from_str(&text)?;
    let rows = ablation_run(&base, &deltas, &args.out, &|c| Gateway::from_config(c));
    print!("{}", render_ablation(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::Stage(args) => cmd_stage(args),
        Command::Cache(args) => cmd_cache(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Version => {
            println!("mcs-sql {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
