use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use transfir::checkpoint;
use transfir::data::{
    chronological_split, load_dataset_dir, load_embeddings, write_quadruples, Split, TemporalKG, DEFAULT_SPLIT_RATIOS,
    EMBEDDINGS_FILE,
};
use transfir::eval::{
    collapse_report, emergence_stats, emit_projection, evaluate_modes, EvalMode, EvalOptions, QueryMode, SidePolicy,
};
use transfir::model::{Dataset, Hyperparams, Model};
use transfir::numerics::Adam;
use transfir::synth::{generate, oracle_best_mrr, random_guess_mrr, SynthSpec};
use transfir::trainer::fit;
use transfir::Error;

const CHECKPOINT_FILE: &str = "checkpoint.tfir";
const LOG_FILE: &str = "train.log";

/// Writes to stdout, exiting quietly if the reader has gone away.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = write!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        out!($($arg)*);
        out!("\n");
    }};
}

#[derive(Parser)]
#[command(name = "transfir", version, about = "Temporal knowledge graph reasoning for emerging entities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a dataset directory.
    Ingest(IngestArgs),
    /// Write train/valid/test files for a chronological split.
    Split(SplitArgs),
    /// Train a model and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Rank test (or validation) queries with a trained checkpoint.
    Eval(EvalArgs),
    /// Collapse ratio of emerging versus known entities and a 2-D projection.
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic dataset with planted type patterns.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Kv,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with vocabularies and quadruple files.
    #[arg(long)]
    data: PathBuf,
    /// Train/valid/test ratios, comma separated.
    #[arg(long, value_parser = parse_ratios)]
    split: Option<[f64; 3]>,
}

impl DataArgs {
    fn ratios(&self) -> [f64; 3] {
        self.split.unwrap_or(DEFAULT_SPLIT_RATIOS)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelInputs {
    #[command(flatten)]
    data: DataArgs,
    /// Embedding file; defaults to the one inside the data directory.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl ModelInputs {
    fn embeddings_path(&self) -> PathBuf {
        self.embeddings.clone().unwrap_or_else(|| self.data.data.join(EMBEDDINGS_FILE))
    }
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Profile {
    /// K=50, d=768.
    #[default]
    Full,
    /// K=8, d=32.
    Test,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Line-oriented `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    profile: Profile,
    /// Output directory for the checkpoint and the epoch log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    chain_len: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Any hyperparameter as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for validation ranking.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoTransfer,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum RangeArg {
    Valid,
    #[default]
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated subset of vanilla, emerging, unknown.
    #[arg(long, default_value = "vanilla,emerging,unknown")]
    modes: String,
    /// Which side of a query must be the new entity.
    #[arg(long, default_value = "query")]
    policy: String,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    #[arg(long, value_enum, default_value_t)]
    range: RangeArg,
    /// Also write the key=value report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    /// Defaults to the available cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write `entity_id label x y` rows.
    #[arg(long, default_value = "projection.tsv")]
    projection: PathBuf,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().types)]
    types: usize,
    #[arg(long, default_value_t = SynthSpec::default().entities_per_type)]
    entities_per_type: usize,
    #[arg(long, default_value_t = SynthSpec::default().relations)]
    relations: usize,
    #[arg(long, default_value_t = SynthSpec::default().timestamps)]
    timestamps: usize,
    #[arg(long, default_value_t = SynthSpec::default().emergence)]
    emergence: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    noise: f64,
    #[arg(long, default_value_t = SynthSpec::default().answers_per_pattern)]
    answers_per_pattern: usize,
    #[arg(long, default_value_t = SynthSpec::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().jitter)]
    jitter: f64,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|v| format!("expected three ratios, got {}", v.len()))
}

/// Ordered `key value` pairs printed as aligned text or `key=value` lines.
struct Summary(Vec<(String, String)>);

impl Summary {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn add(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    fn render(&self, format: Format) -> String {
        let mut out = String::new();
        let width = self.0.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.0 {
            let _ = match format {
                Format::Kv => writeln!(out, "{k}={v}"),
                Format::Text => writeln!(out, "{k:<width$}  {v}"),
            };
        }
        out
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_graph(args: &DataArgs) -> transfir::Result<(TemporalKG, Split)> {
    let g = load_dataset_dir(&args.data)?;
    let split = chronological_split(&g, args.ratios())?;
    Ok((g, split))
}

fn load_dataset(inputs: &ModelInputs) -> transfir::Result<Dataset> {
    let (g, _) = load_graph(&inputs.data)?;
    let emb = load_embeddings(&inputs.embeddings_path(), g.num_entities())?;
    Dataset::new(&g, emb, inputs.data.ratios())
}

fn ingest(args: &IngestArgs) -> transfir::Result<()> {
    let (g, split) = load_graph(&args.data)?;
    let stats = emergence_stats(&g, &split);
    let mut s = Summary::new();
    s.add("entities", g.num_entities());
    s.add("relations", g.num_base_relations());
    s.add("timestamps", g.num_timestamps());
    s.add("facts", g.num_facts());
    s.add("train", format!("{}..{}", split.train.start, split.train.end));
    s.add("valid", format!("{}..{}", split.valid.start, split.valid.end));
    s.add("test", format!("{}..{}", split.test.start, split.test.end));
    s.add("observed_entities", stats.observed);
    s.add("emerging_entities", stats.emerging);
    s.add("emerging_fraction", stats.emerging_fraction);
    out!("{}", s.render(args.format));
    Ok(())
}

fn split_cmd(args: &SplitArgs) -> transfir::Result<()> {
    let (g, split) = load_graph(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    g.vocab().write(&args.out)?;
    for (name, range) in [("train.txt", &split.train), ("valid.txt", &split.valid), ("test.txt", &split.test)] {
        let part = TemporalKG::new(
            g.vocab().clone(),
            g.facts().filter(|q| range.contains(&q.timestamp)).copied(),
        )?;
        write_quadruples(&part, &args.out.join(name))?;
        outln!("{name}: timestamps {}..{}, {} facts", range.start, range.end, part.num_facts());
    }
    Ok(())
}

fn read_config(path: &Path) -> transfir::Result<Vec<(String, String, usize)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Profile defaults, then the config file, then flags. `dim` falls back to
/// the embedding width when nothing sets it.
fn resolve_hyperparams(args: &TrainArgs, embedding_dim: usize) -> transfir::Result<Hyperparams> {
    let mut hp = match args.profile {
        Profile::Full => Hyperparams::default(),
        Profile::Test => Hyperparams::test_profile(),
    };
    let mut settings: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &args.config {
        for (k, v, line) in read_config(path)? {
            if Hyperparams::keys().contains(&k.as_str()) {
                settings.insert(k, v);
            } else {
                return Err(Error::Parse {
                    path: path.clone(),
                    line,
                    msg: format!("unknown key {k:?}"),
                });
            }
        }
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        settings.insert(k.trim().to_string(), v.trim().to_string());
    }
    let flags: [(&str, Option<String>); 8] = [
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("clusters", args.clusters.map(|v| v.to_string())),
        ("dim", args.dim.map(|v| v.to_string())),
        ("chain_len", args.chain_len.map(|v| v.to_string())),
        ("window", args.window.map(|v| v.to_string())),
        ("layers", args.layers.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            settings.insert(k.to_string(), v);
        }
    }
    if !settings.contains_key("dim") {
        hp.dim = embedding_dim;
    }
    for (k, v) in &settings {
        hp.set(k, v)?;
    }
    hp.validate()?;
    Ok(hp)
}

fn train(args: &TrainArgs) -> transfir::Result<()> {
    let data = load_dataset(&args.inputs)?;
    let hp = resolve_hyperparams(args, data.entities.dim())?;
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let log_path = args.out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut header = String::from("run");
    for line in hp.to_kv().lines() {
        header.push(' ');
        header.push_str(line);
    }
    writeln!(log, "{header}").map_err(io_err(&log_path))?;

    let mut model = Model::new(&hp, &data)?;
    let mut opt = Adam::new(hp.lr);
    let outcome = fit(&mut model, &mut opt, &data, args.threads, |record| {
        let line = record.to_log_line();
        eprintln!("{line}");
        writeln!(log, "{line}").map_err(io_err(&log_path))
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::Divergence { .. }) => {
            let _ = writeln!(log, "diverged {e}");
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let ckpt = args.out.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &opt, &ckpt)?;
    let best = outcome.best_mrr.map_or_else(|| "none".to_string(), |m| m.to_string());
    writeln!(
        log,
        "best_epoch={} best_valid_mrr={} epochs_run={} stopped_early={}",
        outcome.best_epoch,
        best,
        outcome.history.len(),
        outcome.stopped_early
    )
    .map_err(io_err(&log_path))?;
    outln!("checkpoint={}", ckpt.display());
    outln!("best_epoch={}", outcome.best_epoch);
    outln!("best_valid_mrr={best}");
    Ok(())
}

fn load_checked(path: &Path, data: &Dataset) -> transfir::Result<Model> {
    let (model, _) = checkpoint::load(path)?;
    if model.num_entities() != data.num_entities() || model.num_base_relations() != data.num_base_relations() {
        return Err(Error::Incompatible(format!(
            "checkpoint covers {} entities and {} relations, dataset has {} and {}",
            model.num_entities(),
            model.num_base_relations(),
            data.num_entities(),
            data.num_base_relations()
        )));
    }
    if model.hp.dim != data.entities.dim() {
        return Err(Error::Incompatible(format!(
            "checkpoint dim {} does not match embedding width {}",
            model.hp.dim,
            data.entities.dim()
        )));
    }
    Ok(model)
}

fn eval(args: &EvalArgs) -> transfir::Result<()> {
    let data = load_dataset(&args.inputs)?;
    let model = load_checked(&args.checkpoint, &data)?;
    let policy = SidePolicy::parse(&args.policy)?;
    let modes: Vec<EvalMode> = args
        .modes
        .split(',')
        .map(|m| {
            QueryMode::parse(m.trim()).map(|kind| EvalMode { kind, policy })
        })
        .collect::<transfir::Result<_>>()?;
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let opts = EvalOptions {
        transfer: args.ablate != Some(Ablation::NoTransfer),
        threads,
    };
    let range = match args.range {
        RangeArg::Valid => data.split.valid.clone(),
        RangeArg::Test => data.split.test.clone(),
    };
    let reports = evaluate_modes(&model, &data, range, &modes, opts)?;
    let kv: String = reports.iter().map(|r| r.to_kv()).collect();
    match args.format {
        Format::Kv => out!("{kv}"),
        Format::Text => {
            for r in &reports {
                out!("{}", r.to_text());
            }
        }
    }
    if let Some(path) = &args.report {
        std::fs::write(path, &kv).map_err(io_err(path))?;
    }
    Ok(())
}

fn diagnose(args: &DiagnoseArgs) -> transfir::Result<()> {
    let data = load_dataset(&args.inputs)?;
    let model = load_checked(&args.checkpoint, &data)?;
    let transfer = args.ablate != Some(Ablation::NoTransfer);
    let (report, h) = collapse_report(&model, &data, transfer)?;
    let mut s = Summary::new();
    s.add("emerging_entities", report.emerging.len());
    s.add("known_entities", report.known.len());
    match (report.ratio, report.ratio_frozen) {
        (Some(cr), Some(frozen)) => {
            s.add("collapse_ratio", cr);
            s.add("collapse_ratio_frozen", frozen);
        }
        _ => {
            s.add("collapse_ratio", "undefined");
            s.add(
                "diagnostic",
                "collapse ratio needs at least 2 emerging and 2 known entities",
            );
        }
    }
    let ids: Vec<usize> = (0..data.num_entities()).collect();
    let labels: Vec<&str> = ids
        .iter()
        .map(|&e| match data.first_seen[e] {
            Some(t) if data.split.test.contains(&t) => "emerging",
            Some(_) => "known",
            None => "unseen",
        })
        .collect();
    if ids.len() >= 2 {
        emit_projection(&h, &ids, &labels, &args.projection)?;
        s.add("projection", args.projection.display());
    } else {
        s.add("projection", "skipped (fewer than 2 entities)");
    }
    out!("{}", s.render(args.format));
    Ok(())
}

fn synth(args: &SynthArgs) -> transfir::Result<()> {
    let spec = SynthSpec {
        types: args.types,
        entities_per_type: args.entities_per_type,
        relations: args.relations,
        timestamps: args.timestamps,
        emergence: args.emergence,
        noise: args.noise,
        answers_per_pattern: args.answers_per_pattern,
        dim: args.dim,
        jitter: args.jitter,
        seed: args.seed,
        ..SynthSpec::default()
    };
    let inst = generate(&spec)?;
    inst.write(&args.out)?;
    let mut types = String::from("entity_id\ttype\temerging\n");
    for (e, (&ty, &em)) in inst.truth.types.iter().zip(&inst.truth.emerging).enumerate() {
        let _ = writeln!(types, "{e}\t{ty}\t{em}");
    }
    let types_path = args.out.join("types.tsv");
    std::fs::write(&types_path, types).map_err(io_err(&types_path))?;
    let stats = emergence_stats(&inst.graph, &inst.truth.split);
    let mut s = Summary::new();
    s.add("entities", inst.graph.num_entities());
    s.add("relations", inst.graph.num_base_relations());
    s.add("timestamps", inst.graph.num_timestamps());
    s.add("facts", inst.graph.num_facts());
    s.add("emerging_fraction", stats.emerging_fraction);
    match oracle_best_mrr(&inst.truth, &inst.graph) {
        Some(m) => s.add("oracle_mrr", m),
        None => s.add("oracle_mrr", "none"),
    }
    s.add("random_mrr", random_guess_mrr(inst.graph.num_entities()));
    out!("{}", s.render(args.format));
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Incompatible(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
