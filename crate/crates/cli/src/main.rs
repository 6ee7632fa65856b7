use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spedn::convert::PredicateTable;
use spedn::corpus::{load_dataset, write_dataset, DatasetError, GEO_SPLIT};
use spedn::query::{execute_traced, OrdinalLexiconError};
use spedn::train::{corpus_stats, judge, train_to, EvalReport};
use spedn::{
    assemble, evaluate, execute, generate, load_kg, parse_blocks, print_blocks, split, validate_blocks, AssemblyError,
    BlockError, ConvertError, Domain, Example, ExecError, Fixture, GraphMode, Graph2Seq, KgError, Lexicon,
    ModelConfig, ModelError, OrdinalLexicon, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "spedn", version, about = "Semantic-block question answering over a typed knowledge graph")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// Knowledge graph file; the bundled fixture for --domain when absent.
    #[arg(long, global = true, env = "SPEDN_KG")]
    kg: Option<PathBuf>,
    #[arg(long, global = true, env = "SPEDN_LEXICON")]
    lexicon: Option<PathBuf>,
    #[arg(long, global = true, env = "SPEDN_ORDINALS")]
    ordinals: Option<PathBuf>,
    /// GEO predicate table used by `convert geo`.
    #[arg(long, global = true, env = "SPEDN_PREDICATES")]
    predicates: Option<PathBuf>,
    #[arg(long, global = true, env = "SPEDN_CKPT")]
    ckpt: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "geo", env = "SPEDN_DOMAIN")]
    domain: DomainArg,
    /// Decompose blocks into component symbols.
    #[arg(long, global = true, env = "SPEDN_MP")]
    mp: bool,
    /// Mask illegal continuations while decoding.
    #[arg(long, global = true, env = "SPEDN_CONTROLLER")]
    controller: bool,
    #[arg(long, global = true, default_value_t = 5, env = "SPEDN_BEAM")]
    beam: usize,
    #[arg(long, global = true, default_value = "chain", env = "SPEDN_GRAPH")]
    graph: GraphMode,
    #[arg(long, global = true, default_value_t = 1, env = "SPEDN_SEED")]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Geo,
    Atis,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge graph checks.
    Kg {
        #[arg(value_enum)]
        action: KgAction,
    },
    /// Parse blocks and print them canonically.
    Parse { blocks: String },
    /// Convert logical forms (one per line) into block sequences.
    Convert {
        #[arg(value_enum)]
        domain: DomainArg,
        file: PathBuf,
    },
    /// Assemble blocks into a query graph.
    Assemble { blocks: String },
    /// Assemble and execute blocks.
    Execute { blocks: String },
    /// Answer a question with a trained model, or score a gold corpus.
    Ask {
        question: Option<String>,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Train a model and write the best checkpoint to --ckpt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval {
        corpus: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Gold corpus statistics.
    Stats { corpus: PathBuf },
    /// Write an annotated templated corpus.
    Generate {
        #[arg(long, default_value_t = 150)]
        count: usize,
    },
    /// Interactive question loop.
    Repl,
}

#[derive(Clone, Copy, ValueEnum)]
enum KgAction {
    Validate,
    Stats,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus; a generated split when absent.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    held_out: Option<PathBuf>,
    #[arg(long, default_value_t = 80)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    hops: usize,
    #[arg(long, default_value_t = 100)]
    node_dim: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    ClosedPipe,
    Io(String),
    Kg(KgError),
    Blocks(BlockError),
    Invalid(String),
    Assembly(AssemblyError),
    Exec(ExecError),
    Convert { line: usize, source: ConvertError },
    Data(String),
    Model(String),
}

impl CliError {
    fn record(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::ClosedPipe => ("io", "stdout closed".to_string()),
            CliError::Io(m) => ("io", m.clone()),
            CliError::Kg(e) => ("kg", e.to_string()),
            CliError::Blocks(e) => ("syntax", e.to_string()),
            CliError::Invalid(m) => ("schema", m.clone()),
            CliError::Assembly(e) => ("assembly", e.to_string()),
            CliError::Exec(e) => ("execution", e.to_string()),
            CliError::Convert { line, source } => ("convert", format!("line {line}: {source}")),
            CliError::Data(m) => ("data", m.clone()),
            CliError::Model(m) => ("model", m.clone()),
        };
        let quoted = serde_json::to_string(&message).unwrap_or_else(|_| "\"\"".into());
        format!("error kind={kind} message={quoted}")
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return CliError::ClosedPipe;
        }
        CliError::Io(e.to_string())
    }
}
impl From<KgError> for CliError {
    fn from(e: KgError) -> Self {
        CliError::Kg(e)
    }
}
impl From<BlockError> for CliError {
    fn from(e: BlockError) -> Self {
        CliError::Blocks(e)
    }
}
impl From<AssemblyError> for CliError {
    fn from(e: AssemblyError) -> Self {
        CliError::Assembly(e)
    }
}
impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        CliError::Exec(e)
    }
}
impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}
impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e.to_string())
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidGold(_) => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
        }
    }
}
impl From<OrdinalLexiconError> for CliError {
    fn from(e: OrdinalLexiconError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn fixture(opts: &Opts, domain: DomainArg) -> Result<Fixture> {
    let mut fx = match domain {
        DomainArg::Geo => Fixture::geo(),
        DomainArg::Atis => Fixture::atis(),
    };
    if let Some(path) = &opts.kg {
        fx.kg = load_kg(path)?;
        fx.lexicon = Lexicon::from_kg(&fx.kg);
    }
    if let Some(path) = &opts.lexicon {
        fx.lexicon = Lexicon::load(path, &fx.kg).map_err(|e| CliError::Data(e.to_string()))?;
    }
    if let Some(path) = &opts.ordinals {
        fx.ordinals = OrdinalLexicon::load(path)?;
    }
    if let Some(path) = &opts.predicates {
        fx.predicates = PredicateTable::load(path).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(fx)
}

fn checked_blocks(text: &str, fx: &Fixture) -> Result<Vec<spedn::SemanticBlock>> {
    let blocks = parse_blocks(text)?;
    if let Some(v) = validate_blocks(&blocks, &fx.kg).first() {
        return Err(CliError::Invalid(v.to_string()));
    }
    Ok(blocks)
}

/// Loads a corpus and fills in blocks and answers from logical forms.
fn corpus(path: &Path, fx: &Fixture) -> Result<Vec<Example>> {
    let mut examples = load_dataset(path)?;
    for (i, ex) in examples.iter_mut().enumerate() {
        fx.annotate(ex).map_err(|source| CliError::Convert { line: i + 1, source })?;
    }
    Ok(examples)
}

fn model(opts: &Opts, fx: &Fixture) -> Result<Graph2Seq> {
    let path = opts
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
    Ok(Graph2Seq::load(path, &fx.kg)?)
}

struct Answered {
    blocks: Option<String>,
    graph: Option<String>,
    answer: std::result::Result<String, String>,
    trace: Vec<String>,
}

fn answer_blocks(blocks: &[spedn::SemanticBlock], fx: &Fixture) -> Answered {
    let text = print_blocks(blocks);
    match assemble(blocks, &fx.kg) {
        Err(e) => Answered {
            blocks: Some(text),
            graph: None,
            answer: Err(format!("assembly: {e}")),
            trace: Vec::new(),
        },
        Ok(g) => {
            let (answer, trace) = match execute_traced(&g, &fx.kg, &fx.ordinals) {
                Ok((nodes, a)) => (
                    Ok(a.to_string()),
                    nodes.iter().enumerate().map(|(i, r)| format!("[{i}] {}  = {r}", g.nodes[i].block)).collect(),
                ),
                Err(e) => (Err(format!("execution: {e}")), Vec::new()),
            };
            Answered {
                blocks: Some(text),
                graph: Some(g.render()),
                answer,
                trace,
            }
        }
    }
}

fn ask(m: &Graph2Seq, fx: &Fixture, question: &str, beam: usize) -> Result<(Answered, String)> {
    let p = m.prepare(fx.context(question));
    let qgraph = p.graph.render();
    let d = m.decode(&p, beam)?;
    Ok(match d.blocks {
        Ok(b) => (answer_blocks(&b, fx), qgraph),
        Err(e) => (
            Answered {
                blocks: None,
                graph: None,
                answer: Err(format!("decode: {e}")),
                trace: Vec::new(),
            },
            qgraph,
        ),
    })
}

fn print_lines(out: &mut impl Write, lines: &[String]) -> Result<()> {
    for l in lines {
        writeln!(out, "{l}")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let opts = &cli.opts;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Kg { action } => {
            let fx = fixture(opts, opts.domain)?;
            let kg = &fx.kg;
            if !kg.indexes_consistent() {
                return Err(CliError::Invalid("knowledge graph indexes are inconsistent".into()));
            }
            match action {
                KgAction::Validate => writeln!(out, "ok")?,
                KgAction::Stats => {
                    writeln!(out, "types={}", kg.types().count())?;
                    writeln!(out, "relations={}", kg.relations().len())?;
                    writeln!(out, "entities={}", kg.entities().len())?;
                    writeln!(out, "facts={}", kg.facts().len())?;
                    for t in kg.types() {
                        writeln!(out, "type.{t}={}", kg.entities_of_type(t)?.len())?;
                    }
                }
            }
        }
        Command::Parse { blocks } => writeln!(out, "{}", print_blocks(&parse_blocks(&blocks)?))?,
        Command::Convert { domain, file } => {
            let fx = fixture(opts, domain)?;
            let text = std::fs::read_to_string(&file)?;
            for (i, line) in text.lines().enumerate() {
                let lf = line.trim();
                if lf.is_empty() || lf.starts_with('#') {
                    continue;
                }
                let b = fx.convert(lf).map_err(|source| CliError::Convert { line: i + 1, source })?;
                writeln!(out, "{}", print_blocks(&b))?;
            }
        }
        Command::Assemble { blocks } => {
            let fx = fixture(opts, opts.domain)?;
            let g = assemble(&checked_blocks(&blocks, &fx)?, &fx.kg)?;
            write!(out, "{}", g.render())?;
            writeln!(out, "shape={}", g.shape())?;
        }
        Command::Execute { blocks } => {
            let fx = fixture(opts, opts.domain)?;
            let g = assemble(&checked_blocks(&blocks, &fx)?, &fx.kg)?;
            writeln!(out, "{}", execute(&g, &fx.kg, &fx.ordinals)?)?;
        }
        Command::Ask { question, gold } => {
            let fx = fixture(opts, opts.domain)?;
            let m = model(opts, &fx)?;
            match (question, gold) {
                (_, Some(path)) => {
                    let examples = corpus(&path, &fx)?;
                    let mut judgements = Vec::with_capacity(examples.len());
                    for ex in &examples {
                        let p = m.prepare(fx.context(&ex.question));
                        let pred = match m.decode(&p, opts.beam) {
                            Ok(d) => d.blocks.ok(),
                            Err(ModelError::EmptyGraph) => None,
                            Err(e) => return Err(e.into()),
                        };
                        judgements.push(judge(&fx, &ex.question, pred.as_ref(), ex.blocks.as_ref()));
                    }
                    print_lines(&mut out, &EvalReport::from_judgements(judgements, &examples).kv_lines())?;
                }
                (Some(q), None) => {
                    let (a, _) = ask(&m, &fx, &q, opts.beam)?;
                    writeln!(out, "blocks={}", a.blocks.as_deref().unwrap_or(""))?;
                    match a.answer {
                        Ok(ans) => writeln!(out, "answer={ans}")?,
                        Err(e) => return Err(CliError::Model(e)),
                    }
                }
                (None, None) => return Err(CliError::Usage("ask needs a question or --gold <corpus>".into())),
            }
        }
        Command::Train(args) => {
            let fx = fixture(opts, opts.domain)?;
            let ckpt = opts
                .ckpt
                .clone()
                .ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
            let (train_set, held_out) = match (&args.train, &args.held_out) {
                (Some(t), Some(h)) => (corpus(t, &fx)?, corpus(h, &fx)?),
                (Some(t), None) => {
                    let t = corpus(t, &fx)?;
                    (t.clone(), t)
                }
                (None, _) => {
                    let sizes = match fx.domain {
                        Domain::Geo => GEO_SPLIT,
                        Domain::Atis => spedn::corpus::ATIS_SPLIT,
                    };
                    split(&fx, opts.seed, sizes.0, sizes.1)
                }
            };
            let cfg = TrainConfig {
                lr: args.lr,
                batch: args.batch,
                epochs: args.epochs,
                beam: opts.beam,
                seed: opts.seed,
                model: ModelConfig {
                    hops: args.hops,
                    node_dim: args.node_dim,
                    hidden: args.hidden,
                    dropout: args.dropout,
                    decomposed: opts.mp,
                    controller: opts.controller,
                    beam: opts.beam,
                    graph_mode: opts.graph,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            };
            let outcome = train_to(&fx, &train_set, &held_out, &cfg, &ckpt, |log| {
                println!("{log}");
            })?;
            writeln!(out, "best_epoch={}", outcome.best_epoch)?;
            writeln!(out, "mode={}", cfg.model.mode_name())?;
        }
        Command::Eval { corpus: path, report } => {
            let fx = fixture(opts, opts.domain)?;
            let m = model(opts, &fx)?;
            let examples = corpus(&path, &fx)?;
            let r = evaluate(&m, &fx, &examples, opts.beam)?;
            print_lines(&mut out, &r.kv_lines())?;
            if let Some(p) = report {
                std::fs::write(p, r.to_json())?;
            }
        }
        Command::Stats { corpus: path } => {
            let fx = fixture(opts, opts.domain)?;
            let examples = corpus(&path, &fx)?;
            print_lines(&mut out, &corpus_stats(&examples).kv_lines())?;
        }
        Command::Generate { count } => {
            let fx = fixture(opts, opts.domain)?;
            write!(out, "{}", write_dataset(&generate(&fx, opts.seed, count)))?;
        }
        Command::Repl => {
            let fx = fixture(opts, opts.domain)?;
            let m = model(opts, &fx)?;
            drop(out);
            repl(&m, &fx, opts.beam, io::stdin().lock(), io::stdout().lock())?;
        }
    }
    Ok(())
}

fn repl(m: &Graph2Seq, fx: &Fixture, beam: usize, input: impl BufRead, mut out: impl Write) -> Result<()> {
    let mut last: Option<(Answered, String)> = None;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" | ":q" => break,
            ":blocks" | ":graph" | ":trace" => {
                let Some((a, qgraph)) = &last else {
                    writeln!(out, "no question yet")?;
                    continue;
                };
                match line {
                    ":blocks" => writeln!(out, "{}", a.blocks.as_deref().unwrap_or("(none)"))?,
                    ":graph" => {
                        write!(out, "{qgraph}")?;
                        write!(out, "{}", a.graph.as_deref().unwrap_or("(no query graph)\n"))?;
                    }
                    _ => print_lines(&mut out, &a.trace)?,
                }
            }
            q if q.starts_with(':') => writeln!(out, "unknown command {q}")?,
            q => {
                let (a, qgraph) = match ask(m, fx, q, beam) {
                    Ok(r) => r,
                    Err(e) => {
                        writeln!(out, "{}", e.record())?;
                        continue;
                    }
                };
                writeln!(out, "blocks={}", a.blocks.as_deref().unwrap_or(""))?;
                match &a.answer {
                    Ok(ans) => writeln!(out, "answer={ans}")?,
                    Err(e) => writeln!(out, "error={e}")?,
                }
                last = Some((a, qgraph));
            }
        }
        out.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).record());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) | Err(CliError::ClosedPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(2)
        }
    }
}
