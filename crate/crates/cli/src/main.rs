//! `modeldisc`: generate telemetry, run discovery sessions, serve the review
//! API and export artifacts.
//!
//! Exit codes: 0 success, 1 usage error, 2 pipeline failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use modeldisc_core::data::{generate_dataset, uniform_grid, Role};
use modeldisc_core::model::{DynamicalModel, ModelCatalog};
use modeldisc_core::nn::Activation;
use modeldisc_core::session::{self, Choice, DatasetEntry, PipelineSettings, Session, SessionError, Store};
use modeldisc_core::training::{sweep_csv, Schedule};

#[derive(Parser)]
#[command(name = "modeldisc", version, about = "Neural-augmented model discovery with engineer review")]
struct Cli {
    /// Session directory.
    #[arg(long, global = true, env = "MODELDISC_STORE", default_value = ".modeldisc")]
    store: PathBuf,
    /// Seed for every random choice of a new session.
    #[arg(long, global = true, default_value_t = session::DEFAULT_SEED)]
    seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a catalog model and write its outputs as telemetry CSV.
    Generate(GenerateArgs),
    #[command(subcommand)]
    Session(SessionCommand),
    /// Serve the review API over the session store.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: std::net::SocketAddr,
    },
    /// Write an artifact to a file (`-` for standard output).
    Export {
        what: ExportKind,
        id: String,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// List the catalog models with their states and parameters.
    Models,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: String,
    /// Parameter overrides, `name=value,...`.
    #[arg(long, default_value = "")]
    config: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    t_start: f64,
    #[arg(long, default_value_t = 5.0)]
    t_end: f64,
    #[arg(long, default_value_t = 101)]
    samples: usize,
    /// Integration step of the reference simulation.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
}

#[derive(Subcommand)]
enum SessionCommand {
    /// Create a session from telemetry files (`path.csv:name=value,...`).
    New(NewArgs),
    /// Act on the pending decision point, or run the next automated stage.
    Advance {
        id: String,
        /// `accept`, `choose:<x>` or `reject`.
        #[arg(long)]
        decision: Option<String>,
        #[arg(long, default_value = "")]
        note: String,
        /// Accept every proposal until the session is finalized.
        #[arg(long, conflicts_with = "decision")]
        auto: bool,
    },
    /// Print the stage and artifacts.
    Show {
        id: String,
        #[arg(long)]
        json: bool,
    },
    /// List sessions in the store.
    List,
}

#[derive(Args)]
struct NewArgs {
    /// Model to augment (usually a truncated one).
    #[arg(long)]
    model: String,
    #[arg(long, num_args = 1.., required = true)]
    train: Vec<String>,
    #[arg(long, num_args = 1..)]
    test: Vec<String>,
    /// Explicit session id instead of the derived one.
    #[arg(long)]
    id: Option<String>,
    /// Hidden-layer shapes, e.g. `8,16,16x16`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    activations: Option<Vec<ActivationArg>>,
    /// Initialization seeds per architecture.
    #[arg(long)]
    arch_seeds: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Plain Adam without horizon warm-up and polish.
    #[arg(long)]
    no_schedule: bool,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Tanh,
    Softplus,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Heatmap,
    Pareto,
    Sweep,
}

enum Failure {
    Usage(String),
    Pipeline(String),
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Model(_)
            | SessionError::Ude(_)
            | SessionError::Train(_)
            | SessionError::Reduction(_)
            | SessionError::SymReg(_)
            | SessionError::Json { .. } => Failure::Pipeline(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
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
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(m)) => {
            eprintln!("pipeline failure: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let catalog = ModelCatalog::builtin();
    match cli.command {
        Command::Generate(args) => generate(&catalog, args),
        Command::Models => {
            for name in catalog.names() {
                let m = catalog.get(&name).expect("listed");
                println!("{name}");
                println!("  states: {}", m.state_names().join(", "));
                let params: Vec<String> = m.params().iter().map(|p| format!("{}={}", p.name, p.default)).collect();
                println!("  params: {}", params.join(", "));
                println!("  outputs: {}", m.output_names().join(", "));
            }
            Ok(())
        }
        Command::Session(cmd) => {
            let store = Store::open(&cli.store)?;
            match cmd {
                SessionCommand::New(args) => new_session(&catalog, &store, cli.seed, args),
                SessionCommand::Advance {
                    id,
                    decision,
                    note,
                    auto,
                } => advance(&catalog, &store, &id, decision, note, auto),
                SessionCommand::Show { id, json } => {
                    let s = store.load(&id)?;
                    if json {
                        println!("{}", serde_json::to_string_pretty(&s).expect("session serializes"));
                    } else {
                        print!("{}", describe(&s, &catalog));
                    }
                    Ok(())
                }
                SessionCommand::List => {
                    for s in store.list()? {
                        println!("{}\t{}\t{}", s.id, s.model, s.stage);
                    }
                    Ok(())
                }
            }
        }
        Command::Serve { bind } => {
            let store = Store::open(&cli.store)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Pipeline(e.to_string()))?;
            rt.block_on(modeldisc_service::serve(store, bind))
                .map_err(|e| usage(format!("cannot serve on {bind}: {e}")))
        }
        Command::Export { what, id, out } => {
            let store = Store::open(&cli.store)?;
            export(&catalog, &store, what, &id, &out)
        }
    }
}

/// Parses `name=value,...` into a full parameter vector.
fn parse_config(model: &DynamicalModel, text: &str) -> Result<Vec<f64>, Failure> {
    let mut overrides = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("`{part}` is not name=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| usage(format!("`{v}` is not a number")))?;
        overrides.push((k.trim().to_string(), v));
    }
    let refs: Vec<(&str, f64)> = overrides.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    model.params_with(&refs).map_err(|e| usage(e.to_string()))
}

fn generate(catalog: &ModelCatalog, a: GenerateArgs) -> Outcome {
    let model = catalog.get(&a.model).map_err(|e| usage(e.to_string()))?;
    let p = parse_config(&model, &a.config)?;
    if a.samples < 2 || !(a.t_end > a.t_start) || !(a.dt > 0.0) {
        return Err(usage("need --samples >= 2, --t-end > --t-start and --dt > 0"));
    }
    let grid = uniform_grid(a.t_start, a.t_end, a.samples);
    let ds = generate_dataset(&model, "generated", p, &grid, a.dt, Role::Train)
        .map_err(|e| Failure::Pipeline(e.to_string()))?;
    ds.write_csv(&a.out, model.output_names())
        .map_err(|e| usage(e.to_string()))?;
    eprintln!("wrote {} samples of {} to {}", a.samples, a.model, a.out.display());
    Ok(())
}

/// Splits `path.csv:name=value,...`; the configuration part is optional.
fn split_dataset_arg(arg: &str) -> (&str, &str) {
    match arg.rsplit_once(':') {
        Some((path, cfg)) if cfg.is_empty() || cfg.contains('=') => (path, cfg),
        _ => (arg, ""),
    }
}

fn new_session(catalog: &ModelCatalog, store: &Store, seed: u64, a: NewArgs) -> Outcome {
    let model = catalog.get(&a.model).map_err(|e| usage(e.to_string()))?;
    let mut entries: Vec<DatasetEntry> = Vec::new();
    let tagged = a.train.iter().map(|s| (s, Role::Train)).chain(a.test.iter().map(|s| (s, Role::Test)));
    for (arg, role) in tagged {
        let (path, cfg) = split_dataset_arg(arg);
        let config = parse_config(&model, cfg)?;
        let path = Path::new(path);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into());
        let mut id = stem.clone();
        let mut n = 2;
        while entries.iter().any(|e| e.id == id) {
            id = format!("{stem}-{n}");
            n += 1;
        }
        entries.push(DatasetEntry::from_csv(id, path, role, config)?);
    }
    let settings = settings_from(&a, seed)?;
    let s = Session::create(catalog, &a.model, entries, settings, a.id.clone())?;
    store.create(&s)?;
    println!("{}", s.id);
    Ok(())
}

fn settings_from(a: &NewArgs, seed: u64) -> Result<PipelineSettings, Failure> {
    let mut s = PipelineSettings::default();
    if let Some(hidden) = &a.hidden {
        s.hidden = hidden
            .iter()
            .map(|h| {
                h.split('x')
                    .map(|w| w.trim().parse::<usize>().map_err(|_| usage(format!("bad hidden shape `{h}`"))))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(acts) = &a.activations {
        s.activations = acts
            .iter()
            .map(|a| match a {
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Softplus => Activation::Softplus,
            })
            .collect();
    }
    if let Some(n) = a.arch_seeds {
        s.seeds_per_architecture = n;
    }
    if let Some(dt) = a.dt {
        s.dt = dt;
    }
    if let Some(lr) = a.lr {
        s.training.optimizer.lr = lr;
        s.training.schedule = Some(Schedule::horizon_warmup(lr));
    }
    if let Some(n) = a.max_iters {
        s.training.max_iters = n;
    }
    if let Some(n) = a.patience {
        s.training.patience = n;
    }
    if a.no_schedule {
        s.training.schedule = None;
    }
    if let Some(t) = a.tolerance {
        s.tolerance = t;
    }
    if let Some(m) = a.top_m {
        s.top_m = m;
    }
    if let Some(n) = a.population {
        s.symreg.population = n;
    }
    if let Some(n) = a.generations {
        s.symreg.generations = n;
    }
    let s = s.with_seed(seed);
    s.validate()?;
    Ok(s)
}

fn advance(
    catalog: &ModelCatalog,
    store: &Store,
    id: &str,
    decision: Option<String>,
    note: String,
    auto: bool,
) -> Outcome {
    let mut s = store.load(id)?;
    let entered = if auto {
        session::run_auto(store, catalog, &mut s)?
    } else {
        let decision = decision.map(|d| d.parse::<Choice>()).transpose()?;
        session::advance(store, catalog, &mut s, decision.map(|c| (c, note)))?
    };
    for stage in &entered {
        eprintln!("-> {stage}");
    }
    print!("{}", describe(&s, catalog));
    let problems = s.problems();
    if !problems.is_empty() && !s.stage.is_terminal() {
        return Err(Failure::Pipeline(problems.join("; ")));
    }
    Ok(())
}

fn describe(s: &Session, catalog: &ModelCatalog) -> String {
    use std::fmt::Write;
    let mut o = String::new();
    let _ = writeln!(o, "session {} ({})", s.id, s.model);
    let _ = writeln!(o, "stage: {}", s.stage);
    for d in &s.datasets {
        let _ = writeln!(o, "  {} [{}] {}", d.id, d.role, d.csv_path.display());
    }
    if let Some(sweep) = &s.experiments {
        let best = sweep.best_record();
        let _ = writeln!(
            o,
            "experiments: {} runs, best {} ({}) loss {:.3e}",
            sweep.records.len(),
            best.id,
            best.spec.label(),
            best.final_loss
        );
        if let Some(sel) = &s.selected_experiment {
            let _ = writeln!(o, "  selected: {sel}");
        }
    }
    if let Some(mask) = &s.mask_report {
        let r = &mask.report;
        let sweep: Vec<String> = r.sweep.iter().map(|(k, l)| format!("K={k}: {l:.3e}")).collect();
        let _ = writeln!(
            o,
            "mask search: chosen K = {}{} ({})",
            r.chosen_k,
            if mask.feasible { "" } else { " (tolerance not met)" },
            sweep.join(", ")
        );
    }
    if let Some(m) = &s.masked {
        let _ = writeln!(o, "  masked model: K = {}, loss {:.3e}", m.k, m.record.final_loss);
    }
    if let Ok(h) = s.heatmap(catalog) {
        let _ = writeln!(o, "sensitivity ranking: {} (top {})", h.ranking.join(", "), h.top_m);
    }
    if let Some(sel) = &s.inputs {
        let _ = writeln!(o, "regression inputs: states [{}], params [{}]", sel.states.join(", "), sel.params.join(", "));
    }
    if let Some(p) = &s.pareto {
        for t in &p.targets {
            let _ = writeln!(o, "front for d{}/dt:", t.equation);
            for (i, e) in t.front.entries.iter().enumerate() {
                let mark = if i == t.knee { "*" } else { " " };
                let _ = writeln!(o, "  {mark}[{i}] c={:<2} mse={:.3e}  {}", e.complexity, e.mse, e.expression.to_infix());
            }
        }
    }
    if let Some(f) = &s.final_model {
        let _ = writeln!(o, "final model: {}", f.base_model);
        for c in &f.corrections {
            let _ = writeln!(o, "  d{}/dt += {}", c.equation, c.expression.to_infix());
        }
    }
    for v in &s.validation {
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4e}"));
        let _ = writeln!(
            o,
            "validation on {}: base {} final {} improvement {}{}",
            v.dataset,
            fmt(v.loss_base),
            fmt(v.loss_final),
            v.rel_improvement.map_or("n/a".to_string(), |r| format!("{:.2}%", r * 100.0)),
            v.error.as_ref().map_or(String::new(), |e| format!(" ({e})"))
        );
    }
    for p in s.problems() {
        let _ = writeln!(o, "attention: {p}");
    }
    if s.stage.is_awaiting() {
        match s.pending_decision() {
            Some(d) => {
                let _ = writeln!(o, "pending decision: {}", d.choice);
            }
            None => {
                let _ = writeln!(o, "awaiting decision: accept | choose:<x> | reject");
            }
        }
    }
    o
}

fn export(catalog: &ModelCatalog, store: &Store, what: ExportKind, id: &str, out: &Path) -> Outcome {
    let s = store.load(id)?;
    let text = match what {
        ExportKind::Heatmap => s.heatmap(catalog)?.csv,
        ExportKind::Sweep => sweep_csv(&s.experiments.as_ref().ok_or(SessionError::NotReady("experiments"))?.records),
        ExportKind::Pareto => {
            let p = s.pareto.as_ref().ok_or(SessionError::NotReady("pareto fronts"))?;
            let fronts: Vec<serde_json::Value> = p
                .targets
                .iter()
                .map(|t| serde_json::json!({ "target": t.equation, "knee": t.knee, "entries": t.front.entries }))
                .collect();
            serde_json::to_string_pretty(&fronts).expect("fronts serialize") + "\n"
        }
    };
    if out == Path::new("-") {
        print!("{text}");
        Ok(())
    } else {
        std::fs::write(out, text).map_err(|e| usage(format!("cannot write {}: {e}", out.display())))
    }
}
