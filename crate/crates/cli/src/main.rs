use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hysparse::kvcache::{memory_report, STORAGE_BYTES};
use hysparse::model::io::write_weights;
use hysparse::model::{ModelConfig, LayerRole};
use hysparse::runtime::{compare_regimes, decode_step, prefill, train, Optimizer, Regime, SyntheticTask, TrainConfig};
use hysparse::tensor::Rng;
use hysparse::verify::{run_suite, Suite};

mod config;
mod manifest;

use config::RunConfig;
use manifest::Outputs;

#[derive(Parser)]
#[command(name = "hysparse", version, about = "Hybrid sparse attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random stream.
    #[arg(long, env = "HYSPARSE_SEED", default_value_t = 0)]
    seed: u64,
    /// Directory for report files and the run manifest.
    #[arg(long, default_value = "hysparse-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run property suites against their oracles.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[command(flatten)]
        common: Common,
    },
    /// KV-cache footprint of a hybrid layout against the all-full baseline.
    Memreport(MemArgs),
    /// Train one regime on a synthetic task.
    Train(TrainArgs),
    /// Train every regime on the same task and budget.
    Compare(TrainArgs),
    /// Prefill a short prompt, decode a few tokens, and show the selections.
    Demo {
        #[arg(long, default_value_t = 24)]
        prompt_len: usize,
        #[arg(long, default_value_t = 4)]
        decode: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Kernels,
    Selection,
    Cache,
    Parity,
    Grads,
    All,
}

#[derive(Args)]
struct MemArgs {
    #[arg(long, default_value_t = 49)]
    layers: usize,
    /// Full : sparse layers, as `1:N`.
    #[arg(long, default_value = "1:11", value_parser = parse_ratio)]
    ratio: usize,
    #[arg(long, default_value_t = 128)]
    window: usize,
    #[arg(long, default_value_t = 32768)]
    context: usize,
    #[arg(long, default_value_t = 4)]
    kv_heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    /// Bytes per stored element in the report (storage here is 8).
    #[arg(long, default_value_t = 2)]
    element_bytes: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Copy,
    Needle,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    FullAttn,
    HybridSwa,
    Hysparse,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args)]
struct TrainArgs {
    /// Canonical JSON run config (`schema_version`, `model`, optional `train`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::Copy)]
    task: TaskArg,
    /// Copy task sequence length, or a needle sequence length above the minimum.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Copy task vocabulary.
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    /// Needle task: minimum record-to-query distance.
    #[arg(long, default_value_t = 24)]
    depth: usize,
    /// Overrides the model window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum, default_value_t = RegimeArg::Hysparse)]
    regime: RegimeArg,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[command(flatten)]
    common: Common,
}

fn parse_ratio(s: &str) -> Result<usize, String> {
    let (full, sparse) = s.split_once(':').ok_or_else(|| format!("expected 1:N, got {s:?}"))?;
    if full.trim() != "1" {
        return Err(format!("the full side of the ratio must be 1, got {s:?}"));
    }
    sparse.trim().parse().map_err(|_| format!("bad sparse count in {s:?}"))
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<hysparse::Error> for Failure {
    fn from(e: hysparse::Error) -> Self {
        match e {
            hysparse::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify { suite, common } => cmd_verify(suite, &common),
        Command::Memreport(args) => cmd_memreport(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Demo { prompt_len, decode, common } => cmd_demo(prompt_len, decode, &common),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_verify(suite: SuiteArg, common: &Common) -> Outcome {
    let suites: Vec<Suite> = match suite {
        SuiteArg::All => Suite::ALL.to_vec(),
        SuiteArg::Kernels => vec![Suite::Kernels],
        SuiteArg::Selection => vec![Suite::Selection],
        SuiteArg::Cache => vec![Suite::Cache],
        SuiteArg::Parity => vec![Suite::Parity],
        SuiteArg::Grads => vec![Suite::Grads],
    };
    let mut out = Outputs::new("verify", &common.out, None, common.seed)?;
    let mut reports = Vec::new();
    let mut passed = true;
    for s in suites {
        let report = run_suite(s, common.seed)?;
        println!("{report}");
        passed &= report.passed();
        reports.push(report);
    }
    out.json("verify.json", &serde_json::to_value(&reports).expect("reports serialise"))?;
    out.finish()?;
    println!("{}", if passed { "all checks passed" } else { "FAILURES" });
    Ok(passed)
}

fn cmd_memreport(args: &MemArgs) -> Outcome {
    let cfg = ModelConfig {
        n_layers: args.layers,
        hybrid_ratio: args.ratio,
        window: args.window,
        n_kv_heads: args.kv_heads,
        n_q_heads: args.kv_heads,
        head_dim: args.head_dim,
        ..ModelConfig::geometry_80b()
    };
    if args.element_bytes == 0 {
        return Err(Failure::Usage("--element-bytes must be at least 1".into()));
    }
    let report = memory_report(&cfg, args.context, args.element_bytes)?;
    println!("{report}");
    let mut out = Outputs::new("memreport", &args.common.out, None, args.common.seed)?;
    out.json("memreport.json", &report.to_json())?;
    out.text("memreport.txt", &format!("{report}\n"))?;
    out.finish()?;
    Ok(true)
}

struct Prepared {
    task: SyntheticTask,
    model: ModelConfig,
    train: TrainConfig,
}

fn prepare(args: &TrainArgs) -> Result<Prepared, Failure> {
    let file = args.config.as_deref().map(RunConfig::load).transpose()?;
    let mut task = match args.task {
        TaskArg::Copy => SyntheticTask::copy(args.seq_len.unwrap_or(64), args.vocab),
        TaskArg::Needle => {
            let w = args.window.or(file.as_ref().map(|f| f.model.window)).unwrap_or(ModelConfig::tiny().window);
            let b = file.as_ref().map_or(ModelConfig::tiny().block_size, |f| f.model.block_size);
            let mut t = SyntheticTask::needle(args.depth, b, w);
            if let Some(n) = args.seq_len {
                t.seq_len = n;
            }
            t
        }
    };
    let mut model = file.as_ref().map_or_else(|| ModelConfig::toy(task.vocab), |f| f.model.clone());
    if let Some(w) = args.window {
        model.window = w;
    }
    if matches!(args.task, TaskArg::Needle) {
        task.window = model.window;
        task.block_size = model.block_size;
    }
    let mut train = file.map_or_else(|| default_train(args.task), |f| f.train);
    train.seed = args.common.seed;
    if let Some(s) = args.steps {
        train.steps = s;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        train.lr = lr;
    }
    if let Some(o) = args.optimizer {
        train.optimizer = match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        };
    }
    task.validate()?;
    model.validate()?;
    Ok(Prepared { task, model, train })
}

/// Training defaults when no config file is given: the settings the
/// acceptance runs use for each task.
fn default_train(task: TaskArg) -> TrainConfig {
    let base = TrainConfig { lr: 3e-3, final_lr_frac: 0.1, ..TrainConfig::default() };
    match task {
        TaskArg::Copy => base,
        TaskArg::Needle => TrainConfig { steps: 1800, batch_size: 16, ..base },
    }
}

fn regime(r: RegimeArg) -> Regime {
    match r {
        RegimeArg::FullAttn => Regime::FullAttn,
        RegimeArg::HybridSwa => Regime::HybridSwa,
        RegimeArg::Hysparse => Regime::HySparse,
    }
}

fn cmd_train(args: &TrainArgs) -> Outcome {
    let p = prepare(args)?;
    let regime = regime(args.regime);
    let mut model = regime.build(&p.model, p.train.seed)?;
    let report = train(&mut model, &p.task, &p.train)?;
    let mut out = Outputs::new("train", &args.common.out, args.config.as_deref(), args.common.seed)?;
    out.text("curve.csv", &report.to_csv())?;
    out.json(
        "train.json",
        &serde_json::json!({
            "schema_version": 1,
            "regime": regime.name(),
            "layout": model.stack.pattern(),
            "task": p.task,
            "model": p.model,
            "train": p.train,
            "heldout_loss": report.heldout_loss,
            "heldout_accuracy": report.heldout_accuracy,
        }),
    )?;
    let mut weights = Vec::new();
    write_weights(&mut weights, &model.cfg, &model.params)?;
    out.bytes("weights.bin", &weights)?;
    out.finish()?;
    println!(
        "{} ({}) on {:?}: held-out loss {:.4}, accuracy {:.4}",
        regime.name(),
        model.stack.pattern(),
        p.task.kind,
        report.heldout_loss,
        report.heldout_accuracy
    );
    Ok(true)
}

fn cmd_compare(args: &TrainArgs) -> Outcome {
    let p = prepare(args)?;
    let report = compare_regimes(&p.task, &p.model, &p.train, &Regime::ALL)?;
    let mut out = Outputs::new("compare", &args.common.out, args.config.as_deref(), args.common.seed)?;
    out.json("compare.json", &report.to_json())?;
    out.text("compare.csv", &report.to_csv())?;
    out.finish()?;
    println!("{:<12} {:<10} {:>9} {:>9} {:>12} {:>8}", "regime", "layout", "accuracy", "loss", "kv bytes", "ratio");
    for r in &report.results {
        println!(
            "{:<12} {:<10} {:>9.4} {:>9.4} {:>12} {:>8.3}",
            r.regime.name(),
            r.layout,
            r.heldout_accuracy,
            r.heldout_loss,
            r.memory.hybrid_bytes,
            r.memory.reduction_ratio
        );
    }
    Ok(true)
}

fn cmd_demo(prompt_len: usize, decode: usize, common: &Common) -> Outcome {
    if prompt_len == 0 {
        return Err(Failure::Usage("--prompt-len must be at least 1".into()));
    }
    let cfg = ModelConfig::tiny();
    let model = Regime::HySparse.build(&cfg, common.seed)?;
    let mut rng = Rng::new(common.seed).fork(3);
    let prompt: Vec<usize> = (0..prompt_len).map(|_| rng.below(cfg.vocab)).collect();
    let mut pre = prefill(&model, &prompt)?;
    println!("layout {}  window {}  block {}  k_blocks {}", model.stack.pattern(), cfg.window, cfg.block_size, cfg.k_blocks());
    println!("prompt {prompt:?}");

    let mut steps = Vec::new();
    let mut token = hysparse::runtime::argmax_rows(&pre.logits)[prompt_len - 1];
    for _ in 0..decode {
        let step = decode_step(&model, &mut pre.arena, token)?;
        let pos = pre.arena.len() - 1;
        let mut per_layer = serde_json::Map::new();
        for (set, layer) in step.selections.iter().zip(model.stack.full_layers()) {
            let groups: Vec<Vec<usize>> = (0..set.groups).map(|g| set.blocks(0, g).to_vec()).collect();
            println!("pos {pos:>3} token {token:>2}  layer {layer} blocks {groups:?}");
            per_layer.insert(format!("{layer:02}"), serde_json::json!(groups));
        }
        steps.push(serde_json::json!({ "position": pos, "token": token, "selections": per_layer }));
        token = hysparse::runtime::argmax_rows(&step.logits)[0];
    }
    let roles: Vec<String> = model
        .stack
        .roles
        .iter()
        .map(|r| match r {
            LayerRole::Full => "full".to_string(),
            LayerRole::Sparse { full_layer } => format!("sparse<-{full_layer}"),
        })
        .collect();
    let memory = memory_report(&cfg, pre.arena.len(), STORAGE_BYTES)?;
    println!("resident {} bytes, analytic {} bytes", pre.arena.resident_bytes(), memory.hybrid_bytes);

    let mut out = Outputs::new("demo", &common.out, None, common.seed)?;
    out.json(
        "demo.json",
        &serde_json::json!({
            "schema_version": 1,
            "model": cfg,
            "roles": roles,
            "prompt": prompt,
            "steps": steps,
            "prefill_selections": pre.selections.iter().map(|s| s.to_debug_json()).collect::<Vec<_>>(),
            "resident_bytes": pre.arena.resident_bytes(),
            "memory": memory.to_json(),
        }),
    )?;
    out.finish()?;
    Ok(true)
}
