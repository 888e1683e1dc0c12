//! Thin command-line front end over the library: dataset generation,
//! training, evaluation, probing, gradient checking, and throughput
//! benchmarking. Every subcommand validates its configuration, writes its
//! outputs under `--out`, prints the paths, and exits nonzero on any
//! failed precondition.

use clap::{Args, Parser, Subcommand};
use nextlat::config::KvConfig;
use nextlat::error::Result;
use nextlat::eval::{evaluate, write_metric_csvs, EvalConfig, ProbeConfig};
use nextlat::model::read_checkpoint;
use nextlat::tasks::{
    gen_countdown, gen_gridworld, gen_hmm, gen_path_star, read_dataset, write_dataset,
    CountdownParams, GridWorldParams, HmmParams, PathStarParams, TaskDataset, TaskKind,
};
use nextlat::train::{
    bench_throughput, load_from_checkpoint, train, AdamWConfig, ObjectiveKind, RunConfig,
    BENCH_HEADER,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nextlat", about = "Desk-scale next-latent prediction laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset (train and test splits).
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Run the task's evaluation metrics against a checkpoint.
    Eval(EvalArgs),
    /// Train offset-k linear probes on frozen hidden states.
    Probe(ProbeArgs),
    /// Check every op and assembled loss against finite differences.
    Gradcheck(GradcheckArgs),
    /// Measure training iterations/second per objective and horizon.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// path_star | countdown | grid_world | hmm
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 200)]
    test_count: usize,
    #[arg(long)]
    out: PathBuf,

    // Path-star shape.
    #[arg(long, default_value_t = 2)]
    arms: usize,
    #[arg(long, default_value_t = 5)]
    arm_len: usize,
    #[arg(long, default_value_t = 30)]
    node_values: usize,

    // Countdown shape.
    #[arg(long, default_value_t = 10)]
    target_min: u32,
    #[arg(long, default_value_t = 100)]
    target_max: u32,
    #[arg(long, default_value_t = 100)]
    input_max: u32,
    #[arg(long, default_value_t = 1000)]
    value_max: u32,
    #[arg(long, default_value_t = 0.1)]
    holdout_targets: f64,

    // Grid-world shape.
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 0.25)]
    one_way_fraction: f64,
    #[arg(long, default_value_t = 28)]
    walk_len: usize,
    #[arg(long, default_value_t = 200)]
    ood_pairs: usize,

    // HMM shape.
    #[arg(long, default_value_t = 3)]
    states: usize,
    #[arg(long, default_value_t = 4)]
    obs: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// gpt | mtp | jtp | nextlat
    #[arg(long, default_value = "nextlat")]
    objective: String,
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// 0 means the 4*d_model default.
    #[arg(long, default_value_t = 0)]
    d_ff: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_next_h: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_kl: f64,
    /// 0 means the 2*d_model default.
    #[arg(long, default_value_t = 0)]
    psi_hidden: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    eval_every: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// f32 | f64
    #[arg(long, default_value = "f32")]
    precision: String,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out dataset to evaluate on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.75)]
    detour_prob: f64,
    #[arg(long, default_value_t = 200)]
    compression_pairs: usize,
    #[arg(long, default_value = "model")]
    model_id: String,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe training data (hidden states come from here).
    #[arg(long)]
    data: PathBuf,
    /// Held-out data for the reported cross-entropy.
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long, default_value_t = 20)]
    max_offset: usize,
    #[arg(long, default_value_t = 300)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    steps: u64,
    #[arg(long, default_value_t = 3)]
    warmup: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let kind = TaskKind::parse(&args.task)?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = KvConfig::new();
    manifest.set("task", kind.as_str());
    manifest.set("seed", args.seed);
    manifest.set("count", args.count);
    manifest.set("test_count", args.test_count);

    let make = |count: usize, split: &str| -> Result<TaskDataset> {
        match kind {
            TaskKind::PathStar => {
                let p = PathStarParams {
                    arms: args.arms,
                    arm_len: args.arm_len,
                    node_values: args.node_values,
                    count,
                };
                gen_path_star(args.seed, &p, split)
            }
            TaskKind::Countdown => {
                let p = CountdownParams {
                    target_min: args.target_min,
                    target_max: args.target_max,
                    input_max: args.input_max,
                    value_max: args.value_max,
                    count,
                    holdout_targets: args.holdout_targets,
                };
                gen_countdown(args.seed, &p, split)
            }
            TaskKind::GridWorld => {
                let p = GridWorldParams {
                    width: args.width,
                    height: args.height,
                    one_way_fraction: args.one_way_fraction,
                    walk_len: args.walk_len,
                    count,
                    ood_pairs: args.ood_pairs,
                };
                gen_gridworld(args.seed, &p, split)
            }
            TaskKind::Hmm => {
                let p = HmmParams { states: args.states, obs: args.obs, count, seq_len: args.seq_len };
                gen_hmm(args.seed, &p, split).map(|(_, ds)| ds)
            }
        }
    };

    match kind {
        TaskKind::PathStar => {
            manifest.set("arms", args.arms);
            manifest.set("arm_len", args.arm_len);
            manifest.set("node_values", args.node_values);
        }
        TaskKind::Countdown => {
            manifest.set("target_min", args.target_min);
            manifest.set("target_max", args.target_max);
            manifest.set("input_max", args.input_max);
            manifest.set("value_max", args.value_max);
            manifest.set("holdout_targets", args.holdout_targets);
            manifest.set("generator", "forward composition of three bounded integer ops");
        }
        TaskKind::GridWorld => {
            manifest.set("width", args.width);
            manifest.set("height", args.height);
            manifest.set("one_way_fraction", args.one_way_fraction);
            manifest.set("walk_len", args.walk_len);
            manifest.set("ood_pairs", args.ood_pairs);
        }
        TaskKind::Hmm => {
            manifest.set("states", args.states);
            manifest.set("obs", args.obs);
            manifest.set("seq_len", args.seq_len);
        }
    }

    let train_ds = make(args.count, "train")?;
    let test_ds = make(args.test_count, "test")?;
    manifest.set("tokenizer_hash", train_ds.tokenizer.hash_hex());
    let stem = kind.as_str();
    let train_path = args.out.join(format!("{stem}_train.nlds"));
    let test_path = args.out.join(format!("{stem}_test.nlds"));
    let manifest_path = args.out.join(format!("{stem}_gen_manifest.txt"));
    write_dataset(&train_path, &train_ds)?;
    write_dataset(&test_path, &test_ds)?;
    std::fs::write(&manifest_path, manifest.to_text())?;
    println!("{}", manifest_path.display());
    println!("{}", train_path.display());
    println!("{}", test_path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_config_from(args: &TrainArgs) -> Result<RunConfig> {
    Ok(RunConfig {
        objective: ObjectiveKind::parse(&args.objective)?,
        horizon: args.horizon,
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        d_model: args.d_model,
        d_ff: if args.d_ff == 0 { 4 * args.d_model } else { args.d_ff },
        lambda_next_h: args.lambda_next_h,
        lambda_kl: args.lambda_kl,
        psi_hidden: args.psi_hidden,
        optim: AdamWConfig {
            lr: args.lr,
            weight_decay: args.weight_decay,
            warmup_steps: args.warmup_steps,
            ..Default::default()
        },
        steps: args.steps,
        batch_size: args.batch_size,
        seed: args.seed,
        eval_every: args.eval_every,
        checkpoint_every: args.checkpoint_every,
        dropout: 0.0,
        precision: args.precision.clone(),
    })
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let run = run_config_from(&args)?;
    let data = read_dataset(&args.data)?;
    let eval_data = args.eval_data.as_deref().map(read_dataset).transpose()?;
    if let Some(ev) = &eval_data {
        data.check_tokenizer(&ev.tokenizer)?;
    }
    let outcome = match run.precision.as_str() {
        "f32" => train::<f32>(run, &data, eval_data.as_ref(), &args.out, args.resume.as_deref())?,
        "f64" => train::<f64>(run, &data, eval_data.as_ref(), &args.out, args.resume.as_deref())?,
        other => {
            return Err(nextlat::Error::Config(format!("precision must be f32 or f64, got {other}")))
        }
    };
    println!("{}", outcome.manifest_path.display());
    println!("{}", outcome.checkpoint_path.display());
    println!(
        "steps {} it/s {:.3} final_loss {:.6}",
        outcome.steps, outcome.iterations_per_sec, outcome.final_breakdown.total
    );
    Ok(ExitCode::SUCCESS)
}

fn config_hash_of(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let data = read_dataset(&args.data)?;
    let (_tape, model, _objective, _run) = load_from_checkpoint::<f32>(&ck)?;
    let cfg = EvalConfig {
        seed: args.seed,
        detour_prob: args.detour_prob,
        compression_pairs: args.compression_pairs,
        model_id: args.model_id.clone(),
        config_hash: config_hash_of(&ck.config_text),
        ..Default::default()
    };
    let rows = evaluate(&model, &data, &cfg)?;
    write_metric_csvs(&args.out, &rows)?;
    for row in &rows {
        println!("{} = {:.4} (n={})", row.metric, row.value, row.n);
    }
    println!("{}", args.out.join("summary.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(args: ProbeArgs) -> Result<ExitCode> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let data = read_dataset(&args.data)?;
    let eval_data = read_dataset(&args.eval_data)?;
    data.check_tokenizer(&eval_data.tokenizer)?;
    let (_tape, model, _objective, _run) = load_from_checkpoint::<f32>(&ck)?;
    let cfg = ProbeConfig { steps: args.steps, seed: args.seed, ..Default::default() };
    let results =
        nextlat::eval::train_probes(&model, &data.records, &eval_data.records, args.max_offset, &cfg)?;
    let mut text = String::from("offset,heldout_ce,train_examples,heldout_examples\n");
    for r in &results {
        text.push_str(&format!(
            "{},{:.6},{},{}\n",
            r.offset, r.heldout_ce, r.train_examples, r.heldout_examples
        ));
        println!("offset {} heldout_ce {:.4}", r.offset, r.heldout_ce);
    }
    write_with_parents(&args.out, &text)?;
    println!("{}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let (reports, pass) = nextlat::checks::run_all_checks();
    let mut text = String::new();
    text.push_str(nextlat::tensor::CheckReport::csv_header());
    text.push('\n');
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
        println!("{}", r.csv_row());
    }
    if let Some(out) = &args.out {
        write_with_parents(out, &text)?;
        println!("{}", out.display());
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let base = RunConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        d_ff: 256,
        batch_size: 16,
        seed: 0,
        eval_every: 0,
        ..Default::default()
    };
    let pairs = [
        (ObjectiveKind::Gpt, 1),
        (ObjectiveKind::Gpt, 8),
        (ObjectiveKind::Mtp, 1),
        (ObjectiveKind::Mtp, 8),
        (ObjectiveKind::Jtp, 1),
        (ObjectiveKind::Jtp, 8),
        (ObjectiveKind::NextLat, 1),
        (ObjectiveKind::NextLat, 8),
    ];
    let rows = bench_throughput::<f32>(&pairs, &base, args.steps, args.warmup)?;
    let mut text = String::from(BENCH_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
        println!("{}", r.csv_row());
    }
    if let Some(out) = &args.out {
        write_with_parents(out, &text)?;
        println!("{}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn write_with_parents(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
