use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use rlt4rec::cli::{
    cmd_eval, cmd_gen, cmd_ingest, cmd_overfit, cmd_probe, cmd_train, parse_override, resolve_threads, RunConfig,
    TrainOptions,
};
use rlt4rec::policies::PolicyKind;
use rlt4rec::{Error, Result};

#[derive(Parser)]
#[command(name = "rlt4rec", version, about = "Transformer recommender lab: simulate, train, evaluate, probe")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set model.epochs=40`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for generation and evaluation (default: RLT4REC_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline training corpus.
    Gen,
    /// Train a model on a generated corpus.
    Train {
        /// Corpus file (default: <out>/dataset.csv).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Train the ablation model without the rating bottleneck.
        #[arg(long)]
        no_bottleneck: bool,
        /// Overfit the built-in eight-sequence fixture instead.
        #[arg(long, conflicts_with_all = ["dataset", "no_bottleneck"])]
        tiny_overfit: bool,
    },
    /// Evaluate policies on a simulated cohort.
    Eval {
        /// Model checkpoint (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        /// Checkpoint for rlt4rec_no_bottleneck (default: <out>/model_no_bottleneck.ckpt).
        #[arg(long)]
        ablation_checkpoint: Option<PathBuf>,
        /// Run model policies once per sweep target.
        #[arg(long)]
        target_sweep: bool,
    },
    /// Probe a checkpoint's representation for the group posterior.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit a group model to a `user_id,item_id,rating` file.
    Ingest {
        triples: PathBuf,
        #[arg(long)]
        n_groups: usize,
        /// Output file (default: <out>/group_model.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the fully resolved configuration as JSON.
    PrintConfig,
}

fn load_config(cli: &Cli, extra: Vec<(String, Value)>) -> Result<RunConfig> {
    let mut overrides = cli.sets.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("output_dir".into(), out.display().to_string().into()));
    }
    overrides.extend(extra);
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = resolve_threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Gen => {
            let path = cmd_gen(&load_config(&cli, vec![])?)?;
            println!("{}", path.display());
        }
        Command::Train {
            dataset,
            no_bottleneck,
            tiny_overfit,
        } => {
            let cfg = load_config(&cli, vec![])?;
            if *tiny_overfit {
                let (initial, last) = cmd_overfit(&cfg)?;
                println!("initial_loss={initial:.6} final_loss={last:.6} ratio={:.4}", last / initial);
            } else {
                let opts = TrainOptions {
                    no_bottleneck: *no_bottleneck,
                };
                let out = cmd_train(&cfg, dataset.as_deref(), opts)?;
                println!(
                    "{} best_epoch={} val_loss={:.6}",
                    out.checkpoint.display(),
                    out.best_epoch,
                    out.best_val_loss
                );
            }
        }
        Command::Eval {
            checkpoint,
            policies,
            ablation_checkpoint,
            target_sweep,
        } => {
            let mut extra = Vec::new();
            if !policies.is_empty() {
                let names = policies
                    .iter()
                    .map(|p| p.trim().parse::<PolicyKind>().map(|k| Value::from(k.name())))
                    .collect::<Result<Vec<_>>>()?;
                extra.push(("eval.policies".into(), Value::Array(names)));
            }
            if let Some(p) = ablation_checkpoint {
                extra.push(("eval.ablation_checkpoint".into(), p.display().to_string().into()));
            }
            let cfg = load_config(&cli, extra)?;
            for r in cmd_eval(&cfg, checkpoint.as_deref(), *target_sweep)? {
                let last = r.curve.last().expect("non-empty curve");
                let label = r.target.map_or(r.policy.clone(), |t| format!("{}@{t}", r.policy));
                println!(
                    "{label:<28} R@{} = {:.4} ± {:.4}  (first {:.4})",
                    last.t, last.mean_rating, last.stderr, r.curve[0].instant_rating
                );
            }
        }
        Command::Probe { checkpoint } => {
            let cfg = load_config(&cli, vec![])?;
            let report = cmd_probe(&cfg, checkpoint.as_deref())?;
            report.write_csv(std::io::stdout())?;
        }
        Command::Ingest {
            triples,
            n_groups,
            output,
        } => {
            let cfg = load_config(&cli, vec![])?;
            let out = output.clone().unwrap_or_else(|| cfg.output_dir.join("group_model.json"));
            let gm = cmd_ingest(triples, *n_groups, cfg.seed, &out)?;
            println!("{} groups={} items={}", out.display(), gm.n_groups, gm.n_items);
        }
        Command::PrintConfig => {
            let cfg = load_config(&cli, vec![])?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
