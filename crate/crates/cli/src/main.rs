use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use wuglab::battery::build_battery;
use wuglab::corpusgen::{generate_corpus, Corpus, CorpusCondition, CorpusSpec};
use wuglab::lm::{self, ModelConfig, SizeTag, TrainConfig};
use wuglab::pipeline::{self, MatrixConfig, RunSpec, Stage, Verdict, BPE_FIT_SEED};
use wuglab::tokenizer::{fit_bpe, BpeModel};

#[derive(Parser)]
#[command(
    name = "wuglab",
    version,
    about = "Overhypothesis wug-test experiments on small transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        condition: CorpusCondition,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the BPE tokenizer on a corpus directory.
    Bpe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "tiny")]
        size: SizeTag,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Tokenizer file; by default one is fitted on the condition's seed-42 corpus.
        #[arg(long)]
        bpe: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the wug-test battery for a corpus directory.
    Battery {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the battery with a trained model (runs missing upstream stages).
    Eval(RunArgs),
    /// Fit the ideal observer to a run's corpus.
    Hbm(RunArgs),
    /// Layer-wise linear probes with a label-permutation control.
    Probe(RunArgs),
    /// Noun-embedding cosine analysis before and after the swap control.
    Reprs(RunArgs),
    /// Print hypothesis verdicts for everything under the data root.
    Analyze {
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Write the report bundle to <root>/report.
    Report {
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Run the experiment matrix.
    RunAll {
        /// Matrix config (JSON); defaults to the acceptance subset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the full 150-run design.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Print the config and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    condition: CorpusCondition,
    #[arg(long, default_value = "tiny")]
    size: SizeTag,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Data root; `$WUGLAB_DATA_DIR` takes precedence.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Training steps, for smoke runs.
    #[arg(long)]
    steps: Option<usize>,
    /// Probe label permutations, for smoke runs.
    #[arg(long)]
    shuffles: Option<usize>,
}

fn run_stage(args: RunArgs, stage: Stage) -> Result<()> {
    let root = pipeline::data_root(args.root.as_deref());
    let run = RunSpec {
        condition: args.condition,
        size: args.size,
        seed: args.seed,
        fraction: args.fraction,
    };
    run.validate()?;
    let o = pipeline::run_stages(
        &root,
        &run,
        &[stage],
        &pipeline::Overrides {
            steps: args.steps,
            probe_shuffles: args.shuffles,
        },
    );
    if let Some(e) = o.error {
        bail!("{}: {e}", o.run_id);
    }
    println!(
        "{}: ran {:?}, up to date {:?}",
        o.run_id, o.executed, o.skipped
    );
    println!("outputs in {}", run.stage_dir(&root, stage).display());
    Ok(())
}

fn load_corpus(dir: &PathBuf) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn default_bpe(corpus: &Corpus) -> Result<BpeModel> {
    let spec = CorpusSpec::new(corpus.spec().condition, BPE_FIT_SEED, 1.0)?;
    Ok(fit_bpe(&generate_corpus(&spec)?)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Gen {
            condition,
            seed,
            fraction,
            out,
        } => {
            let corpus = generate_corpus(&CorpusSpec::new(condition, seed, fraction)?)?;
            corpus.save(&out)?;
            println!(
                "{} sentences, vocabulary {}, md5 {}",
                corpus.sentences.len(),
                corpus.vocab_size(),
                corpus.metadata.md5
            );
        }
        Cmd::Bpe { corpus, out } => {
            let corpus = load_corpus(&corpus)?;
            let bpe = fit_bpe(&corpus)?;
            bpe.save(&out)?;
            println!(
                "vocabulary {} tokens, {} merges",
                bpe.vocab_size(),
                bpe.merges.len()
            );
        }
        Cmd::Train {
            corpus,
            size,
            seed,
            bpe,
            steps,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let bpe = match bpe {
                Some(p) => BpeModel::load(&p)?,
                None => default_bpe(&corpus)?,
            };
            let report = lm::gradient_check(&lm::miniature_config(bpe.vocab_size().min(64)), 7)?;
            log::info!(
                "gradient check: max relative error {:.2e}",
                report.max_rel_err
            );
            let seqs = pipeline::training_sequences(&corpus, &bpe);
            let mc = ModelConfig::for_size(size, bpe.vocab_size());
            let mut tc = TrainConfig::for_size(size, seed);
            if let Some(s) = steps {
                tc.steps = s;
            }
            let total = tc.steps;
            let mut progress = |step: usize, loss: f64| {
                if (step + 1) % 250 == 0 || step + 1 == total {
                    log::info!("step {}/{total} loss {loss:.4}", step + 1);
                }
            };
            let outcome = lm::train(&seqs, &mc, &tc, bpe.pad_id(), Some(&mut progress))?;
            std::fs::create_dir_all(&out)?;
            outcome
                .checkpoint
                .save(&out.join(pipeline::CHECKPOINT_FILE))?;
            outcome.log.write_csv(&out.join(pipeline::TRAIN_LOG_FILE))?;
            bpe.save(&out.join(pipeline::BPE_FILE))?;
            println!(
                "{} parameters; loss {:.4} -> {:.4}",
                mc.n_params(),
                outcome.log.first_loss().unwrap_or(f64::NAN),
                outcome.log.tail_loss(50).unwrap_or(f64::NAN)
            );
        }
        Cmd::Battery { corpus, seed, out } => {
            let corpus = load_corpus(&corpus)?;
            let battery = build_battery(&corpus, seed)?;
            battery.save(&out)?;
            for (t, n) in &battery.manifest.counts {
                println!("{t:>18} {n}");
            }
            for note in &battery.manifest.notes {
                println!("note: {note}");
            }
        }
        Cmd::Eval(a) => run_stage(a, Stage::Eval)?,
        Cmd::Hbm(a) => run_stage(a, Stage::Hbm)?,
        Cmd::Probe(a) => run_stage(a, Stage::Probe)?,
        Cmd::Reprs(a) => run_stage(a, Stage::Reprs)?,
        Cmd::Analyze { root } => {
            let root = pipeline::data_root(root.as_deref());
            let runs = pipeline::collect_runs(&root);
            for h in pipeline::hypotheses(&runs)? {
                let v = match h.verdict {
                    Verdict::Supported => "supported",
                    Verdict::NotSupported => "not supported",
                    Verdict::NotEvaluable => "not evaluable",
                };
                println!("{:<8} {v:<14} {}", h.id, h.criterion);
                for n in &h.notes {
                    println!("         {n}");
                }
            }
        }
        Cmd::Report { root } => {
            let root = pipeline::data_root(root.as_deref());
            let bundle = pipeline::emit_reports(&root)?;
            println!(
                "{} files in {}",
                bundle.manifest.files.len(),
                bundle.dir.display()
            );
            for e in &bundle.manifest.errors {
                println!("missing: {e}");
            }
        }
        Cmd::RunAll {
            config,
            full,
            jobs,
            dry_run,
        } => {
            let cfg = match (config, full) {
                (Some(p), _) => MatrixConfig::load(&p)?,
                (None, true) => MatrixConfig::full(),
                (None, false) => MatrixConfig::acceptance(),
            };
            if dry_run {
                println!("{}", serde_json::to_string_pretty(&cfg)?);
                println!("data root: {}", cfg.data_root().display());
                return Ok(());
            }
            let outcomes = pipeline::run_matrix(&cfg, jobs)?;
            let mut failed = 0;
            for o in &outcomes {
                match &o.error {
                    Some(e) => {
                        failed += 1;
                        println!("{}: FAILED ({e})", o.run_id);
                    }
                    None => println!(
                        "{}: ran {:?}, up to date {:?}",
                        o.run_id, o.executed, o.skipped
                    ),
                }
            }
            if failed > 0 {
                bail!("{failed} run(s) failed");
            }
        }
    }
    Ok(())
}
