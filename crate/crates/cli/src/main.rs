use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use promptedit::checkpoint::Checkpoint;
use promptedit::edit::EditAction;
use promptedit::env::{derive_seed, edit_query, AttentionPolicy, Environment};
use promptedit::harness::{
    evaluate, run_baseline, BaselineKind, DatasetSplit, EvalReport, RunConfig, ScorerChoice, INIT_STREAM, POLICY_STREAM,
};
use promptedit::prompt::render;
use promptedit::train::train;

#[derive(Parser)]
#[command(name = "promptedit", version, about = "Train and apply query-dependent prompt-editing policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and evaluate its best checkpoint on the test split.
    Train {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample actions instead of taking the argmax.
        #[arg(long)]
        sample: bool,
    },
    /// Score a reference editor on the test split.
    Baseline {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum)]
        kind: BaselineArg,
        /// Seeds to average over (random-edit varies with the seed).
        #[arg(long, default_value_t = 10)]
        repeats: u64,
    },
    /// Show the prompt before and after the policy edits one query.
    InspectPrompt {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    NoEdit,
    RandomEdit,
    GreedyEdit,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Synthetic,
    Remote,
}

#[derive(Args)]
struct RunFlags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_shots: Option<usize>,
    #[arg(long)]
    n_exemplars: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_enum)]
    scorer: Option<ScorerArg>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    disable_instruction_edits: bool,
    #[arg(long)]
    disable_exemplar_edits: bool,
    #[arg(long)]
    disable_verbalizer_edits: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.task {
            c.task = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.k_shots {
            c.k_shots = v;
        }
        if let Some(v) = self.n_exemplars {
            c.env.n_exemplars = v;
        }
        if let Some(v) = self.pool_size {
            c.env.pool_size = v;
        }
        if let Some(v) = self.horizon {
            c.env.horizon = v;
        }
        if let Some(v) = self.scorer {
            c.scorer = match v {
                ScorerArg::Synthetic => ScorerChoice::Synthetic,
                ScorerArg::Remote => ScorerChoice::Remote,
            };
        }
        if let Some(v) = &self.endpoint {
            c.endpoint = Some(v.clone());
        }
        if let Some(v) = &self.dataset {
            c.dataset = Some(v.clone());
        }
        if let Some(v) = &self.test_dataset {
            c.test_dataset = Some(v.clone());
        }
        if let Some(v) = self.iterations {
            c.train.ppo.iterations = v;
        }
        if self.disable_instruction_edits {
            c.env.toggles.instruction = false;
        }
        if self.disable_exemplar_edits {
            c.env.toggles.exemplar = false;
        }
        if self.disable_verbalizer_edits {
            c.env.toggles.verbalizer = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct PromptRecord<'a> {
    index: usize,
    query: &'a str,
    label: &'a str,
    predicted: &'a str,
    before: &'a str,
    after: &'a str,
    edits: &'a [EditAction],
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_prompts(path: &Path, report: &EvalReport, split: &DatasetSplit, labels: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (p, ex) in report.predictions.iter().zip(&split.records) {
        let rec = PromptRecord {
            index: p.index,
            query: &ex.text,
            label: &labels[ex.label],
            predicted: &labels[p.predicted],
            before: &p.before_text,
            after: &p.after_text,
            edits: &p.after.history,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    command: &'static str,
    test_size: usize,
    accuracy: f64,
    mean_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_dev_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_iteration: Option<usize>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = match &cli.command {
        Command::Train { run } | Command::Evaluate { run, .. } | Command::Baseline { run, .. } | Command::InspectPrompt { run, .. } => run,
    };
    let config = run.resolve()?;
    let out = run.out_dir.clone();
    let out = out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let prepared = config.prepare()?;
    let env = Environment::new(
        config.env.clone(),
        &prepared.task,
        &prepared.few_shot.pool,
        prepared.scorer.as_ref(),
    )?;
    let labels = &prepared.task.label_space;

    match &cli.command {
        Command::Train { .. } => {
            std::fs::write(out.join("config.toml"), config.to_toml())?;
            let mut curves = BufWriter::new(File::create(out.join("curves.jsonl"))?);
            let result = train(
                &env,
                &prepared.few_shot.train,
                &prepared.few_shot.dev,
                &config.train_config(),
                Some(&mut curves),
            );
            let outcome = match result {
                Ok(o) => o,
                Err(promptedit::train::TrainError::ScorerUnavailable { iteration, message, partial }) => {
                    partial.save(&out.join("checkpoint-partial.bin"))?;
                    bail!("scorer unavailable at iteration {iteration}: {message}; partial checkpoint saved");
                }
                Err(e) => return Err(e.into()),
            };
            outcome.best.save(&out.join("checkpoint-best.bin"))?;
            outcome.last.save(&out.join("checkpoint-last.bin"))?;
            let saved = Checkpoint::load(&out.join("checkpoint-best.bin"))?;
            let report = evaluate(&saved, &env, &prepared.test, config.seed, config.sample_at_eval)?;
            write_prompts(&out.join("prompts.jsonl"), &report, &prepared.test, labels)?;
            let metrics = Metrics {
                command: "train",
                test_size: prepared.test.len(),
                accuracy: report.accuracy,
                mean_score: report.mean_score,
                best_dev_accuracy: Some(outcome.best_dev_accuracy),
                best_iteration: Some(saved.meta.iteration),
            };
            write_json(&out.join("metrics.json"), &metrics)?;
            println!("test accuracy {:.4}, mean score {:.4}", report.accuracy, report.mean_score);
        }
        Command::Evaluate { checkpoint, sample, .. } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let report = evaluate(&ck, &env, &prepared.test, config.seed, *sample || config.sample_at_eval)?;
            write_prompts(&out.join("prompts.jsonl"), &report, &prepared.test, labels)?;
            write_json(
                &out.join("metrics.json"),
                &Metrics {
                    command: "evaluate",
                    test_size: prepared.test.len(),
                    accuracy: report.accuracy,
                    mean_score: report.mean_score,
                    best_dev_accuracy: None,
                    best_iteration: Some(ck.meta.iteration),
                },
            )?;
            println!("test accuracy {:.4}, mean score {:.4}", report.accuracy, report.mean_score);
        }
        Command::Baseline { kind, repeats, .. } => {
            let kind = match kind {
                BaselineArg::NoEdit => BaselineKind::NoEdit,
                BaselineArg::RandomEdit => BaselineKind::RandomEdit,
                BaselineArg::GreedyEdit => BaselineKind::GreedyEdit,
            };
            #[derive(Serialize)]
            struct Run {
                seed: u64,
                accuracy: f64,
                mean_score: f64,
            }
            let runs = (0..(*repeats).max(1))
                .map(|r| {
                    let seed = if r == 0 { config.seed } else { derive_seed(config.seed, 99, r) };
                    run_baseline(kind, &env, &prepared.test, seed).map(|rep| Run {
                        seed,
                        accuracy: rep.accuracy,
                        mean_score: rep.mean_score,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let n = runs.len() as f64;
            let mean = runs.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let std = (runs.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / n).sqrt();
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({
                    "command": "baseline",
                    "kind": kind,
                    "test_size": prepared.test.len(),
                    "accuracy_mean": mean,
                    "accuracy_std": std,
                    "runs": runs,
                }),
            )?;
            println!("{kind:?}: accuracy {mean:.4} +/- {std:.4} over {} run(s)", runs.len());
        }
        Command::InspectPrompt { checkpoint, query, .. } => {
            let ck = Checkpoint::load(&checkpoint)?;
            ck.meta
                .ensure_compatible(&promptedit::train::checkpoint_meta(&env, ck.meta.net, 0))?;
            let policy = AttentionPolicy { params: &ck.params, greedy: true };
            let init_seed = derive_seed(config.seed, INIT_STREAM, 0);
            let before = env.initial_prompt(&query, init_seed);
            let after = edit_query(&env, &policy, &query, Some(before.clone()), init_seed, derive_seed(config.seed, POLICY_STREAM, 0), Some(&ck.moments))?;
            let before_text = render(&before, &prepared.task, &prepared.few_shot.pool)?;
            let after_text = render(&after.prompt, &prepared.task, &prepared.few_shot.pool)?;
            let rec = PromptRecord {
                index: 0,
                query: &query,
                label: "",
                predicted: &labels[after.observation.predicted()],
                before: &before_text,
                after: &after_text,
                edits: &after.prompt.history,
            };
            let mut f = BufWriter::new(File::create(out.join("inspect.jsonl"))?);
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
            println!("before: {before_text}\nafter:  {after_text}\nedits:  {:?}\npredicted: {}", after.prompt.history, rec.predicted);
        }
    }
    Ok(())
}
