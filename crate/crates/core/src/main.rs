use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cirl::ablation::run_ablation;
use cirl::checkpoint::{load_embeddings, load_model, save_embeddings, save_model, EmbeddingIds};
use cirl::config::RunConfig;
use cirl::dataset::Dataset;
use cirl::encoder::Role;
use cirl::eval::{attention_csv, attention_report, bench_latency, build_index, evaluate, pool_usage, score};
use cirl::model::{Input, Model};
use cirl::synthcorpus::{gen_corpus, read_corpus, write_corpus, Corpus, Split};
use cirl::train::train;
use cirl::{Error, Result};

#[derive(Parser)]
#[command(name = "cirl", version, about = "Composed image retrieval on a synthetic scene corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds the corpus, parameter init and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; every output lands here.
    #[arg(long)]
    out: PathBuf,
    /// Pooling strategy: weighted_mean, last or mean.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, value_parser = ["none", "universal", "instance"])]
    soft_mode: Option<String>,
    #[arg(long, value_parser = ["0", "2", "4"])]
    task_prompt_len: Option<String>,
    /// Soft-prompt length per pool entry.
    #[arg(long)]
    lp: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key, e.g. `--set corpus.candidates=1200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a corpus file.
    GenData(Common),
    /// Train a model on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Dump candidate and query embeddings for one split.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Score embedding dumps written by `encode`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `candidates.emb` and `queries_<split>.emb`.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Per-query encoding latency and the decoder-forward count.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
    },
    /// Train and score one model per (value, seed).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// soft_mode, task_prompt_len, pooling, lp, topk, pool_size, lambda, batch, or any config key.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "42,43,44,45,46")]
        seeds: Vec<u64>,
    },
    /// Per-entry selection frequencies of the prompt pool over a split.
    InspectPool {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Attention mass of task and soft prompts on visual vs caption positions.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|s| s.to_string()));
        push("train.seed", self.seed.map(|s| s.to_string()));
        push("model.init_seed", self.seed.map(|s| s.to_string()));
        push("model.pooling", self.strategy.clone());
        push("model.soft_mode", self.soft_mode.clone());
        push("model.task_prompt_len", self.task_prompt_len.clone());
        push("model.prompt_len", self.lp.map(|v| v.to_string()));
        push("model.top_k", self.topk.map(|v| v.to_string()));
        push("model.pool_size", self.pool_size.map(|v| v.to_string()));
        push("train.lambda", self.lambda.map(|v| v.to_string()));
        push("train.batch", self.batch.map(|v| v.to_string()));
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {s:?}")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(o)
    }

    /// Validates everything, then creates the run directory and records the config.
    fn resolve(&self, corpus: Option<&Corpus>) -> Result<RunConfig> {
        let text = self.config.as_ref().map(fs::read_to_string).transpose()?;
        let mut cfg = RunConfig::resolve(text.as_deref(), &self.overrides()?)?;
        if let Some(c) = corpus {
            cfg.seed = c.seed;
            cfg.corpus = c.config.clone();
            cfg.model.d_raw = c.config.render.d_raw;
            cfg.validate()?;
        }
        fs::create_dir_all(&self.out)?;
        let dump = cfg.dump();
        eprint!("{dump}");
        fs::write(self.out.join("config.txt"), dump)?;
        Ok(cfg)
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_corpus(BufReader::new(f))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(common) => {
            let cfg = common.resolve(None)?;
            let corpus = gen_corpus(&cfg.corpus, cfg.seed)?;
            let path = common.out.join("corpus.jsonl");
            let mut w = BufWriter::new(File::create(&path)?);
            write_corpus(&corpus, &mut w)?;
            w.flush()?;
            print(json!({
                "corpus": path,
                "candidates": corpus.candidates.len(),
                "train": corpus.train.len(),
                "val": corpus.val.len(),
                "test": corpus.test.len(),
            }));
        }
        Cmd::Train { common, corpus } => {
            let corpus = load_corpus(&corpus)?;
            let cfg = common.resolve(Some(&corpus))?;
            let mut model = Model::new(cfg.model.clone())?;
            let data = Dataset::new(&corpus, model.vision())?;
            let mut log_file = BufWriter::new(File::create(common.out.join("train_log.jsonl"))?);
            let log = train(&mut model, &data, &cfg.train, Some(&mut log_file))?;
            log_file.flush()?;
            let ckpt = common.out.join("model.ckpt");
            save_model(&model, Some(&cfg.train), &log, &ckpt)?;
            let val = evaluate(&model, &data, Split::Val, &cfg.eval.ks, &cfg.eval.subset_ks)?;
            fs::write(common.out.join("metrics_val.json"), val.to_json())?;
            print(json!({
                "checkpoint": ckpt,
                "final_loss": log.last().map(|l| l.loss),
                "val_recall_at_1": val.recall_at(1),
                "val_r_mean": val.r_mean,
            }));
        }
        Cmd::Encode {
            common,
            checkpoint,
            corpus,
            split,
        } => {
            let corpus = load_corpus(&corpus)?;
            common.resolve(Some(&corpus))?;
            let (model, _) = load_model(&checkpoint)?;
            let data = Dataset::new(&corpus, model.vision())?;
            let cand = model.encode_all(&data.candidate_inputs(), 64)?;
            let cand_ids = EmbeddingIds {
                role: Role::Target,
                ids: (0..data.candidates.len()).collect(),
                split: None,
                targets: None,
            };
            save_embeddings(&common.out.join("candidates.emb"), &cand, &cand_ids)?;
            let s = data.split(split);
            let q = model.encode_all(&s.queries(), 64)?;
            let q_ids = EmbeddingIds {
                role: Role::Query,
                ids: (0..s.len()).collect(),
                split: Some(split),
                targets: Some(s.targets.clone()),
            };
            let qpath = common.out.join(format!("queries_{}.emb", split_name(split)));
            save_embeddings(&qpath, &q, &q_ids)?;
            print(json!({"candidates": cand.rows, "queries": q.rows, "split": split}));
        }
        Cmd::Eval {
            common,
            embeddings,
            corpus,
            split,
        } => {
            let corpus = load_corpus(&corpus)?;
            let cfg = common.resolve(Some(&corpus))?;
            let (cand, cand_ids) = load_embeddings(&embeddings.join("candidates.emb"))?;
            let (q, q_ids) = load_embeddings(&embeddings.join(format!("queries_{}.emb", split_name(split))))?;
            let gts = q_ids
                .targets
                .ok_or_else(|| Error::Checkpoint("query dump has no ground-truth targets".into()))?;
            let index = build_index(&cand, &cand_ids.ids, Some(corpus.subsets.clone()))?;
            let m = score(&index, &q, &gts, &cfg.eval.ks, &cfg.eval.subset_ks)?;
            let path = common.out.join(format!("metrics_{}.json", split_name(split)));
            fs::write(&path, m.to_json())?;
            print(json!({
                "metrics": path,
                "recall": m.recall,
                "r_mean": m.r_mean,
                "recall_subset": m.recall_subset,
                "avg_r5_rsub1": m.avg_r5_rsub1,
            }));
        }
        Cmd::Bench {
            common,
            checkpoint,
            corpus,
            split,
            repetitions,
        } => {
            let corpus = load_corpus(&corpus)?;
            common.resolve(Some(&corpus))?;
            let (model, _) = load_model(&checkpoint)?;
            let data = Dataset::new(&corpus, model.vision())?;
            let report = bench_latency(&model, &data.split(split).queries(), repetitions)?;
            let text = serde_json::to_string_pretty(&report)?;
            fs::write(common.out.join("latency.json"), &text)?;
            print(serde_json::to_value(&report)?);
        }
        Cmd::Ablate {
            common,
            corpus,
            axis,
            values,
            seeds,
        } => {
            let corpus = load_corpus(&corpus)?;
            let cfg = common.resolve(Some(&corpus))?;
            let table = run_ablation(&cfg, &corpus, &axis, &values, &seeds, Some(&common.out))?;
            eprint!("{}", table.to_markdown());
            print(json!({
                "axis": table.axis,
                "runs": table.runs.len(),
                "table": common.out.join("ablation.csv"),
            }));
        }
        Cmd::InspectPool {
            common,
            checkpoint,
            corpus,
            split,
        } => {
            let corpus = load_corpus(&corpus)?;
            common.resolve(Some(&corpus))?;
            let (model, _) = load_model(&checkpoint)?;
            let data = Dataset::new(&corpus, model.vision())?;
            let usage = pool_usage(&model, &data, split)?;
            let path = common.out.join(format!("pool_usage_{}.csv", split_name(split)));
            fs::write(&path, usage.to_csv())?;
            let used = usage
                .query_counts
                .iter()
                .zip(&usage.target_counts)
                .filter(|(q, t)| **q + **t > 0)
                .count();
            print(json!({"usage": path, "entries_used": used, "pool_size": usage.query_counts.len()}));
        }
        Cmd::Attention {
            common,
            checkpoint,
            corpus,
            split,
            index,
        } => {
            let corpus = load_corpus(&corpus)?;
            common.resolve(Some(&corpus))?;
            let (model, _) = load_model(&checkpoint)?;
            let data = Dataset::new(&corpus, model.vision())?;
            let s = data.split(split);
            if index >= s.len() {
                return Err(Error::InvalidConfig(format!("index {index} out of range for {} queries", s.len())));
            }
            let rows = attention_report(&model, &Input::query(&s.features[index], &s.captions[index]))?;
            let path = common.out.join("attention.csv");
            fs::write(&path, attention_csv(&rows))?;
            print(json!({"attention": path, "rows": rows.len()}));
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            return fail("Usage", first.to_string());
        }
    };
    if let Ok(n) = std::env::var("CIRL_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    return fail("InvalidConfig", e.to_string());
                }
            }
            _ => return fail("InvalidConfig", format!("CIRL_THREADS must be a positive integer, got {n:?}")),
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
