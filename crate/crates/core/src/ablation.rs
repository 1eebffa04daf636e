//! Cross-product ablation runs over one configuration axis and several seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::model::Model;
use crate::synthcorpus::{Corpus, Split};
use crate::train::{train, EpochLog};

/// Short axis names accepted besides full dotted config keys.
pub fn axis_key(axis: &str) -> &str {
    match axis {
        "soft_mode" | "soft-mode" => "model.soft_mode",
        "task_prompt_len" | "task-prompt-len" => "model.task_prompt_len",
        "pooling" | "strategy" => "model.pooling",
        "lp" | "prompt_len" => "model.prompt_len",
        "topk" | "top_k" => "model.top_k",
        "pool_size" | "pool-size" => "model.pool_size",
        "lambda" => "train.lambda",
        "batch" => "train.batch",
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub value: String,
    pub seed: u64,
    pub metrics: MetricReport,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn run(&self, value: &str, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.value == value && r.seed == seed)
    }

    pub fn mean_r_mean(&self, value: &str) -> f64 {
        let rs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.value == value)
            .map(|r| r.metrics.r_mean)
            .collect();
        rs.iter().sum::<f64>() / rs.len().max(1) as f64
    }

    /// Seeds on which `a` scores an R_mean at least as high as `b`.
    pub fn seeds_at_least(&self, a: &str, b: &str) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| match (self.run(a, s), self.run(b, s)) {
                (Some(x), Some(y)) => x.metrics.r_mean >= y.metrics.r_mean,
                _ => false,
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,seed,r1,r5,r10,r50,r_mean,rsub1,avg_r5_rsub1,final_loss\n");
        for r in &self.runs {
            let m = &r.metrics;
            let get = |k| m.recall_at(k).map_or(String::new(), |v| format!("{v:.4}"));
            let rsub1 = m
                .recall_subset
                .as_ref()
                .and_then(|x| x.get(&1))
                .map_or(String::new(), |v| format!("{v:.4}"));
            let avg = m.avg_r5_rsub1.map_or(String::new(), |v| format!("{v:.4}"));
            let loss = r.log.last().map_or(String::new(), |l| format!("{:.4}", l.loss));
            writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4},{},{},{}",
                self.axis,
                r.value,
                r.seed,
                get(1),
                get(5),
                get(10),
                get(50),
                m.r_mean,
                rsub1,
                avg,
                loss
            )
            .unwrap();
        }
        s
    }

    /// One row per value: mean R_mean over seeds and the per-seed values.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | mean R_mean |", self.axis);
        for seed in &self.seeds {
            write!(s, " seed {seed} |").unwrap();
        }
        s.push('\n');
        s.push_str(&"|---".repeat(self.seeds.len() + 2));
        s.push_str("|\n");
        for v in &self.values {
            write!(s, "| {v} | {:.4} |", self.mean_r_mean(v)).unwrap();
            for &seed in &self.seeds {
                match self.run(v, seed) {
                    Some(r) => write!(s, " {:.4} |", r.metrics.r_mean).unwrap(),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Trains one model per `(value, seed)` on `corpus` and scores it on the test split.
///
/// The seed drives parameter initialization and batch order; the corpus is shared.
/// With `out` set, each run writes its metrics and log under `out/<value>/seed<seed>/`.
pub fn run_ablation(
    base: &RunConfig,
    corpus: &Corpus,
    axis: &str,
    values: &[String],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<AblationTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one value and one seed".into()));
    }
    let key = axis_key(axis);
    let mut configs = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        cfg.set(key, v)?;
        cfg.corpus = corpus.config.clone();
        cfg.model.d_raw = corpus.config.render.d_raw;
        cfg.validate()?;
        configs.push(cfg);
    }
    let mut cache: Option<(Model, Dataset)> = None;
    let mut runs = Vec::new();
    for (v, cfg) in values.iter().zip(&configs) {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.train.seed = seed;
            cfg.model.init_seed = seed;
            let mut model = Model::new(cfg.model.clone())?;
            let reuse = matches!(&cache, Some((m, _)) if m.vision() == model.vision());
            if !reuse {
                let data = Dataset::new(corpus, model.vision())?;
                cache = Some((model.clone(), data));
            }
            let data = &cache.as_ref().expect("dataset cached").1;
            let mut log_buf = Vec::new();
            let log = train(&mut model, data, &cfg.train, Some(&mut log_buf))?;
            let metrics = evaluate(&model, data, Split::Test, &cfg.eval.ks, &cfg.eval.subset_ks)?;
            if let Some(dir) = out {
                let run_dir = dir.join(sanitize(v)).join(format!("seed{seed}"));
                fs::create_dir_all(&run_dir)?;
                fs::write(run_dir.join("metrics.json"), metrics.to_json())?;
                fs::write(run_dir.join("train_log.jsonl"), &log_buf)?;
                fs::write(run_dir.join("config.txt"), cfg.dump())?;
            }
            runs.push(AblationRun {
                value: v.clone(),
                seed,
                metrics,
                log,
            });
        }
    }
    let table = AblationTable {
        axis: key.to_string(),
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        runs,
    };
    if let Some(dir) = out {
        fs::write(dir.join("ablation.csv"), table.to_csv())?;
        fs::write(dir.join("ablation.md"), table.to_markdown())?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect()
}
