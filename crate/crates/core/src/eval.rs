//! Exhaustive cosine retrieval, recall metrics, latency and attention diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::SegmentKind;
use crate::error::{Error, Result};
use crate::model::{Input, Model};
use crate::synthcorpus::Split;
use crate::tensor::{norm, Tensor};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];
pub const DEFAULT_SUBSET_KS: [usize; 3] = [1, 2, 3];

/// Unit-normalized candidate embeddings with their ids and optional subset partition.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    embeddings: Tensor,
    ids: Vec<usize>,
    subsets: Option<Vec<Vec<usize>>>,
}

pub fn build_index(embeddings: &Tensor, ids: &[usize], subsets: Option<Vec<Vec<usize>>>) -> Result<RetrievalIndex> {
    if embeddings.rows != ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", ids.len()),
            got: format!("{} rows", embeddings.rows),
        });
    }
    let mut e = embeddings.clone();
    for (r, &id) in ids.iter().enumerate() {
        let n = norm(e.row(r));
        if !(n >= 1e-12) {
            return Err(Error::ZeroEmbedding(id));
        }
        e.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    Ok(RetrievalIndex {
        embeddings: e,
        ids: ids.to_vec(),
        subsets,
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn subsets(&self) -> Option<&[Vec<usize>]> {
        self.subsets.as_deref()
    }

    /// Every candidate id, by descending cosine to `query`, ties by ascending id.
    pub fn rank_all(&self, query: &[f64]) -> Vec<usize> {
        let qn = norm(query);
        let scale = if qn > 0.0 { 1.0 / qn } else { 0.0 };
        let sims: Vec<f64> = (0..self.len())
            .map(|r| scale * crate::tensor::dot(query, self.embeddings.row(r)))
            .collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(self.ids[a].cmp(&self.ids[b])));
        order.into_iter().map(|r| self.ids[r]).collect()
    }

    pub fn retrieve(&self, query: &[f64], k: usize) -> Vec<usize> {
        let mut r = self.rank_all(query);
        r.truncate(k);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_queries: usize,
    pub recall: BTreeMap<usize, f64>,
    /// Mean of `recall` over the K list.
    pub r_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_subset: Option<BTreeMap<usize, f64>>,
    /// Mean of Recall@5 and Recall_subset@1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_r5_rsub1: Option<f64>,
    /// 1-based rank of each query's ground truth.
    pub ranks: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_ranks: Option<Vec<usize>>,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

fn fraction_within(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Metrics from full rankings. Subset ranks are the ground truth's position
/// in the global ranking restricted to the members of its subset.
pub fn compute_metrics(
    rankings: &[Vec<usize>],
    ground_truth: &[usize],
    subsets: Option<&[Vec<usize>]>,
    ks: &[usize],
    subset_ks: &[usize],
) -> Result<MetricReport> {
    assert_eq!(rankings.len(), ground_truth.len());
    if rankings.is_empty() {
        return Err(Error::EmptySequence);
    }
    let rank_in = |ranking: &[usize], gt: usize, keep: &dyn Fn(usize) -> bool| -> usize {
        ranking
            .iter()
            .filter(|&&id| keep(id))
            .position(|&id| id == gt)
            .map(|p| p + 1)
            .unwrap_or(usize::MAX)
    };
    let ranks: Vec<usize> = rankings
        .iter()
        .zip(ground_truth)
        .map(|(r, &gt)| rank_in(r, gt, &|_| true))
        .collect();
    let recall: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, fraction_within(&ranks, k))).collect();
    let r_mean = if ks.is_empty() {
        0.0
    } else {
        recall.values().sum::<f64>() / recall.len() as f64
    };

    let (recall_subset, avg, subset_ranks) = match subsets {
        None if !subset_ks.is_empty() => return Err(Error::MissingSubset),
        None => (None, None, None),
        Some(subsets) => {
            let mut owner = BTreeMap::new();
            for (s, members) in subsets.iter().enumerate() {
                for &m in members {
                    owner.insert(m, s);
                }
            }
            let sranks = rankings
                .iter()
                .zip(ground_truth)
                .map(|(r, &gt)| {
                    let s = *owner.get(&gt).ok_or(Error::MissingSubset)?;
                    Ok(rank_in(r, gt, &|id| owner.get(&id) == Some(&s)))
                })
                .collect::<Result<Vec<_>>>()?;
            let rs: BTreeMap<usize, f64> = subset_ks.iter().map(|&k| (k, fraction_within(&sranks, k))).collect();
            let avg = (fraction_within(&ranks, 5) + fraction_within(&sranks, 1)) / 2.0;
            (Some(rs), Some(avg), Some(sranks))
        }
    };
    Ok(MetricReport {
        num_queries: ranks.len(),
        recall,
        r_mean,
        recall_subset,
        avg_r5_rsub1: avg,
        ranks,
        subset_ranks,
    })
}

/// Ranks every query of `queries` against `index` and scores them.
pub fn score(
    index: &RetrievalIndex,
    queries: &Tensor,
    ground_truth: &[usize],
    ks: &[usize],
    subset_ks: &[usize],
) -> Result<MetricReport> {
    let rankings: Vec<Vec<usize>> = (0..queries.rows)
        .into_par_iter()
        .map(|r| index.rank_all(queries.row(r)))
        .collect();
    let subset_ks = if index.subsets().is_some() { subset_ks } else { &[] };
    compute_metrics(&rankings, ground_truth, index.subsets(), ks, subset_ks)
}

/// Encodes candidates and one split's queries, then scores retrieval.
pub fn evaluate(model: &Model, data: &Dataset, split: Split, ks: &[usize], subset_ks: &[usize]) -> Result<MetricReport> {
    let cand = model.encode_all(&data.candidate_inputs(), 64)?;
    let ids: Vec<usize> = (0..data.candidates.len()).collect();
    let index = build_index(&cand, &ids, Some(data.subsets.clone()))?;
    let s = data.split(split);
    let q = model.encode_all(&s.queries(), 64)?;
    score(&index, &q, &s.targets, ks, subset_ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Decoder forwards per single-query encoding (the single-pass contract says 1).
    pub forwards_per_query: f64,
    pub single_pass: bool,
}

/// Nearest-rank percentile of an ascending sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[idx - 1]
}

/// Times single-query encoding: instruction assembly, one decode, pooling.
pub fn bench_latency(model: &Model, queries: &[Input<'_>], repetitions: usize) -> Result<LatencyReport> {
    if queries.is_empty() || repetitions == 0 {
        return Err(Error::InvalidConfig("bench needs queries and repetitions > 0".into()));
    }
    let mut samples = Vec::with_capacity(queries.len() * repetitions);
    let mut max_forwards = 0;
    let mut min_forwards = usize::MAX;
    for _ in 0..repetitions {
        for q in queries {
            let before = model.decoder_forwards();
            let t = Instant::now();
            let e = model.encode(std::slice::from_ref(q))?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(e);
            let n = model.decoder_forwards() - before;
            max_forwards = max_forwards.max(n);
            min_forwards = min_forwards.min(n);
        }
    }
    samples.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        samples: samples.len(),
        p50_ms: percentile(&samples, 0.5),
        p95_ms: percentile(&samples, 0.95),
        forwards_per_query: max_forwards as f64,
        single_pass: max_forwards == 1 && min_forwards == 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub position: usize,
    pub segment: SegmentKind,
    pub visual_mass: f64,
    pub caption_mass: f64,
}

/// Last-layer, head-averaged attention of each task- and soft-prompt position
/// onto the sentence-prompt (visual) and caption positions.
pub fn attention_report(model: &Model, input: &Input<'_>) -> Result<Vec<AttentionRow>> {
    let f = model.forward(std::slice::from_ref(input), None, false)?;
    let last = *f.decoded.attention.last().expect("at least one layer");
    let (probs, segments, heads) = f.graph.attention_probs(last).expect("attention node");
    let n = segments[0].len;
    let p = &probs[0];
    let instr = &f.plans[0].instruction;
    let mut rows = Vec::new();
    for i in 0..n {
        let kind = instr.kind_at(i).expect("segments tile the instruction");
        if !matches!(kind, SegmentKind::TaskPrompt | SegmentKind::SoftPrompt) {
            continue;
        }
        let mut visual = 0.0;
        let mut caption = 0.0;
        for h in 0..heads {
            let row = &p[(h * n + i) * n..(h * n + i) * n + n];
            for (j, &w) in row.iter().enumerate().take(i + 1) {
                match instr.kind_at(j) {
                    Some(SegmentKind::SentencePrompt) => visual += w,
                    Some(SegmentKind::Caption) => caption += w,
                    _ => {}
                }
            }
        }
        rows.push(AttentionRow {
            position: i,
            segment: kind,
            visual_mass: visual / heads as f64,
            caption_mass: caption / heads as f64,
        });
    }
    Ok(rows)
}

/// How often each pool entry is selected over a split's queries and their targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolUsage {
    pub queries: usize,
    pub targets: usize,
    pub query_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
}

pub fn pool_usage(model: &Model, data: &Dataset, split: Split) -> Result<PoolUsage> {
    let m = model.config().pool_size;
    let s = data.split(split);
    let mut usage = PoolUsage {
        queries: s.len(),
        targets: s.len(),
        query_counts: vec![0; m],
        target_counts: vec![0; m],
    };
    for i in 0..s.len() {
        let q = model.plan(&s.query(i))?;
        let t = model.plan(&Input::target(&data.candidates[s.targets[i]]))?;
        for (plan, counts) in [(q, &mut usage.query_counts), (t, &mut usage.target_counts)] {
            for &e in plan.selection.iter().flat_map(|sel| sel.indices.iter()) {
                counts[e] += 1;
            }
        }
    }
    Ok(usage)
}

impl PoolUsage {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("entry,query_count,query_frequency,target_count,target_frequency\n");
        let freq = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        for (e, (&qc, &tc)) in self.query_counts.iter().zip(&self.target_counts).enumerate() {
            writeln!(
                s,
                "{e},{qc},{:.6},{tc},{:.6}",
                freq(qc, self.queries),
                freq(tc, self.targets)
            )
            .unwrap();
        }
        s
    }
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut s = String::from("position,segment,visual_mass,caption_mass\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.position, r.segment.as_str(), r.visual_mass, r.caption_mass).unwrap();
    }
    s
}
