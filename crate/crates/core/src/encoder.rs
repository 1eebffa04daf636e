//! Intent instructions, the causal decoder and hidden-state pooling.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::prompt_pool::Selection;
use crate::synthcorpus::tokens;
use crate::tensor::Tensor;
use crate::visual::LN_EPS;

pub const CONTEXT_LIMIT: usize = 128;
pub const TASK_TOKENS_PER_ROLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Target,
}

impl Role {
    /// Vocabulary ids of the role's task-prompt tokens.
    pub fn task_token_ids(self) -> [u32; TASK_TOKENS_PER_ROLE] {
        match self {
            Role::Query => tokens::QUERY_TASK,
            Role::Target => tokens::TARGET_TASK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    SentencePrompt,
    Caption,
    TaskPrompt,
    SoftPrompt,
}

impl SegmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::SentencePrompt => "sentence_prompt",
            SegmentKind::Caption => "caption",
            SegmentKind::TaskPrompt => "task_prompt",
            SegmentKind::SoftPrompt => "soft_prompt",
        }
    }
}

/// Where one instruction position takes its embedding from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Row of the image's sentence prompt.
    Sentence(usize),
    /// Vocabulary id (caption values, task tokens, sentinels).
    Token(u32),
    /// Row of the stacked pool prompt tensor.
    Prompt(usize),
}

/// Fig.-3 style instruction: task input, task prompt, soft prompt, in that order.
///
/// Empty segments are omitted from `segments`; their ranges tile `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentInstruction {
    pub role: Role,
    pub slots: Vec<Slot>,
    pub segments: Vec<(SegmentKind, Range<usize>)>,
}

impl IntentInstruction {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<Range<usize>> {
        self.segments.iter().find(|(k, _)| *k == kind).map(|(_, r)| r.clone())
    }

    pub fn kind_at(&self, pos: usize) -> Option<SegmentKind> {
        self.segments.iter().find(|(_, r)| r.contains(&pos)).map(|(k, _)| *k)
    }

    /// Value-level embedding of the instruction (no positions added).
    pub fn embed(&self, sentence: &Tensor, vocab: &Tensor, prompts: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .slots
            .iter()
            .map(|s| match *s {
                Slot::Sentence(r) => sentence.row(r).to_vec(),
                Slot::Token(id) => vocab.row(id as usize).to_vec(),
                Slot::Prompt(r) => prompts.row(r).to_vec(),
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    fn build(
        role: Role,
        n_sentence: usize,
        caption: &[u32],
        task_prompt_len: usize,
        soft: Option<(&Selection, usize)>,
    ) -> Result<Self> {
        if task_prompt_len > TASK_TOKENS_PER_ROLE {
            return Err(Error::InvalidConfig(format!(
                "task prompt length {task_prompt_len} exceeds {TASK_TOKENS_PER_ROLE}"
            )));
        }
        let mut slots = Vec::new();
        let mut segments = Vec::new();
        let mut push = |kind, items: Vec<Slot>, slots: &mut Vec<Slot>| {
            if !items.is_empty() {
                let start = slots.len();
                slots.extend(items);
                segments.push((kind, start..slots.len()));
            }
        };
        push(
            SegmentKind::SentencePrompt,
            (0..n_sentence).map(Slot::Sentence).collect(),
            &mut slots,
        );
        push(
            SegmentKind::Caption,
            caption.iter().map(|&t| Slot::Token(t)).collect(),
            &mut slots,
        );
        push(
            SegmentKind::TaskPrompt,
            role.task_token_ids()[..task_prompt_len].iter().map(|&t| Slot::Token(t)).collect(),
            &mut slots,
        );
        if let Some((sel, lp)) = soft {
            let mut items = vec![Slot::Token(tokens::SP_OPEN)];
            for &m in &sel.indices {
                items.extend((m * lp..(m + 1) * lp).map(Slot::Prompt));
            }
            items.push(Slot::Token(tokens::SP_CLOSE));
            push(SegmentKind::SoftPrompt, items, &mut slots);
        }
        if slots.len() > CONTEXT_LIMIT {
            return Err(Error::ContextOverflow {
                len: slots.len(),
                limit: CONTEXT_LIMIT,
            });
        }
        if slots.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self { role, slots, segments })
    }
}

/// `[sentence prompt] [caption] [query task tokens] [soft prompt]`.
pub fn build_query_instruction(
    n_sentence: usize,
    caption: &[u32],
    task_prompt_len: usize,
    soft: Option<(&Selection, usize)>,
) -> Result<IntentInstruction> {
    IntentInstruction::build(Role::Query, n_sentence, caption, task_prompt_len, soft)
}

/// `[sentence prompt] [target task tokens] [soft prompt]`.
pub fn build_target_instruction(
    n_sentence: usize,
    task_prompt_len: usize,
    soft: Option<(&Selection, usize)>,
) -> Result<IntentInstruction> {
    IntentInstruction::build(Role::Target, n_sentence, &[], task_prompt_len, soft)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStrategy {
    #[default]
    WeightedMean,
    Last,
    Mean,
}

impl PoolStrategy {
    pub const ALL: [PoolStrategy; 3] = [PoolStrategy::WeightedMean, PoolStrategy::Last, PoolStrategy::Mean];

    /// Pooling weights over `k` positions.
    pub fn weights(self, k: usize) -> Vec<f64> {
        assert!(k >= 1, "pooling needs at least one position");
        match self {
            PoolStrategy::WeightedMean => {
                let total = (k * (k + 1) / 2) as f64;
                (1..=k).map(|i| i as f64 / total).collect()
            }
            PoolStrategy::Last => {
                let mut w = vec![0.0; k];
                w[k - 1] = 1.0;
                w
            }
            PoolStrategy::Mean => vec![1.0 / k as f64; k],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoolStrategy::WeightedMean => "weighted_mean",
            PoolStrategy::Last => "last",
            PoolStrategy::Mean => "mean",
        }
    }
}

impl fmt::Display for PoolStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_mean" => Ok(PoolStrategy::WeightedMean),
            "last" => Ok(PoolStrategy::Last),
            "mean" => Ok(PoolStrategy::Mean),
            _ => Err(Error::InvalidConfig(format!("unknown pooling strategy {s:?}"))),
        }
    }
}

/// Value-level pooling of a `k x d` hidden-state matrix.
pub fn pool(hidden: &Tensor, strategy: PoolStrategy) -> Vec<f64> {
    let w = strategy.weights(hidden.rows);
    let mut out = vec![0.0; hidden.cols];
    for (i, wi) in w.iter().enumerate() {
        for (o, h) in out.iter_mut().zip(hidden.row(i)) {
            *o += wi * h;
        }
    }
    out
}

/// Graph handles of one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub layers: Vec<LayerVars>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub heads: usize,
}

/// Output of [`decode`]: final-norm hidden states plus each layer's attention node.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

/// Causal pre-norm transformer over ragged `segments` of the embedded input `x`.
pub fn decode(g: &mut Graph, x: Var, segments: &[Segment], p: &DecoderVars) -> Decoded {
    let mut h = x;
    let mut attention = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let a = g.layer_norm(h, l.ln1_gain, l.ln1_bias, LN_EPS);
        let q = g.matmul(a, l.w_q);
        let k = g.matmul(a, l.w_k);
        let v = g.matmul(a, l.w_v);
        let att = g.causal_self_attention(q, k, v, segments.to_vec(), p.heads);
        attention.push(att);
        let o = g.matmul(att, l.w_o);
        h = g.add(h, o);
        let b = g.layer_norm(h, l.ln2_gain, l.ln2_bias, LN_EPS);
        let f1 = g.matmul(b, l.w_ff1);
        let f1 = g.add_row(f1, l.b_ff1);
        let f1 = g.gelu(f1);
        let f2 = g.matmul(f1, l.w_ff2);
        let f2 = g.add_row(f2, l.b_ff2);
        h = g.add(h, f2);
    }
    let hidden = g.layer_norm(h, p.lnf_gain, p.lnf_bias, LN_EPS);
    Decoded { hidden, attention }
}

/// Differentiable pooling of every segment into one row.
pub fn pool_graph(g: &mut Graph, hidden: Var, segments: &[Segment], strategy: PoolStrategy) -> Var {
    let weights = segments.iter().map(|s| strategy.weights(s.len)).collect();
    g.segment_pool(hidden, segments.to_vec(), weights)
}
