//! The full encoder: frozen vision, connector, prompt pool and causal decoder
//! sharing one parameter set between query and target encoding.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, KeyTerm, Segment, Var};
use crate::encoder::{
    build_query_instruction, build_target_instruction, decode, pool_graph, Decoded, DecoderVars,
    IntentInstruction, LayerVars, PoolStrategy, Role, Slot, CONTEXT_LIMIT, TASK_TOKENS_PER_ROLE,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prompt_pool::{select, text_key_query, universal_selection, PromptPool, Selection};
use crate::rng::Rng;
use crate::synthcorpus::{tokens, MAX_CAPTION_LEN, PATCHES};
use crate::tensor::Tensor;
use crate::visual::{connect, image_key_query, ConnectorVars, FrozenEncoder};

const TAG_INIT: u64 = 0x696e_6974;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftMode {
    None,
    Universal,
    #[default]
    Instance,
}

impl SoftMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftMode::None => "none",
            SoftMode::Universal => "universal",
            SoftMode::Instance => "instance",
        }
    }
}

impl fmt::Display for SoftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SoftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SoftMode::None),
            "universal" => Ok(SoftMode::Universal),
            "instance" => Ok(SoftMode::Instance),
            _ => Err(Error::InvalidConfig(format!("unknown soft prompt mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_raw: usize,
    pub d_image: usize,
    pub d_text: usize,
    pub d_hidden: usize,
    pub n_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub pool_size: usize,
    pub prompt_len: usize,
    pub top_k: usize,
    pub task_prompt_len: usize,
    pub soft_mode: SoftMode,
    pub pooling: PoolStrategy,
    pub vision_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_raw: 32,
            d_image: 32,
            d_text: 64,
            d_hidden: 32,
            n_queries: 8,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            pool_size: 16,
            prompt_len: 2,
            top_k: 4,
            task_prompt_len: 4,
            soft_mode: SoftMode::Instance,
            pooling: PoolStrategy::WeightedMean,
            vision_seed: 7,
            init_seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("d_raw", self.d_raw),
            ("d_image", self.d_image),
            ("d_text", self.d_text),
            ("d_hidden", self.d_hidden),
            ("n_queries", self.n_queries),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("pool_size", self.pool_size),
            ("prompt_len", self.prompt_len),
            ("top_k", self.top_k),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if self.d_text % self.heads != 0 {
            return bad(format!("d_text {} not divisible by heads {}", self.d_text, self.heads));
        }
        if self.top_k > self.pool_size {
            return bad(format!("top_k {} exceeds pool_size {}", self.top_k, self.pool_size));
        }
        if self.task_prompt_len > TASK_TOKENS_PER_ROLE {
            return bad(format!("task_prompt_len must be in 0..={TASK_TOKENS_PER_ROLE}"));
        }
        if self.max_len() > CONTEXT_LIMIT {
            return Err(Error::ContextOverflow {
                len: self.max_len(),
                limit: CONTEXT_LIMIT,
            });
        }
        Ok(())
    }

    pub fn soft_len(&self) -> usize {
        match self.soft_mode {
            SoftMode::None => 0,
            _ => self.top_k * self.prompt_len + 2,
        }
    }

    /// Longest possible query instruction.
    pub fn max_len(&self) -> usize {
        self.n_queries + MAX_CAPTION_LEN + self.task_prompt_len + self.soft_len()
    }
}

/// One instance to encode: image features plus, for queries, the caption.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub features: &'a Tensor,
    pub caption: Option<&'a [u32]>,
}

impl<'a> Input<'a> {
    pub fn query(features: &'a Tensor, caption: &'a [u32]) -> Self {
        Self {
            features,
            caption: Some(caption),
        }
    }

    pub fn target(features: &'a Tensor) -> Self {
        Self {
            features,
            caption: None,
        }
    }

    pub fn role(&self) -> Role {
        if self.caption.is_some() {
            Role::Query
        } else {
            Role::Target
        }
    }
}

/// Non-differentiable decisions for one instance, taken at the current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub instruction: IntentInstruction,
    pub selection: Option<Selection>,
    pub image_query: Vec<f64>,
    pub text_query: Vec<f64>,
}

/// Recorded forward pass over a batch of instances.
pub struct Forward {
    pub graph: Graph,
    /// Parameter leaves, aligned with [`ParamStore::names`].
    pub params: Vec<Var>,
    pub embeddings: Var,
    pub decoded: Decoded,
    pub segments: Vec<Segment>,
    pub plans: Vec<Plan>,
}

pub struct Model {
    config: ModelConfig,
    vision: FrozenEncoder,
    params: ParamStore,
    decoder_forwards: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vision: self.vision.clone(),
            params: self.params.clone(),
            decoder_forwards: AtomicUsize::new(self.decoder_forwards()),
        }
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("num_params", &self.params.num_scalars())
            .finish()
    }
}

fn layer_name(l: usize, field: &str) -> String {
    format!("decoder.layer{l}.{field}")
}

const LAYER_FIELDS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
];

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = Rng::with_tag(c.init_seed, TAG_INIT);
        let mut p = ParamStore::new();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let residual = fan(c.d_text) / ((2 * c.layers) as f64).sqrt();
        let ff = c.ff_mult * c.d_text;
        let (d, di, dh) = (c.d_text, c.d_image, c.d_hidden);

        p.insert("connector.query_embed", Tensor::gaussian(c.n_queries, d, 1.0, &mut rng));
        p.insert("connector.w_q", Tensor::gaussian(d, dh, fan(d), &mut rng));
        p.insert("connector.w_k", Tensor::gaussian(di, dh, fan(di), &mut rng));
        p.insert("connector.w_v", Tensor::gaussian(di, d, fan(di), &mut rng));
        p.insert("connector.ln_gain", Tensor::filled(1, d, 1.0));
        p.insert("connector.ln_bias", Tensor::zeros(1, d));

        p.insert("decoder.tok_embed", Tensor::gaussian(tokens::VOCAB, d, 1.0, &mut rng));
        p.insert("decoder.pos_embed", Tensor::gaussian(CONTEXT_LIMIT, d, 0.1, &mut rng));
        for l in 0..c.layers {
            p.insert(layer_name(l, "ln1_gain"), Tensor::filled(1, d, 1.0));
            p.insert(layer_name(l, "ln1_bias"), Tensor::zeros(1, d));
            p.insert(layer_name(l, "w_q"), Tensor::gaussian(d, d, fan(d), &mut rng));
            p.insert(layer_name(l, "w_k"), Tensor::gaussian(d, d, fan(d), &mut rng));
            p.insert(layer_name(l, "w_v"), Tensor::gaussian(d, d, fan(d), &mut rng));
            p.insert(layer_name(l, "w_o"), Tensor::gaussian(d, d, residual, &mut rng));
            p.insert(layer_name(l, "ln2_gain"), Tensor::filled(1, d, 1.0));
            p.insert(layer_name(l, "ln2_bias"), Tensor::zeros(1, d));
            p.insert(layer_name(l, "w_ff1"), Tensor::gaussian(d, ff, fan(d), &mut rng));
            p.insert(layer_name(l, "b_ff1"), Tensor::zeros(1, ff));
            p.insert(layer_name(l, "w_ff2"), Tensor::gaussian(ff, d, residual, &mut rng));
            p.insert(layer_name(l, "b_ff2"), Tensor::zeros(1, d));
        }
        p.insert("decoder.lnf_gain", Tensor::filled(1, d, 1.0));
        p.insert("decoder.lnf_bias", Tensor::zeros(1, d));

        p.insert("pool.image_keys", Tensor::gaussian(c.pool_size, di, 1.0, &mut rng));
        p.insert("pool.text_keys", Tensor::gaussian(c.pool_size, d, 1.0, &mut rng));
        p.insert(
            "pool.prompts",
            Tensor::gaussian(c.pool_size * c.prompt_len, d, 1.0, &mut rng),
        );

        let vision = FrozenEncoder::new(c.vision_seed, c.d_raw, c.d_image);
        Ok(Self {
            config,
            vision,
            params: p,
            decoder_forwards: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a model from stored tensors, checking them against the schema.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(config)?;
        if params.names() != m.params.names() {
            return Err(Error::Checkpoint(format!(
                "tensor names do not match the schema: got {:?}",
                params.names()
            )));
        }
        for ((name, want), got) in m.params.iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vision(&self) -> &FrozenEncoder {
        &self.vision
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of sequences pushed through the decoder so far.
    pub fn decoder_forwards(&self) -> usize {
        self.decoder_forwards.load(Ordering::Relaxed)
    }

    pub fn pool(&self) -> PromptPool<'_> {
        PromptPool {
            image_keys: self.params.get("pool.image_keys"),
            text_keys: self.params.get("pool.text_keys"),
            prompts: self.params.get("pool.prompts"),
            prompt_len: self.config.prompt_len,
        }
    }

    /// Snaps every parameter to the nearest `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for t in self.params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Raw patches to frozen visual features.
    pub fn image_features(&self, patches: &Tensor) -> Result<Tensor> {
        self.vision.encode_image(patches)
    }

    /// q(T): caption embeddings for queries, target task-prompt embeddings for targets.
    pub fn text_query(&self, input: &Input<'_>) -> Result<Vec<f64>> {
        let vocab = self.params.get("decoder.tok_embed");
        match input.caption {
            Some(cap) => text_key_query(cap.iter().map(|&t| vocab.row(t as usize))),
            None => text_key_query(Role::Target.task_token_ids().iter().map(|&t| vocab.row(t as usize))),
        }
    }

    pub fn plan(&self, input: &Input<'_>) -> Result<Plan> {
        let c = &self.config;
        let image_query = image_key_query(input.features)?;
        let text_query = self.text_query(input)?;
        let selection = match c.soft_mode {
            SoftMode::None => None,
            SoftMode::Universal => Some(universal_selection(c.top_k)),
            SoftMode::Instance => Some(select(&self.pool(), &image_query, &text_query, c.top_k)?),
        };
        let soft = selection.as_ref().map(|s| (s, c.prompt_len));
        let instruction = match input.caption {
            Some(cap) => build_query_instruction(c.n_queries, cap, c.task_prompt_len, soft)?,
            None => build_target_instruction(c.n_queries, c.task_prompt_len, soft)?,
        };
        Ok(Plan {
            instruction,
            selection,
            image_query,
            text_query,
        })
    }

    /// Records one batched forward pass. With `plans` given, the selections and
    /// key queries are taken from them instead of being recomputed.
    pub fn forward(&self, inputs: &[Input<'_>], plans: Option<Vec<Plan>>, with_grad: bool) -> Result<Forward> {
        let c = &self.config;
        if inputs.is_empty() {
            return Err(Error::EmptySequence);
        }
        for inp in inputs {
            if inp.features.shape() != (PATCHES, c.d_image) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{PATCHES}x{}", c.d_image),
                    got: format!("{}x{}", inp.features.rows, inp.features.cols),
                });
            }
        }
        let plans = match plans {
            Some(p) => {
                assert_eq!(p.len(), inputs.len());
                p
            }
            None => inputs.iter().map(|i| self.plan(i)).collect::<Result<_>>()?,
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), with_grad))
            .collect();
        let var = |name: &str| vars[self.params.position(name).expect("schema")];

        let mut feats = Tensor::zeros(inputs.len() * PATCHES, c.d_image);
        for (i, inp) in inputs.iter().enumerate() {
            feats.data[i * PATCHES * c.d_image..(i + 1) * PATCHES * c.d_image].copy_from_slice(&inp.features.data);
        }
        let feats = g.constant(feats);
        let connector = ConnectorVars {
            query_embed: var("connector.query_embed"),
            w_q: var("connector.w_q"),
            w_k: var("connector.w_k"),
            w_v: var("connector.w_v"),
            ln_gain: var("connector.ln_gain"),
            ln_bias: var("connector.ln_bias"),
        };
        let sentence = connect(&mut g, feats, &connector, PATCHES);

        let bank = g.concat_rows(&[sentence, var("decoder.tok_embed"), var("pool.prompts")]);
        let tok_off = inputs.len() * c.n_queries;
        let prompt_off = tok_off + tokens::VOCAB;
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for (i, plan) in plans.iter().enumerate() {
            segments.push(Segment {
                start: rows.len(),
                len: plan.instruction.len(),
            });
            for (pos, slot) in plan.instruction.slots.iter().enumerate() {
                rows.push(match *slot {
                    Slot::Sentence(r) => i * c.n_queries + r,
                    Slot::Token(t) => tok_off + t as usize,
                    Slot::Prompt(r) => prompt_off + r,
                });
                positions.push(pos);
            }
        }
        let x = g.gather(bank, rows);
        let pos = g.gather(var("decoder.pos_embed"), positions);
        let x = g.add(x, pos);

        let decoder = DecoderVars {
            layers: (0..c.layers)
                .map(|l| {
                    let v = |f: &str| vars[self.params.position(&layer_name(l, f)).expect("schema")];
                    LayerVars {
                        ln1_gain: v(LAYER_FIELDS[0]),
                        ln1_bias: v(LAYER_FIELDS[1]),
                        w_q: v(LAYER_FIELDS[2]),
                        w_k: v(LAYER_FIELDS[3]),
                        w_v: v(LAYER_FIELDS[4]),
                        w_o: v(LAYER_FIELDS[5]),
                        ln2_gain: v(LAYER_FIELDS[6]),
                        ln2_bias: v(LAYER_FIELDS[7]),
                        w_ff1: v(LAYER_FIELDS[8]),
                        b_ff1: v(LAYER_FIELDS[9]),
                        w_ff2: v(LAYER_FIELDS[10]),
                        b_ff2: v(LAYER_FIELDS[11]),
                    }
                })
                .collect(),
            lnf_gain: var("decoder.lnf_gain"),
            lnf_bias: var("decoder.lnf_bias"),
            heads: c.heads,
        };
        let decoded = decode(&mut g, x, &segments, &decoder);
        self.decoder_forwards.fetch_add(inputs.len(), Ordering::Relaxed);
        let embeddings = pool_graph(&mut g, decoded.hidden, &segments, c.pooling);
        Ok(Forward {
            graph: g,
            params: vars,
            embeddings,
            decoded,
            segments,
            plans,
        })
    }

    /// Embeddings of `inputs` as a `len x d_text` matrix.
    pub fn encode(&self, inputs: &[Input<'_>]) -> Result<Tensor> {
        let f = self.forward(inputs, None, false)?;
        Ok(f.graph.value(f.embeddings).clone())
    }

    /// Embeds many instances in fixed-size chunks, chunks in parallel.
    ///
    /// Chunks are independent forwards, so the result does not depend on the
    /// thread count.
    pub fn encode_all(&self, inputs: &[Input<'_>], chunk: usize) -> Result<Tensor> {
        let parts: Vec<Tensor> = inputs
            .par_chunks(chunk.max(1))
            .map(|part| self.encode(part))
            .collect::<Result<_>>()?;
        let mut out = Tensor::zeros(0, self.config.d_text);
        for e in parts {
            out.data.extend_from_slice(&e.data);
            out.rows += e.rows;
        }
        Ok(out)
    }
}

/// Training objective over one batch of `(query, target)` pairs.
pub struct BatchLoss {
    pub forward: Forward,
    pub total: Var,
    pub contrastive: f64,
    pub key: f64,
}

impl Model {
    /// Contrastive loss plus the weighted key-matching surrogate. The first
    /// half of `inputs` are queries, the second half their paired targets.
    pub fn batch_loss(
        &self,
        inputs: &[Input<'_>],
        plans: Option<Vec<Plan>>,
        lambda: f64,
        key_weight: f64,
    ) -> Result<BatchLoss> {
        assert!(inputs.len() % 2 == 0, "inputs must be query/target pairs");
        let n = inputs.len() / 2;
        let mut f = self.forward(inputs, plans, true)?;
        let g = &mut f.graph;
        let q = g.gather(f.embeddings, (0..n).collect());
        let t = g.gather(f.embeddings, (n..2 * n).collect());
        let contrastive = g.info_nce(q, t, lambda).ok_or(Error::DegenerateEmbedding)?;
        let contrastive_value = g.scalar(contrastive);
        let mut total = contrastive;
        let mut key = 0.0;
        if self.config.soft_mode == SoftMode::Instance && key_weight != 0.0 {
            let terms: Vec<KeyTerm> = f
                .plans
                .iter()
                .flat_map(|p| {
                    p.selection.iter().flat_map(|s| s.indices.iter()).map(|&entry| KeyTerm {
                        entry,
                        image_query: p.image_query.clone(),
                        text_query: p.text_query.clone(),
                    })
                })
                .collect();
            let pos = |name| f.params[self.params.position(name).expect("schema")];
            let kl = g.key_match(pos("pool.image_keys"), pos("pool.text_keys"), terms);
            key = g.scalar(kl);
            let weighted = g.scale(kl, key_weight);
            total = g.add(contrastive, weighted);
        }
        Ok(BatchLoss {
            forward: f,
            total,
            contrastive: contrastive_value,
            key,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{pool, SegmentKind};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_raw: 6,
            d_image: 8,
            d_text: 16,
            d_hidden: 8,
            n_queries: 2,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            pool_size: 5,
            prompt_len: 2,
            top_k: 2,
            ..ModelConfig::default()
        }
    }

    fn features(model: &Model, seed: u64) -> Tensor {
        let raw = Tensor::gaussian(PATCHES, model.config().d_raw, 1.0, &mut Rng::new(seed));
        model.image_features(&raw).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            top_k: 20,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let long = ModelConfig {
            top_k: 16,
            prompt_len: 8,
            ..ModelConfig::default()
        };
        assert!(matches!(long.validate(), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn default_instruction_lengths() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let f = features(&m, 1);
        let cap = [15, 37, 16];
        let q = m.plan(&Input::query(&f, &cap)).unwrap();
        assert_eq!(q.instruction.len(), 8 + 3 + 4 + 4 * 2 + 2);
        let t = m.plan(&Input::target(&f)).unwrap();
        assert_eq!(t.instruction.len(), 8 + 4 + 4 * 2 + 2);
        assert_eq!(q.selection.as_ref().unwrap().indices.len(), 4);
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = Model::new(tiny_config()).unwrap();
        let fa = features(&m, 1);
        let fb = features(&m, 2);
        let cap = [11, 18, 27, 33, 16];
        let inputs = [Input::query(&fa, &cap), Input::target(&fb), Input::target(&fa)];
        let all = m.encode(&inputs).unwrap();
        for (i, inp) in inputs.iter().enumerate() {
            let one = m.encode(std::slice::from_ref(inp)).unwrap();
            assert_eq!(one.row(0), all.row(i));
        }
    }

    #[test]
    fn forward_counter_counts_sequences() {
        let m = Model::new(tiny_config()).unwrap();
        let f = features(&m, 3);
        let before = m.decoder_forwards();
        m.encode(&[Input::target(&f)]).unwrap();
        assert_eq!(m.decoder_forwards(), before + 1);
        m.encode(&[Input::target(&f), Input::target(&f)]).unwrap();
        assert_eq!(m.decoder_forwards(), before + 3);
    }

    #[test]
    fn hidden_pooling_agrees_with_value_pooling() {
        let m = Model::new(tiny_config()).unwrap();
        let f = features(&m, 4);
        let cap = [12, 40, 16];
        let fw = m.forward(&[Input::query(&f, &cap)], None, false).unwrap();
        let h = fw.graph.value(fw.decoded.hidden);
        let v = pool(h, PoolStrategy::WeightedMean);
        for (a, b) in v.iter().zip(fw.graph.value(fw.embeddings).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let instr = &fw.plans[0].instruction;
        assert_eq!(instr.kind_at(0), Some(SegmentKind::SentencePrompt));
        assert_eq!(instr.kind_at(2), Some(SegmentKind::Caption));
    }

    #[test]
    fn shared_parameters_for_both_roles() {
        let m = Model::new(tiny_config()).unwrap();
        let fa = features(&m, 5);
        let fb = features(&m, 6);
        let (ca, cb) = ([12, 40, 16], [15, 38, 16]);
        let bl = m
            .batch_loss(
                &[Input::query(&fa, &ca), Input::query(&fb, &cb), Input::target(&fb), Input::target(&fa)],
                None,
                20.0,
                0.5,
            )
            .unwrap();
        // One leaf per stored tensor serves both query and target rows.
        assert_eq!(bl.forward.params.len(), m.params().len());
        let grads = bl.forward.graph.backward(bl.total);
        let task = grads.get(bl.forward.params[m.params().position("decoder.tok_embed").unwrap()]).unwrap();
        for id in [3, 7] {
            assert!(task.row(id).iter().any(|v| *v != 0.0), "token {id}");
        }
    }

    #[test]
    fn soft_modes_shape_the_instruction() {
        for (mode, soft) in [(SoftMode::None, 0), (SoftMode::Universal, 6), (SoftMode::Instance, 6)] {
            let m = Model::new(ModelConfig {
                soft_mode: mode,
                ..tiny_config()
            })
            .unwrap();
            let f = features(&m, 6);
            let p = m.plan(&Input::target(&f)).unwrap();
            assert_eq!(p.instruction.len(), 2 + 4 + soft);
            if mode == SoftMode::Universal {
                assert_eq!(p.selection.unwrap().indices, vec![0, 1]);
            }
        }
    }
}
