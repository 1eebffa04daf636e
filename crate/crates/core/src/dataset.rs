//! Frozen visual features and caption tokens for every corpus instance.

use crate::error::Result;
use crate::model::Input;
use crate::synthcorpus::{caption_tokens, Corpus, Split, Triplet};
use crate::tensor::Tensor;
use crate::visual::FrozenEncoder;

#[derive(Debug, Clone, Default)]
pub struct SplitData {
    /// Reference-image features, one per triplet.
    pub features: Vec<Tensor>,
    pub captions: Vec<Vec<u32>>,
    pub targets: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn query(&self, i: usize) -> Input<'_> {
        Input::query(&self.features[i], &self.captions[i])
    }

    pub fn queries(&self) -> Vec<Input<'_>> {
        (0..self.len()).map(|i| self.query(i)).collect()
    }
}

/// Everything the model consumes, precomputed once since the vision path is frozen.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub candidates: Vec<Tensor>,
    pub subsets: Vec<Vec<usize>>,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn new(corpus: &Corpus, vision: &FrozenEncoder) -> Result<Self> {
        let renderer = corpus.renderer();
        let candidates = corpus
            .candidates
            .iter()
            .enumerate()
            .map(|(id, s)| vision.encode_image(&renderer.render(s, Corpus::candidate_nonce(id))))
            .collect::<Result<Vec<_>>>()?;
        let split = |ts: &[Triplet]| -> Result<SplitData> {
            let mut d = SplitData::default();
            for t in ts {
                d.features.push(vision.encode_image(&renderer.render(&t.reference, t.nonce))?);
                d.captions.push(caption_tokens(&t.edits));
                d.targets.push(t.target_id);
            }
            Ok(d)
        };
        Ok(Self {
            candidates,
            subsets: corpus.subsets.clone(),
            train: split(&corpus.train)?,
            val: split(&corpus.val)?,
            test: split(&corpus.test)?,
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn candidate_inputs(&self) -> Vec<Input<'_>> {
        self.candidates.iter().map(Input::target).collect()
    }

    /// Subset index of every candidate id.
    pub fn subset_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.candidates.len()];
        for (s, members) in self.subsets.iter().enumerate() {
            for &m in members {
                out[m] = s;
            }
        }
        out
    }
}
