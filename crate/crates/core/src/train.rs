//! In-batch contrastive training with Adam and split learning rates.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{Dataset, SplitData};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{Input, Model};
use crate::params::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::synthcorpus::Split;
use crate::tensor::Tensor;

const TAG_BATCHES: u64 = 0x6261_7463;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Uniform shuffle of all training triplets.
    Random,
    /// Batches built from pairs of same-subset triplets with different targets.
    #[default]
    Paired,
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Sampler::Random),
            "paired" => Ok(Sampler::Paired),
            _ => Err(Error::InvalidConfig(format!("unknown sampler {s:?}"))),
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Random => "random",
            Sampler::Paired => "paired",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub lr_pool: f64,
    pub lr_rest: f64,
    pub key_weight: f64,
    pub seed: u64,
    pub sampler: Sampler,
    /// Skip the per-epoch validation pass.
    pub skip_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            lambda: 20.0,
            epochs: 10,
            lr_pool: 3e-3,
            lr_rest: 2e-3,
            key_weight: 0.5,
            seed: 42,
            sampler: Sampler::Paired,
            skip_validation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch < 2 {
            return bad("train.batch must be at least 2");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("train.lambda must be positive");
        }
        // Zero learning rates are allowed: they turn training into a no-op.
        if !(self.lr_pool >= 0.0 && self.lr_rest >= 0.0) || !self.lr_pool.is_finite() || !self.lr_rest.is_finite() {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.key_weight >= 0.0 && self.key_weight.is_finite()) {
            return bad("train.key_weight must be non-negative");
        }
        Ok(())
    }
}

/// Value of the in-batch contrastive loss and its gradients w.r.t. both embedding sets.
pub fn contrastive_loss(vq: &Tensor, vt: &Tensor, lambda: f64) -> Result<(f64, Tensor, Tensor)> {
    if vq.shape() != vt.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", vq.shape()),
            got: format!("{:?}", vt.shape()),
        });
    }
    if vq.rows < 2 {
        return Err(Error::InvalidConfig("contrastive loss needs at least 2 pairs".into()));
    }
    let mut g = Graph::new();
    let q = g.leaf(vq.clone(), true);
    let t = g.leaf(vt.clone(), true);
    let l = g.info_nce(q, t, lambda).ok_or(Error::DegenerateEmbedding)?;
    let grads = g.backward(l);
    Ok((g.scalar(l), grads.get(q).unwrap().clone(), grads.get(t).unwrap().clone()))
}

/// Adam with one learning rate for `pool.*` tensors and another for the rest.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_pool: f64,
    pub lr_rest: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    is_pool: Vec<bool>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr_pool: f64, lr_rest: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_pool,
            lr_rest,
            step: 0,
            m: zeros(),
            v: zeros(),
            is_pool: params.names().iter().map(|n| n.starts_with("pool.")).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `grads[i]` is `None` for tensors the loss does not reach.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let lr = if self.is_pool[i] { self.lr_pool } else { self.lr_rest };
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for (((x, gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x -= lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub key: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_recall_at_1: Option<f64>,
    pub wall_time_s: f64,
}

/// Triplet indices for every batch of one epoch.
pub fn epoch_batches(split: &SplitData, subset_of: &[usize], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(derive_seed(derive_seed(cfg.seed, TAG_BATCHES), epoch as u64));
    let order: Vec<usize> = match cfg.sampler {
        Sampler::Random => {
            let mut o: Vec<usize> = (0..split.len()).collect();
            rng.shuffle(&mut o);
            o
        }
        Sampler::Paired => paired_order(split, subset_of, &mut rng),
    };
    order
        .chunks(cfg.batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Pairs up same-subset triplets with different targets and lays the pairs out
/// round-robin across subsets, so a batch rarely holds two copies of one target.
fn paired_order(split: &SplitData, subset_of: &[usize], rng: &mut Rng) -> Vec<usize> {
    let n_subsets = subset_of.iter().max().map_or(0, |m| m + 1);
    let mut by_subset: Vec<Vec<usize>> = vec![Vec::new(); n_subsets];
    for (i, &t) in split.targets.iter().enumerate() {
        by_subset[subset_of[t]].push(i);
    }
    let mut units: Vec<Vec<Vec<usize>>> = Vec::new();
    for members in by_subset.iter_mut().filter(|m| !m.is_empty()) {
        rng.shuffle(members);
        let mut pending = members.clone();
        let mut pairs = Vec::new();
        while let Some(a) = pending.pop() {
            let partner = pending.iter().rposition(|&b| split.targets[b] != split.targets[a]);
            match partner {
                Some(p) => pairs.push(vec![a, pending.remove(p)]),
                None => pairs.push(vec![a]),
            }
        }
        units.push(pairs);
    }
    rng.shuffle(&mut units);
    let rounds = units.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(split.len());
    for r in 0..rounds {
        let mut round: Vec<&Vec<usize>> = units.iter().filter_map(|u| u.get(r)).collect();
        rng.shuffle(&mut round);
        for p in round {
            order.extend(p);
        }
    }
    order
}

fn batch_inputs<'a>(data: &'a Dataset, split: &'a SplitData, batch: &[usize]) -> Vec<Input<'a>> {
    let mut inputs: Vec<Input<'a>> = batch.iter().map(|&i| split.query(i)).collect();
    inputs.extend(batch.iter().map(|&i| Input::target(&data.candidates[split.targets[i]])));
    inputs
}

/// Trains `model` in place; one JSON line per epoch goes to `log` if given.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut adam = Adam::new(model.params(), cfg.lr_pool, cfg.lr_rest);
    let subset_of = data.subset_of();
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut con_sum, mut key_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in epoch_batches(&data.train, &subset_of, cfg, epoch).iter().enumerate() {
            let inputs = batch_inputs(data, &data.train, batch);
            let bl = match model.batch_loss(&inputs, None, cfg.lambda, cfg.key_weight) {
                Ok(bl) => bl,
                Err(Error::DegenerateEmbedding) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        contrastive: f64::NAN,
                        key: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let total = bl.forward.graph.scalar(bl.total);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    contrastive: bl.contrastive,
                    key: bl.key,
                });
            }
            let grads = bl.forward.graph.backward(bl.total);
            let per_param: Vec<Option<&Tensor>> = bl.forward.params.iter().map(|v| grads.get(*v)).collect();
            adam.step(model.params_mut(), &per_param);
            loss_sum += total;
            con_sum += bl.contrastive;
            key_sum += bl.key;
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        let val_recall_at_1 = if cfg.skip_validation || data.val.is_empty() {
            None
        } else {
            Some(evaluate(model, data, Split::Val, &[1], &[])?.recall[&1])
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / denom,
            contrastive: con_sum / denom,
            key: key_sum / denom,
            val_recall_at_1,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?)?;
        }
        history.push(entry);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::gaussian(rows, cols, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn uniform_similarity_gives_log_batch() {
        for n in [2usize, 8, 32] {
            let v = Tensor::from_rows(&vec![vec![0.3, -1.2, 2.0]; n]);
            for lambda in [1.0, 20.0, 100.0] {
                let (l, _, _) = contrastive_loss(&v, &v, lambda).unwrap();
                assert!((l - (n as f64).ln()).abs() < 1e-9, "n={n} lambda={lambda}");
            }
        }
    }

    #[test]
    fn separated_pair_closed_form() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let (l, _, _) = contrastive_loss(&q, &q, 10.0).unwrap();
        let want = (-20.0f64).exp().ln_1p();
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    #[test]
    fn degenerate_and_small_batches() {
        let z = Tensor::zeros(2, 3);
        assert!(matches!(contrastive_loss(&z, &rand(2, 3, 1), 1.0), Err(Error::DegenerateEmbedding)));
        assert!(contrastive_loss(&rand(1, 3, 1), &rand(1, 3, 2), 1.0).is_err());
    }

    #[test]
    fn permutation_invariance_and_lambda_monotonicity() {
        let q = rand(6, 4, 3);
        let t = rand(6, 4, 4);
        let (l, _, _) = contrastive_loss(&q, &t, 5.0).unwrap();
        let perm = [4, 0, 5, 2, 1, 3];
        let pick = |x: &Tensor| Tensor::from_rows(&perm.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>());
        let (lp, _, _) = contrastive_loss(&pick(&q), &pick(&t), 5.0).unwrap();
        assert!((l - lp).abs() < 1e-12);

        let e = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let mut prev = f64::INFINITY;
        for lambda in [0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
            let (l, _, _) = contrastive_loss(&e, &e, lambda).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let q = rand(4, 5, 8);
        let t = rand(4, 5, 9);
        let (_, gq, gt) = contrastive_loss(&q, &t, 3.0).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (which, base, analytic) in [(0, &q, &gq), (1, &t, &gt)] {
            for e in 0..base.len() {
                let mut plus = base.clone();
                plus.data[e] += eps;
                let mut minus = base.clone();
                minus.data[e] -= eps;
                let f = |x: &Tensor| {
                    if which == 0 {
                        contrastive_loss(x, &t, 3.0).unwrap().0
                    } else {
                        contrastive_loss(&q, x, 3.0).unwrap().0
                    }
                };
                let num = (f(&plus) - f(&minus)) / (2.0 * eps);
                let a = analytic.data[e];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn pool_only_step_leaves_other_tensors() {
        let mut p = ParamStore::new();
        p.insert("decoder.w", rand(3, 3, 1));
        p.insert("pool.prompts", rand(2, 3, 2));
        let before = p.clone();
        let g0 = rand(3, 3, 3);
        let g1 = rand(2, 3, 4);
        let mut adam = Adam::new(&p, 1e-2, 0.0);
        adam.step(&mut p, &[Some(&g0), Some(&g1)]);
        assert_eq!(p.get("decoder.w"), before.get("decoder.w"));
        assert_ne!(p.get("pool.prompts"), before.get("pool.prompts"));

        let mut frozen = before.clone();
        let mut none = Adam::new(&frozen, 0.0, 0.0);
        for _ in 0..3 {
            none.step(&mut frozen, &[Some(&g0), Some(&g1)]);
        }
        assert_eq!(frozen.checksum(), before.checksum());
    }

    #[test]
    fn first_adam_step_has_unit_magnitude() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_rows(&[vec![0.0, 0.0]]));
        let g = Tensor::from_rows(&[vec![3.0, -0.5]]);
        let mut adam = Adam::new(&p, 0.0, 0.1);
        adam.step(&mut p, &[Some(&g)]);
        let w = p.get("w");
        assert!((w.data[0] + 0.1).abs() < 1e-8 && (w.data[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn paired_order_is_a_permutation() {
        let split = SplitData {
            features: vec![],
            captions: vec![],
            targets: (0..24).map(|i| [4, 5, 10, 11][i % 4]).collect(),
        };
        let subset_of: Vec<usize> = (0..12).map(|c| c / 6).collect();
        let mut o = paired_order(&split, &subset_of, &mut Rng::new(1));
        for w in o.chunks(2) {
            assert_eq!(subset_of[split.targets[w[0]]], subset_of[split.targets[w[1]]]);
            assert_ne!(split.targets[w[0]], split.targets[w[1]]);
        }
        o.sort_unstable();
        assert_eq!(o, (0..24).collect::<Vec<_>>());
    }
}
