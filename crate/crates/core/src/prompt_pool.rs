//! Dual-key prompt pool: top-K selection by combined image/text key distance
//! and sentinel-wrapped assembly of the selected prompt blocks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cosine, norm, Tensor};

/// Borrowed view of the pool tensors.
///
/// `prompts` stacks the `M` blocks of `prompt_len` rows each, so block `m`
/// occupies rows `m * prompt_len .. (m + 1) * prompt_len`.
#[derive(Debug, Clone, Copy)]
pub struct PromptPool<'a> {
    pub image_keys: &'a Tensor,
    pub text_keys: &'a Tensor,
    pub prompts: &'a Tensor,
    pub prompt_len: usize,
}

impl PromptPool<'_> {
    pub fn size(&self) -> usize {
        self.image_keys.rows
    }

    pub fn block_rows(&self, entry: usize) -> std::ops::Range<usize> {
        entry * self.prompt_len..(entry + 1) * self.prompt_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Pool entries by ascending combined distance, ties to the lower index.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

/// q(T): mean of a non-empty sequence of token embeddings.
pub fn text_key_query<'a>(embeddings: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut it = embeddings.into_iter();
    let first = it.next().ok_or(Error::EmptySequence)?;
    let mut sum = first.to_vec();
    let mut n = 1usize;
    for e in it {
        for (s, v) in sum.iter_mut().zip(e) {
            *s += v;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(sum)
}

/// Combined cosine distance of every pool entry to the query pair.
pub fn combined_distances(pool: &PromptPool<'_>, q_image: &[f64], q_text: &[f64]) -> Result<Vec<f64>> {
    for q in [q_image, q_text] {
        let n = norm(q);
        if n < 1e-12 {
            return Err(Error::DegenerateQuery(n));
        }
    }
    (0..pool.size())
        .map(|m| {
            let ci = cosine(q_image, pool.image_keys.row(m)).ok_or(Error::DegenerateQuery(0.0))?;
            let ct = cosine(q_text, pool.text_keys.row(m)).ok_or(Error::DegenerateQuery(0.0))?;
            Ok((1.0 - ci) + (1.0 - ct))
        })
        .collect()
}

/// The `k` entries minimizing the summed distance. Because each entry's
/// distance is independent of the others, the best subset is simply the `k`
/// individually closest entries.
pub fn select(pool: &PromptPool<'_>, q_image: &[f64], q_text: &[f64], k: usize) -> Result<Selection> {
    if k == 0 || k > pool.size() {
        return Err(Error::InvalidConfig(format!(
            "top-k {k} must be in [1, {}]",
            pool.size()
        )));
    }
    let d = combined_distances(pool, q_image, q_text)?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(Selection {
        distances: order.iter().map(|&i| d[i]).collect(),
        indices: order,
    })
}

/// Fixed selection of entries `0..k`, used for the shared (non instance-specific) prompt.
pub fn universal_selection(k: usize) -> Selection {
    Selection {
        indices: (0..k).collect(),
        distances: vec![0.0; k],
    }
}

/// Row indices into `[<sp>; </sp>; prompts...]` realizing `<sp> P_s1 ... P_sK </sp>`.
pub fn assembly_rows(sel: &Selection, prompt_len: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(sel.indices.len() * prompt_len + 2);
    rows.push(0);
    for &m in &sel.indices {
        rows.extend((m * prompt_len..(m + 1) * prompt_len).map(|r| r + 2));
    }
    rows.push(1);
    rows
}

/// Value-level soft prompt sequence, `K * L_p + 2` rows.
pub fn assemble(pool: &PromptPool<'_>, sel: &Selection, sp_open: &[f64], sp_close: &[f64]) -> Tensor {
    let mut rows: Vec<Vec<f64>> = vec![sp_open.to_vec()];
    for &m in &sel.indices {
        for r in pool.block_rows(m) {
            rows.push(pool.prompts.row(r).to_vec());
        }
    }
    rows.push(sp_close.to_vec());
    Tensor::from_rows(&rows)
}

/// Differentiable assembly: `sentinels` is `2 x d_t` (`<sp>`, `</sp>`).
pub fn assemble_graph(g: &mut Graph, sentinels: Var, prompts: Var, sel: &Selection, prompt_len: usize) -> Var {
    let bank = g.concat_rows(&[sentinels, prompts]);
    g.gather(bank, assembly_rows(sel, prompt_len))
}

/// Key-learning surrogate: mean over the selected entries of both cosine
/// distances to the (constant) queries.
pub fn key_match_loss(pool: &PromptPool<'_>, q_image: &[f64], q_text: &[f64], sel: &Selection) -> f64 {
    let total: f64 = sel
        .indices
        .iter()
        .map(|&m| {
            let ci = cosine(q_image, pool.image_keys.row(m)).unwrap_or(0.0);
            let ct = cosine(q_text, pool.text_keys.row(m)).unwrap_or(0.0);
            (1.0 - ci) + (1.0 - ct)
        })
        .sum();
    total / sel.indices.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::KeyTerm;
    use crate::rng::Rng;

    struct Owned {
        ik: Tensor,
        tk: Tensor,
        pr: Tensor,
        lp: usize,
    }

    impl Owned {
        fn random(m: usize, di: usize, dt: usize, lp: usize, rng: &mut Rng) -> Self {
            Self {
                ik: Tensor::gaussian(m, di, 1.0, rng),
                tk: Tensor::gaussian(m, dt, 1.0, rng),
                pr: Tensor::gaussian(m * lp, dt, 1.0, rng),
                lp,
            }
        }

        fn view(&self) -> PromptPool<'_> {
            PromptPool {
                image_keys: &self.ik,
                text_keys: &self.tk,
                prompts: &self.pr,
                prompt_len: self.lp,
            }
        }
    }

    #[test]
    fn text_query_mean() {
        let v = [1.0, -2.0, 0.5];
        assert_eq!(text_key_query([&v[..]]).unwrap(), v.to_vec());
        let neg = [-1.0, 2.0, -0.5];
        assert_eq!(text_key_query([&v[..], &neg[..]]).unwrap(), vec![0.0; 3]);
        assert!(matches!(text_key_query(std::iter::empty()), Err(Error::EmptySequence)));

        let r = Tensor::gaussian(7, 5, 1.0, &mut Rng::new(2));
        let m = text_key_query((0..7).map(|i| r.row(i))).unwrap();
        for c in 0..5 {
            let s: f64 = (0..7).rev().map(|i| r.get(i, c)).sum();
            assert!((m[c] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_entry_pool() {
        let mut rng = Rng::new(1);
        let p = Owned::random(1, 3, 4, 2, &mut rng);
        let s = select(&p.view(), &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.indices, vec![0]);
    }

    #[test]
    fn exact_key_match_wins() {
        let mut ik = Tensor::zeros(5, 3);
        let mut tk = Tensor::zeros(5, 3);
        for m in 0..5 {
            ik.row_mut(m)[1] = 1.0;
            tk.row_mut(m)[2] = 1.0;
        }
        ik.row_mut(3).copy_from_slice(&[1.0, 0.0, 0.0]);
        tk.row_mut(3).copy_from_slice(&[1.0, 0.0, 0.0]);
        let pr = Tensor::zeros(5, 3);
        let pool = PromptPool {
            image_keys: &ik,
            text_keys: &tk,
            prompts: &pr,
            prompt_len: 1,
        };
        let s = select(&pool, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(s.indices[0], 3);
        assert!(s.distances[0].abs() < 1e-15);
        assert_eq!(s.indices[1], 0);
    }

    #[test]
    fn degenerate_queries_and_bad_k() {
        let mut rng = Rng::new(1);
        let p = Owned::random(4, 3, 3, 1, &mut rng);
        assert!(matches!(
            select(&p.view(), &[0.0; 3], &[1.0, 0.0, 0.0], 1),
            Err(Error::DegenerateQuery(_))
        ));
        assert!(select(&p.view(), &[1.0; 3], &[1.0; 3], 0).is_err());
        assert!(select(&p.view(), &[1.0; 3], &[1.0; 3], 5).is_err());
    }

    #[test]
    fn scale_invariance_and_duplicate_ties() {
        let mut rng = Rng::new(11);
        let mut p = Owned::random(8, 4, 4, 1, &mut rng);
        let qi: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let qt: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let base = select(&p.view(), &qi, &qt, 3).unwrap();
        let scaled_i: Vec<f64> = qi.iter().map(|v| v * 37.5).collect();
        let scaled_t: Vec<f64> = qt.iter().map(|v| v * 0.01).collect();
        assert_eq!(select(&p.view(), &scaled_i, &scaled_t, 3).unwrap().indices, base.indices);

        // Duplicate the best entry into a higher slot: the lower index comes first.
        let best = base.indices[0];
        let dup = if best == 7 { 6 } else { 7 };
        let row_i = p.ik.row(best).to_vec();
        let row_t = p.tk.row(best).to_vec();
        p.ik.row_mut(dup).copy_from_slice(&row_i);
        p.tk.row_mut(dup).copy_from_slice(&row_t);
        let s = select(&p.view(), &qi, &qt, 2).unwrap();
        assert_eq!(s.indices, vec![best.min(dup), best.max(dup)]);
    }

    #[test]
    fn assembly_layout_and_order() {
        let mut rng = Rng::new(4);
        let p = Owned::random(3, 2, 2, 2, &mut rng);
        let open = [9.0, 9.0];
        let close = [-9.0, -9.0];
        let one = assemble(&p.view(), &Selection {
            indices: vec![1],
            distances: vec![0.0],
        }, &open, &close);
        assert_eq!(one.rows, 4);
        assert_eq!(one.row(0), &open);
        assert_eq!(one.row(1), p.pr.row(2));
        assert_eq!(one.row(2), p.pr.row(3));
        assert_eq!(one.row(3), &close);
        let ab = assemble(&p.view(), &Selection { indices: vec![0, 2], distances: vec![0.0; 2] }, &open, &close);
        let ba = assemble(&p.view(), &Selection { indices: vec![2, 0], distances: vec![0.0; 2] }, &open, &close);
        assert_ne!(ab, ba);
        assert_eq!(ab.rows, 2 * 2 + 2);
    }

    #[test]
    fn unselected_blocks_get_zero_gradient() {
        let mut rng = Rng::new(12);
        let p = Owned::random(5, 2, 3, 2, &mut rng);
        let sentinels = Tensor::gaussian(2, 3, 1.0, &mut rng);
        let sel = Selection {
            indices: vec![3, 1],
            distances: vec![0.0; 2],
        };
        let mut g = Graph::new();
        let sv = g.leaf(sentinels, true);
        let pv = g.leaf(p.pr.clone(), true);
        let seq = assemble_graph(&mut g, sv, pv, &sel, 2);
        assert_eq!(g.value(seq).rows, 6);
        let w = g.constant(Tensor::gaussian(3, 1, 1.0, &mut rng));
        let col = g.matmul(seq, w);
        let sq = g.gelu(col);
        let ones = g.constant(Tensor::filled(1, 6, 1.0));
        let out = g.matmul(ones, sq);
        let grads = g.backward(out);
        let gp = grads.get(pv).unwrap();
        for m in 0..5 {
            let nonzero = p.view().block_rows(m).any(|r| gp.row(r).iter().any(|v| *v != 0.0));
            assert_eq!(nonzero, sel.indices.contains(&m), "entry {m}");
        }
        assert!(grads.get(sv).unwrap().data.iter().all(|v| *v != 0.0));
    }

    #[test]
    fn key_match_closed_forms() {
        let q_i = vec![0.3, -1.0, 2.0];
        let q_t = vec![1.0, 0.5];
        let ik = Tensor::from_rows(&[q_i.clone(), q_i.iter().map(|v| -v).collect()]);
        let tk = Tensor::from_rows(&[q_t.clone(), q_t.iter().map(|v| -v).collect()]);
        let pr = Tensor::zeros(2, 2);
        let pool = PromptPool {
            image_keys: &ik,
            text_keys: &tk,
            prompts: &pr,
            prompt_len: 1,
        };
        let same = Selection { indices: vec![0], distances: vec![0.0] };
        let anti = Selection { indices: vec![1], distances: vec![0.0] };
        assert!(key_match_loss(&pool, &q_i, &q_t, &same).abs() < 1e-15);
        assert!((key_match_loss(&pool, &q_i, &q_t, &anti) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn key_match_graph_agrees_with_direct_recomputation() {
        let mut rng = Rng::new(21);
        let p = Owned::random(6, 4, 5, 1, &mut rng);
        let qi: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let qt: Vec<f64> = (0..5).map(|_| rng.gaussian()).collect();
        let sel = select(&p.view(), &qi, &qt, 3).unwrap();
        let direct = key_match_loss(&p.view(), &qi, &qt, &sel);
        // Independent recomputation from raw dot products.
        let manual: f64 = sel
            .indices
            .iter()
            .map(|&m| {
                let c = |a: &[f64], b: &[f64]| {
                    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
                };
                2.0 - c(&qi, p.ik.row(m)) - c(&qt, p.tk.row(m))
            })
            .sum::<f64>()
            / 3.0;
        assert!((direct - manual).abs() < 1e-12);
        let mut g = Graph::new();
        let ikv = g.leaf(p.ik.clone(), true);
        let tkv = g.leaf(p.tk.clone(), true);
        let terms = sel
            .indices
            .iter()
            .map(|&entry| KeyTerm {
                entry,
                image_query: qi.clone(),
                text_query: qt.clone(),
            })
            .collect();
        let l = g.key_match(ikv, tkv, terms);
        assert!((g.scalar(l) - direct).abs() < 1e-12);
        let grads = g.backward(l);
        let gi = grads.get(ikv).unwrap();
        for m in 0..6 {
            let touched = gi.row(m).iter().any(|v| *v != 0.0);
            assert_eq!(touched, sel.indices.contains(&m));
        }
    }
}
