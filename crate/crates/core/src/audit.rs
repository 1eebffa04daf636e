//! Central finite-difference check of every trainable parameter group.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Input, Model, Plan};
use crate::synthcorpus::tokens;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (near) zero are judged on absolute agreement.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Connector,
    Decoder,
    PoolPrompts,
    PoolKeys,
    TaskTokens,
    Sentinels,
    Vision,
}

impl Group {
    pub const TRAINABLE: [Group; 6] = [
        Group::Connector,
        Group::Decoder,
        Group::PoolPrompts,
        Group::PoolKeys,
        Group::TaskTokens,
        Group::Sentinels,
    ];

    /// Group of one scalar, addressed by tensor name and row.
    pub fn of(name: &str, row: usize) -> Group {
        if name.starts_with("connector.") {
            Group::Connector
        } else if name == "pool.prompts" {
            Group::PoolPrompts
        } else if name.starts_with("pool.") {
            Group::PoolKeys
        } else if name == "decoder.tok_embed" && (tokens::SP_OPEN as usize..=tokens::SP_CLOSE as usize).contains(&row)
        {
            Group::Sentinels
        } else if name == "decoder.tok_embed"
            && (tokens::QUERY_TASK[0] as usize..=tokens::TARGET_TASK[3] as usize).contains(&row)
        {
            Group::TaskTokens
        } else {
            Group::Decoder
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: Group,
    pub coordinates: usize,
    /// `None` for the frozen vision map, which has no trainable coordinates.
    pub max_rel_error: Option<f64>,
    pub max_abs_grad: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub eps: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    /// Largest |gradient| on prompt blocks that no instance selected (must be 0).
    pub unselected_prompt_grad: f64,
    pub seconds: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.unselected_prompt_grad == 0.0
            && self
                .groups
                .iter()
                .all(|g| g.max_rel_error.is_none_or(|e| e < self.tolerance))
    }
}

/// Compares reverse-mode gradients of the full training loss on `inputs`
/// (queries then their paired targets) against central differences.
///
/// Selections and key queries are fixed at the unperturbed parameters, so the
/// checked function is the smooth loss the optimizer actually differentiates.
pub fn grad_audit(
    model: &Model,
    inputs: &[Input<'_>],
    lambda: f64,
    key_weight: f64,
    eps: f64,
    tolerance: f64,
) -> Result<AuditReport> {
    let start = Instant::now();
    let plans: Vec<Plan> = inputs.iter().map(|i| model.plan(i)).collect::<Result<_>>()?;
    let bl = model.batch_loss(inputs, Some(plans.clone()), lambda, key_weight)?;
    let grads = bl.forward.graph.backward(bl.total);
    let analytic: Vec<crate::tensor::Tensor> = bl
        .forward
        .params
        .iter()
        .zip(model.params().tensors())
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| crate::tensor::Tensor::zeros(t.rows, t.cols)))
        .collect();

    let mut selected = vec![false; model.config().pool_size];
    for p in &plans {
        for &m in p.selection.iter().flat_map(|s| s.indices.iter()) {
            selected[m] = true;
        }
    }
    let prompts_at = model.params().position("pool.prompts").expect("schema");
    let lp = model.config().prompt_len;
    let mut unselected_prompt_grad: f64 = 0.0;
    for (m, _) in selected.iter().enumerate().filter(|(_, s)| !**s) {
        for r in m * lp..(m + 1) * lp {
            for v in analytic[prompts_at].row(r) {
                unselected_prompt_grad = unselected_prompt_grad.max(v.abs());
            }
        }
    }

    let mut probe = model.clone();
    let loss_at = |probe: &Model| -> Result<f64> {
        let bl = probe.batch_loss(inputs, Some(plans.clone()), lambda, key_weight)?;
        Ok(bl.forward.graph.scalar(bl.total))
    };
    let mut stats: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); Group::TRAINABLE.len()];
    let names: Vec<String> = model.params().names().to_vec();
    for (ti, name) in names.iter().enumerate() {
        let cols = model.params().tensors()[ti].cols;
        for e in 0..model.params().tensors()[ti].len() {
            let group = Group::of(name, e / cols);
            let gi = Group::TRAINABLE.iter().position(|g| *g == group).expect("trainable group");
            let orig = probe.params().tensors()[ti].data[e];
            probe.params_mut().tensors_mut()[ti].data[e] = orig + eps;
            let plus = loss_at(&probe)?;
            probe.params_mut().tensors_mut()[ti].data[e] = orig - eps;
            let minus = loss_at(&probe)?;
            probe.params_mut().tensors_mut()[ti].data[e] = orig;
            let num = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data[e];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(REL_ERR_FLOOR);
            let s = &mut stats[gi];
            s.0 += 1;
            s.1 = s.1.max(rel);
            s.2 = s.2.max(a.abs());
        }
    }
    let mut groups: Vec<GroupReport> = Group::TRAINABLE
        .iter()
        .zip(stats)
        .map(|(&group, (n, err, grad))| GroupReport {
            group,
            coordinates: n,
            max_rel_error: Some(err),
            max_abs_grad: grad,
            status: if err < tolerance { "ok" } else { "fail" }.to_string(),
        })
        .collect();
    // The frozen map lives outside the parameter store: nothing to perturb and
    // nothing for the optimizer to update.
    groups.push(GroupReport {
        group: Group::Vision,
        coordinates: 0,
        max_rel_error: None,
        max_abs_grad: 0.0,
        status: "frozen".to_string(),
    });
    Ok(AuditReport {
        eps,
        tolerance,
        groups,
        unselected_prompt_grad,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_assignment() {
        assert_eq!(Group::of("connector.w_q", 0), Group::Connector);
        assert_eq!(Group::of("pool.prompts", 3), Group::PoolPrompts);
        assert_eq!(Group::of("pool.text_keys", 3), Group::PoolKeys);
        assert_eq!(Group::of("decoder.tok_embed", 0), Group::Decoder);
        assert_eq!(Group::of("decoder.tok_embed", 1), Group::Sentinels);
        assert_eq!(Group::of("decoder.tok_embed", 2), Group::Sentinels);
        assert_eq!(Group::of("decoder.tok_embed", 3), Group::TaskTokens);
        assert_eq!(Group::of("decoder.tok_embed", 10), Group::TaskTokens);
        assert_eq!(Group::of("decoder.tok_embed", 11), Group::Decoder);
        assert_eq!(Group::of("decoder.layer0.w_q", 1), Group::Decoder);
    }
}
