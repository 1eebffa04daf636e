//! Frozen toy vision encoder and the trainable query-embedding connector.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthcorpus::PATCHES;
use crate::tensor::{matmul, Tensor};

pub const LN_EPS: f64 = 1e-5;
const TAG_VISION: u64 = 0x7669_7369;

/// Seeded random projection `d_raw -> d_i` followed by parameter-free layer norm.
///
/// Its weights never enter a [`crate::params::ParamStore`], so no optimizer can touch them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    projection: Tensor,
}

impl FrozenEncoder {
    pub fn new(seed: u64, d_raw: usize, d_image: usize) -> Self {
        let mut rng = Rng::with_tag(seed, TAG_VISION);
        let projection = Tensor::gaussian(d_raw, d_image, 1.0 / (d_raw as f64).sqrt(), &mut rng);
        Self { projection }
    }

    pub fn d_raw(&self) -> usize {
        self.projection.rows
    }

    pub fn d_image(&self) -> usize {
        self.projection.cols
    }

    pub fn weights(&self) -> &Tensor {
        &self.projection
    }

    /// `P x d_raw` patches to `P x d_i` visual features.
    pub fn encode_image(&self, patches: &Tensor) -> Result<Tensor> {
        if patches.rows != PATCHES || patches.cols != self.d_raw() {
            return Err(Error::ShapeMismatch {
                expected: format!("{PATCHES}x{}", self.d_raw()),
                got: format!("{}x{}", patches.rows, patches.cols),
            });
        }
        let mut out = matmul(patches, &self.projection);
        for r in 0..out.rows {
            normalize_row(out.row_mut(r));
        }
        Ok(out)
    }
}

fn normalize_row(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// q(I): arithmetic mean of the patch features.
pub fn image_key_query(features: &Tensor) -> Result<Vec<f64>> {
    if features.rows == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(features.mean_rows())
}

/// Graph handles of the connector parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConnectorVars {
    pub query_embed: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Cross-attends the learnable queries to each image's patch features.
///
/// `features` holds `G` images stacked as `(G * P) x d_i`; the result is the
/// `(G * n_q) x d_t` sentence prompts, image after image.
pub fn connect(g: &mut Graph, features: Var, p: &ConnectorVars, patches: usize) -> Var {
    let q = g.matmul(p.query_embed, p.w_q);
    let k = g.matmul(features, p.w_k);
    let v = g.matmul(features, p.w_v);
    let attended = g.cross_attention(q, k, v, patches);
    g.layer_norm(attended, p.ln_gain, p.ln_bias, LN_EPS)
}
