//! Dual-phase endocardial border detector.
//!
//! Skip features are projected to a shared width, tagged with positional and
//! level embeddings, flattened into one token sequence, thinned to the token
//! budget and refined by a Linear-LayerNorm-GELU fusion layer. Two learned
//! query banks (ED and ES) then cross-attend to the tokens; each attended
//! embedding is decoded to a chord `(x1, y1, x2, y2)` by an MLP, a GLU refiner
//! and a tanh rescaling onto `[0, coord_scale]`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{Bound, LayerNorm, Linear};
use super::params::{Init, ParamId, ParamStore};
use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the decoder output before the GLU halves it to four coordinates.
const GLU_WIDTH: usize = 8;

/// Source of one retained token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenIndex {
    pub level: usize,
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

/// Strided subsampling: keeps `floor(j * total / budget)` for `j < budget`,
/// or every token when `total <= budget`.
pub fn select_token_indices(total: usize, budget: usize) -> Vec<usize> {
    if total <= budget {
        return (0..total).collect();
    }
    (0..budget as u128)
        .map(|j| (j * total as u128 / budget as u128) as usize)
        .collect()
}

/// Maps index `i` of an axis of length `n` to `[-1, 1]`; a length-one axis
/// sits at the origin.
pub fn grid_coordinate(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

pub(crate) struct BorderLayers {
    projections: Vec<Linear>,
    position: Linear,
    level_embed: Vec<ParamId>,
    fusion: Linear,
    fusion_norm: LayerNorm,
    queries: [ParamId; 2],
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    attn_out: Linear,
    mlp_hidden: Linear,
    mlp_out: Linear,
    glu: Linear,
}

/// Graph handles of the detector outputs.
pub(crate) struct BorderVars {
    /// `[B, 2, L, 4]`, phase 0 = ED.
    pub landmarks: Var,
    /// `[B, 2, L, h]`.
    pub embeddings: Var,
    /// One attention node per phase.
    pub attention: [Var; 2],
}

impl BorderLayers {
    pub(crate) fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let skip_channels = [cfg.channels[0], cfg.channels[1]];
        let projections = skip_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, &format!("border.project{i}"), c, h, rng))
            .collect();
        let position = Linear::new(store, "border.position", 3, h, rng);
        let embed_scale = 1.0 / (h as f64).sqrt();
        let level_embed = (0..skip_channels.len())
            .map(|i| {
                store.add(
                    format!("border.level{i}"),
                    &[h],
                    Init::Normal(embed_scale),
                    rng,
                )
            })
            .collect();
        let fusion = Linear::new(store, "border.fusion", h, h, rng);
        let fusion_norm = LayerNorm::new(store, "border.fusion_norm", h, rng);
        let l = cfg.landmarks;
        let queries = [
            store.add("border.queries_ed", &[l, h], Init::Normal(embed_scale), rng),
            store.add("border.queries_es", &[l, h], Init::Normal(embed_scale), rng),
        ];
        Self {
            projections,
            position,
            level_embed,
            fusion,
            fusion_norm,
            queries,
            attn_q: Linear::new(store, "border.attn_q", h, h, rng),
            attn_k: Linear::new(store, "border.attn_k", h, h, rng),
            attn_v: Linear::new(store, "border.attn_v", h, h, rng),
            attn_out: Linear::new(store, "border.attn_out", h, h, rng),
            mlp_hidden: Linear::new(store, "border.mlp_hidden", h, h, rng),
            mlp_out: Linear::new(store, "border.mlp_out", h, GLU_WIDTH, rng),
            glu: Linear::new(store, "border.glu", GLU_WIDTH, GLU_WIDTH, rng),
        }
    }

    /// Builds the fused token sequence `[B, N_eff, h]` from the skip levels.
    ///
    /// Projection and positional terms are point-wise, so only the retained
    /// positions are ever projected.
    pub(crate) fn tokenize(
        &self,
        g: &mut Graph,
        p: &Bound,
        skips: &[Var],
        budget: usize,
    ) -> Result<(Var, Vec<TokenIndex>)> {
        if skips.is_empty() {
            return Err(Error::InvalidConfig("no skip levels to tokenize".into()));
        }
        if skips.len() > self.projections.len() {
            return Err(Error::InvalidConfig(format!(
                "{} skip levels for {} projections",
                skips.len(),
                self.projections.len()
            )));
        }
        let dims: Vec<[usize; 3]> = skips
            .iter()
            .map(|&s| {
                let sh = g.shape(s);
                [sh[2], sh[3], sh[4]]
            })
            .collect();
        let sizes: Vec<usize> = dims.iter().map(|d| d.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        let selected = select_token_indices(total, budget);

        let mut index_map = Vec::with_capacity(selected.len());
        let mut parts = Vec::new();
        let mut offset = 0;
        let mut cursor = 0;
        for (level, (&skip, &size)) in skips.iter().zip(&sizes).enumerate() {
            let [t_n, h_n, w_n] = dims[level];
            let mut positions = Vec::new();
            while cursor < selected.len() && selected[cursor] < offset + size {
                positions.push(selected[cursor] - offset);
                cursor += 1;
            }
            offset += size;
            if positions.is_empty() {
                continue;
            }
            let mut grid = Vec::with_capacity(positions.len() * 3);
            for &pos in &positions {
                let (t, rem) = (pos / (h_n * w_n), pos % (h_n * w_n));
                let (y, x) = (rem / w_n, rem % w_n);
                index_map.push(TokenIndex { level, t, y, x });
                grid.extend([
                    grid_coordinate(t, t_n),
                    grid_coordinate(y, h_n),
                    grid_coordinate(x, w_n),
                ]);
            }
            let n = positions.len();
            let tokens = g.gather_tokens(skip, positions)?;
            let tokens = self.projections[level].apply(g, p, tokens)?;
            let grid = g.constant(Tensor::new(vec![n, 3], grid)?);
            let pos = self.position.apply(g, p, grid)?;
            let tokens = g.add_broadcast(tokens, pos)?;
            let tokens = g.add_broadcast(tokens, p.get(self.level_embed[level]))?;
            parts.push(tokens);
        }
        let f = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        let z = self.fusion.apply(g, p, f)?;
        let z = self.fusion_norm.apply(g, p, z)?;
        Ok((g.activation(z, Activation::Gelu), index_map))
    }

    pub(crate) fn detect(
        &self,
        g: &mut Graph,
        p: &Bound,
        cfg: &ModelConfig,
        tokens: Var,
    ) -> Result<BorderVars> {
        if !cfg.hidden.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidConfig(
                "hidden dimension must be divisible by the head count".into(),
            ));
        }
        let batch = g.shape(tokens)[0];
        let (l, h) = (cfg.landmarks, cfg.hidden);
        let keys = self.attn_k.apply(g, p, tokens)?;
        let values = self.attn_v.apply(g, p, tokens)?;
        let half = 0.5 * cfg.coord_scale;

        let mut coords = Vec::with_capacity(2);
        let mut embeds = Vec::with_capacity(2);
        let mut attention = Vec::with_capacity(2);
        for bank in self.queries {
            let q = g.repeat_batch(p.get(bank), batch);
            let q = self.attn_q.apply(g, p, q)?;
            let att = g.attention(q, keys, values, cfg.heads)?;
            attention.push(att);
            let e = self.attn_out.apply(g, p, att)?;

            let c = self.mlp_hidden.apply(g, p, e)?;
            let c = g.activation(c, Activation::Gelu);
            let c = self.mlp_out.apply(g, p, c)?;
            let c = self.glu.apply(g, p, c)?;
            let value = g.slice_last(c, 0, GLU_WIDTH / 2)?;
            let gate = g.slice_last(c, GLU_WIDTH / 2, GLU_WIDTH / 2)?;
            let gate = g.activation(gate, Activation::Sigmoid);
            let c = g.mul(value, gate)?;
            let c = g.activation(c, Activation::Tanh);
            let c = g.affine(c, half, half);

            coords.push(g.reshape(c, &[batch, 1, l, 4])?);
            embeds.push(g.reshape(e, &[batch, 1, l, h])?);
        }
        Ok(BorderVars {
            landmarks: g.concat(&coords, 1)?,
            embeddings: g.concat(&embeds, 1)?,
            attention: [attention[0], attention[1]],
        })
    }
}
