//! Endocardial feature aggregator: global statistics of the deepest map
//! fused with a projection of the landmark embeddings, then an MLP head.

use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{Bound, Linear};
use super::params::ParamStore;
use crate::autodiff::{Activation, Graph, PoolKind, Var};
use crate::error::{Error, Result};

pub(crate) struct AggregatorLayers {
    landmark: Option<(Linear, Linear)>,
    head_hidden: Linear,
    head_out: Linear,
}

pub(crate) struct HeadVars {
    /// `[B]`, in percent.
    pub ef: Var,
    /// `[B, 2]` as `(ESV, EDV)` when volumes are predicted.
    pub volumes: Option<Var>,
}

impl AggregatorLayers {
    pub(crate) fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let db = cfg.channels[2];
        let landmark = (!cfg.disable_e2cbd).then(|| {
            let v_len = 2 * cfg.landmarks * cfg.hidden;
            (
                Linear::new(store, "aggregator.landmark_in", v_len, db, rng),
                Linear::new(store, "aggregator.landmark_out", db, db, rng),
            )
        });
        let width = cfg.descriptor_blocks() * db;
        Self {
            landmark,
            head_hidden: Linear::new(store, "aggregator.head_hidden", width, db, rng),
            head_out: Linear::new(store, "aggregator.head_out", db, cfg.head_outputs(), rng),
        }
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        cfg: &ModelConfig,
        deepest: Var,
        embeddings: Option<Var>,
    ) -> Result<HeadVars> {
        let batch = g.shape(deepest)[0];
        let mut parts = vec![g.pool(deepest, PoolKind::Mean)?];
        if !cfg.disable_e2fa {
            parts.push(g.pool(deepest, PoolKind::Max)?);
            parts.push(g.pool(deepest, PoolKind::Var)?);
        }
        if let Some((inp, out)) = &self.landmark {
            let e = embeddings.ok_or_else(|| {
                Error::InvalidState(
                    "landmark embeddings missing while the detector is enabled".into(),
                )
            })?;
            let v = g.reshape(e, &[batch, 2 * cfg.landmarks * cfg.hidden])?;
            let x = inp.apply(g, p, v)?;
            let x = g.activation(x, Activation::Gelu);
            parts.push(out.apply(g, p, x)?);
        }
        let features = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        let hdn = self.head_hidden.apply(g, p, features)?;
        let hdn = g.activation(hdn, Activation::Gelu);
        let out = self.head_out.apply(g, p, hdn)?;
        let n_out = cfg.head_outputs();
        let z = g.slice_last(out, n_out - 1, 1)?;
        let z = g.activation(z, Activation::Tanh);
        let ef = g.affine(z, 50.0, 50.0);
        let ef = g.reshape(ef, &[batch])?;
        let volumes = if cfg.predict_volumes {
            Some(g.slice_last(out, 0, 2)?)
        } else {
            None
        };
        Ok(HeadVars { ef, volumes })
    }
}
