//! Large-kernel spatio-temporal encoder.
//!
//! Stage one adapts the input channels with a point-wise convolution. Three
//! strided convolutions then halve the spatial size (the temporal axis is
//! never downsampled), and the deepest map passes through hybrid blocks that
//! combine a static large-kernel depthwise convolution with squeeze-excitation
//! channel attention.

use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{Bound, Conv, Linear};
use super::params::ParamStore;
use crate::autodiff::{Activation, ConvSpec, Graph, PoolKind, Var};
use crate::error::Result;

struct HybridBlock {
    depthwise: Conv,
    squeeze: Linear,
    excite: Linear,
    pointwise: Conv,
}

pub(crate) struct EncoderLayers {
    stem: Conv,
    down: [Conv; 3],
    hybrid: Vec<HybridBlock>,
}

/// Graph handles of the encoder outputs.
pub(crate) struct PyramidVars {
    pub deepest: Var,
    pub skips: Vec<Var>,
}

impl EncoderLayers {
    pub(crate) fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let [c1, c2, db] = cfg.channels;
        let pw = ConvSpec::pointwise();
        let stem = Conv::new(
            store,
            "encoder.stem",
            cfg.in_channels,
            c1,
            [1, 1, 1],
            pw,
            rng,
        );
        let down_spec = ConvSpec {
            stride: [1, 2, 2],
            padding: cfg.down_padding(),
            groups: 1,
        };
        let widths = [(c1, c1), (c1, c2), (c2, db)];
        let down = [0, 1, 2].map(|i| {
            let (cin, cout) = widths[i];
            Conv::new(
                store,
                &format!("encoder.down{}", i + 1),
                cin,
                cout,
                cfg.down_kernel,
                down_spec,
                rng,
            )
        });
        let dw_spec = ConvSpec {
            stride: [1; 3],
            padding: cfg.large_kernel.map(|k| k / 2),
            groups: db,
        };
        let se = cfg.se_hidden();
        let hybrid = (0..cfg.hybrid_blocks)
            .map(|i| {
                let name = format!("encoder.hybrid{i}");
                HybridBlock {
                    depthwise: Conv::new(
                        store,
                        &format!("{name}.depthwise"),
                        db,
                        db,
                        cfg.large_kernel,
                        dw_spec,
                        rng,
                    ),
                    squeeze: Linear::new(store, &format!("{name}.squeeze"), db, se, rng),
                    excite: Linear::new(store, &format!("{name}.excite"), se, db, rng),
                    pointwise: Conv::new(
                        store,
                        &format!("{name}.pointwise"),
                        db,
                        db,
                        [1, 1, 1],
                        pw,
                        rng,
                    ),
                }
            })
            .collect();
        Self { stem, down, hybrid }
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<PyramidVars> {
        let h = self.stem.apply(g, p, x)?;
        let mut h = g.activation(h, Activation::Gelu);
        let mut skips = Vec::with_capacity(2);
        for (i, conv) in self.down.iter().enumerate() {
            let y = conv.apply(g, p, h)?;
            h = g.activation(y, Activation::Gelu);
            if i < 2 {
                skips.push(h);
            }
        }
        for block in &self.hybrid {
            h = block.forward(g, p, h)?;
        }
        Ok(PyramidVars { deepest: h, skips })
    }
}

impl HybridBlock {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let a = self.depthwise.apply(g, p, x)?;
        let a = g.activation(a, Activation::Gelu);
        let pooled = g.pool(a, PoolKind::Mean)?;
        let s = self.squeeze.apply(g, p, pooled)?;
        let s = g.activation(s, Activation::Relu);
        let s = self.excite.apply(g, p, s)?;
        let s = g.activation(s, Activation::Sigmoid);
        let a = g.scale_channels(a, s)?;
        let a = self.pointwise.apply(g, p, a)?;
        g.add(x, a)
    }
}
