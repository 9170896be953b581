//! The ejection-fraction network: encoder, border detector and aggregator.

mod aggregator;
mod border;
pub mod checkpoint;
mod config;
mod encoder;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use border::{grid_coordinate, select_token_indices, TokenIndex};
pub use config::ModelConfig;
pub use params::{Param, ParamId, ParamStore};

use aggregator::AggregatorLayers;
use border::BorderLayers;
use encoder::EncoderLayers;
use layers::Bound;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{ChordSet, Phase};
use crate::tensor::Tensor;

/// Encoder outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `[B, D_b, T, H_b, W_b]`.
    pub deepest: Tensor,
    /// Finest first; the coarsest level is not included.
    pub skips: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    /// `[B, N_eff, h]`.
    pub tokens: Tensor,
    pub index_map: Vec<TokenIndex>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbdOutput {
    /// `[B, 2, L, 4]`; phase 0 is ED, phase 1 is ES.
    pub landmarks: Tensor,
    /// `[B, 2, L, h]`.
    pub embeddings: Tensor,
    /// Softmax weights per phase, each `[B, heads, L, N_eff]`.
    pub attention: [Vec<f64>; 2],
}

impl CbdOutput {
    pub fn chords(&self, sample: usize) -> Result<PhaseChords> {
        chords_from(&self.landmarks, sample)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseChords {
    pub ed: ChordSet,
    pub es: ChordSet,
}

/// Per-sample model output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ef: f64,
    pub esv: Option<f64>,
    pub edv: Option<f64>,
    pub cbd: Option<PhaseChords>,
}

fn chords_from(landmarks: &Tensor, sample: usize) -> Result<PhaseChords> {
    let s = landmarks.shape();
    if s.len() != 4 || s[1] != 2 || s[3] != 4 || sample >= s[0] {
        return Err(Error::ShapeMismatch(format!(
            "landmarks {s:?} for sample {sample}"
        )));
    }
    let per_phase = s[2] * 4;
    let base = sample * 2 * per_phase;
    let data = landmarks.data();
    Ok(PhaseChords {
        ed: ChordSet::from_flat(Phase::Ed, &data[base..base + per_phase])?,
        es: ChordSet::from_flat(Phase::Es, &data[base + per_phase..base + 2 * per_phase])?,
    })
}

pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: EncoderLayers,
    border: Option<BorderLayers>,
    aggregator: AggregatorLayers,
}

/// Adjoints of the model outputs used to start the backward sweep.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    /// `[B]`.
    pub ef: Option<Tensor>,
    /// `[B, 2]`.
    pub volumes: Option<Tensor>,
    /// `[B, 2, L, 4]`.
    pub landmarks: Option<Tensor>,
}

/// One recorded forward evaluation, ready for a backward sweep.
pub struct ForwardPass {
    graph: Graph,
    params: Vec<Var>,
    input: Var,
    ef: Var,
    volumes: Option<Var>,
    landmarks: Option<Var>,
    embeddings: Option<Var>,
    attention: Vec<Var>,
    deepest: Var,
    skips: Vec<Var>,
    tokens: Option<(Var, Vec<TokenIndex>)>,
    heads: usize,
}

/// Gradients for every parameter (in store order) and optionally the input.
pub struct Backward {
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
}

impl ForwardPass {
    pub fn ef(&self) -> &[f64] {
        self.graph.value(self.ef).data()
    }

    pub fn volumes(&self) -> Option<&Tensor> {
        self.volumes.map(|v| self.graph.value(v))
    }

    pub fn landmarks(&self) -> Option<&Tensor> {
        self.landmarks.map(|v| self.graph.value(v))
    }

    pub fn embeddings(&self) -> Option<&Tensor> {
        self.embeddings.map(|v| self.graph.value(v))
    }

    pub fn pyramid(&self) -> FeaturePyramid {
        FeaturePyramid {
            deepest: self.graph.value(self.deepest).clone(),
            skips: self
                .skips
                .iter()
                .map(|&s| self.graph.value(s).clone())
                .collect(),
        }
    }

    pub fn tokens(&self) -> Option<TokenSet> {
        self.tokens.as_ref().map(|(v, idx)| TokenSet {
            tokens: self.graph.value(*v).clone(),
            index_map: idx.clone(),
        })
    }

    /// Softmax rows of every attention head, each over all keys.
    pub fn attention_rows(&self) -> Vec<&[f64]> {
        let mut rows = Vec::new();
        for &a in &self.attention {
            let s = self.graph.shape(a);
            let count = s[0] * s[1] * self.heads;
            if let Some(p) = self.graph.attention_probs(a) {
                rows.extend(p.chunks(p.len() / count));
            }
        }
        rows
    }

    pub fn cbd(&self) -> Option<CbdOutput> {
        let (landmarks, embeddings) = (self.landmarks?, self.embeddings?);
        let probs = |i: usize| {
            self.graph
                .attention_probs(self.attention[i])
                .map(|p| p.to_vec())
                .unwrap_or_default()
        };
        Some(CbdOutput {
            landmarks: self.graph.value(landmarks).clone(),
            embeddings: self.graph.value(embeddings).clone(),
            attention: [probs(0), probs(1)],
        })
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        let ef = self.ef();
        let vols = self.volumes();
        let lm = self.landmarks();
        (0..ef.len())
            .map(|b| Prediction {
                ef: ef[b],
                esv: vols.map(|v| v.data()[2 * b]),
                edv: vols.map(|v| v.data()[2 * b + 1]),
                cbd: lm.and_then(|l| chords_from(l, b).ok()),
            })
            .collect()
    }

    pub fn backward(&self, seeds: &OutputGrads) -> Result<Backward> {
        let mut list = Vec::new();
        if let Some(g) = &seeds.ef {
            list.push((self.ef, g.clone()));
        }
        if let Some(g) = &seeds.volumes {
            let v = self
                .volumes
                .ok_or_else(|| Error::InvalidState("model does not predict volumes".into()))?;
            list.push((v, g.clone()));
        }
        if let Some(g) = &seeds.landmarks {
            let v = self
                .landmarks
                .ok_or_else(|| Error::InvalidState("model has no landmark output".into()))?;
            list.push((v, g.clone()));
        }
        let mut grads = self.graph.backward(&list)?;
        let params = self
            .params
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)))
            })
            .collect();
        Ok(Backward {
            params,
            input: grads.take(self.input),
        })
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = EncoderLayers::build(&cfg, &mut store, &mut rng);
        let border = (!cfg.disable_e2cbd).then(|| BorderLayers::build(&cfg, &mut store, &mut rng));
        let aggregator = AggregatorLayers::build(&cfg, &mut store, &mut rng);
        Ok(Self {
            cfg,
            params: store,
            encoder,
            border,
            aggregator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Expected clip shape for a batch of `b`.
    pub fn input_shape(&self, b: usize) -> [usize; 5] {
        let c = &self.cfg;
        [b, c.in_channels, c.frames, c.height, c.width]
    }

    fn check_input(&self, clip: &Tensor) -> Result<()> {
        let s = clip.shape();
        if s.len() != 5 || s[0] == 0 || s[1..] != self.input_shape(s[0])[1..] {
            return Err(Error::ShapeMismatch(format!(
                "clip {:?}, expected [B, {}, {}, {}, {}]",
                s, self.cfg.in_channels, self.cfg.frames, self.cfg.height, self.cfg.width
            )));
        }
        Ok(())
    }

    /// Records the full forward pass. With `track_input` the clip itself
    /// receives a gradient.
    pub fn forward_pass(&self, clip: &Tensor, track_input: bool) -> Result<ForwardPass> {
        self.check_input(clip)?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params);
        let input = if track_input {
            g.variable(clip.clone())
        } else {
            g.constant(clip.clone())
        };
        let pyramid = self.encoder.forward(&mut g, &bound, input)?;
        let (mut landmarks, mut embeddings, mut tokens) = (None, None, None);
        let mut attention = Vec::new();
        if let Some(border) = &self.border {
            let (z, index) =
                border.tokenize(&mut g, &bound, &pyramid.skips, self.cfg.token_budget)?;
            let out = border.detect(&mut g, &bound, &self.cfg, z)?;
            landmarks = Some(out.landmarks);
            embeddings = Some(out.embeddings);
            attention.extend(out.attention);
            tokens = Some((z, index));
        }
        let head =
            self.aggregator
                .forward(&mut g, &bound, &self.cfg, pyramid.deepest, embeddings)?;
        Ok(ForwardPass {
            params: bound.vars().to_vec(),
            graph: g,
            input,
            ef: head.ef,
            volumes: head.volumes,
            landmarks,
            embeddings,
            attention,
            deepest: pyramid.deepest,
            skips: pyramid.skips,
            tokens,
            heads: self.cfg.heads,
        })
    }

    pub fn forward(&self, clip: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self.forward_pass(clip, false)?.predictions())
    }

    pub fn encoder_forward(&self, clip: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(clip)?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params);
        let x = g.constant(clip.clone());
        let p = self.encoder.forward(&mut g, &bound, x)?;
        Ok(FeaturePyramid {
            deepest: g.value(p.deepest).clone(),
            skips: p.skips.iter().map(|&s| g.value(s).clone()).collect(),
        })
    }

    fn border(&self) -> Result<&BorderLayers> {
        self.border
            .as_ref()
            .ok_or_else(|| Error::InvalidState("border detector is disabled".into()))
    }

    pub fn tokenize(&self, pyramid: &FeaturePyramid) -> Result<TokenSet> {
        let border = self.border()?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params);
        let skips: Vec<Var> = pyramid
            .skips
            .iter()
            .map(|s| g.constant(s.clone()))
            .collect();
        let (z, index_map) = border.tokenize(&mut g, &bound, &skips, self.cfg.token_budget)?;
        Ok(TokenSet {
            tokens: g.value(z).clone(),
            index_map,
        })
    }

    pub fn cbd_forward(&self, tokens: &TokenSet) -> Result<CbdOutput> {
        let border = self.border()?;
        let s = tokens.tokens.shape();
        if s.len() != 3 || s[2] != self.cfg.hidden || s[1] == 0 {
            return Err(Error::ShapeMismatch(format!("tokens {s:?}")));
        }
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params);
        let z = g.constant(tokens.tokens.clone());
        let out = border.detect(&mut g, &bound, &self.cfg, z)?;
        let probs = |v: Var| g.attention_probs(v).map(|p| p.to_vec()).unwrap_or_default();
        Ok(CbdOutput {
            landmarks: g.value(out.landmarks).clone(),
            embeddings: g.value(out.embeddings).clone(),
            attention: [probs(out.attention[0]), probs(out.attention[1])],
        })
    }

    pub fn e2fa_forward(
        &self,
        pyramid: &FeaturePyramid,
        cbd: Option<&CbdOutput>,
    ) -> Result<Vec<Prediction>> {
        if !self.cfg.disable_e2cbd && cbd.is_none() {
            return Err(Error::InvalidState(
                "detector output required while the detector is enabled".into(),
            ));
        }
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params);
        let deepest = g.constant(pyramid.deepest.clone());
        let emb = cbd.map(|c| g.constant(c.embeddings.clone()));
        let head = self
            .aggregator
            .forward(&mut g, &bound, &self.cfg, deepest, emb)?;
        let ef = g.value(head.ef).data().to_vec();
        let vols = head.volumes.map(|v| g.value(v).data().to_vec());
        Ok(ef
            .iter()
            .enumerate()
            .map(|(b, &ef)| Prediction {
                ef,
                esv: vols.as_ref().map(|v| v[2 * b]),
                edv: vols.as_ref().map(|v| v[2 * b + 1]),
                cbd: cbd.and_then(|c| c.chords(b).ok()),
            })
            .collect())
    }
}

/// Learnable scalar count for `cfg` without building the model.
pub fn parameter_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::new(cfg.clone())?.parameter_count())
}
