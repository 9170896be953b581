//! Training objective and the AdamW update.

use serde::{Deserialize, Serialize};

use crate::data::StudyLabel;
use crate::error::{Error, Result};
use crate::geometry::{
    ef_surrogate, geometric_losses_gradient, simpson_geometry, ChordSample, GeoLosses,
};
use crate::model::{OutputGrads, ParamStore, PhaseChords};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_geo: f64,
    pub lambda_vol: f64,
    /// Supervise volume outputs when the model has them.
    pub volume_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_geo: 0.05,
            lambda_vol: 0.01,
            volume_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ef: f64,
    /// Present when landmark chords were predicted.
    pub geo: Option<GeoLosses>,
    pub l_vol: Option<f64>,
    pub l_total: f64,
    /// Batch-mean EF computed from predicted chords; never part of the loss.
    pub ef_surrogate_diag: Option<f64>,
}

impl LossReport {
    pub fn l_geo(&self) -> f64 {
        self.geo.map_or(0.0, |g| g.l_geo)
    }
}

/// Network outputs for one batch, in the layouts the model produces.
#[derive(Clone, Copy, Debug)]
pub struct BatchOutputs<'a> {
    /// `[B]`.
    pub ef: &'a [f64],
    /// `[B, 2, L, 4]`, phase 0 is ED.
    pub landmarks: Option<&'a Tensor>,
    /// `[B, 2]` as (ESV, EDV).
    pub volumes: Option<&'a Tensor>,
}

pub fn ef_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
}

fn chords_of(landmarks: &Tensor, b: usize) -> Result<PhaseChords> {
    let s = landmarks.shape();
    if s.len() != 4 || s[1] != 2 || s[3] != 4 {
        return Err(Error::ShapeMismatch(format!("landmarks {s:?}")));
    }
    let per_phase = s[2] * 4;
    let d = &landmarks.data()[b * 2 * per_phase..(b + 1) * 2 * per_phase];
    Ok(PhaseChords {
        ed: crate::geometry::ChordSet::from_flat(crate::geometry::Phase::Ed, &d[..per_phase])?,
        es: crate::geometry::ChordSet::from_flat(crate::geometry::Phase::Es, &d[per_phase..])?,
    })
}

fn surrogate(chords: &[PhaseChords]) -> Option<f64> {
    let mut sum = 0.0;
    for c in chords {
        let ed = simpson_geometry(&c.ed).ok()?;
        let es = simpson_geometry(&c.es).ok()?;
        sum += ef_surrogate(&ed, &es).ok()?;
    }
    Some(sum / chords.len() as f64)
}

/// Loss report without gradients.
pub fn total_loss(
    out: &BatchOutputs<'_>,
    labels: &[&StudyLabel],
    weights: &LossWeights,
) -> Result<LossReport> {
    total_loss_with_grads(out, labels, weights).map(|(r, _)| r)
}

/// Loss report plus the adjoints of every supervised output.
pub fn total_loss_with_grads(
    out: &BatchOutputs<'_>,
    labels: &[&StudyLabel],
    weights: &LossWeights,
) -> Result<(LossReport, OutputGrads)> {
    let b = out.ef.len();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{b} predictions for {} labels",
            labels.len()
        )));
    }
    let gt: Vec<f64> = labels.iter().map(|l| l.ef).collect();
    let l_ef = ef_loss(out.ef, &gt)?;
    let n = b as f64;
    let d_ef = out
        .ef
        .iter()
        .zip(&gt)
        .map(|(p, g)| 2.0 * (p - g) / n)
        .collect();
    let mut grads = OutputGrads {
        ef: Some(Tensor::new(vec![b], d_ef)?),
        ..OutputGrads::default()
    };
    let mut l_total = l_ef;

    let mut geo = None;
    let mut diag = None;
    if let Some(lm) = out.landmarks {
        let chords = (0..b)
            .map(|i| chords_of(lm, i))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<ChordSample<'_>> = chords
            .iter()
            .zip(labels)
            .map(|(c, l)| ChordSample::new(&c.ed, &c.es, &l.ed_chords, &l.es_chords))
            .collect();
        let (losses, sample_grads) = geometric_losses_gradient(&batch).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::LabelError(format!("reference chords: {m}")),
            other => other,
        })?;
        let mut d = Vec::with_capacity(lm.len());
        for g in &sample_grads {
            for phase in [&g.ed, &g.es] {
                d.extend(phase.flat().iter().map(|v| weights.lambda_geo * v));
            }
        }
        grads.landmarks = Some(Tensor::new(lm.shape().to_vec(), d)?);
        l_total += weights.lambda_geo * losses.l_geo;
        geo = Some(losses);
        diag = surrogate(&chords);
    }

    let mut l_vol = None;
    if let (Some(v), true) = (out.volumes, weights.volume_loss) {
        let mut target = Vec::with_capacity(2 * b);
        for l in labels {
            match (l.esv, l.edv) {
                (Some(es), Some(ed)) => target.extend([es, ed]),
                _ => return Err(Error::LabelError("volume targets missing".into())),
            }
        }
        let loss = ef_loss(v.data(), &target)?;
        let m = target.len() as f64;
        let d = v
            .data()
            .iter()
            .zip(&target)
            .map(|(p, t)| weights.lambda_vol * 2.0 * (p - t) / m)
            .collect();
        grads.volumes = Some(Tensor::new(v.shape().to_vec(), d)?);
        l_total += weights.lambda_vol * loss;
        l_vol = Some(loss);
    }

    Ok((
        LossReport {
            l_ef,
            geo,
            l_vol,
            l_total,
            ef_surrogate_diag: diag,
        },
        grads,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 45,
            clip_norm: Some(10.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size >= 1
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One AdamW step with decoupled weight decay. Parameters stay
/// `f32`-representable. A non-finite gradient aborts the step before any
/// state is touched.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let p = params.by_index(i);
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {:?} for {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let grad_norm = global_norm(grads);
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.by_index_mut(i).value.data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k] * scale;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.epsilon);
            p[k] -= cfg.learning_rate * (cfg.weight_decay * p[k] + update);
        }
    }
    params.round_to_f32();
    Ok(StepReport {
        grad_norm,
        clipped: scale < 1.0,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_ef: f64,
    pub l_pts: Option<f64>,
    pub l_b: Option<f64>,
    pub l_db: Option<f64>,
    pub l_h: Option<f64>,
    pub l_geo: Option<f64>,
    pub l_vol: Option<f64>,
    pub l_total: f64,
    pub ef_surrogate: Option<f64>,
    pub skipped: bool,
}

impl LogRecord {
    pub fn new(epoch: usize, step: u64, r: &LossReport, skipped: bool) -> Self {
        Self {
            epoch,
            step,
            l_ef: r.l_ef,
            l_pts: r.geo.map(|g| g.l_pts),
            l_b: r.geo.map(|g| g.l_b),
            l_db: r.geo.map(|g| g.l_db),
            l_h: r.geo.map(|g| g.l_h),
            l_geo: r.geo.map(|g| g.l_geo),
            l_vol: r.l_vol,
            l_total: r.l_total,
            ef_surrogate: r.ef_surrogate_diag,
            skipped,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}
