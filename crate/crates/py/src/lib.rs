//! Python bindings. Clips cross the boundary as flat float lists plus a
//! shape; chords as `[x1, y1, x2, y2]` lists ordered apex to annulus.

use std::path::PathBuf;

use ejection_core::data::{self, SamplingPolicy};
use ejection_core::geometry::{self, Chord, ChordSample, ChordSet, DiskGeometry, Phase};
use ejection_core::gradcheck::{self, GradcheckOptions};
use ejection_core::model::{checkpoint, ModelConfig, Prediction};
use ejection_core::tensor::Tensor;
use ejection_core::{cli, metrics, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(m) => PyIOError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn chord_set(phase: Phase, chords: Vec<[f64; 4]>) -> ChordSet {
    ChordSet::new(phase, chords.into_iter().map(Chord::from_coords).collect())
}

fn geometry_dict<'py>(py: Python<'py>, g: &DiskGeometry) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("diameters", g.diameters.clone())?;
    d.set_item("heights", g.heights.clone())?;
    d.set_item("disk_volumes", g.disk_volumes.clone())?;
    d.set_item("volume", g.total_volume)?;
    Ok(d)
}

/// Disk diameters, heights and volumes of one chord stack.
#[pyfunction]
fn simpson_geometry(py: Python<'_>, chords: Vec<[f64; 4]>) -> PyResult<Bound<'_, PyDict>> {
    let g = geometry::simpson_geometry(&chord_set(Phase::Ed, chords)).map_err(py_err)?;
    geometry_dict(py, &g)
}

/// Geometric EF in percent from ED and ES chord stacks.
#[pyfunction]
fn ef_surrogate(ed: Vec<[f64; 4]>, es: Vec<[f64; 4]>) -> PyResult<f64> {
    let ed = geometry::simpson_geometry(&chord_set(Phase::Ed, ed)).map_err(py_err)?;
    let es = geometry::simpson_geometry(&chord_set(Phase::Es, es)).map_err(py_err)?;
    geometry::ef_surrogate(&ed, &es).map_err(py_err)
}

#[pyfunction]
fn geometric_losses(
    py: Python<'_>,
    pred_ed: Vec<[f64; 4]>,
    pred_es: Vec<[f64; 4]>,
    gt_ed: Vec<[f64; 4]>,
    gt_es: Vec<[f64; 4]>,
) -> PyResult<Bound<'_, PyDict>> {
    let sets = [
        chord_set(Phase::Ed, pred_ed),
        chord_set(Phase::Es, pred_es),
        chord_set(Phase::Ed, gt_ed),
        chord_set(Phase::Es, gt_es),
    ];
    let l = geometry::geometric_losses(&[ChordSample::new(&sets[0], &sets[1], &sets[2], &sets[3])])
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("l_pts", l.l_pts)?;
    d.set_item("l_b", l.l_b)?;
    d.set_item("l_db", l.l_db)?;
    d.set_item("l_h", l.l_h)?;
    d.set_item("l_geo", l.l_geo)?;
    Ok(d)
}

/// Frame indices and padding count for a video of `total` frames.
#[pyfunction]
#[pyo3(signature = (total, f_sel, stride, train=false, seed=0))]
fn sample_frames(
    total: usize,
    f_sel: usize,
    stride: usize,
    train: bool,
    seed: u64,
) -> PyResult<(Vec<usize>, usize)> {
    let policy = SamplingPolicy {
        f_sel,
        stride,
        train_random_start: train,
    };
    let sel = data::sample_frames(total, &policy, seed).map_err(py_err)?;
    Ok((sel.indices, sel.pad))
}

/// MAE, RMSE and R² over `(reference, predicted)` pairs.
#[pyfunction]
fn compute_metrics(py: Python<'_>, pairs: Vec<(f64, f64)>) -> PyResult<Bound<'_, PyDict>> {
    let s = metrics::compute_metrics(&pairs).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("n", s.n)?;
    d.set_item("mae", s.mae)?;
    d.set_item("rmse", s.rmse)?;
    d.set_item("r2", s.r2)?;
    d.set_item("confusion", s.confusion)?;
    Ok(d)
}

/// One phantom clip as `(frames, shape, label)`.
#[pyfunction]
#[pyo3(signature = (size, ef, seed=0))]
fn synthetic_clip(
    py: Python<'_>,
    size: usize,
    ef: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<usize>, Bound<'_, PyDict>)> {
    let (clip, label) =
        data::synth_clip(&data::SynthParams::for_size(size, ef, seed)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("ef", label.ef)?;
    d.set_item("edv", label.edv)?;
    d.set_item("esv", label.esv)?;
    d.set_item(
        "ed_chords",
        label
            .ed_chords
            .chords
            .iter()
            .map(|c| c.coords())
            .collect::<Vec<_>>(),
    )?;
    d.set_item(
        "es_chords",
        label
            .es_chords
            .chords
            .iter()
            .map(|c| c.coords())
            .collect::<Vec<_>>(),
    )?;
    d.set_item("ed_frame", label.ed_frame)?;
    d.set_item("es_frame", label.es_frame)?;
    let shape = clip.frames.shape().to_vec();
    Ok((clip.frames.into_data(), shape, d))
}

/// Runs the finite-difference suite; returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (seed=0, configs=100))]
fn run_gradcheck(seed: u64, configs: usize) -> PyResult<(bool, String)> {
    let opts = GradcheckOptions {
        seed,
        geometry_configs: configs,
        model: ModelConfig {
            seed,
            ..ModelConfig::tiny()
        },
        ..GradcheckOptions::default()
    };
    let r = gradcheck::run(&opts).map_err(py_err)?;
    Ok((r.passed(), r.render()))
}

/// Runs the command-line tool in process; returns `(code, stdout, stderr)`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("ejection".to_string()).chain(args);
    let code = cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

fn prediction_dict<'py>(py: Python<'py>, p: &Prediction) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ef", p.ef)?;
    d.set_item("esv", p.esv)?;
    d.set_item("edv", p.edv)?;
    if let Some(c) = &p.cbd {
        d.set_item(
            "ed_chords",
            c.ed.chords.iter().map(|c| c.coords()).collect::<Vec<_>>(),
        )?;
        d.set_item(
            "es_chords",
            c.es.chords.iter().map(|c| c.coords()).collect::<Vec<_>>(),
        )?;
    }
    Ok(d)
}

#[pyclass(name = "Model", module = "ejection")]
struct PyModel {
    inner: ejection_core::model::Model,
}

#[pymethods]
impl PyModel {
    /// `preset` is "tiny", "small" or "full".
    #[new]
    #[pyo3(signature = (preset="tiny", seed=0, disable_e2cbd=false, disable_e2fa=false))]
    fn new(preset: &str, seed: u64, disable_e2cbd: bool, disable_e2fa: bool) -> PyResult<Self> {
        let base = match preset {
            "tiny" => ModelConfig::tiny(),
            "small" => ModelConfig::small(),
            "full" => ModelConfig::default(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        let cfg = ModelConfig {
            seed,
            disable_e2cbd,
            disable_e2fa,
            ..base
        };
        let inner = ejection_core::model::Model::new(cfg).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, epoch=0))]
    fn save(&self, path: PathBuf, epoch: usize) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, epoch).map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[pyo3(signature = (batch=1))]
    fn input_shape(&self, batch: usize) -> Vec<usize> {
        self.inner.input_shape(batch).to_vec()
    }

    /// Forward pass on a flat `[B, C, F, H, W]` clip batch.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        data: Vec<f64>,
        batch: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let clip = Tensor::new(self.inner.input_shape(batch).to_vec(), data).map_err(py_err)?;
        let preds = self.inner.forward(&clip).map_err(py_err)?;
        preds.iter().map(|p| prediction_dict(py, p)).collect()
    }
}

#[pymodule]
fn ejection(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simpson_geometry, m)?)?;
    m.add_function(wrap_pyfunction!(ef_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(geometric_losses, m)?)?;
    m.add_function(wrap_pyfunction!(sample_frames, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_clip, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
