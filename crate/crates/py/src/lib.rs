//! Python bindings: scenes, the ray oracle, map extraction, the 3GPP
//! baseline, trained checkpoints and radio maps.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use plsurrogate_core::baselines::{gpp_umi_pathloss, GppConfig};
use plsurrogate_core::extract::align_and_extract;
use plsurrogate_core::model::{ModelError, ModelInput, SurrogateModel};
use plsurrogate_core::oracle::{generate_scene, GenParams};
use plsurrogate_core::scene::{load_scene, save_scene, SceneError};
use plsurrogate_core::train_eval::{
    render_radiomap, GppPredictor, LinkPredictor, OraclePredictor, RenderParams, SurrogatePredictor,
};
use plsurrogate_core::{fspl_db as core_fspl, selftest, LinkOutcome, Oracle, OracleConfig, Point3};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scene_err(e: SceneError) -> PyErr {
    match e {
        SceneError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn point(p: (f64, f64, f64)) -> Point3 {
    Point3::new(p.0, p.1, p.2)
}

/// A rasterized city scene at 1 m per pixel.
#[pyclass(name = "Scene", module = "plsurrogate")]
pub struct PyScene {
    inner: plsurrogate_core::Scene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (id, width, height, seed, building_density = 0.7, foliage_density = 1.5))]
    fn generate(
        id: &str,
        width: usize,
        height: usize,
        seed: u64,
        building_density: f64,
        foliage_density: f64,
    ) -> PyResult<Self> {
        let params = GenParams::with_densities(building_density, foliage_density);
        let inner = generate_scene(id, width, height, &params, seed).map_err(value_err)?;
        Ok(PyScene { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (id, width, height))]
    fn empty(id: &str, width: usize, height: usize) -> Self {
        PyScene {
            inner: plsurrogate_core::Scene::empty(id, width, height),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyScene {
            inner: load_scene(path).map_err(scene_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_scene(&self.inner, path).map_err(scene_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width_px
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height_px
    }

    /// Building mask, row-major with row 0 at minimum y.
    fn building_mask(&self) -> Vec<u8> {
        self.inner.building_mask.clone()
    }

    fn foliage_heights(&self) -> Vec<f64> {
        self.inner.foliage_height_m.clone()
    }

    /// Oracle path loss in dB and LOS flag, or `None` on outage.
    fn path_loss(&self, tx: (f64, f64, f64), rx: (f64, f64, f64)) -> PyResult<Option<(f64, bool)>> {
        let oracle = Oracle::new(&self.inner, OracleConfig::default()).map_err(value_err)?;
        match oracle
            .path_loss(&point(tx), &point(rx))
            .map_err(value_err)?
        {
            LinkOutcome::Connected {
                pathloss_db, los, ..
            } => Ok(Some((pathloss_db, los))),
            LinkOutcome::Outage => Ok(None),
        }
    }

    /// Rotated, aligned extract: `(rows, cols, values)` with values laid out
    /// `[row, col, channel]` over the mask and normalized foliage channels.
    #[pyo3(signature = (tx, rx, patch_size = 9, pad_patches = 1))]
    fn extract(
        &self,
        tx: (f64, f64, f64),
        rx: (f64, f64, f64),
        patch_size: usize,
        pad_patches: usize,
    ) -> PyResult<(usize, usize, Vec<f32>)> {
        let e = align_and_extract(&self.inner, &point(tx), &point(rx), patch_size, pad_patches)
            .map_err(value_err)?;
        Ok((e.rows_px(), e.cols_px(), e.pixels))
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(id={:?}, {}x{})",
            self.inner.id, self.inner.width_px, self.inner.height_px
        )
    }
}

/// A trained checkpoint.
#[pyclass(name = "Surrogate", module = "plsurrogate")]
pub struct PySurrogate {
    inner: SurrogateModel<f32>,
}

#[pymethods]
impl PySurrogate {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PySurrogate {
            inner: SurrogateModel::load(path).map_err(model_err)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.config.parameter_count()
    }

    /// Predicted path loss in dB for each receiver.
    fn predict(
        &self,
        scene: &PyScene,
        tx: (f64, f64, f64),
        rxs: Vec<(f64, f64, f64)>,
    ) -> PyResult<Vec<f64>> {
        let p = self.inner.config.patch_size;
        let inputs = rxs
            .iter()
            .map(|&rx| {
                align_and_extract(
                    &scene.inner,
                    &point(tx),
                    &point(rx),
                    p,
                    self.inner.pad_patches,
                )
                .map(|e| ModelInput::from_extract(&e))
                .map_err(value_err)
            })
            .collect::<PyResult<Vec<_>>>()?;
        self.inner.predict(&inputs, 64).map_err(model_err)
    }
}

#[pyfunction]
#[pyo3(signature = (d_m, f_hz = 28e9))]
fn fspl_db(d_m: f64, f_hz: f64) -> PyResult<f64> {
    core_fspl(d_m, f_hz).map_err(value_err)
}

/// 3GPP UMi street-canyon path loss in dB.
#[pyfunction]
#[pyo3(signature = (d2d_m, d3d_m, los, fc_ghz = 28.0, h_bs_m = 9.0, h_ut_m = 1.5))]
fn gpp_umi(
    d2d_m: f64,
    d3d_m: f64,
    los: bool,
    fc_ghz: f64,
    h_bs_m: f64,
    h_ut_m: f64,
) -> PyResult<f64> {
    let cfg = GppConfig {
        fc_ghz,
        h_bs_m,
        h_ut_m,
        ..GppConfig::default()
    };
    gpp_umi_pathloss(d2d_m, d3d_m, &cfg, los).map_err(value_err)
}

/// Dense radio map around `tx` as a row-major list (row 0 at maximum y);
/// building pixels hold the masked sentinel. `predictor` is `"oracle"`,
/// `"3gpp"`, or a loaded `Surrogate`.
#[pyfunction]
#[pyo3(signature = (scene, tx, extent_m, predictor, resolution_m = 1.0, rx_height_m = 1.5))]
fn render(
    scene: &PyScene,
    tx: (f64, f64, f64),
    extent_m: f64,
    predictor: &Bound<'_, PyAny>,
    resolution_m: f64,
    rx_height_m: f64,
) -> PyResult<(usize, Vec<f64>)> {
    let params = RenderParams {
        tx: point(tx),
        resolution_m,
        extent_m,
        rx_height_m,
    };
    let run = |p: &dyn LinkPredictor| {
        render_radiomap(&scene.inner, p, params)
            .map(|m| (m.size, m.values_db))
            .map_err(value_err)
    };
    if let Ok(s) = predictor.cast::<PySurrogate>() {
        let s = s.borrow();
        return run(&SurrogatePredictor {
            model: &s.inner,
            pad_patches: s.inner.pad_patches,
        });
    }
    let name: String = predictor.extract()?;
    match name.as_str() {
        "oracle" => run(&OraclePredictor {
            cfg: OracleConfig {
                tx_height_m: tx.2,
                rx_height_m,
                ..OracleConfig::default()
            },
        }),
        "3gpp" => run(&GppPredictor {
            cfg: GppConfig {
                h_bs_m: tx.2,
                h_ut_m: rx_height_m,
                ..GppConfig::default()
            },
        }),
        other => Err(value_err(format!("unknown predictor `{other}`"))),
    }
}

/// Built-in checks as `(suite, check, passed, detail)` tuples.
#[pyfunction]
fn run_selftest() -> Vec<(String, String, bool, String)> {
    selftest::run_all()
        .into_iter()
        .flat_map(|s| {
            s.checks
                .into_iter()
                .map(move |c| (s.name.to_string(), c.name, c.passed, c.detail))
        })
        .collect()
}

#[pymodule]
fn plsurrogate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PySurrogate>()?;
    m.add_function(wrap_pyfunction!(fspl_db, m)?)?;
    m.add_function(wrap_pyfunction!(gpp_umi, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
