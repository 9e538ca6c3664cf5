//! Python bindings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use msdesign_core::aberration::{compute_bki_matrix, report, ReportLine};
use msdesign_core::cli::{self, Config, Outcome};
use msdesign_core::gf2::{BitMatrix as CoreMatrix, BitVector};
use msdesign_core::structure::BlockStructure as CoreStructure;
use msdesign_core::{Error, Rational};

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn fraction<'py>(py: Python<'py>, v: &Rational) -> PyResult<Bound<'py, PyAny>> {
    let cls = py.import("fractions")?.getattr("Fraction")?;
    cls.call1((
        v.numer().to_string().parse::<i64>()?,
        v.denom().to_string().parse::<i64>()?,
    ))
}

fn lines_to_py<'py>(py: Python<'py>, lines: &[ReportLine]) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for l in lines {
        let values = l
            .values
            .iter()
            .map(|v| fraction(py, v))
            .collect::<PyResult<Vec<_>>>()?;
        d.set_item(&l.label, PyList::new(py, values)?)?;
    }
    Ok(d)
}

/// A matrix over GF(2).
#[pyclass(module = "msdesign")]
#[derive(Clone)]
struct BitMatrix {
    inner: CoreMatrix,
}

#[pymethods]
impl BitMatrix {
    /// Builds a matrix from rows written as `0`/`1` strings.
    #[new]
    fn new(rows: Vec<String>) -> PyResult<Self> {
        let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
        Ok(BitMatrix {
            inner: CoreMatrix::parse_rows(&rows).map_err(err)?,
        })
    }

    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn invert(&self) -> PyResult<BitMatrix> {
        Ok(BitMatrix {
            inner: self.inner.invert().map_err(err)?,
        })
    }

    fn __matmul__(&self, other: &BitMatrix) -> PyResult<BitMatrix> {
        Ok(BitMatrix {
            inner: self.inner.mul(&other.inner).map_err(err)?,
        })
    }

    fn rows(&self) -> Vec<String> {
        self.inner.rows().iter().map(BitVector::to_string).collect()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.nrows(), self.inner.ncols())
    }

    fn __eq__(&self, other: &BitMatrix) -> bool {
        self.inner.rows() == other.inner.rows()
    }

    fn __repr__(&self) -> String {
        format!("BitMatrix({:?})", self.rows())
    }

    fn __str__(&self) -> String {
        self.inner.render()
    }
}

/// A block structure on the experimental units.
#[pyclass(module = "msdesign")]
#[derive(Clone)]
struct BlockStructure {
    inner: CoreStructure,
}

#[pymethods]
impl BlockStructure {
    /// Parses an expression such as `"8/4"` or `"2/(4x4)"`.
    #[new]
    #[pyo3(signature = (expr, two_level = true))]
    fn new(expr: &str, two_level: bool) -> PyResult<Self> {
        let inner = if two_level {
            CoreStructure::parse(expr)
        } else {
            CoreStructure::parse_any(expr)
        };
        Ok(BlockStructure {
            inner: inner.map_err(err)?,
        })
    }

    #[getter]
    fn n_units(&self) -> usize {
        self.inner.n_units()
    }

    #[getter]
    fn factors(&self) -> Vec<String> {
        self.inner.names()
    }

    /// Wordlength patterns of a `±1` (or `0/1`) design, keyed by `G1`, `G2`, ...
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        design: Vec<Vec<i64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let text: String = design
            .iter()
            .map(|r| r.iter().map(i64::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        let table = msdesign_core::io::parse_design(&text).map_err(err)?;
        if table.rows.len() != self.inner.n_units() {
            return Err(PyValueError::new_err(format!(
                "design has {} runs, structure has {} units",
                table.rows.len(),
                self.inner.n_units()
            )));
        }
        let strata = self.inner.strata().map_err(err)?;
        let t = compute_bki_matrix(&table.rows, &strata).map_err(err)?;
        lines_to_py(py, &report(&t, &self.inner).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!("BlockStructure(factors={:?})", self.inner.names())
    }
}

fn config_from(py: Python<'_>, options: Option<&Bound<'_, PyDict>>) -> PyResult<Config> {
    let Some(options) = options else {
        return Ok(Config::default());
    };
    let keyed = PyDict::new(py);
    for (k, v) in options.iter() {
        let k: String = k.extract()?;
        keyed.set_item(k.replace('_', "-"), v)?;
    }
    let json: String = py
        .import("json")?
        .call_method1("dumps", (keyed,))?
        .extract()?;
    let cfg: Config =
        serde_json::from_str(&json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.merged().map_err(err)
}

fn outcome_to_py<'py>(py: Python<'py>, o: &Outcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("names", o.design.names.clone())?;
    d.set_item("design", o.design.rows.clone())?;
    d.set_item("report", lines_to_py(py, &o.report)?)?;
    let generators = o
        .key
        .as_ref()
        .map(|g| g.generator_words())
        .unwrap_or_default();
    d.set_item("generators", generators)?;
    d.set_item("co_optimal", o.co_optimal)?;
    d.set_item("evaluated", o.evaluated)?;
    d.set_item("iterations", o.iterations_run)?;
    Ok(d)
}

/// Runs the swarm search. Keyword arguments use the configuration-file
/// keys, e.g. `search(structure="8/4", n=13, S=50, T=50, seed=1)`.
#[pyfunction]
#[pyo3(signature = (**options))]
fn search<'py>(
    py: Python<'py>,
    options: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from(py, options)?;
    let o = py.allow_threads(|| cli::search(&cfg)).map_err(err)?;
    outcome_to_py(py, &o)
}

/// Exhaustive optimum, for small problems.
#[pyfunction]
#[pyo3(signature = (**options))]
fn oracle<'py>(
    py: Python<'py>,
    options: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from(py, options)?;
    let o = py.allow_threads(|| cli::oracle(&cfg)).map_err(err)?;
    outcome_to_py(py, &o)
}

#[pymodule]
fn msdesign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<BitMatrix>()?;
    m.add_class::<BlockStructure>()?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    Ok(())
}
