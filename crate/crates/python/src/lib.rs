//! Python bindings: permutations, weights, rebasin, posterior summaries and
//! predictive metrics. Matrices cross the boundary as lists of rows.

use bnn_core::checkpoint;
use bnn_core::evaluation::{self, PredictiveTable};
use bnn_core::model::{self, Arch};
use bnn_core::numerics::{Matrix, Rng};
use bnn_core::posterior::{self, PruneOptions};
use bnn_core::rebasin::{self, MatchMethod};
use bnn_core::{permutation, Error, SampleSet};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Numerical(_) | Error::Training { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn method(name: &str) -> PyResult<MatchMethod> {
    name.parse().map_err(py_err)
}

#[pyclass(name = "Permutation", module = "bnn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPermutation(permutation::Permutation);

#[pymethods]
impl PyPermutation {
    /// `mapping[i]` is the source index feeding slot `i`.
    #[new]
    fn new(mapping: Vec<usize>) -> PyResult<Self> {
        permutation::Permutation::new(mapping).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self(permutation::Permutation::identity(n))
    }

    /// Uniformly random permutation of `h` items with exactly `k` transpositions.
    #[staticmethod]
    fn random_with_not(h: usize, k: usize, seed: u64) -> PyResult<Self> {
        permutation::random_with_not(h, k, &mut Rng::new(seed)).map(Self).map_err(py_err)
    }

    fn cycles(&self) -> Vec<Vec<usize>> {
        self.0.cycles()
    }

    fn not_count(&self) -> usize {
        self.0.not_count()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn compose(&self, other: &PyPermutation) -> PyResult<Self> {
        self.0.compose(&other.0).map(Self).map_err(py_err)
    }

    fn to_list(&self) -> Vec<usize> {
        self.0.as_slice().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &PyPermutation) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Permutation({})", self.0)
    }
}

#[pyclass(name = "WeightSet", module = "bnn", frozen, from_py_object)]
#[derive(Clone)]
struct PyWeightSet(model::WeightSet);

#[pymethods]
impl PyWeightSet {
    /// Kaiming-initialized network with zero biases.
    #[staticmethod]
    fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        Self(model::WeightSet::init(Arch::new(input_dim, hidden, classes), &mut Rng::new(seed)))
    }

    #[staticmethod]
    fn from_flat(input_dim: usize, hidden: usize, classes: usize, flat: Vec<f64>) -> PyResult<Self> {
        model::WeightSet::from_flat(Arch::new(input_dim, hidden, classes), &flat).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let c = checkpoint::read_checkpoint(path).map_err(py_err)?;
        checkpoint::weights_from_checkpoint(&c).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let c = checkpoint::weights_to_checkpoint(&self.0, serde_json::Value::Null).map_err(py_err)?;
        checkpoint::write_checkpoint(path, &c).map_err(py_err)
    }

    /// `(input_dim, hidden, classes)`
    fn arch(&self) -> (usize, usize, usize) {
        let a = self.0.arch();
        (a.input_dim, a.hidden_size, a.num_classes)
    }

    fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    fn permute(&self, p: &PyPermutation) -> PyResult<Self> {
        permutation::apply_to_weights(&p.0, &self.0).map(Self).map_err(py_err)
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_matrix(&model::logits(&self.0, &to_matrix(x)?).map_err(py_err)?))
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_matrix(&model::predict_proba(&self.0, &to_matrix(x)?).map_err(py_err)?))
    }

    fn __eq__(&self, other: &PyWeightSet) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let (d, h, c) = self.arch();
        format!("WeightSet(input_dim={d}, hidden={h}, classes={c})")
    }
}

#[pyclass(name = "DiagGaussian", module = "bnn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDiagGaussian(posterior::DiagGaussian);

fn sample_set(samples: Vec<PyWeightSet>) -> SampleSet {
    SampleSet::new(samples.into_iter().map(|w| w.0).collect(), "python")
}

#[pymethods]
impl PyDiagGaussian {
    #[staticmethod]
    fn fit_direct(samples: Vec<PyWeightSet>) -> PyResult<Self> {
        posterior::fit_direct(&sample_set(samples)).map(Self).map_err(py_err)
    }

    /// Fit after weight-matching every sample to the first one.
    #[staticmethod]
    fn fit_rebasin(samples: Vec<PyWeightSet>) -> PyResult<Self> {
        posterior::fit_rebasin(&sample_set(samples), MatchMethod::Weight, None)
            .map(Self)
            .map_err(py_err)
    }

    /// Reads a Gaussian or VI checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        checkpoint::load_gaussian(path).map(Self).map_err(py_err)
    }

    #[getter]
    fn mu(&self) -> Vec<f64> {
        self.0.mu.clone()
    }

    #[getter]
    fn sigma2(&self) -> Vec<f64> {
        self.0.sigma2.clone()
    }

    #[getter]
    fn tag(&self) -> &'static str {
        self.0.tag.as_str()
    }

    fn mean_weights(&self) -> PyWeightSet {
        PyWeightSet(self.0.mean_weights())
    }

    fn draw(&self, k: usize, seed: u64) -> PyResult<Vec<PyWeightSet>> {
        let s = posterior::draw(&self.0, k, seed).map_err(py_err)?;
        Ok(s.samples.into_iter().map(PyWeightSet).collect())
    }

    #[pyo3(signature = (retain_fraction, exclude_biases = false))]
    fn prune(&self, retain_fraction: f64, exclude_biases: bool) -> PyResult<PyWeightSet> {
        posterior::prune(&self.0, retain_fraction, PruneOptions { exclude_biases })
            .map(PyWeightSet)
            .map_err(py_err)
    }

    /// `(edges, counts)` of the σ histogram.
    fn sigma_histogram(&self, bins: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let h = evaluation::sigma_histogram(&self.0, bins).map_err(py_err)?;
        Ok((h.edges, h.counts))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Assignment maximizing the summed cost; returns the permutation.
#[pyfunction]
fn solve_lap_max(cost: Vec<Vec<f64>>) -> PyResult<PyPermutation> {
    rebasin::solve_lap_max(&to_matrix(cost)?).map(PyPermutation).map_err(py_err)
}

/// Aligns `candidate` to `reference`; returns `(permutation, not, l2_before, l2_after)`.
#[pyfunction]
#[pyo3(signature = (reference, candidate, method = "weight", probe = None))]
fn match_weights(
    reference: &PyWeightSet,
    candidate: &PyWeightSet,
    method: &str,
    probe: Option<Vec<Vec<f64>>>,
) -> PyResult<(PyPermutation, usize, f64, f64)> {
    let probe = probe
        .map(|rows| {
            let x = to_matrix(rows)?;
            let n = x.rows();
            bnn_core::Dataset::new(x, vec![0; n], 1, "probe").map_err(py_err)
        })
        .transpose()?;
    let r = rebasin::match_weights(&reference.0, &candidate.0, self::method(method)?, probe.as_ref())
        .map_err(py_err)?;
    Ok((PyPermutation(r.permutation), r.not, r.l2_before, r.l2_after))
}

fn table(rows: Vec<Vec<f64>>) -> PyResult<PredictiveTable> {
    PredictiveTable::new(to_matrix(rows)?, "python", 1).map_err(py_err)
}

#[pyfunction]
fn agreement(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::agreement(&table(p)?, &table(q)?).map_err(py_err)
}

#[pyfunction]
fn total_variation(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::total_variation(&table(p)?, &table(q)?).map_err(py_err)
}

/// Every sample of a samples checkpoint.
#[pyfunction]
fn load_samples(path: &str) -> PyResult<Vec<PyWeightSet>> {
    let c = checkpoint::read_checkpoint(path).map_err(py_err)?;
    let s = checkpoint::samples_from_checkpoint(&c).map_err(py_err)?;
    Ok(s.samples.into_iter().map(PyWeightSet).collect())
}

/// Runs the command-line front end in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    bnn_core::cli::run(std::iter::once("bnn".to_string()).chain(args))
}

#[pymodule]
fn bnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPermutation>()?;
    m.add_class::<PyWeightSet>()?;
    m.add_class::<PyDiagGaussian>()?;
    m.add_function(wrap_pyfunction!(solve_lap_max, m)?)?;
    m.add_function(wrap_pyfunction!(match_weights, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(load_samples, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
