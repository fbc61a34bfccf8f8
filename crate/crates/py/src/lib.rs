//! Python bindings: ground-truth files, builds, checks, prediction scoring,
//! group metrics and the capture ledger.

use std::path::PathBuf;

use gtforge_core::binfmt::{load_binary, Isa};
use gtforge_core::capture::SnapshotLedger;
use gtforge_core::config::ProjectConfig;
use gtforge_core::evaluator::{
    self, BinaryScore, Claim, ClaimScope, GroupKey, PredictionSet, RegionMode, ScoreOptions,
};
use gtforge_core::groundtruth::{self, GroundTruthDoc};
use gtforge_core::pipeline;
use gtforge_core::prefixcanon;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(gtforge, GtforgeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    GtforgeError::new_err(e.to_string())
}

fn parse_isa(s: &str) -> PyResult<Isa> {
    s.parse()
        .map_err(|e: <Isa as std::str::FromStr>::Err| PyValueError::new_err(e.to_string()))
}

fn parse_opts(regions: &str, scope: &str) -> PyResult<ScoreOptions> {
    Ok(ScoreOptions {
        regions: regions.parse::<RegionMode>().map_err(PyValueError::new_err)?,
        scope: scope.parse::<ClaimScope>().map_err(PyValueError::new_err)?,
    })
}

#[pyclass(frozen, skip_from_py_object, module = "gtforge")]
#[derive(Clone)]
struct Instruction {
    #[pyo3(get)]
    abs_offset: u64,
    #[pyo3(get)]
    size: u64,
    bytes: Vec<u8>,
    #[pyo3(get)]
    optional: bool,
    #[pyo3(get)]
    cf_class: String,
}

#[pymethods]
impl Instruction {
    #[getter]
    fn bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.bytes)
    }

    fn __repr__(&self) -> String {
        format!(
            "Instruction({:#x}, {}{})",
            self.abs_offset,
            hex_of(&self.bytes),
            if self.optional { ", optional" } else { "" }
        )
    }
}

fn hex_of(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[pyclass(frozen, skip_from_py_object, module = "gtforge")]
#[derive(Clone)]
struct Function {
    #[pyo3(get)]
    name: String,
    #[pyo3(get)]
    abs_offset: u64,
    #[pyo3(get)]
    instructions: Vec<Instruction>,
    /// `(abs_offset, size)` pairs.
    #[pyo3(get)]
    regions: Vec<(u64, u64)>,
}

#[pymethods]
impl Function {
    fn __repr__(&self) -> String {
        format!(
            "Function({}, {:#x}, {} instructions)",
            self.name,
            self.abs_offset,
            self.instructions.len()
        )
    }
}

/// A ground-truth document.
#[pyclass(frozen, module = "gtforge")]
struct GroundTruth {
    doc: GroundTruthDoc,
}

#[pymethods]
impl GroundTruth {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(GroundTruth {
            doc: pipeline::read_gt(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn loads(text: &str) -> PyResult<Self> {
        Ok(GroundTruth {
            doc: groundtruth::deserialize(text).map_err(err)?,
        })
    }

    fn dumps(&self) -> String {
        groundtruth::serialize(&self.doc)
    }

    #[getter]
    fn isa(&self) -> String {
        self.doc.isa.to_string()
    }

    #[getter]
    fn binary_hash(&self) -> String {
        self.doc.binary_hash.to_hex()
    }

    #[getter]
    fn compiler(&self) -> String {
        self.doc.provenance.compiler.clone()
    }

    #[getter]
    fn optflag(&self) -> String {
        self.doc.provenance.optflag.clone()
    }

    #[getter]
    fn functions(&self) -> Vec<Function> {
        self.doc
            .functions
            .iter()
            .map(|f| Function {
                name: f.name.clone(),
                abs_offset: f.abs_offset,
                instructions: f
                    .instructions
                    .iter()
                    .map(|i| Instruction {
                        abs_offset: i.abs_offset,
                        size: i.size,
                        bytes: i.bytes.clone(),
                        optional: i.optional,
                        cf_class: i.cf_class.to_string(),
                    })
                    .collect(),
                regions: f.regions.iter().map(|r| (r.abs_offset, r.size)).collect(),
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.doc.instructions().count()
    }

    fn __repr__(&self) -> String {
        format!(
            "GroundTruth({}, {} functions, {} instructions)",
            self.doc.isa,
            self.doc.functions.len(),
            self.doc.instructions().count()
        )
    }
}

/// One tool's claims on one binary.
#[pyclass(frozen, module = "gtforge")]
struct Predictions {
    set: PredictionSet,
}

#[pymethods]
impl Predictions {
    /// Parses tool output; `format` is `generic` or `objdump`.
    #[staticmethod]
    #[pyo3(signature = (text, format = "generic"))]
    fn parse(text: &str, format: &str) -> PyResult<Self> {
        Ok(Predictions {
            set: evaluator::normalize_output(text, format).map_err(err)?,
        })
    }

    /// Claims are `(offset, size, bytes)` tuples; size and bytes may be None.
    #[staticmethod]
    fn from_claims(tool: &str, claims: Vec<(u64, Option<u64>, Option<Vec<u8>>)>) -> PyResult<Self> {
        let claims = claims
            .into_iter()
            .map(|(offset, size, bytes)| {
                if size == Some(0) || bytes.as_ref().is_some_and(|b| b.is_empty()) {
                    return Err(PyValueError::new_err(format!("empty claim at {offset:#x}")));
                }
                Ok(Claim {
                    offset,
                    size: size.or(bytes.as_ref().map(|b| b.len() as u64)),
                    bytes,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Predictions {
            set: PredictionSet::from_claims(tool, None, claims),
        })
    }

    #[getter]
    fn tool(&self) -> String {
        self.set.tool.clone()
    }

    fn __len__(&self) -> usize {
        self.set.claims.len()
    }
}

/// Counts and ratios of one tool on one binary.
#[pyclass(frozen, from_py_object, module = "gtforge")]
#[derive(Clone)]
struct Score {
    inner: BinaryScore,
}

#[pymethods]
impl Score {
    #[new]
    fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Score {
            inner: BinaryScore::from_counts(tp, fp, fn_),
        }
    }

    #[getter]
    fn tp(&self) -> u64 {
        self.inner.tp
    }

    #[getter]
    fn fp(&self) -> u64 {
        self.inner.fp
    }

    #[getter(r#fn)]
    fn fn_(&self) -> u64 {
        self.inner.fn_
    }

    #[getter]
    fn precision(&self) -> f64 {
        self.inner.precision
    }

    #[getter]
    fn recall(&self) -> f64 {
        self.inner.recall
    }

    #[getter]
    fn f1(&self) -> f64 {
        self.inner.f1
    }

    #[getter]
    fn excluded_optional(&self) -> u64 {
        self.inner.excluded_optional
    }

    #[getter]
    fn region_matches(&self) -> u64 {
        self.inner.region_matches
    }

    #[getter]
    fn region_misses(&self) -> u64 {
        self.inner.region_misses
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!("Score(tp={}, fp={}, fn={}, f1={:.5})", s.tp, s.fp, s.fn_, s.f1)
    }
}

#[pyfunction]
#[pyo3(signature = (gt, predictions, regions = "count", scope = "functions"))]
fn score(gt: &GroundTruth, predictions: &Predictions, regions: &str, scope: &str) -> PyResult<Score> {
    Ok(Score {
        inner: evaluator::score(&gt.doc, &predictions.set, parse_opts(regions, scope)?).map_err(err)?,
    })
}

/// False positives whose bytes in `binary` decode as a nop.
#[pyfunction]
#[pyo3(signature = (gt, predictions, binary, regions = "count", scope = "functions"))]
fn count_nop_false_positives(
    gt: &GroundTruth,
    predictions: &Predictions,
    binary: PathBuf,
    regions: &str,
    scope: &str,
) -> PyResult<u64> {
    let img = load_binary(&binary).map_err(err)?;
    evaluator::count_nop_false_positives(&gt.doc, &predictions.set, &img, parse_opts(regions, scope)?).map_err(err)
}

/// Weighted recall, precision and F1 of a group of per-binary scores.
#[pyfunction]
fn summarize(py: Python<'_>, scores: Vec<Score>) -> PyResult<Py<PyAny>> {
    let scores: Vec<BinaryScore> = scores.into_iter().map(|s| s.inner).collect();
    let w = evaluator::group_weights(&scores).map_err(err)?;
    let s = evaluator::summarize_group(GroupKey::default(), &scores, &w).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("n", s.n)?;
    d.set_item("w_recall", s.w_recall)?;
    d.set_item("w_precision", s.w_precision)?;
    d.set_item("w_f1", s.w_f1)?;
    d.set_item("min_nonzero_f1", s.min_nonzero_f1)?;
    d.set_item("max_f1", s.max_f1)?;
    d.set_item("gt_insn_weighted_mean_f1", s.gt_insn_weighted_mean_f1)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn harmonic_mean(values: Vec<f64>) -> f64 {
    evaluator::harmonic_mean(&values)
}

/// Whether two encodings differ only in legacy-prefix order.
#[pyfunction]
#[pyo3(signature = (a, b, isa = "x64"))]
fn equivalent(a: &[u8], b: &[u8], isa: &str) -> PyResult<bool> {
    Ok(prefixcanon::equivalent(a, b, parse_isa(isa)?))
}

/// Outcome of a ground-truth build.
#[pyclass(frozen, module = "gtforge")]
struct Build {
    #[pyo3(get)]
    patches: usize,
    #[pyo3(get)]
    check_ok: bool,
    #[pyo3(get)]
    check_report: String,
    #[pyo3(get)]
    findings: Vec<String>,
    #[pyo3(get)]
    output: Option<PathBuf>,
    gt: GroundTruthDoc,
}

#[pymethods]
impl Build {
    #[getter]
    fn gt(&self) -> GroundTruth {
        GroundTruth { doc: self.gt.clone() }
    }
}

/// Builds ground truth from a project config. With `write`, the result goes
/// to the config's output path (or `out`) along with its work directory.
#[pyfunction]
#[pyo3(signature = (config, write = true, out = None))]
fn build(py: Python<'_>, config: PathBuf, write: bool, out: Option<PathBuf>) -> PyResult<Build> {
    let cfg = ProjectConfig::load(&config).map_err(err)?;
    let r = py.detach(|| pipeline::run_build(&cfg)).map_err(err)?;
    let output = if write {
        let path = out.unwrap_or_else(|| cfg.output.clone());
        pipeline::write_build(&r, &path).map_err(err)?;
        Some(path)
    } else {
        None
    };
    Ok(Build {
        patches: r.patches,
        check_ok: r.check.ok,
        check_report: r.check.to_string(),
        findings: r.findings.iter().map(ToString::to_string).collect(),
        output,
        gt: r.gt,
    })
}

/// Reassembles a written build's sources and checks them against its
/// ground-truth file. Returns `(ok, report)`.
#[pyfunction]
fn check(py: Python<'_>, gt_path: PathBuf) -> PyResult<(bool, String)> {
    let gt = pipeline::read_gt(&gt_path).map_err(err)?;
    let driver = pipeline::assembler_for(None, gt.isa).map_err(err)?;
    let report = py.detach(|| pipeline::run_check(&gt_path, &driver)).map_err(err)?;
    Ok((report.ok, report.to_string()))
}

/// The assembly snapshot ledger written by the compiler wrapper.
#[pyclass(frozen, module = "gtforge")]
struct Ledger {
    inner: SnapshotLedger,
}

#[pymethods]
impl Ledger {
    #[new]
    fn new(root: PathBuf) -> PyResult<Self> {
        Ok(Ledger {
            inner: SnapshotLedger::open(root).map_err(err)?,
        })
    }

    /// Records `(relative path, contents)` pairs; returns how many were new.
    fn record(&self, files: Vec<(String, Vec<u8>)>) -> PyResult<usize> {
        Ok(self.inner.record(&files).map_err(err)?.len())
    }

    /// Every recorded version as `(relative path, contents)`, oldest first.
    fn extract<'py>(&self, py: Python<'py>) -> PyResult<Vec<(String, Bound<'py, PyBytes>)>> {
        let versions = self.inner.extract_chronological().map_err(err)?;
        Ok(versions.into_iter().map(|(p, b)| (p, PyBytes::new(py, &b))).collect())
    }
}

#[pymodule]
fn gtforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GtforgeError", m.py().get_type::<GtforgeError>())?;
    m.add_class::<Instruction>()?;
    m.add_class::<Function>()?;
    m.add_class::<GroundTruth>()?;
    m.add_class::<Predictions>()?;
    m.add_class::<Score>()?;
    m.add_class::<Build>()?;
    m.add_class::<Ledger>()?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(count_nop_false_positives, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(equivalent, m)?)?;
    m.add_function(wrap_pyfunction!(build, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
