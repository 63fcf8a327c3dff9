//! Python bindings for `bricks`.
//!
//! ```python
//! import bricks
//! hgnc = bricks.assets("hgnc")
//! hgnc.hgnc_complete_set_parquet   # absolute path of the installed file
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyAttributeError, PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::bricks::config::{self, Config, ConfigFile, Overrides};
use ::bricks::install::{self, InstallError, InstallReport, Installer};
use ::bricks::model::{self, CommitSpec, DEFAULT_ORG};
use ::bricks::pipeline::{self, RunOptions};
use ::bricks::registry::{RegistryClient, RegistryEndpoint, RegistryError};
use ::bricks::store;

create_exception!(bricks, BricksError, PyException);
create_exception!(bricks, AuthError, BricksError);
create_exception!(bricks, NotInstalledError, BricksError);
create_exception!(bricks, NotConfiguredError, BricksError);
create_exception!(bricks, IntegrityError, BricksError);

fn registry_err(e: RegistryError) -> PyErr {
    match e {
        RegistryError::Auth => AuthError::new_err(e.to_string()),
        RegistryError::Integrity(_) => IntegrityError::new_err(e.to_string()),
        e => BricksError::new_err(e.to_string()),
    }
}

fn install_err(e: InstallError) -> PyErr {
    match e {
        InstallError::Registry(e) => registry_err(e),
        InstallError::NotInstalled(_) => NotInstalledError::new_err(e.to_string()),
        InstallError::Model(e) => PyValueError::new_err(e.to_string()),
        e => BricksError::new_err(e.to_string()),
    }
}

fn err(e: impl std::fmt::Display) -> PyErr {
    BricksError::new_err(e.to_string())
}

#[pyfunction]
fn hash_bytes(data: &[u8]) -> String {
    store::hash_bytes(data).to_string()
}

/// Digest and size of a file or directory, or None when it does not exist.
#[pyfunction]
fn hash_path(path: PathBuf) -> PyResult<Option<(String, u64)>> {
    Ok(store::hash_path(&path).map_err(err)?.map(|(h, size)| (h.to_string(), size)))
}

#[pyfunction]
fn hash_tree(path: PathBuf) -> PyResult<String> {
    Ok(store::hash_tree(&path).map_err(err)?.1.to_string())
}

#[pyclass(module = "bricks", frozen, eq, hash, from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
struct BrickRef {
    inner: model::BrickRef,
}

#[pymethods]
impl BrickRef {
    #[new]
    #[pyo3(signature = (text, default_org = DEFAULT_ORG))]
    fn new(text: &str, default_org: &str) -> PyResult<Self> {
        model::BrickRef::parse(text, default_org)
            .map(|inner| Self { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn org(&self) -> &str {
        &self.inner.org
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    /// The requested commit or prefix; None means latest.
    #[getter]
    fn commit(&self) -> Option<String> {
        match &self.inner.commit {
            CommitSpec::Latest => None,
            spec => Some(spec.to_string()),
        }
    }

    #[getter]
    fn source_url(&self) -> Option<&str> {
        self.inner.source_url.as_deref()
    }

    fn slug(&self) -> String {
        self.inner.slug()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("BrickRef('{}')", self.inner)
    }
}

fn to_ref(obj: &Bound<'_, PyAny>) -> PyResult<model::BrickRef> {
    if let Ok(r) = obj.extract::<BrickRef>() {
        return Ok(r.inner);
    }
    let text: String = obj.extract()?;
    BrickRef::new(&text, DEFAULT_ORG).map(|r| r.inner)
}

#[pyclass(module = "bricks", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Stage {
    name: String,
    cmd: String,
    deps: Vec<String>,
    outs: Vec<String>,
}

#[pymethods]
impl Stage {
    fn __repr__(&self) -> String {
        format!("Stage({:?}, deps={:?}, outs={:?})", self.name, self.deps, self.outs)
    }
}

#[pyclass(module = "bricks", frozen)]
struct Manifest {
    inner: model::Manifest,
}

#[pymethods]
impl Manifest {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        model::Manifest::parse(text.as_bytes())
            .map(|inner| Self { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn stages(&self) -> Vec<Stage> {
        self.inner
            .stages()
            .map(|s| Stage {
                name: s.name.clone(),
                cmd: s.cmd.clone(),
                deps: s.deps.clone(),
                outs: s.outs.clone(),
            })
            .collect()
    }

    fn topo_order(&self) -> PyResult<Vec<String>> {
        let order = self.inner.topo_order().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(order.into_iter().map(|s| s.name.clone()).collect())
    }

    fn upstream(&self, stage: &str) -> Vec<String> {
        self.inner.upstream(stage).into_iter().map(str::to_string).collect()
    }

    fn to_yaml(&self) -> String {
        self.inner.to_yaml()
    }
}

#[pyclass(module = "bricks", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct LockRecord {
    path: String,
    hash: String,
    size: u64,
}

#[pymethods]
impl LockRecord {
    fn __repr__(&self) -> String {
        format!("LockRecord({:?}, {}, {})", self.path, self.hash, self.size)
    }
}

fn records(recs: &[model::LockRecord]) -> Vec<LockRecord> {
    recs.iter()
        .map(|r| LockRecord {
            path: r.path.clone(),
            hash: r.hash.to_string(),
            size: r.size,
        })
        .collect()
}

#[pyclass(module = "bricks", frozen)]
struct Lockfile {
    inner: model::Lockfile,
}

#[pymethods]
impl Lockfile {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        model::Lockfile::parse(text.as_bytes())
            .map(|inner| Self { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn stage_names(&self) -> Vec<String> {
        self.inner.stages().map(|(n, _)| n.to_string()).collect()
    }

    fn deps(&self, stage: &str) -> Vec<LockRecord> {
        self.inner.stage(stage).map(|s| records(&s.deps)).unwrap_or_default()
    }

    fn outs(&self, stage: &str) -> Vec<LockRecord> {
        self.inner.stage(stage).map(|s| records(&s.outs)).unwrap_or_default()
    }

    /// Outputs under `brick/`, the distributable assets.
    fn payload(&self) -> Vec<LockRecord> {
        let payload: Vec<_> = self.inner.payload_outs().cloned().collect();
        records(&payload)
    }

    fn to_yaml(&self) -> String {
        self.inner.to_yaml()
    }
}

/// Attribute-style access to an installed brick's assets.
#[pyclass(module = "bricks", frozen)]
struct AssetNamespace {
    brick: String,
    paths: BTreeMap<String, String>,
}

#[pymethods]
impl AssetNamespace {
    fn __getattr__(&self, name: &str) -> PyResult<String> {
        self.paths
            .get(name)
            .cloned()
            .ok_or_else(|| PyAttributeError::new_err(format!("{} has no asset {name:?}", self.brick)))
    }

    fn __dir__(&self) -> Vec<String> {
        self.paths.keys().cloned().collect()
    }

    #[getter]
    fn _catalog(&self) -> BTreeMap<String, String> {
        self.paths.clone()
    }

    fn __len__(&self) -> usize {
        self.paths.len()
    }

    fn __repr__(&self) -> String {
        format!("<assets of {}: {}>", self.brick, self.paths.keys().cloned().collect::<Vec<_>>().join(", "))
    }
}

fn report_dict<'py>(py: Python<'py>, r: &InstallReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("brick", r.brick.slug())?;
    d.set_item("commit", &r.commit)?;
    d.set_item("path", r.path.display().to_string())?;
    d.set_item("steps", r.steps.iter().map(|s| s.as_str()).collect::<Vec<_>>())?;
    d.set_item("blobs_total", r.blobs_total)?;
    d.set_item("blobs_fetched", r.blobs_fetched)?;
    d.set_item("already_installed", r.already_installed)?;
    Ok(d)
}

#[pyclass(module = "bricks")]
struct Library {
    inner: install::Library,
}

#[pymethods]
impl Library {
    #[new]
    fn new(root: PathBuf) -> PyResult<Self> {
        install::Library::open(&root).map(|inner| Self { inner }).map_err(install_err)
    }

    #[getter]
    fn root(&self) -> String {
        self.inner.root().display().to_string()
    }

    /// Installs a brick from `registry`; releases the GIL while downloading.
    #[pyo3(signature = (brick, registry, token, parallel = install::DEFAULT_PARALLEL_FETCH))]
    fn install<'py>(
        &self,
        py: Python<'py>,
        brick: &Bound<'py, PyAny>,
        registry: &str,
        token: &str,
        parallel: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let brick = to_ref(brick)?;
        let endpoint = RegistryEndpoint::new(registry, token).map_err(registry_err)?;
        let client = RegistryClient::new(endpoint).map_err(registry_err)?;
        let lib = &self.inner;
        let report = py
            .detach(|| Installer::new(lib, client).parallel(parallel).install(&brick))
            .map_err(install_err)?;
        report_dict(py, &report)
    }

    fn assets(&self, brick: &Bound<'_, PyAny>) -> PyResult<AssetNamespace> {
        let brick = to_ref(brick)?;
        namespace(&self.inner, &brick)
    }

    /// `(org, name, commit, path)` of every installed brick.
    fn installed(&self) -> Vec<(String, String, String, String)> {
        self.inner
            .all_installed()
            .into_iter()
            .map(|b| (b.org, b.name, b.commit, b.path.display().to_string()))
            .collect()
    }

    /// True when every cached blob and installed payload checks out.
    fn verify(&self) -> PyResult<bool> {
        Ok(self.inner.verify().map_err(install_err)?.is_ok())
    }
}

fn namespace(lib: &install::Library, brick: &model::BrickRef) -> PyResult<AssetNamespace> {
    let catalog = lib.assets(brick).map_err(install_err)?;
    Ok(AssetNamespace {
        brick: brick.slug(),
        paths: catalog
            .iter()
            .map(|a| (a.name.clone(), a.path.display().to_string()))
            .collect(),
    })
}

fn configured_library(library: Option<PathBuf>) -> PyResult<install::Library> {
    let file = match config::default_path(&config::process_env) {
        Some(p) => ConfigFile::load(&p).map_err(err)?,
        None => ConfigFile::default(),
    };
    let flags = Overrides {
        library,
        ..Overrides::default()
    };
    let cfg = Config::resolve(&flags, &config::process_env, &file).map_err(err)?;
    let root = cfg.library.ok_or_else(|| {
        NotConfiguredError::new_err("no library configured; set BRICKS_LIBRARY or run `bricks configure --library <DIR>`")
    })?;
    install::Library::open(&root.value).map_err(install_err)
}

/// Named paths of an installed brick's assets. Reads the library on disk
/// only; nothing is downloaded.
#[pyfunction]
#[pyo3(signature = (brick, library = None))]
fn assets(brick: &Bound<'_, PyAny>, library: Option<PathBuf>) -> PyResult<AssetNamespace> {
    let brick = to_ref(brick)?;
    namespace(&configured_library(library)?, &brick)
}

/// Stage states of the brick workspace at `workdir`, in run order.
#[pyfunction]
fn plan(py: Python<'_>, workdir: PathBuf) -> PyResult<Vec<Bound<'_, PyDict>>> {
    let (manifest, lock) = pipeline::load_workspace(&workdir).map_err(err)?;
    let statuses = pipeline::plan(&workdir, &manifest, lock.as_ref()).map_err(err)?;
    statuses
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("stage", s.stage)?;
            d.set_item("state", s.state.to_string())?;
            d.set_item("reasons", s.reasons.iter().map(|r| r.to_string()).collect::<Vec<_>>())?;
            Ok(d)
        })
        .collect()
}

/// Runs the stages that need it; returns executed, skipped and failed names.
#[pyfunction]
#[pyo3(signature = (workdir, jobs = 1))]
fn repro(py: Python<'_>, workdir: PathBuf, jobs: usize) -> PyResult<Bound<'_, PyDict>> {
    let (manifest, lock) = pipeline::load_workspace(&workdir).map_err(err)?;
    let opts = RunOptions { jobs, echo: false };
    let report = py
        .detach(|| pipeline::repro(&workdir, &manifest, lock.as_ref(), &opts))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("executed", report.executed)?;
    d.set_item("skipped", report.skipped)?;
    d.set_item("failed", report.failed)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "bricks")]
fn bricks_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_function(wrap_pyfunction!(hash_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(hash_path, m)?)?;
    m.add_function(wrap_pyfunction!(hash_tree, m)?)?;
    m.add_function(wrap_pyfunction!(assets, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(repro, m)?)?;
    m.add_class::<BrickRef>()?;
    m.add_class::<Stage>()?;
    m.add_class::<Manifest>()?;
    m.add_class::<LockRecord>()?;
    m.add_class::<Lockfile>()?;
    m.add_class::<Library>()?;
    m.add_class::<AssetNamespace>()?;
    m.add("BricksError", py.get_type::<BricksError>())?;
    m.add("AuthError", py.get_type::<AuthError>())?;
    m.add("NotInstalledError", py.get_type::<NotInstalledError>())?;
    m.add("NotConfiguredError", py.get_type::<NotConfiguredError>())?;
    m.add("IntegrityError", py.get_type::<IntegrityError>())?;
    Ok(())
}
