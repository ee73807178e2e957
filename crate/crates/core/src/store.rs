//! Filesystem persistence for the system catalog, experiments, artifacts
//! and archive bundles.
//!
//! Layout under the data directory:
//!
//! ```text
//! experiments/<uuid>/experiment.json
//! experiments/<uuid>/workspace/{syscfg.json, params/<name>}
//! experiments/<uuid>/artifacts/<result name>
//! experiments/<uuid>/logs/{build.log, run.log}
//! experiments/<uuid>/build/            captured build workspace
//! archive/<uuid>.zip
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::experiment::{ArchiveManifest, Experiment, ExperimentId};
use crate::sysdef::{parse_sysdef, SysDef, SystemRef};

pub const EXPERIMENT_FILE: &str = "experiment.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("catalog root `{0}` does not exist")]
    CatalogRootMissing(PathBuf),
    #[error("result `{0}` is not declared by the system")]
    UndeclaredResult(String),
    #[error("archive for experiment {0} already exists")]
    ArchiveExists(ExperimentId),
    #[error("experiment {0} not found")]
    NotFound(ExperimentId),
    #[error("artifact `{0}` not stored")]
    ArtifactMissing(String),
    #[error("corrupt document {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
}

impl From<zip::result::ZipError> for StoreError {
    fn from(e: zip::result::ZipError) -> Self {
        StoreError::Storage(io::Error::other(e))
    }
}

/// A stored result artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub experiment: ExperimentId,
    pub name: String,
    pub declared_type: String,
    pub size: u64,
    /// Experiment-relative path of the stored bytes.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemCatalogEntry {
    pub def: SysDef,
    pub source: String,
    pub loaded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum CatalogProblem {
    Invalid { path: String, reason: String },
    DuplicateSystem { path: String, name: String, version: String, kept: String },
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub entries: Vec<SystemCatalogEntry>,
    pub problems: Vec<CatalogProblem>,
}

impl Catalog {
    pub fn lookup(&self, system: &SystemRef) -> Option<&SysDef> {
        self.entries
            .iter()
            .find(|e| e.def.name == system.name && e.def.version == system.version)
            .map(|e| &e.def)
    }

    pub fn from_defs(defs: impl IntoIterator<Item = SysDef>) -> Self {
        let now = Utc::now();
        let mut entries: Vec<_> = defs
            .into_iter()
            .map(|def| SystemCatalogEntry { def, source: "<memory>".into(), loaded_at: now })
            .collect();
        entries.sort_by(|a, b| (&a.def.name, &a.def.version).cmp(&(&b.def.name, &b.def.version)));
        Catalog { entries, problems: Vec::new() }
    }
}

/// Parses every `*.json` file below `root`. Files are visited in byte
/// order of their paths; on a duplicate (name, version) the first file
/// wins and later ones are reported.
pub fn load_catalog(root: &Path) -> Result<Catalog, StoreError> {
    if !root.is_dir() {
        return Err(StoreError::CatalogRootMissing(root.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .follow_links(true)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "json"))
        .map(|e| e.into_path())
        .collect();
    files.sort();

    let now = Utc::now();
    let mut catalog = Catalog::default();
    let mut seen: BTreeMap<(String, String), String> = BTreeMap::new();
    for path in files {
        let shown = path.display().to_string();
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_sysdef(&text).map_err(|e| e.to_string()));
        match parsed {
            Err(reason) => catalog.problems.push(CatalogProblem::Invalid { path: shown, reason }),
            Ok(def) => {
                let key = (def.name.clone(), def.version.clone());
                if let Some(kept) = seen.get(&key) {
                    catalog.problems.push(CatalogProblem::DuplicateSystem {
                        path: shown,
                        name: key.0,
                        version: key.1,
                        kept: kept.clone(),
                    });
                } else {
                    seen.insert(key, shown.clone());
                    catalog.entries.push(SystemCatalogEntry { def, source: shown, loaded_at: now });
                }
            }
        }
    }
    catalog
        .entries
        .sort_by(|a, b| (&a.def.name, &a.def.version).cmp(&(&b.def.name, &b.def.version)));
    Ok(catalog)
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic_with(path, bytes, || Ok(()))
}

/// Like [`write_atomic`], running `before_rename` after the temporary file
/// is durable. An error from the hook aborts the write and leaves the
/// previous contents of `path` in place.
pub fn write_atomic_with(
    path: &Path,
    bytes: &[u8],
    before_rename: impl FnOnce() -> io::Result<()>,
) -> io::Result<()> {
    let dir = path.parent().ok_or_else(|| io::Error::other("path has no parent"))?;
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    before_rename()?;
    tmp.persist(path).map_err(|e| e.error)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Store {
    data_dir: PathBuf,
}

impl Store {
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(data_dir.join("experiments"))?;
        std::fs::create_dir_all(data_dir.join("archive"))?;
        Ok(Store { data_dir })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn experiment_dir(&self, id: ExperimentId) -> PathBuf {
        self.data_dir.join("experiments").join(id.to_string())
    }

    pub fn workspace_dir(&self, id: ExperimentId) -> PathBuf {
        self.experiment_dir(id).join("workspace")
    }

    pub fn artifacts_dir(&self, id: ExperimentId) -> PathBuf {
        self.experiment_dir(id).join("artifacts")
    }

    pub fn logs_dir(&self, id: ExperimentId) -> PathBuf {
        self.experiment_dir(id).join("logs")
    }

    pub fn build_dir(&self, id: ExperimentId) -> PathBuf {
        self.experiment_dir(id).join("build")
    }

    pub fn archive_path(&self, id: ExperimentId) -> PathBuf {
        self.data_dir.join("archive").join(format!("{id}.zip"))
    }

    /// Creates the directory skeleton for a new experiment.
    pub fn allocate(&self, id: ExperimentId) -> Result<(), StoreError> {
        std::fs::create_dir_all(self.workspace_dir(id).join("params"))?;
        std::fs::create_dir_all(self.artifacts_dir(id))?;
        std::fs::create_dir_all(self.logs_dir(id))?;
        Ok(())
    }

    pub fn persist_experiment(&self, exp: &Experiment) -> Result<(), StoreError> {
        self.persist_experiment_with(exp, || Ok(()))
    }

    /// Fault-injection variant of [`Store::persist_experiment`].
    pub fn persist_experiment_with(
        &self,
        exp: &Experiment,
        before_rename: impl FnOnce() -> io::Result<()>,
    ) -> Result<(), StoreError> {
        let value = serde_json::to_value(exp).map_err(io::Error::other)?;
        let path = self.experiment_dir(exp.id).join(EXPERIMENT_FILE);
        write_atomic_with(&path, &canonical::to_vec(&value), before_rename)?;
        Ok(())
    }

    pub fn load_experiment(&self, id: ExperimentId) -> Result<Experiment, StoreError> {
        let path = self.experiment_dir(id).join(EXPERIMENT_FILE);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(id)),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt { path, reason: e.to_string() })
    }

    /// Loads every persisted experiment. Unreadable documents are returned
    /// separately rather than failing the whole scan.
    pub fn load_all(&self) -> Result<(Vec<Experiment>, Vec<StoreError>), StoreError> {
        let mut found = Vec::new();
        let mut broken = Vec::new();
        for entry in std::fs::read_dir(self.data_dir.join("experiments"))? {
            let entry = entry?;
            let Some(id) = entry.file_name().to_str().and_then(|s| s.parse::<ExperimentId>().ok()) else {
                continue;
            };
            match self.load_experiment(id) {
                Ok(exp) => found.push(exp),
                Err(StoreError::NotFound(_)) => {}
                Err(e) => broken.push(e),
            }
        }
        found.sort_by_key(|e| (e.meta.created_at, e.id));
        Ok((found, broken))
    }

    pub fn delete_experiment(&self, id: ExperimentId) -> Result<(), StoreError> {
        match std::fs::remove_dir_all(self.experiment_dir(id)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(id)),
            other => Ok(other?),
        }
    }

    /// Temporary file for an incoming upload; commit it with
    /// [`Store::commit_upload`].
    pub fn upload_temp(&self, id: ExperimentId) -> Result<tempfile::NamedTempFile, StoreError> {
        let dir = self.workspace_dir(id).join("params");
        std::fs::create_dir_all(&dir)?;
        Ok(tempfile::Builder::new().prefix(".upload-").tempfile_in(dir)?)
    }

    /// Moves a finished upload to `params/<param>`, replacing earlier content.
    pub fn commit_upload(
        &self,
        id: ExperimentId,
        param: &str,
        tmp: tempfile::NamedTempFile,
    ) -> Result<u64, StoreError> {
        tmp.as_file().sync_all()?;
        let size = tmp.as_file().metadata()?.len();
        let dest = self.workspace_dir(id).join("params").join(param);
        tmp.persist(&dest).map_err(|e| e.error)?;
        Ok(size)
    }

    pub fn write_upload(&self, id: ExperimentId, param: &str, content: &[u8]) -> Result<u64, StoreError> {
        let mut tmp = self.upload_temp(id)?;
        tmp.write_all(content)?;
        self.commit_upload(id, param, tmp)
    }

    pub fn artifact_path(&self, id: ExperimentId, name: &str) -> PathBuf {
        self.artifacts_dir(id).join(name)
    }

    fn artifact_record(
        &self,
        id: ExperimentId,
        def: &SysDef,
        name: &str,
    ) -> Result<(ArtifactRecord, PathBuf), StoreError> {
        let spec = def.result(name).ok_or_else(|| StoreError::UndeclaredResult(name.to_string()))?;
        let record = ArtifactRecord {
            experiment: id,
            name: name.to_string(),
            declared_type: spec.kind.clone(),
            size: 0,
            path: format!("artifacts/{name}"),
        };
        Ok((record, self.artifact_path(id, name)))
    }

    pub fn store_artifact(
        &self,
        id: ExperimentId,
        def: &SysDef,
        name: &str,
        content: &[u8],
    ) -> Result<ArtifactRecord, StoreError> {
        let (mut record, dest) = self.artifact_record(id, def, name)?;
        write_atomic(&dest, content)?;
        record.size = content.len() as u64;
        Ok(record)
    }

    /// Moves an already-written file into the artifact store.
    pub fn adopt_artifact(
        &self,
        id: ExperimentId,
        def: &SysDef,
        name: &str,
        src: &Path,
    ) -> Result<ArtifactRecord, StoreError> {
        let (mut record, dest) = self.artifact_record(id, def, name)?;
        std::fs::create_dir_all(self.artifacts_dir(id))?;
        std::fs::rename(src, &dest)?;
        record.size = std::fs::metadata(&dest)?.len();
        Ok(record)
    }

    pub fn get_artifact(&self, id: ExperimentId, name: &str) -> Result<Vec<u8>, StoreError> {
        match std::fs::read(self.artifact_path(id, name)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::ArtifactMissing(name.to_string())),
            other => Ok(other?),
        }
    }

    /// Writes the ZIP bundle for an archived experiment. Never overwrites
    /// an existing bundle.
    pub fn write_archive(&self, manifest: &ArchiveManifest, syscfg_text: &str) -> Result<PathBuf, StoreError> {
        let id = manifest.experiment.id;
        let dest = self.archive_path(id);
        if dest.exists() {
            return Err(StoreError::ArchiveExists(id));
        }
        let dir = dest.parent().expect("archive path has a parent");
        let tmp = tempfile::Builder::new().prefix(".tmp-").suffix(".zip").tempfile_in(dir)?;
        {
            let mut zip = zip::ZipWriter::new(tmp.as_file());
            let opts = zip::write::SimpleFileOptions::default()
                .compression_method(zip::CompressionMethod::Deflated)
                .large_file(true);

            let manifest_value = serde_json::to_value(manifest).map_err(io::Error::other)?;
            zip.start_file("manifest.json", opts)?;
            zip.write_all(&canonical::to_vec(&manifest_value))?;
            zip.start_file("syscfg.json", opts)?;
            zip.write_all(syscfg_text.as_bytes())?;

            zip.add_directory("results/", opts)?;
            for record in &manifest.results {
                let mut src = File::open(self.experiment_dir(id).join(&record.path))?;
                zip.start_file(format!("results/{}", record.name), opts)?;
                io::copy(&mut src, &mut zip)?;
            }

            zip.add_directory("params/", opts)?;
            for param in manifest.uploads.keys() {
                let mut src = File::open(self.workspace_dir(id).join("params").join(param))?;
                zip.start_file(format!("params/{param}"), opts)?;
                io::copy(&mut src, &mut zip)?;
            }

            zip.add_directory("logs/", opts)?;
            let mut logs: Vec<_> = std::fs::read_dir(self.logs_dir(id))
                .map(|rd| rd.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_file()).collect())
                .unwrap_or_default();
            logs.sort();
            for log in logs {
                let name = log.file_name().and_then(|n| n.to_str()).unwrap_or("log").to_string();
                let mut src = File::open(&log)?;
                zip.start_file(format!("logs/{name}"), opts)?;
                io::copy(&mut src, &mut zip)?;
            }
            zip.finish()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist_noclobber(&dest).map_err(|e| {
            if e.error.kind() == io::ErrorKind::AlreadyExists {
                StoreError::ArchiveExists(id)
            } else {
                StoreError::Storage(e.error)
            }
        })?;
        Ok(dest)
    }

    /// Reads `manifest.json` back out of a bundle.
    pub fn read_archive_manifest(&self, id: ExperimentId) -> Result<ArchiveManifest, StoreError> {
        let file = File::open(self.archive_path(id))?;
        let mut zip = zip::ZipArchive::new(file)?;
        let entry = zip.by_name("manifest.json")?;
        serde_json::from_reader(entry).map_err(|e| StoreError::Corrupt {
            path: self.archive_path(id),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Event;
    use crate::sysdef::{derive_syscfg, tests::AGRA};
    use std::io::Read;

    fn agra() -> SysDef {
        parse_sysdef(AGRA).unwrap()
    }

    fn new_exp(store: &Store, def: &SysDef) -> Experiment {
        let e = Experiment::create(derive_syscfg(def), def, "alice", Some("t".into()), Utc::now()).unwrap();
        store.allocate(e.id).unwrap();
        e
    }

    #[test]
    fn catalog_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_catalog(dir.path()).unwrap().entries.is_empty());
        assert!(matches!(load_catalog(&dir.path().join("nope")), Err(StoreError::CatalogRootMissing(_))));

        std::fs::write(dir.path().join("b_agra.json"), AGRA).unwrap();
        std::fs::write(dir.path().join("a_agra.json"), AGRA).unwrap();
        std::fs::write(dir.path().join("broken.json"), "{").unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        std::fs::create_dir(dir.path().join("nested")).unwrap();
        std::fs::write(
            dir.path().join("nested/min.json"),
            r#"{"name":"Aaa","version":"2","docker_image":"i","run_command":"x"}"#,
        )
        .unwrap();

        let cat = load_catalog(dir.path()).unwrap();
        let ids: Vec<_> = cat.entries.iter().map(|e| (e.def.name.as_str(), e.def.version.as_str())).collect();
        assert_eq!(ids, vec![("AGRA RISC-V", "1.0"), ("Aaa", "2")]);
        assert!(cat.entries[0].source.ends_with("a_agra.json"));
        let dup = cat.problems.iter().find(|p| matches!(p, CatalogProblem::DuplicateSystem { .. })).unwrap();
        match dup {
            CatalogProblem::DuplicateSystem { path, kept, .. } => {
                assert!(path.ends_with("b_agra.json") && kept.ends_with("a_agra.json"));
            }
            _ => unreachable!(),
        }
        assert!(cat.problems.iter().any(|p| matches!(p, CatalogProblem::Invalid { path, .. } if path.ends_with("broken.json"))));

        let again = load_catalog(dir.path()).unwrap();
        assert_eq!(
            again.entries.iter().map(|e| &e.def).collect::<Vec<_>>(),
            cat.entries.iter().map(|e| &e.def).collect::<Vec<_>>()
        );
    }

    #[test]
    fn experiment_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let def = agra();
        let e = new_exp(&store, &def);
        store.persist_experiment(&e).unwrap();
        assert_eq!(store.load_experiment(e.id).unwrap(), e);
        let (all, broken) = store.load_all().unwrap();
        assert_eq!(all, vec![e.clone()]);
        assert!(broken.is_empty());
        store.delete_experiment(e.id).unwrap();
        assert!(matches!(store.load_experiment(e.id), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn interrupted_persist_keeps_previous_version() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let def = agra();
        let mut e = new_exp(&store, &def);
        store.persist_experiment(&e).unwrap();
        let path = store.experiment_dir(e.id).join(EXPERIMENT_FILE);
        let before = std::fs::read(&path).unwrap();

        e.apply(Event::BuildRequested, Utc::now()).unwrap();
        let err = store.persist_experiment_with(&e, || Err(io::Error::other("simulated crash")));
        assert!(err.is_err());
        assert_eq!(std::fs::read(&path).unwrap(), before);
        // No temp files linger next to the document.
        let leftovers: Vec<_> = std::fs::read_dir(store.experiment_dir(e.id))
            .unwrap()
            .filter_map(Result::ok)
            .filter(|d| d.file_name().to_string_lossy().starts_with(".tmp-"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let def = agra();
        let e = new_exp(&store, &def);
        let vcd = b"$timescale 1ns $end\n#0\n";
        let rec = store.store_artifact(e.id, &def, "signal_trace", vcd).unwrap();
        assert_eq!(rec.declared_type, "vcd");
        assert_eq!(rec.size, vcd.len() as u64);
        assert_eq!(store.get_artifact(e.id, "signal_trace").unwrap(), vcd);

        let rec = store.store_artifact(e.id, &def, "signal_trace", b"").unwrap();
        assert_eq!(rec.size, 0);
        assert!(matches!(
            store.store_artifact(e.id, &def, "not_declared", b"x"),
            Err(StoreError::UndeclaredResult(_))
        ));
    }

    #[test]
    fn archive_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let def = agra();
        let mut e = new_exp(&store, &def);
        let rec = store.store_artifact(e.id, &def, "signal_trace", b"#0 vcd").unwrap();
        e.results_index.insert("signal_trace".into(), rec);
        std::fs::write(store.logs_dir(e.id).join("run.log"), "ran\n").unwrap();
        let syscfg = e.cfg.to_canonical_string();
        let manifest = e.archive_manifest(&def, &syscfg).unwrap();
        let path = store.write_archive(&manifest, &syscfg).unwrap();

        let mut zip = zip::ZipArchive::new(File::open(&path).unwrap()).unwrap();
        let names: Vec<String> = zip.file_names().map(str::to_string).collect();
        for expected in ["manifest.json", "syscfg.json", "results/", "results/signal_trace", "params/", "logs/", "logs/run.log"] {
            assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
        }
        let mut body = Vec::new();
        zip.by_name("results/signal_trace").unwrap().read_to_end(&mut body).unwrap();
        assert_eq!(body, store.get_artifact(e.id, "signal_trace").unwrap());

        let back = store.read_archive_manifest(e.id).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.results[0].declared_type, "vcd");
        assert!(matches!(store.write_archive(&manifest, &syscfg), Err(StoreError::ArchiveExists(_))));
    }
}
