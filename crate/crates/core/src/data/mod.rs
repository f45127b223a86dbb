//! Dataset files and the synthetic longitudinal generator.
//!
//! A dataset is a directory of plain CSV matrices (one file per subject and
//! timepoint, `n` rows of `n` comma-separated decimals, no header) indexed by
//! a JSON manifest. Paths in the manifest are relative to its directory:
//!
//! ```json
//! {
//!   "n_rois": 3,
//!   "timepoints": 2,
//!   "subjects": [
//!     { "id": "sub-000", "files": ["sub-000/t0.csv", "sub-000/t1.csv"] },
//!     { "id": "sub-001", "files": ["sub-001/t0.csv", "sub-001/t1.csv"] }
//!   ]
//! }
//! ```
//!
//! with `sub-000/t0.csv` holding, for example,
//!
//! ```text
//! 0,0.25,0.5
//! 0.25,0,0.75
//! 0.5,0.75,0
//! ```

mod matrix_csv;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

pub use matrix_csv::{parse_matrix_csv, read_matrix_csv, write_matrix_csv, INPUT_TOLERANCE};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::graphcore::LongitudinalSample;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory the file paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
    pub n_rois: usize,
    pub timepoints: usize,
    pub subjects: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            if s.files.len() != self.timepoints {
                return Err(Error::Data(format!(
                    "subject {} lists {} files, manifest declares {} timepoints",
                    s.id,
                    s.files.len(),
                    self.timepoints
                )));
            }
        }
        Ok(())
    }
}

/// Reads and validates every matrix named by `manifest`; subjects come back sorted by id.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<LongitudinalSample>> {
    manifest.validate()?;
    if manifest.subjects.is_empty() {
        warn!("manifest lists no subjects");
        return Ok(Vec::new());
    }
    let mut entries: Vec<&ManifestEntry> = manifest.subjects.iter().collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let jobs: Vec<(usize, &Path)> = entries
        .iter()
        .enumerate()
        .flat_map(|(s, e)| e.files.iter().map(move |f| (s, f.as_path())))
        .collect();
    let graphs = map_indexed(Execution::default(), &jobs, |_, (_, f)| {
        let path = manifest.root.join(f);
        let g = read_matrix_csv(&path)?;
        if g.n_rois() != manifest.n_rois {
            return Err(Error::Data(format!(
                "{}: {} ROIs, manifest declares {}",
                path.display(),
                g.n_rois(),
                manifest.n_rois
            )));
        }
        Ok(g)
    });

    let mut graphs = graphs.into_iter();
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let gs = graphs
            .by_ref()
            .take(e.files.len())
            .collect::<Result<Vec<_>>>()?;
        samples.push(LongitudinalSample::new(e.id.clone(), gs)?);
    }
    log::info!(
        "loaded {} subjects with {} ROIs",
        samples.len(),
        manifest.n_rois
    );
    Ok(samples)
}

pub fn load_dataset_from(manifest_path: &Path) -> Result<Vec<LongitudinalSample>> {
    load_dataset(&DatasetManifest::load(manifest_path)?)
}

/// Writes `<dir>/<id>/t<k>.csv` for every graph plus `<dir>/manifest.json`.
pub fn save_dataset(dir: &Path, samples: &[LongitudinalSample]) -> Result<DatasetManifest> {
    let n_rois = samples.first().map_or(0, |s| s.n_rois());
    let timepoints = samples.first().map_or(0, |s| s.timepoints());
    if samples
        .iter()
        .any(|s| s.n_rois() != n_rois || s.timepoints() != timepoints)
    {
        return Err(Error::Data(
            "subjects differ in size or timepoint count".into(),
        ));
    }
    let mut subjects = Vec::with_capacity(samples.len());
    for s in samples {
        let sub_dir = dir.join(&s.subject_id);
        fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
        let mut files = Vec::with_capacity(s.timepoints());
        for (k, g) in s.graphs().iter().enumerate() {
            let rel = PathBuf::from(&s.subject_id).join(format!("t{k}.csv"));
            write_matrix_csv(&dir.join(&rel), g)?;
            files.push(rel);
        }
        subjects.push(ManifestEntry {
            id: s.subject_id.clone(),
            files,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        n_rois,
        timepoints,
        subjects,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_gives_empty_list() {
        let m = DatasetManifest {
            root: PathBuf::new(),
            n_rois: 35,
            timepoints: 3,
            subjects: vec![],
        };
        assert!(load_dataset(&m).unwrap().is_empty());
    }

    #[test]
    fn documented_example_parses() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{
          "n_rois": 3,
          "timepoints": 2,
          "subjects": [
            { "id": "sub-001", "files": ["b0.csv", "b1.csv"] },
            { "id": "sub-000", "files": ["a0.csv", "a1.csv"] }
          ]
        }"#;
        fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        let csv = "0,0.25,0.5\n0.25,0,0.75\n0.5,0.75,0\n";
        for f in ["a0", "a1", "b0", "b1"] {
            fs::write(dir.path().join(format!("{f}.csv")), csv).unwrap();
        }
        let samples = load_dataset_from(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].subject_id, "sub-000");
        assert_eq!(samples[1].graphs()[1].get(1, 2), 0.75);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = SyntheticConfig {
            n_subjects: 3,
            n_rois: 7,
            timepoints: 3,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset_from(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.subject_id, b.subject_id);
            for (x, y) in a.graphs().iter().zip(b.graphs()) {
                assert!(x
                    .weights()
                    .iter()
                    .zip(y.weights())
                    .all(|(p, q)| (p - q).abs() <= 1e-12));
            }
        }

        let again = tempfile::tempdir().unwrap();
        save_dataset(again.path(), &back).unwrap();
        let a = fs::read_to_string(dir.path().join("sub-001/t2.csv")).unwrap();
        let b = fs::read_to_string(again.path().join("sub-001/t2.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_file_count_rejected() {
        let m = DatasetManifest {
            root: PathBuf::new(),
            n_rois: 3,
            timepoints: 3,
            subjects: vec![ManifestEntry {
                id: "x".into(),
                files: vec!["a.csv".into()],
            }],
        };
        assert!(matches!(load_dataset(&m), Err(Error::Data(msg)) if msg.contains('x')));
    }
}
