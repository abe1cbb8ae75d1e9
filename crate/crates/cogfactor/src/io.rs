//! On-disk layouts: dataset directories, dictionary files with JSON
//! sidecars, and model checkpoints. All writes go through a temp file
//! plus rename so a crashed run never leaves a half-written artifact.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use cogfactor_core::data::{FeatureKind, StudyDataset};
use cogfactor_core::model::{FactoredModel, Head};
use cogfactor_core::projection::Dictionary;

use crate::error::{Error, Result};
use crate::ndt::{read_tensor, write_tensor, NdtTensor};

/// Writes `bytes` to `path` atomically.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serializes a value as pretty JSON and writes it atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    name: String,
    n_samples: usize,
    dim: usize,
    kind: String,
    condition_names: Vec<String>,
    files: DatasetFiles,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFiles {
    x: String,
    labels: String,
    subjects: String,
}

/// Writes a dataset directory: `manifest.json`, `X.ndt`, `labels.ndt`,
/// `subjects.ndt`.
pub fn save_dataset(dir: &Path, ds: &StudyDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        n_samples: ds.n_samples(),
        dim: ds.dim(),
        kind: match ds.kind {
            FeatureKind::Raw => "raw".to_string(),
            FeatureKind::Reduced => "reduced".to_string(),
        },
        condition_names: ds.condition_names.clone(),
        files: DatasetFiles {
            x: "X.ndt".to_string(),
            labels: "labels.ndt".to_string(),
            subjects: "subjects.ndt".to_string(),
        },
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_tensor(dir.join("X.ndt"), &NdtTensor::from_array2(&ds.x))?;
    write_tensor(
        dir.join("labels.ndt"),
        &NdtTensor::from_i64(ds.labels.iter().map(|&l| l as i64).collect()),
    )?;
    write_tensor(
        dir.join("subjects.ndt"),
        &NdtTensor::from_i64(ds.subjects.iter().map(|&s| s as i64).collect()),
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<StudyDataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let kind = match manifest.kind.as_str() {
        "raw" => FeatureKind::Raw,
        "reduced" => FeatureKind::Reduced,
        other => return Err(Error::Invalid(format!("unknown dataset kind {other:?}"))),
    };
    let x = read_tensor(dir.join(&manifest.files.x))?.to_array2()?;
    let labels: Vec<usize> = read_tensor(dir.join(&manifest.files.labels))?
        .to_i64()?
        .into_iter()
        .map(|l| {
            usize::try_from(l).map_err(|_| Error::Invalid(format!("negative label {l}")))
        })
        .collect::<Result<_>>()?;
    let subjects: Vec<u32> = read_tensor(dir.join(&manifest.files.subjects))?
        .to_i64()?
        .into_iter()
        .map(|s| {
            u32::try_from(s).map_err(|_| Error::Invalid(format!("invalid subject id {s}")))
        })
        .collect::<Result<_>>()?;
    if x.nrows() != manifest.n_samples || x.ncols() != manifest.dim {
        return Err(Error::Invalid(format!(
            "manifest says ({}, {}), X.ndt has ({}, {})",
            manifest.n_samples,
            manifest.dim,
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(StudyDataset::new(
        manifest.name,
        x,
        kind,
        labels,
        subjects,
        manifest.condition_names,
    )?)
}

#[derive(Debug, Serialize, Deserialize)]
struct DictionarySidecar {
    name: String,
    voxels: usize,
    components: usize,
    format: String,
}

/// Writes a dictionary as `<stem>.json` sidecar plus `<stem>.ndt`.
///
/// Dense format stores the full `(voxels, components)` matrix; the
/// sparse variant stores `(nnz, 3)` rows of `(row, col, value)`
/// coordinate triplets.
pub fn save_dictionary(stem: &Path, dict: &Dictionary, sparse: bool) -> Result<()> {
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let sidecar = DictionarySidecar {
        name: dict.name().to_string(),
        voxels: dict.voxels(),
        components: dict.n_components(),
        format: if sparse { "coo".to_string() } else { "dense".to_string() },
    };
    write_json(&stem.with_extension("json"), &sidecar)?;
    let tensor = if sparse {
        let mut triplets = Vec::new();
        for ((row, col), &value) in dict.components().indexed_iter() {
            if value != 0.0 {
                triplets.extend_from_slice(&[row as f64, col as f64, value]);
            }
        }
        NdtTensor::new(vec![triplets.len() / 3, 3], crate::ndt::NdtData::F64(triplets))?
    } else {
        NdtTensor::from_array2(&dict.components().to_owned())
    };
    write_tensor(stem.with_extension("ndt"), &tensor)
}

/// Loads a dictionary from its `.json` sidecar (or the bare stem).
pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    let stem: PathBuf = if path.extension().is_some() { path.with_extension("") } else { path.to_path_buf() };
    let sidecar: DictionarySidecar = read_json(&stem.with_extension("json"))?;
    let tensor = read_tensor(stem.with_extension("ndt"))?;
    let dict = match sidecar.format.as_str() {
        "dense" => {
            let dense = tensor.to_array2()?;
            Dictionary::new(sidecar.name, dense)?
        }
        "coo" => {
            let coo = tensor.to_array2()?;
            if coo.ncols() != 3 {
                return Err(Error::Invalid(format!(
                    "coo dictionary tensor must have 3 columns, got {}",
                    coo.ncols()
                )));
            }
            let triplets: Vec<(usize, usize, f64)> = coo
                .rows()
                .into_iter()
                .map(|r| (r[0] as usize, r[1] as usize, r[2]))
                .collect();
            Dictionary::from_coo(sidecar.name, sidecar.voxels, sidecar.components, &triplets)?
        }
        other => return Err(Error::Invalid(format!("unknown dictionary format {other:?}"))),
    };
    if dict.voxels() != sidecar.voxels || dict.n_components() != sidecar.components {
        return Err(Error::Invalid(format!(
            "sidecar says ({}, {}), tensor has ({}, {})",
            sidecar.voxels,
            sidecar.components,
            dict.voxels(),
            dict.n_components()
        )));
    }
    Ok(dict)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    input_dim: usize,
    latent_dim: usize,
    dropout_rate: f64,
    studies: Vec<CheckpointStudy>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointStudy {
    name: String,
    n_conditions: usize,
    condition_names: Vec<String>,
}

/// Writes a model checkpoint directory: `model.json` plus one NDT tensor
/// per parameter block.
pub fn save_model(dir: &Path, model: &FactoredModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        input_dim: model.input_dim(),
        latent_dim: model.latent_dim(),
        dropout_rate: model.dropout_rate,
        studies: model
            .heads
            .iter()
            .map(|h| CheckpointStudy {
                name: h.name.clone(),
                n_conditions: h.n_conditions(),
                condition_names: h.condition_names.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("model.json"), &manifest)?;
    write_tensor(dir.join("embedding.ndt"), &NdtTensor::from_array2(&model.embedding))?;
    for (i, head) in model.heads.iter().enumerate() {
        write_tensor(
            dir.join(format!("head_{i}_weights.ndt")),
            &NdtTensor::from_array2(&head.weights),
        )?;
        write_tensor(dir.join(format!("head_{i}_bias.ndt")), &NdtTensor::from_array1(&head.bias))?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<FactoredModel> {
    let manifest: CheckpointManifest = read_json(&dir.join("model.json"))?;
    let embedding: Array2<f64> = read_tensor(dir.join("embedding.ndt"))?.to_array2()?;
    let mut heads = Vec::with_capacity(manifest.studies.len());
    for (i, study) in manifest.studies.iter().enumerate() {
        let weights = read_tensor(dir.join(format!("head_{i}_weights.ndt")))?.to_array2()?;
        let bias = read_tensor(dir.join(format!("head_{i}_bias.ndt")))?.to_array1()?;
        heads.push(Head {
            name: study.name.clone(),
            condition_names: study.condition_names.clone(),
            weights,
            bias,
        });
    }
    Ok(FactoredModel::from_parts(embedding, heads, manifest.dropout_rate)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cogfactor_core::model::HeadSpec;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let ds = StudyDataset::new(
            "demo",
            array![[1.5, -2.0], [0.25, 1e-12], [3.0, 4.0]],
            FeatureKind::Raw,
            vec![0, 1, 0],
            vec![0, 0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let dir = tmpdir();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.name, "demo");
        assert_eq!(loaded.x, ds.x);
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.subjects, ds.subjects);
        assert_eq!(loaded.kind, FeatureKind::Raw);
    }

    #[test]
    fn dictionary_round_trip_dense_and_coo() {
        let dict = Dictionary::new(
            "toy",
            array![[1.0, 0.0], [0.5, 0.0], [0.0, 2.0]],
        )
        .unwrap();
        let dir = tmpdir();
        for (stem, sparse) in [("dense_dict", false), ("coo_dict", true)] {
            let base = dir.path().join(stem);
            save_dictionary(&base, &dict, sparse).unwrap();
            let loaded = load_dictionary(&base).unwrap();
            assert_eq!(loaded.name(), "toy");
            assert_eq!(loaded.components(), dict.components());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = FactoredModel::init(
            7,
            3,
            &[HeadSpec::with_dim("a", 2), HeadSpec::with_dim("b", 4)],
            0.75,
            &mut rng,
        )
        .unwrap();
        let dir = tmpdir();
        save_model(dir.path(), &model).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(loaded.embedding, model.embedding);
        assert_eq!(loaded.dropout_rate, model.dropout_rate);
        for (a, b) in loaded.heads.iter().zip(&model.heads) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.condition_names, b.condition_names);
        }
    }

    #[test]
    fn no_temp_files_left_behind() {
        let dir = tmpdir();
        let ds = StudyDataset::new(
            "demo",
            array![[1.0], [2.0]],
            FeatureKind::Reduced,
            vec![0, 0],
            vec![0, 1],
            vec!["only".into()],
        )
        .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.len(), 4, "{names:?}");
        assert!(names.iter().all(|n| n.ends_with(".ndt") || n.ends_with(".json")));
    }
}
