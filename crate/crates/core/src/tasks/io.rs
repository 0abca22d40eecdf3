//! Suite directories: `suite.json` plus binary tensors per task.
//!
//! Sample files hold one row per sample with the class id in the last
//! column. Transform files hold `Q` followed by the shift as an extra row.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledSample, SuiteConfig, Task, TaskSequence, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tensor_io;

const SUITE_FORMAT: &str = "moeforge-suite";
const SUITE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SuiteManifest {
    format: String,
    version: u32,
    config: SuiteConfig,
    prototypes: String,
    tasks: Vec<TaskEntry>,
}

#[derive(Serialize, Deserialize)]
struct TaskEntry {
    id: usize,
    categories: Vec<usize>,
    noise: f64,
    train: String,
    test: String,
    transform: String,
}

fn samples_to_matrix(samples: &[LabeledSample], d: usize) -> Matrix {
    let mut data = Vec::with_capacity(samples.len() * (d + 1));
    for s in samples {
        data.extend_from_slice(&s.features);
        data.push(s.label as f64);
    }
    Matrix::from_vec(samples.len(), d + 1, data).expect("fixed row width")
}

fn matrix_to_samples(m: &Matrix, path: &Path) -> Result<Vec<LabeledSample>> {
    if m.cols() == 0 {
        return Err(Error::format(path, "sample file has no columns"));
    }
    let d = m.cols() - 1;
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let label = row[d];
            if label < 0.0 || label.fract() != 0.0 {
                return Err(Error::format(path, format!("row {r} has a non-integer class id {label}")));
            }
            Ok(LabeledSample {
                features: row[..d].to_vec(),
                label: label as usize,
            })
        })
        .collect()
}

pub fn export_suite(suite: &TaskSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = suite.config.d_in;
    tensor_io::write_file(&dir.join("prototypes.bin"), &suite.prototypes)?;
    let mut entries = Vec::with_capacity(suite.tasks.len());
    for task in &suite.tasks {
        let id = task.spec.id;
        let entry = TaskEntry {
            id,
            categories: task.spec.categories.clone(),
            noise: task.spec.noise,
            train: format!("task_{id:02}_train.bin"),
            test: format!("task_{id:02}_test.bin"),
            transform: format!("task_{id:02}_transform.bin"),
        };
        tensor_io::write_file(&dir.join(&entry.train), &samples_to_matrix(&task.train, d))?;
        tensor_io::write_file(&dir.join(&entry.test), &samples_to_matrix(&task.test, d))?;
        let mut tf = task.spec.transform.as_slice().to_vec();
        tf.extend_from_slice(&task.spec.shift);
        tensor_io::write_file(&dir.join(&entry.transform), &Matrix::from_vec(d + 1, d, tf)?)?;
        entries.push(entry);
    }
    let manifest = SuiteManifest {
        format: SUITE_FORMAT.into(),
        version: SUITE_VERSION,
        config: suite.config.clone(),
        prototypes: "prototypes.bin".into(),
        tasks: entries,
    };
    let path = dir.join("suite.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn import_suite(dir: &Path) -> Result<TaskSequence> {
    let path = dir.join("suite.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SuiteManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != SUITE_FORMAT || manifest.version != SUITE_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported suite format {} v{}", manifest.format, manifest.version),
        ));
    }
    let d = manifest.config.d_in;
    let prototypes = tensor_io::read_file(&dir.join(&manifest.prototypes))?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in manifest.tasks {
        let tf_path = dir.join(&entry.transform);
        let tf = tensor_io::read_file(&tf_path)?;
        if tf.shape() != (d + 1, d) {
            return Err(Error::format(&tf_path, format!("expected {}x{d} transform", d + 1)));
        }
        let transform = Matrix::from_vec(d, d, tf.as_slice()[..d * d].to_vec())?;
        let shift = tf.row(d).to_vec();
        let train_path = dir.join(&entry.train);
        let test_path = dir.join(&entry.test);
        let train = matrix_to_samples(&tensor_io::read_file(&train_path)?, &train_path)?;
        let test = matrix_to_samples(&tensor_io::read_file(&test_path)?, &test_path)?;
        tasks.push(Task {
            spec: TaskSpec {
                id: entry.id,
                categories: entry.categories,
                transform,
                shift,
                noise: entry.noise,
                train_count: train.len(),
                test_count: test.len(),
            },
            train,
            test,
        });
    }
    Ok(TaskSequence {
        config: manifest.config,
        prototypes,
        tasks,
    })
}
