//! Synthetic datasets and forgetting-scenario construction.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Feature matrix with integer labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize, split: Split) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid("dataset dim and class count must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not fit {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Indices of samples with label `class`, in storage order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Classes with at least one sample.
    pub fn present_classes(&self) -> Vec<usize> {
        let counts = self.class_counts();
        (0..self.num_classes).filter(|&c| counts[c] > 0).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range {}", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    /// Features of the selected rows as a `[n, dim]` tensor, with their labels.
    pub fn subset_tensor(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("cannot build a tensor from zero samples"));
        }
        let s = self.subset(indices)?;
        let x = Tensor::new(&[indices.len(), self.dim], s.features)?;
        Ok((x, s.labels))
    }

    /// Samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        self.subset(&idx).expect("indices in range")
    }

    /// All features as a `[n, dim]` tensor. Panics on an empty dataset.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.dim], self.features.clone()).expect("nonempty dataset")
    }

    /// Concatenates two datasets with the same geometry.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim || self.num_classes != other.num_classes {
            return Err(Error::invalid("cannot concatenate datasets of different geometry"));
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Distance of each class mean from the origin.
    pub margin: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            dim: 32,
            n_per_class: 100,
            margin: 5.0,
        }
    }
}

/// Share of each class that goes to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Unit-variance Gaussian clusters whose means lie on a sphere of radius
/// `margin`. Each class is split 80/20 into train and test.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.n_per_class < 2 || spec.dim == 0 {
        return Err(Error::invalid(
            "synthetic data needs at least 2 classes, 2 samples per class, and dim >= 1",
        ));
    }
    if !(spec.margin >= 0.0) || !spec.margin.is_finite() {
        return Err(Error::invalid("margin must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = ((spec.n_per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, spec.n_per_class - 1);
    let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in 0..spec.classes {
        let mut mean: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        mean.iter_mut().for_each(|v| *v *= spec.margin / norm);
        for i in 0..spec.n_per_class {
            let (x, y) = if i < n_train {
                (&mut xtr, &mut ytr)
            } else {
                (&mut xte, &mut yte)
            };
            x.extend(mean.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z
            }));
            y.push(c);
        }
    }
    Ok((
        Dataset::new(xtr, ytr, spec.dim, spec.classes, Split::Train)?,
        Dataset::new(xte, yte, spec.dim, spec.classes, Split::Test)?,
    ))
}

/// Draws `size` samples uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(data: &Dataset, size: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot sample from an empty dataset"));
    }
    if size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.len())).collect();
    data.subset_tensor(&idx)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Single,
    Continual,
    FewShot,
    MissingClass,
}

/// How many training samples of a class enter `D_f` or `D_r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rehearsal {
    /// Stratified fraction of each class, at least one sample.
    Ratio(f64),
    /// Exactly this many samples per class.
    Shots(usize),
}

/// Declarative scenario description; see [`build_scenario`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub kind: ScenarioKind,
    /// Forgotten classes of each task, in order.
    pub tasks: Vec<Vec<usize>>,
    /// Fraction `ρ` of each class kept; ignored when `shots` is set.
    #[serde(default = "default_ratio")]
    pub data_ratio: f64,
    #[serde(default)]
    pub shots: Option<usize>,
    /// Remaining classes with no training samples at all.
    #[serde(default)]
    pub missing: Vec<usize>,
}

fn default_ratio() -> f64 {
    0.1
}

/// Upper bound on `ρ`, keeping `|D_r| + |D_f|` well below `|D|`.
pub const MAX_DATA_RATIO: f64 = 0.5;

impl ScenarioSpec {
    pub fn single(forget: Vec<usize>, data_ratio: f64) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Single,
            tasks: vec![forget],
            data_ratio,
            shots: None,
            missing: Vec::new(),
        }
    }

    pub fn rehearsal(&self) -> Rehearsal {
        match self.shots {
            Some(k) => Rehearsal::Shots(k),
            None => Rehearsal::Ratio(self.data_ratio),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("scenario has no tasks"));
        }
        match self.kind {
            ScenarioKind::Single if self.tasks.len() != 1 => {
                return Err(Error::invalid("single-step scenario must have exactly one task"))
            }
            ScenarioKind::FewShot if self.shots.is_none() => {
                return Err(Error::invalid("few-shot scenario needs a shot count"))
            }
            ScenarioKind::MissingClass if self.missing.is_empty() => {
                return Err(Error::invalid(
                    "missing-class scenario needs at least one missing class",
                ))
            }
            _ => {}
        }
        if self.shots.is_none() && !(self.data_ratio > 0.0 && self.data_ratio <= MAX_DATA_RATIO) {
            return Err(Error::invalid(format!(
                "data ratio {} outside (0, {MAX_DATA_RATIO}]",
                self.data_ratio
            )));
        }
        if self.shots == Some(0) {
            return Err(Error::invalid("shot count must be positive"));
        }
        let mut seen = BTreeSet::new();
        for (t, classes) in self.tasks.iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::invalid(format!("task {} forgets no classes", t + 1)));
            }
            for &c in classes {
                if c >= num_classes {
                    return Err(Error::invalid(format!("unknown class {c} in task {}", t + 1)));
                }
                if !seen.insert(c) {
                    return Err(Error::invalid(format!(
                        "class {c} is forgotten by more than one task (task {})",
                        t + 1
                    )));
                }
            }
        }
        let mut missing = BTreeSet::new();
        for &c in &self.missing {
            if c >= num_classes {
                return Err(Error::invalid(format!("unknown missing class {c}")));
            }
            if seen.contains(&c) {
                return Err(Error::invalid(format!("missing class {c} is also forgotten")));
            }
            if !missing.insert(c) {
                return Err(Error::invalid(format!("missing class {c} listed twice")));
            }
        }
        if seen.len() + missing.len() >= num_classes {
            return Err(Error::invalid("scenario leaves no retained class with training data"));
        }
        Ok(())
    }
}

/// Materialized data for one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    /// 1-based task index.
    pub task_id: u32,
    pub forget_classes: Vec<usize>,
    /// Classes forgotten by earlier tasks.
    pub old_classes: Vec<usize>,
    /// Classes never forgotten up to and including this task.
    pub remaining_classes: Vec<usize>,
    pub forget: Dataset,
    pub retain: Dataset,
}

#[derive(Clone, Debug)]
pub struct ForgettingScenario {
    pub spec: ScenarioSpec,
    pub num_classes: usize,
    pub seed: u64,
    pub tasks: Vec<TaskData>,
}

impl ForgettingScenario {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn missing(&self) -> &[usize] {
        &self.spec.missing
    }

    /// Classes never forgotten by any task.
    pub fn final_remaining(&self) -> Vec<usize> {
        self.tasks
            .last()
            .map(|t| t.remaining_classes.clone())
            .unwrap_or_default()
    }

    /// Union of the forgotten classes of every task.
    pub fn all_forgotten(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .tasks
            .iter()
            .flat_map(|t| t.forget_classes.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

fn task_rng(seed: u64, task_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (u64::from(task_id) << 40) ^ 0x5eed_da7a)
}

fn take_per_class(train: &Dataset, classes: &[usize], rule: Rehearsal, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut chosen = Vec::new();
    for &c in classes {
        let mut idx = train.class_indices(c);
        if idx.is_empty() {
            continue;
        }
        let k = match rule {
            Rehearsal::Ratio(rho) => ((idx.len() as f64 * rho).round() as usize).max(1),
            Rehearsal::Shots(k) => {
                if k > idx.len() {
                    return Err(Error::invalid(format!(
                        "class {c} has {} training samples, fewer than {k} shots",
                        idx.len()
                    )));
                }
                k
            }
        };
        idx.shuffle(rng);
        idx.truncate(k);
        idx.sort_unstable();
        chosen.extend(idx);
    }
    train.subset(&chosen)
}

/// Materializes `D_f` and `D_r` for every task. `D_r` of task `t` is drawn
/// fresh from all classes not forgotten up to `t`, minus missing classes.
pub fn build_scenario(train: &Dataset, spec: &ScenarioSpec, seed: u64) -> Result<ForgettingScenario> {
    let c = train.num_classes();
    spec.validate(c)?;
    let rule = spec.rehearsal();
    let missing: BTreeSet<usize> = spec.missing.iter().copied().collect();
    let mut forgotten: BTreeSet<usize> = BTreeSet::new();
    let mut tasks = Vec::with_capacity(spec.tasks.len());
    for (t, classes) in spec.tasks.iter().enumerate() {
        let task_id = t as u32 + 1;
        let mut rng = task_rng(seed, task_id);
        let mut forget_classes = classes.clone();
        forget_classes.sort_unstable();
        let old_classes: Vec<usize> = forgotten.iter().copied().collect();
        forgotten.extend(forget_classes.iter().copied());
        let remaining: Vec<usize> = (0..c).filter(|k| !forgotten.contains(k)).collect();
        let rehearsed: Vec<usize> = remaining.iter().copied().filter(|k| !missing.contains(k)).collect();

        let forget = take_per_class(train, &forget_classes, rule, &mut rng)?;
        if forget.is_empty() {
            return Err(Error::invalid(format!(
                "task {task_id}: forgotten classes have no training samples"
            )));
        }
        let retain = take_per_class(train, &rehearsed, rule, &mut rng)?;
        tasks.push(TaskData {
            task_id,
            forget_classes,
            old_classes,
            remaining_classes: remaining,
            forget,
            retain,
        });
    }
    Ok(ForgettingScenario {
        spec: spec.clone(),
        num_classes: c,
        seed,
        tasks,
    })
}

/// Structured-text description of an exported dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub split: Split,
    pub seed: Option<u64>,
    pub classes: Vec<usize>,
    pub features_file: String,
    pub labels_file: String,
}

const DATASET_FORMAT: u32 = 1;

/// Writes `features.f64` (little-endian, row-major), `labels.csv`, and
/// `manifest.json` into `dir`.
pub fn export_dataset(data: &Dataset, dir: &Path, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT,
        samples: data.len(),
        dim: data.dim,
        num_classes: data.num_classes,
        split: data.split,
        seed,
        classes: data.present_classes(),
        features_file: "features.f64".into(),
        labels_file: "labels.csv".into(),
    };
    let bytes: Vec<u8> = data.features.iter().flat_map(|v| v.to_le_bytes()).collect();
    let fpath = dir.join(&manifest.features_file);
    fs::write(&fpath, bytes).map_err(|e| Error::io(&fpath, e))?;

    let lpath = dir.join(&manifest.labels_file);
    let mut csv = String::from("index,label\n");
    for (i, y) in data.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{y}\n"));
    }
    fs::write(&lpath, csv).map_err(|e| Error::io(&lpath, e))?;

    let mpath = dir.join("manifest.json");
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT {
        return Err(Error::format(
            &mpath,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let fpath = dir.join(&manifest.features_file);
    let raw = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    if raw.len() != manifest.samples * manifest.dim * 8 {
        return Err(Error::format(
            &fpath,
            format!(
                "expected {} bytes, found {}",
                manifest.samples * manifest.dim * 8,
                raw.len()
            ),
        ));
    }
    let features = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();

    let lpath = dir.join(&manifest.labels_file);
    let text = fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let mut labels = Vec::with_capacity(manifest.samples);
    for (n, line) in text.lines().enumerate().skip(1) {
        let label = line
            .split(',')
            .nth(1)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::format(&lpath, format!("row {n}: expected `index,label`")))?;
        labels.push(label);
    }
    let data = Dataset::new(features, labels, manifest.dim, manifest.num_classes, manifest.split)
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok((data, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> (Dataset, Dataset) {
        generate_synthetic(&SyntheticSpec::default(), 7).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let (tr, te) = canonical();
        assert_eq!((tr.len(), te.len()), (1600, 400));
        assert!(tr.class_counts().iter().all(|&n| n == 80));
        assert!(te.class_counts().iter().all(|&n| n == 20));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(canonical(), canonical());
        let (other, _) = generate_synthetic(&SyntheticSpec::default(), 8).unwrap();
        assert_ne!(canonical().0, other);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        let spec = SyntheticSpec {
            classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
        let spec = SyntheticSpec {
            n_per_class: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn single_step_ratio() {
        let (tr, _) = canonical();
        let s = build_scenario(&tr, &ScenarioSpec::single((0..5).collect(), 0.1), 3).unwrap();
        let task = &s.tasks[0];
        let counts = task.retain.class_counts();
        assert!(counts[..5].iter().all(|&n| n == 0));
        assert!(counts[5..].iter().all(|&n| n == 8));
        assert!(task.forget.class_counts()[..5].iter().all(|&n| n == 8));
    }

    #[test]
    fn few_shot_is_exact() {
        let (tr, _) = canonical();
        let spec = ScenarioSpec {
            kind: ScenarioKind::FewShot,
            shots: Some(4),
            ..ScenarioSpec::single(vec![0, 1], 0.1)
        };
        let s = build_scenario(&tr, &spec, 1).unwrap();
        let t = &s.tasks[0];
        for counts in [t.forget.class_counts(), t.retain.class_counts()] {
            assert!(counts.iter().all(|&n| n == 0 || n == 4));
        }
        let too_many = ScenarioSpec {
            shots: Some(81),
            ..spec
        };
        assert!(build_scenario(&tr, &too_many, 1).is_err());
    }

    #[test]
    fn missing_classes_absent_from_rehearsal() {
        let (tr, _) = canonical();
        let spec = ScenarioSpec {
            kind: ScenarioKind::MissingClass,
            tasks: vec![vec![0, 1], vec![2, 3]],
            missing: vec![10, 11],
            ..ScenarioSpec::single(vec![], 0.1)
        };
        let s = build_scenario(&tr, &spec, 1).unwrap();
        for t in &s.tasks {
            let counts = t.retain.class_counts();
            assert_eq!((counts[10], counts[11]), (0, 0));
            assert!(t.remaining_classes.contains(&10));
        }
        assert_eq!(s.tasks[1].old_classes, vec![0, 1]);
        assert_eq!(s.tasks[1].retain.class_counts()[0], 0);
    }

    #[test]
    fn scenario_errors() {
        let (tr, _) = canonical();
        let overlap = ScenarioSpec {
            kind: ScenarioKind::Continual,
            tasks: vec![vec![0, 1], vec![1, 2]],
            ..ScenarioSpec::single(vec![], 0.1)
        };
        assert!(build_scenario(&tr, &overlap, 0).is_err());
        assert!(build_scenario(&tr, &ScenarioSpec::single(vec![20], 0.1), 0).is_err());
        assert!(build_scenario(&tr, &ScenarioSpec::single(vec![0], 0.6), 0).is_err());
    }

    #[test]
    fn batch_sampling() {
        let single = Dataset::new(vec![1.0, 2.0], vec![1], 2, 3, Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = sample_batch(&single, 1, &mut rng).unwrap();
        assert_eq!((x.data(), y.as_slice()), (&[1.0, 2.0][..], &[1][..]));

        let (tr, _) = canonical();
        let a = sample_batch(&tr, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&tr, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);

        let empty = tr.filter_classes(&[]);
        assert!(sample_batch(&empty, 1, &mut rng).is_err());
    }

    #[test]
    fn export_roundtrip() {
        let (tr, _) = canonical();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&tr, dir.path(), Some(7)).unwrap();
        let (back, manifest) = import_dataset(dir.path()).unwrap();
        assert_eq!(back, tr);
        assert_eq!(manifest.seed, Some(7));
        assert_eq!(manifest.classes.len(), 20);
    }
}
