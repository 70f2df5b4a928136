//! Dataset ingestion and pair construction.
//!
//! Datasets live on disk as `<root>/<split>/<class_name>/<file>.png`.
//! Class ids follow the lexicographic order of the class directory
//! names, and files are read in lexicographic order, so the sample
//! sequence is a pure function of `(root, split)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::degrade::{self, DegradationSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Restrict to the given classes and relabel them contiguously.
    pub fn subset(&self, classes: &[usize]) -> Dataset {
        let relabel: BTreeMap<usize, usize> =
            classes.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let samples = self
            .samples
            .iter()
            .filter(|s| relabel.contains_key(&s.label))
            .map(|s| Sample {
                image: s.image.clone(),
                label: relabel[&s.label],
                path: s.path.clone(),
            })
            .collect();
        let class_names = classes
            .iter()
            .map(|&c| self.class_names[c].clone())
            .collect();
        Dataset {
            samples,
            class_names,
            split: self.split,
        }
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Decode one image file to a 3-channel `[0,1]` tensor.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::DecodeError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    Image::from_rgb8(decoded.width() as usize, decoded.height() as usize, decoded.as_raw())
}

/// Load a directory-per-class dataset. Every image decodes to 3 channels
/// in `[0,1]`; sample order is deterministic given `(root, split)`.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::NotFound(split_dir));
    }
    let class_dirs = sorted_entries(&split_dir, true)?;
    if class_dirs.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no class directories under {}",
            split_dir.display()
        )));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();

    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let entries = sorted_entries(dir, false)?;
        if entries.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "class directory {} holds no images",
                dir.display()
            )));
        }
        files.extend(entries.into_iter().map(|p| (p, label)));
    }

    // Decoding is pure per file; the output order is fixed by the sorted
    // listing regardless of worker count.
    let decoded = par::map_indexed(files.len(), |i| load_image(&files[i].0));
    let mut samples = Vec::with_capacity(files.len());
    for ((path, label), image) in files.into_iter().zip(decoded) {
        samples.push(Sample {
            image: image?,
            label,
            path,
        });
    }
    Ok(Dataset {
        samples,
        class_names,
        split,
    })
}

/// Ordered class list, written next to a dataset as `classes.json`.
pub fn save_classes_json(dir: &Path, class_names: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let body = serde_json::to_string_pretty(class_names)?;
    fs::write(dir.join("classes.json"), body + "\n")?;
    Ok(())
}

pub fn load_classes_json(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("classes.json");
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// A degraded-input / clean-target training pair.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub input: Image,
    pub target: Image,
    pub label: usize,
}

/// Build training pairs: the target is the original image, the input is
/// the degraded image. Per-sample RNG streams derive from
/// `(seed, sample index)`, so the realization of each pair does not
/// depend on batch size, worker count or iteration order.
pub fn make_pairs(
    dataset: &Dataset,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let results = par::map_indexed(dataset.samples.len(), |i| {
        let sample = &dataset.samples[i];
        let mut stream = rng::stream(seed, i as u64);
        degrade::apply(spec, &sample.image, &mut stream).map(|input| PairedSample {
            input,
            target: sample.image.clone(),
            label: sample.label,
        })
    });
    results.into_iter().collect()
}

/// A disjoint halving of the class set, plus relabeling maps to
/// contiguous per-split ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSplit {
    pub split_a: Vec<usize>,
    pub split_b: Vec<usize>,
    pub seed: u64,
}

impl ClassSplit {
    pub fn relabel_a(&self) -> BTreeMap<usize, usize> {
        self.split_a
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect()
    }

    pub fn relabel_b(&self) -> BTreeMap<usize, usize> {
        self.split_b
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect()
    }
}

/// Deterministically shuffle the class ids by `seed` and split them in
/// half (first half -> A). Requires at least two classes.
pub fn split_classes(dataset: &Dataset, seed: u64) -> Result<ClassSplit> {
    let n = dataset.num_classes();
    if n < 2 {
        return Err(Error::InvalidSplit(format!(
            "need at least 2 classes, dataset has {n}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream(rng::derive(seed, "class_split"), 0);
    ids.shuffle(&mut shuffle_rng);
    let half = n / 2;
    let mut split_a = ids[..half].to_vec();
    let mut split_b = ids[half..].to_vec();
    split_a.sort_unstable();
    split_b.sort_unstable();
    Ok(ClassSplit {
        split_a,
        split_b,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthSpec};
    use tempfile::TempDir;

    fn toy_root(classes: usize, train: usize, val: usize) -> TempDir {
        let dir = TempDir::new().unwrap();
        synth::generate(
            dir.path(),
            &SynthSpec {
                classes,
                train_per_class: train,
                val_per_class: val,
                size: 16,
                seed: 5,
            },
        )
        .unwrap();
        dir
    }

    #[test]
    fn load_counts_and_labels() {
        let root = toy_root(2, 3, 2);
        let train = load_dataset(root.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(train.labels(), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(train.num_classes(), 2);
        let val = load_dataset(root.path(), Split::Val).unwrap();
        assert_eq!(val.len(), 4);
        for s in &train.samples {
            assert_eq!(s.image.c, 3);
            assert!(s.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn missing_root_is_not_found() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent-dataset"), Split::Train),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn empty_split_dir_is_invalid() {
        let dir = TempDir::new().unwrap();
        fs::create_dir_all(dir.path().join("train")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Split::Train),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn empty_class_dir_is_invalid() {
        let root = toy_root(2, 2, 1);
        fs::create_dir_all(root.path().join("train/zzz_empty")).unwrap();
        assert!(matches!(
            load_dataset(root.path(), Split::Train),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn undecodable_file_names_the_culprit() {
        let root = toy_root(2, 2, 1);
        let bad = root.path().join("train").join("class_00").join("zz_bad.png");
        fs::write(&bad, b"not a png").unwrap();
        match load_dataset(root.path(), Split::Train) {
            Err(Error::DecodeError { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected DecodeError, got {other:?}"),
        }
    }

    #[test]
    fn loading_twice_gives_identical_order() {
        let root = toy_root(3, 2, 1);
        let a = load_dataset(root.path(), Split::Train).unwrap();
        let b = load_dataset(root.path(), Split::Train).unwrap();
        let paths_a: Vec<_> = a.samples.iter().map(|s| s.path.clone()).collect();
        let paths_b: Vec<_> = b.samples.iter().map(|s| s.path.clone()).collect();
        assert_eq!(paths_a, paths_b);
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn pairs_preserve_labels_and_are_deterministic() {
        let root = toy_root(2, 3, 1);
        let ds = load_dataset(root.path(), Split::Train).unwrap();
        let spec = DegradationSpec::gaussian_noise();
        let p1 = make_pairs(&ds, &spec, 9).unwrap();
        let p2 = make_pairs(&ds, &spec, 9).unwrap();
        assert_eq!(p1.len(), ds.len());
        for ((a, b), s) in p1.iter().zip(p2.iter()).zip(ds.samples.iter()) {
            assert_eq!(a.label, s.label);
            assert_eq!(a.input, b.input);
            assert_eq!(a.target, s.image);
        }
        let p3 = make_pairs(&ds, &spec, 10).unwrap();
        assert!(p1.iter().zip(p3.iter()).any(|(a, b)| a.input != b.input));
    }

    #[test]
    fn zero_sigma_pairs_are_identity() {
        let root = toy_root(2, 2, 1);
        let ds = load_dataset(root.path(), Split::Train).unwrap();
        let pairs = make_pairs(&ds, &DegradationSpec::GaussianNoise { sigma: 0.0 }, 0).unwrap();
        for p in &pairs {
            assert_eq!(p.input, p.target);
        }
    }

    #[test]
    fn sr_pairs_shrink_inputs() {
        let root = toy_root(2, 2, 1);
        let ds = load_dataset(root.path(), Split::Train).unwrap();
        let pairs = make_pairs(&ds, &DegradationSpec::super_resolution(), 0).unwrap();
        for p in &pairs {
            assert_eq!((p.input.h, p.input.w), (p.target.h / 4, p.target.w / 4));
        }
    }

    #[test]
    fn sr_pairs_reject_indivisible_images() {
        let dir = TempDir::new().unwrap();
        let class = dir.path().join("train/c0");
        fs::create_dir_all(&class).unwrap();
        let img = Image::constant(3, 18, 18, 0.5);
        crate::synth::save_png(&class.join("a.png"), &img).unwrap();
        let ds = load_dataset(dir.path(), Split::Train).unwrap();
        assert!(matches!(
            make_pairs(&ds, &DegradationSpec::super_resolution(), 0),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn class_split_disjoint_covering_deterministic() {
        let root = toy_root(10, 1, 1);
        let ds = load_dataset(root.path(), Split::Train).unwrap();
        for seed in 0..5 {
            let s1 = split_classes(&ds, seed).unwrap();
            let s2 = split_classes(&ds, seed).unwrap();
            assert_eq!(s1.split_a, s2.split_a);
            assert_eq!(s1.split_b, s2.split_b);
            assert_eq!(s1.split_a.len(), 5);
            assert_eq!(s1.split_b.len(), 5);
            let mut all: Vec<usize> = s1.split_a.iter().chain(s1.split_b.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        // Different seeds give different splits at least once.
        let base = split_classes(&ds, 0).unwrap();
        assert!((1..6).any(|s| split_classes(&ds, s).unwrap().split_a != base.split_a));
    }

    #[test]
    fn class_split_two_classes() {
        let root = toy_root(2, 1, 1);
        let ds = load_dataset(root.path(), Split::Train).unwrap();
        let s = split_classes(&ds, 3).unwrap();
        assert_eq!(s.split_a.len(), 1);
        assert_eq!(s.split_b.len(), 1);
        assert_ne!(s.split_a[0], s.split_b[0]);
    }

    #[test]
    fn class_split_needs_two_classes() {
        let root = toy_root(2, 2, 1);
        let ds = load_dataset(root.path(), Split::Train).unwrap();
        let single = ds.subset(&[0]);
        assert!(matches!(
            split_classes(&single, 0),
            Err(Error::InvalidSplit(_))
        ));
    }

    #[test]
    fn subset_relabels_contiguously() {
        let root = toy_root(4, 2, 1);
        let ds = load_dataset(root.path(), Split::Train).unwrap();
        let sub = ds.subset(&[1, 3]);
        assert_eq!(sub.num_classes(), 2);
        assert_eq!(sub.len(), 4);
        assert!(sub.samples.iter().all(|s| s.label < 2));
        assert_eq!(sub.class_names[0], ds.class_names[1]);
        assert_eq!(sub.class_names[1], ds.class_names[3]);
    }

    #[test]
    fn classes_json_roundtrip() {
        let dir = TempDir::new().unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        save_classes_json(dir.path(), &names).unwrap();
        assert_eq!(load_classes_json(dir.path()).unwrap(), names);
    }
}
