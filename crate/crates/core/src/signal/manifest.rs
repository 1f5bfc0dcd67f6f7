//! Dataset manifests (JSON lines), class lists and fold assignment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One manifest line: `{path, labels, fold}` plus optional auxiliary
/// per-recording features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    /// Directory relative entry paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, class_names: Vec<String>, root: PathBuf) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            class_names,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Data("class list is empty".into()));
        }
        let n = self.class_names.len();
        let mut feat_len = None;
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(&bad) = e.labels.iter().find(|&&l| l >= n) {
                return Err(Error::Data(format!(
                    "entry {i} ({}) has label {bad} but only {n} classes are defined",
                    e.path.display()
                )));
            }
            if let Some(f) = &e.features {
                match feat_len {
                    None => feat_len = Some(f.len()),
                    Some(k) if k != f.len() => {
                        return Err(Error::Data(format!(
                            "entry {i} has {} features, earlier entries have {k}",
                            f.len()
                        )))
                    }
                    _ => {}
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("entry {i} has non-finite features")));
                }
            }
        }
        if feat_len.is_some() && self.entries.iter().any(|e| e.features.is_none()) {
            return Err(Error::Data("features must be given for every entry or none".into()));
        }
        Ok(())
    }

    /// Width of the auxiliary feature vectors, if present.
    pub fn feature_dim(&self) -> Option<usize> {
        self.entries.first().and_then(|e| e.features.as_ref().map(Vec::len))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Number of folds implied by the assigned fold indices.
    pub fn n_folds(&self) -> Option<usize> {
        self.entries.iter().filter_map(|e| e.fold).max().map(|f| f + 1)
    }

    /// Entries whose fold is (`in_fold = true`) or is not in `folds`.
    pub fn select_folds(&self, folds: &[usize], in_fold: bool) -> DatasetManifest {
        let entries = self
            .entries
            .iter()
            .filter(|e| e.fold.is_some_and(|f| folds.contains(&f)) == in_fold)
            .cloned()
            .collect();
        DatasetManifest {
            entries,
            class_names: self.class_names.clone(),
            root: self.root.clone(),
        }
    }

    /// Reads a JSON-lines manifest and its class list. Relative paths in the
    /// manifest resolve against the manifest's directory.
    pub fn load(manifest: &Path, classes: &Path) -> Result<Self> {
        let class_names = read_class_list(classes)?;
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::format(manifest, format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::new(entries, class_names, root).map_err(|e| Error::format(manifest, e.to_string()))
    }

    /// Writes the manifest lines. Entry paths are written as stored.
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(manifest, out).map_err(|e| Error::io(manifest, e))
    }
}

/// One class name per line; order defines label indices.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::format(path, "class list is empty"));
    }
    Ok(names)
}

pub fn write_class_list(names: &[String], path: &Path) -> Result<()> {
    let mut out = names.join("\n");
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Assigns every entry to one of `n_folds` folds, stratified by label set.
///
/// Entries sharing a label set are shuffled and dealt round-robin, with the
/// dealing position carried across label sets so fold sizes differ by at
/// most one.
pub fn split_folds(manifest: &DatasetManifest, n_folds: usize, seed: u64) -> Result<DatasetManifest> {
    if n_folds < 2 {
        return Err(Error::Config(format!("n_folds must be at least 2, got {n_folds}")));
    }
    if manifest.entries.len() < n_folds {
        return Err(Error::Data(format!(
            "{} recordings cannot fill {n_folds} folds",
            manifest.entries.len()
        )));
    }
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let mut key = e.labels.clone();
        key.sort_unstable();
        key.dedup();
        groups.entry(key).or_default().push(i);
    }
    let mut rng = rng::stream(seed, &[]);
    let mut out = manifest.clone();
    let mut next = 0usize;
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            out.entries[i].fold = Some(next % n_folds);
            next += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn manifest(labels: &[Vec<usize>], n_classes: usize) -> DatasetManifest {
        let entries = labels
            .iter()
            .enumerate()
            .map(|(i, l)| ManifestEntry {
                path: format!("r{i}.json").into(),
                labels: l.clone(),
                fold: None,
                features: None,
            })
            .collect();
        DatasetManifest::new(entries, (0..n_classes).map(|c| format!("c{c}")).collect(), PathBuf::new()).unwrap()
    }

    fn fold_sizes(m: &DatasetManifest, k: usize) -> Vec<usize> {
        let mut s = vec![0; k];
        for e in &m.entries {
            s[e.fold.unwrap()] += 1;
        }
        s
    }

    #[test]
    fn hundred_into_ten_folds_of_ten() {
        let m = manifest(&(0..100).map(|i| vec![i % 3]).collect::<Vec<_>>(), 3);
        let s = split_folds(&m, 10, 1).unwrap();
        assert_eq!(fold_sizes(&s, 10), vec![10; 10]);
        assert_eq!(s, split_folds(&m, 10, 1).unwrap());
        assert_ne!(s, split_folds(&m, 10, 2).unwrap());
    }

    #[test]
    fn balanced_classes_stay_balanced_per_fold() {
        let m = manifest(&(0..100).map(|i| vec![i % 2]).collect::<Vec<_>>(), 2);
        let s = split_folds(&m, 5, 9).unwrap();
        for f in 0..5 {
            let members: Vec<_> = s.entries.iter().filter(|e| e.fold == Some(f)).collect();
            let pos = members.iter().filter(|e| e.labels == vec![1]).count();
            let ratio = pos as f64 / members.len() as f64;
            assert!((ratio - 0.5).abs() <= 0.1, "fold {f} ratio {ratio}");
        }
    }

    #[test]
    fn split_errors() {
        let m = manifest(&[vec![0], vec![1]], 2);
        assert!(matches!(split_folds(&m, 3, 0), Err(Error::Data(_))));
        assert!(matches!(split_folds(&m, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let entries = vec![ManifestEntry {
            path: "a.json".into(),
            labels: vec![2],
            fold: None,
            features: None,
        }];
        assert!(DatasetManifest::new(entries, vec!["a".into(), "b".into()], PathBuf::new()).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(&[vec![0], vec![0, 1], vec![]], 2);
        m.entries[1].fold = Some(1);
        for (i, e) in m.entries.iter_mut().enumerate() {
            e.features = Some(vec![i as f64, 0.5]);
        }
        let mp = dir.path().join("manifest.jsonl");
        let cp = dir.path().join("classes.txt");
        m.save(&mp).unwrap();
        write_class_list(&m.class_names, &cp).unwrap();
        let back = DatasetManifest::load(&mp, &cp).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.class_names, m.class_names);
        assert_eq!(back.resolve(&back.entries[0]), dir.path().join("r0.json"));
        assert_eq!(back.feature_dim(), Some(2));

        // Unassigned entries fall outside every fold.
        assert_eq!(back.select_folds(&[1], false).entries.len(), 2);
        assert_eq!(back.select_folds(&[1], true).entries.len(), 1);
    }

    proptest! {
        #[test]
        fn every_entry_gets_one_fold(
            labels in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 10..80),
            k in 2usize..10,
            seed in any::<u64>(),
        ) {
            let m = manifest(&labels, 4);
            let s = split_folds(&m, k, seed).unwrap();
            let sizes = fold_sizes(&s, k);
            prop_assert_eq!(sizes.iter().sum::<usize>(), labels.len());
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            for (a, b) in m.entries.iter().zip(&s.entries) {
                prop_assert_eq!(&a.labels, &b.labels);
            }
        }
    }
}
