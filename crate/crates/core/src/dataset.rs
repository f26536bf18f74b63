//! Class-per-directory corpus scanning, the stratified 80:10:10 split and batch loading.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::preprocess::{preprocess_image, PreprocessConfig, RgbImage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub class_id: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices grouped by class id.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes()];
        for (i, e) in self.entries.iter().enumerate() {
            groups[e.class_id].push(i);
        }
        groups
    }

    fn validate(&self) -> Result<()> {
        for pair in self.class_names.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Format(format!(
                    "class names must be sorted and unique ('{}' before '{}')",
                    pair[0], pair[1]
                )));
            }
        }
        for e in &self.entries {
            if self.class_names.get(e.class_id) != Some(&e.class_name) {
                return Err(Error::Format(format!(
                    "entry '{}' has class id {} but name '{}'",
                    e.path, e.class_id, e.class_name
                )));
            }
        }
        Ok(())
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_children(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let item = item.map_err(|e| Error::io(dir, e))?;
        let name = item.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        out.push((name, item.path()));
    }
    out.sort();
    Ok(out)
}

/// Scans `root/<class>/<image>` into a manifest.
///
/// Class directories without any image file are ignored.
pub fn scan_dataset(root: &Path) -> Result<Manifest> {
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for (class_name, dir) in sorted_children(root)? {
        if !dir.is_dir() {
            continue;
        }
        let files: Vec<_> = sorted_children(&dir)?
            .into_iter()
            .filter(|(_, p)| p.is_file() && has_image_extension(p))
            .collect();
        if files.is_empty() {
            continue;
        }
        let class_id = class_names.len();
        for (file, _) in files {
            if file.contains(['\t', '\n', '\r']) || class_name.contains(['\t', '\n', '\r']) {
                return Err(Error::Input(format!(
                    "file name '{class_name}/{file}' contains a tab or newline"
                )));
            }
            entries.push(ManifestEntry {
                path: format!("{class_name}/{file}"),
                class_id,
                class_name: class_name.clone(),
            });
        }
        class_names.push(class_name);
    }
    if entries.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no class directories with png/jpg/jpeg files under {}",
            root.display()
        )));
    }
    Ok(Manifest {
        entries,
        class_names,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Input(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

/// One split tag per manifest entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub tags: Vec<SplitTag>,
    /// Seed that produced the assignment; unknown when read back from disk.
    pub seed: Option<u64>,
}

impl SplitAssignment {
    /// Manifest indices carrying `tag`, in manifest order.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// Per-class train/val/test sizes: `floor(0.8 n)`, `floor(0.1 n)`, remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Seeded stratified split: each class is shuffled, then cut 80:10:10.
pub fn split_dataset(manifest: &Manifest, seed: u64) -> Result<SplitAssignment> {
    let mut tags = vec![SplitTag::Train; manifest.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class_id, mut members) in manifest.by_class().into_iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Stratification {
                class: manifest.class_names[class_id].clone(),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let (train, val, _) = split_counts(members.len());
        for (rank, &i) in members.iter().enumerate() {
            tags[i] = if rank < train {
                SplitTag::Train
            } else if rank < train + val {
                SplitTag::Val
            } else {
                SplitTag::Test
            };
        }
    }
    Ok(SplitAssignment {
        tags,
        seed: Some(seed),
    })
}

/// In-memory images `[N, 3, H, W]` with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 4 || images.outer() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(LabeledSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let item: usize = self.item_shape().iter().product();
        let mut data = Vec::with_capacity(rows.len() * item);
        for &r in rows {
            data.extend_from_slice(self.images.outer_slice(r));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(self.item_shape());
        let images = Tensor::new(shape, data).expect("rows of equal size");
        (images, rows.iter().map(|&r| self.labels[r]).collect())
    }
}

/// Loads entries `indices` (positions within the `tag` subset) through the preprocessing pipeline.
pub fn load_batch(
    manifest: &Manifest,
    split: &SplitAssignment,
    tag: SplitTag,
    indices: &[usize],
    images_root: &Path,
    cfg: &PreprocessConfig,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if split.tags.len() != manifest.len() {
        return Err(Error::Input(format!(
            "split covers {} entries but the manifest has {}",
            split.tags.len(),
            manifest.len()
        )));
    }
    let subset = split.indices(tag);
    let mut chosen = Vec::with_capacity(indices.len());
    for &i in indices {
        let &entry = subset.get(i).ok_or_else(|| {
            Error::Input(format!(
                "index {i} outside the {} entries tagged {tag}",
                subset.len()
            ))
        })?;
        chosen.push(entry);
    }
    if chosen.is_empty() {
        return Ok((Tensor::empty_batch(&[3, cfg.size, cfg.size]), Vec::new()));
    }
    let images = exec::try_map_indexed(chosen.len(), |k| {
        let entry = &manifest.entries[chosen[k]];
        let img = RgbImage::load(&images_root.join(&entry.path))?;
        preprocess_image(&img, cfg)
    })?;
    let labels = chosen.iter().map(|&e| manifest.entries[e].class_id).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Loads every entry tagged `tag` into memory.
pub fn load_split(
    manifest: &Manifest,
    split: &SplitAssignment,
    tag: SplitTag,
    images_root: &Path,
    cfg: &PreprocessConfig,
) -> Result<LabeledSet> {
    let all: Vec<usize> = (0..split.count(tag)).collect();
    let (images, labels) = load_batch(manifest, split, tag, &all, images_root, cfg)?;
    LabeledSet::new(images, labels)
}

const SPLIT_HEADER: &str = "path\tclass_id\tclass_name\tsplit";

/// Manifest plus split as TSV: header row, one row per image, LF endings.
pub fn split_to_tsv(manifest: &Manifest, split: &SplitAssignment) -> Result<String> {
    if split.tags.len() != manifest.len() {
        return Err(Error::Input("split and manifest lengths differ".into()));
    }
    let mut out = String::from(SPLIT_HEADER);
    out.push('\n');
    for (e, tag) in manifest.entries.iter().zip(&split.tags) {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.path, e.class_id, e.class_name, tag));
    }
    Ok(out)
}

pub fn split_from_tsv(text: &str) -> Result<(Manifest, SplitAssignment)> {
    let mut lines = text.lines();
    if lines.next() != Some(SPLIT_HEADER) {
        return Err(Error::Format("manifest TSV header missing or wrong".into()));
    }
    let mut entries = Vec::new();
    let mut tags = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, id, name, tag] = fields[..] else {
            return Err(Error::Format(format!(
                "manifest row {} has {} fields, expected 4",
                n + 2,
                fields.len()
            )));
        };
        let class_id: usize = id
            .parse()
            .map_err(|_| Error::Format(format!("bad class id '{id}' on row {}", n + 2)))?;
        if class_id >= class_names.len() {
            class_names.resize(class_id + 1, String::new());
        }
        if class_names[class_id].is_empty() {
            class_names[class_id] = name.to_string();
        }
        entries.push(ManifestEntry {
            path: path.to_string(),
            class_id,
            class_name: name.to_string(),
        });
        tags.push(tag.parse().map_err(|_| {
            Error::Format(format!("bad split tag '{tag}' on row {}", n + 2))
        })?);
    }
    if class_names.iter().any(String::is_empty) {
        return Err(Error::Format("class ids are not dense".into()));
    }
    let manifest = Manifest {
        entries,
        class_names,
    };
    manifest.validate()?;
    Ok((manifest, SplitAssignment { tags, seed: None }))
}

pub fn write_split_tsv(path: &Path, manifest: &Manifest, split: &SplitAssignment) -> Result<()> {
    fs::write(path, split_to_tsv(manifest, split)?).map_err(|e| Error::io(path, e))
}

pub fn read_split_tsv(path: &Path) -> Result<(Manifest, SplitAssignment)> {
    split_from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
