//! MNIST loading (native IDX parsing), the evaluation/owner split, and
//! synthetic trigger sets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::IMAGE_PIXELS;
use crate::seeds::derive_seed;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images (row-major 28x28, values in [0, 1]) with class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledImages {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> LabeledImages {
        let n = n.min(self.len());
        LabeledImages {
            images: self.images[..n * IMAGE_PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn concat(mut self, other: &LabeledImages) -> LabeledImages {
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        self
    }
}

/// Locations of the four standard MNIST IDX files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn all_exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.exists())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

fn parse_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, offset as u64, "truncated header"))
}

/// Parses an IDX3 image file into `[0, 1]` floats; returns `(pixels, count)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows != 28 || cols != 28 {
        return Err(parse_err(path, 8, format!("expected 28x28 images, found {rows}x{cols}")));
    }
    let body = &bytes[16..];
    let need = count * IMAGE_PIXELS;
    if body.len() != need {
        return Err(parse_err(
            path,
            16 + body.len().min(need) as u64,
            format!("expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((body.iter().map(|&b| b as f32 / 255.0).collect(), count))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(parse_err(
            path,
            8 + body.len().min(count) as u64,
            format!("expected {count} labels, found {}", body.len()),
        ));
    }
    if let Some(pos) = body.iter().position(|&l| l > 9) {
        return Err(parse_err(path, 8 + pos as u64, format!("label {} out of range", body[pos])));
    }
    Ok(body.iter().map(|&l| l as usize).collect())
}

fn load_pair(images: &Path, labels: &Path) -> Result<LabeledImages> {
    let (pixels, n) = parse_idx_images(&read_file(images)?, images)?;
    let labels_v = parse_idx_labels(&read_file(labels)?, labels)?;
    if labels_v.len() != n {
        return Err(parse_err(labels, 4, format!("{n} images but {} labels", labels_v.len())));
    }
    LabeledImages::new(pixels, labels_v)
}

/// Train and test sets concatenated (70,000 images for full MNIST).
pub fn load_corpus(files: &MnistFiles) -> Result<LabeledImages> {
    let train = load_pair(&files.train_images, &files.train_labels)?;
    let test = load_pair(&files.test_images, &files.test_labels)?;
    Ok(train.concat(&test))
}

#[derive(Clone, Debug)]
pub struct PartitionedData {
    pub eval_set: LabeledImages,
    pub owner_shards: Vec<LabeledImages>,
    pub manifest: PartitionManifest,
}

impl PartitionedData {
    pub fn n_owners(&self) -> usize {
        self.owner_shards.len()
    }

    pub fn train_size(&self) -> usize {
        self.owner_shards.iter().map(LabeledImages::len).sum()
    }

    /// All owner shards concatenated (used by the full-data independent model).
    pub fn pooled_train(&self) -> LabeledImages {
        self.owner_shards
            .iter()
            .fold(LabeledImages::default(), |acc, s| acc.concat(s))
    }
}

/// Indices into the corpus, enough to rebuild a partition exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub seed: u64,
    pub corpus_size: usize,
    pub corpus_fraction: f64,
    pub eval_fraction: f64,
    pub eval_indices: Vec<usize>,
    pub shard_indices: Vec<Vec<usize>>,
}

/// Shuffles the corpus with `seed`, keeps the leading `corpus_fraction` of it
/// (1.0 for the full corpus), reserves `eval_fraction` for evaluation and
/// deals the rest into `n_owners` contiguous shards whose sizes differ by at
/// most one.
pub fn partition(corpus: &LabeledImages, n_owners: usize, eval_fraction: f64, corpus_fraction: f64, seed: u64) -> Result<PartitionedData> {
    if n_owners == 0 {
        return Err(Error::invalid("n_owners", "need at least one owner"));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid("eval_fraction", "must lie in (0, 1)"));
    }
    if !(corpus_fraction > 0.0 && corpus_fraction <= 1.0) {
        return Err(Error::invalid("corpus_fraction", "must lie in (0, 1]"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let kept = ((corpus.len() as f64) * corpus_fraction).round() as usize;
    order.truncate(kept);
    let eval_n = ((kept as f64) * eval_fraction).round() as usize;
    let (eval_idx, train_idx) = order.split_at(eval_n);
    if train_idx.len() < n_owners {
        return Err(Error::invalid("n_owners", format!("only {} training images for {n_owners} owners", train_idx.len())));
    }
    let base = train_idx.len() / n_owners;
    let extra = train_idx.len() % n_owners;
    let mut shard_indices = Vec::with_capacity(n_owners);
    let mut start = 0;
    for j in 0..n_owners {
        let size = base + usize::from(j < extra);
        shard_indices.push(train_idx[start..start + size].to_vec());
        start += size;
    }
    Ok(PartitionedData {
        eval_set: corpus.subset(eval_idx),
        owner_shards: shard_indices.iter().map(|idx| corpus.subset(idx)).collect(),
        manifest: PartitionManifest {
            seed,
            corpus_size: corpus.len(),
            corpus_fraction,
            eval_fraction,
            eval_indices: eval_idx.to_vec(),
            shard_indices,
        },
    })
}

pub fn load_and_partition(files: &MnistFiles, n_owners: usize, eval_fraction: f64, seed: u64) -> Result<PartitionedData> {
    partition(&load_corpus(files)?, n_owners, eval_fraction, 1.0, seed)
}

/// Rebuilds a partition from its manifest.
pub fn apply_manifest(corpus: &LabeledImages, manifest: &PartitionManifest) -> Result<PartitionedData> {
    if corpus.len() != manifest.corpus_size {
        return Err(Error::ShapeMismatch(format!(
            "manifest expects a corpus of {} images, got {}",
            manifest.corpus_size,
            corpus.len()
        )));
    }
    Ok(PartitionedData {
        eval_set: corpus.subset(&manifest.eval_indices),
        owner_shards: manifest.shard_indices.iter().map(|idx| corpus.subset(idx)).collect(),
        manifest: manifest.clone(),
    })
}

/// Uniform-noise trigger images.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSet {
    pub images: Vec<f32>,
    pub shared: bool,
    pub owner: Option<usize>,
    pub seed: u64,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.images.len() / IMAGE_PIXELS
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// Images `start..start+count`, wrapping around the end of the set.
    pub fn cyclic_batch(&self, start: usize, count: usize) -> (Vec<f32>, Vec<usize>) {
        let m = self.len();
        let idx: Vec<usize> = (0..count).map(|k| (start + k) % m).collect();
        let mut images = Vec::with_capacity(count * IMAGE_PIXELS);
        for &i in &idx {
            images.extend_from_slice(self.image(i));
        }
        (images, idx)
    }
}

fn noise_images(m: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m * IMAGE_PIXELS).map(|_| rng.random::<f32>()).collect()
}

/// One shared set `T^m` or, when `shared` is false, one set per owner seeded
/// from independent streams of `seed`.
pub fn generate_triggers(m: usize, shared: bool, n_owners: usize, seed: u64) -> Result<Vec<TriggerSet>> {
    if m == 0 {
        return Err(Error::invalid("m", "need at least one trigger"));
    }
    if shared {
        return Ok(vec![TriggerSet {
            images: noise_images(m, seed),
            shared: true,
            owner: None,
            seed,
        }]);
    }
    Ok((0..n_owners)
        .map(|j| {
            let s = derive_seed(seed, j as u64);
            TriggerSet {
                images: noise_images(m, s),
                shared: false,
                owner: Some(j),
                seed: s,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic(n: usize) -> LabeledImages {
        let images = (0..n * IMAGE_PIXELS).map(|i| ((i / IMAGE_PIXELS) as f32) / n as f32).collect();
        LabeledImages::new(images, (0..n).map(|i| i % 10).collect()).unwrap()
    }

    fn idx_images(n: u32, body: usize) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, 28, 28] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend(std::iter::repeat(255u8).take(body));
        v
    }

    #[test]
    fn parses_idx_and_normalizes() {
        let (px, n) = parse_idx_images(&idx_images(2, 2 * 784), Path::new("a")).unwrap();
        assert_eq!(n, 2);
        assert!(px.iter().all(|&p| p == 1.0));
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 9, 0]);
        assert_eq!(parse_idx_labels(&labels, Path::new("b")).unwrap(), vec![1, 9, 0]);
    }

    #[test]
    fn malformed_idx_reports_offset() {
        match parse_idx_images(&idx_images(2, 700), Path::new("a")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16 + 700),
            other => panic!("{other:?}"),
        }
        let mut bad = idx_images(1, 784);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, Path::new("a")), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&[0, 0], Path::new("a")), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_file_is_reported() {
        let files = MnistFiles::in_dir(Path::new("/definitely/not/here"));
        assert!(matches!(load_corpus(&files), Err(Error::MissingFile(_))));
    }

    #[test]
    fn forty_images_three_owners() {
        let p = partition(&synthetic(40), 3, 0.25, 1.0, 2).unwrap();
        assert_eq!(p.eval_set.len(), 10);
        let sizes: Vec<usize> = p.owner_shards.iter().map(LabeledImages::len).collect();
        assert_eq!(sizes, vec![10, 10, 10]);
    }

    #[test]
    fn single_owner_takes_all_training_images() {
        let p = partition(&synthetic(41), 1, 0.25, 1.0, 0).unwrap();
        assert_eq!(p.owner_shards[0].len(), 41 - p.eval_set.len());
    }

    #[test]
    fn manifest_rebuilds_partition() {
        let corpus = synthetic(57);
        let p = partition(&corpus, 4, 0.3, 0.8, 9).unwrap();
        let q = apply_manifest(&corpus, &p.manifest).unwrap();
        assert_eq!(p.eval_set, q.eval_set);
        assert_eq!(p.owner_shards, q.owner_shards);
        let json = serde_json::to_string(&p.manifest).unwrap();
        let back: PartitionManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p.manifest);
    }

    #[test]
    fn invalid_partition_parameters() {
        let corpus = synthetic(10);
        assert!(partition(&corpus, 0, 0.25, 1.0, 0).is_err());
        assert!(partition(&corpus, 2, 1.0, 1.0, 0).is_err());
        assert!(partition(&corpus, 20, 0.25, 1.0, 0).is_err());
    }

    #[test]
    fn single_trigger_in_range() {
        let t = generate_triggers(1, true, 5, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 1);
        assert!(t[0].images.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(generate_triggers(0, true, 1, 0).is_err());
    }

    #[test]
    fn cyclic_batches_wrap() {
        let t = &generate_triggers(5, true, 1, 3).unwrap()[0];
        let (imgs, idx) = t.cyclic_batch(4, 3);
        assert_eq!(idx, vec![4, 0, 1]);
        assert_eq!(&imgs[IMAGE_PIXELS..2 * IMAGE_PIXELS], t.image(0));
    }
}
