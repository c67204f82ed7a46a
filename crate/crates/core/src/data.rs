//! Datasets, IDX ingestion, synthetic blobs and node partitions.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::{stream_rng, SimRng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major `m x d` features with integer labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::shape(
                format!("{} features ({} samples x {dim})", labels.len() * dim, labels.len()),
                format!("{} features", features.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if let Some(k) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature in sample {}",
                k / dim
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
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

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.features.chunks_exact(self.dim)
    }

    /// Copy of the listed samples, in the listed order (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(&label) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// Per-feature standardization fitted on one split and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Empty("cannot fit standardizer on an empty dataset".into()));
        }
        let m = ds.len() as f64;
        let mut mean = vec![0.0; ds.dim];
        for row in ds.rows() {
            for (a, x) in mean.iter_mut().zip(row) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; ds.dim];
        for row in ds.rows() {
            for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
        // constant features are only centered
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / m).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim != self.mean.len() {
            return Err(Error::shape(
                format!("feature dim {}", self.mean.len()),
                format!("feature dim {}", ds.dim),
            ));
        }
        let mut out = ds.clone();
        for row in out.features.chunks_exact_mut(ds.dim) {
            for ((x, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - mu) / s;
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// IDX

/// Decoded IDX image file (`u8` pixels, row-major per image).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::IdxTruncated {
            what,
            offset,
            needed: offset + 4,
            available: bytes.len(),
        }),
    }
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0, "header")?;
    if found != expected {
        return Err(Error::IdxBadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4, "header")? as usize;
    let rows = read_u32(bytes, 8, "header")? as usize;
    let cols = read_u32(bytes, 12, "header")? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::InvalidDimension(format!("idx dimensions overflow: {count}x{rows}x{cols}")))?;
    let payload = &bytes[16..];
    if payload.len() < needed {
        return Err(Error::IdxTruncated {
            what: "image payload",
            offset: 16,
            needed: 16 + needed,
            available: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..needed].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4, "header")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::IdxTruncated {
            what: "label payload",
            offset: 8,
            needed: 8 + count,
            available: bytes.len(),
        });
    }
    Ok(payload[..count].to_vec())
}

fn dim_u32(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_be_bytes)
        .map_err(|_| Error::InvalidDimension(format!("{v} does not fit an idx dimension field")))
}

pub fn encode_idx_images(images: &IdxImages) -> Result<Vec<u8>> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::shape(
            format!("{} pixels", images.count * images.rows * images.cols),
            format!("{} pixels", images.pixels.len()),
        ));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&dim_u32(images.count)?);
    out.extend_from_slice(&dim_u32(images.rows)?);
    out.extend_from_slice(&dim_u32(images.cols)?);
    out.extend_from_slice(&images.pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&dim_u32(labels.len())?);
    out.extend_from_slice(labels);
    Ok(out)
}

/// Pixels scaled to `[0, 1]`, no standardization. Class count is inferred
/// from the largest label.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let dim = images.rows * images.cols;
    let features = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&y| usize::from(y)).collect();
    let num_classes = labels.iter().max().map_or(1, |&y| y + 1);
    Dataset::new(features, labels, dim, num_classes)
}

/// Inverse of [`dataset_from_idx`]. Features must be multiples of 1/255 in `[0, 1]`.
pub fn dataset_to_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim {
        return Err(Error::shape(format!("dim {}", ds.dim), format!("{rows}x{cols}")));
    }
    let mut pixels = Vec::with_capacity(ds.features.len());
    for &x in &ds.features {
        let p = (x * 255.0).round();
        if !(0.0..=255.0).contains(&p) || (p / 255.0 - x).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("feature {x} is not an 8-bit pixel intensity")));
        }
        pixels.push(p as u8);
    }
    let labels = ds
        .labels
        .iter()
        .map(|&y| u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} exceeds 255"))))
        .collect::<Result<Vec<u8>>>()?;
    let images = IdxImages {
        count: ds.len(),
        rows,
        cols,
        pixels,
    };
    Ok((encode_idx_images(&images)?, encode_idx_labels(&labels)?))
}

/// Parse an IDX pair into a dataset with pixels in `[0, 1]`.
pub fn load_idx_raw(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    dataset_from_idx(&parse_idx_images(&img)?, &parse_idx_labels(&lab)?)
}

/// [`load_idx_raw`] followed by standardization with the file's own statistics.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let raw = load_idx_raw(images_path, labels_path)?;
    Standardizer::fit(&raw)?.apply(&raw)
}

// ---------------------------------------------------------------------------
// Synthetic blobs

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn check(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::InvalidDimension(format!(
                "synthetic data needs classes >= 2, dim >= 1, per_class >= 1 (got {}, {}, {})",
                self.classes, self.dim, self.per_class
            )));
        }
        if !self.spread.is_finite() || self.spread < 0.0 {
            return Err(Error::InvalidArgument(format!("spread must be finite and >= 0, got {}", self.spread)));
        }
        Ok(())
    }

    /// Unit-norm random direction per class, scaled by `spread`.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(self.seed, Stream::Data, 0);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm * self.spread).collect()
            })
            .collect()
    }

    fn draw(&self, centers: &[Vec<f64>], per_class: usize, rng: &mut SimRng) -> Result<Dataset> {
        let m = self.classes * per_class;
        let mut features = Vec::with_capacity(m * self.dim);
        let mut labels = Vec::with_capacity(m);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                features.extend(center.iter().map(|mu| { let z: f64 = StandardNormal.sample(rng); mu + z }));
                labels.push(c);
            }
        }
        Dataset::new(features, labels, self.dim, self.classes)
    }
}

/// Isotropic unit-variance Gaussian blobs, `per_class` samples per class,
/// class-major order.
pub fn gen_synthetic(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let spec = SyntheticSpec {
        classes,
        dim,
        per_class,
        spread,
        seed,
    };
    spec.check()?;
    spec.draw(&spec.centers(), per_class, &mut stream_rng(seed, Stream::Data, 1))
}

/// Training set identical to [`gen_synthetic`] plus a held-out test set
/// drawn around the same centers from an independent stream.
pub fn gen_synthetic_split(spec: SyntheticSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    spec.check()?;
    if test_per_class == 0 {
        return Err(Error::InvalidDimension("test_per_class must be positive".into()));
    }
    let centers = spec.centers();
    let train = spec.draw(&centers, spec.per_class, &mut stream_rng(spec.seed, Stream::Data, 1))?;
    let test = spec.draw(&centers, test_per_class, &mut stream_rng(spec.seed, Stream::TestData, 0))?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Partitions

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    Iid,
    NonIid,
}

/// Disjoint, equally sized per-node sample index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub mode: PartitionMode,
    pub shards_per_node: usize,
    lists: Vec<Vec<usize>>,
    /// Label-sorted shard ids held by each node (empty in iid mode).
    node_shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn node(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn node_shards(&self, i: usize) -> &[usize] {
        self.node_shards.get(i).map_or(&[], |v| v.as_slice())
    }

    pub fn per_node(&self) -> usize {
        self.lists.first().map_or(0, Vec::len)
    }

    /// All partitioned indices, node by node.
    pub fn union(&self) -> Vec<usize> {
        self.lists.iter().flatten().copied().collect()
    }
}

/// Global shuffle, then `floor(m / nodes)` samples per node.
pub fn partition_iid(ds: &Dataset, nodes: usize, seed: u64) -> Result<Partition> {
    let m = ds.len();
    if nodes == 0 || m < nodes {
        return Err(Error::TooFewSamples(format!("{m} samples cannot cover {nodes} nodes")));
    }
    let mut rng = stream_rng(seed, Stream::Partition, 0);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng);
    let per = m / nodes;
    Ok(Partition {
        mode: PartitionMode::Iid,
        shards_per_node: 1,
        lists: idx.chunks_exact(per).take(nodes).map(<[usize]>::to_vec).collect(),
        node_shards: Vec::new(),
    })
}

/// Label-sorted shards assigned to nodes by a seeded permutation.
pub fn partition_noniid(ds: &Dataset, nodes: usize, shards_per_node: usize, seed: u64) -> Result<Partition> {
    let m = ds.len();
    let total_shards = nodes * shards_per_node;
    if nodes == 0 || shards_per_node == 0 || m < total_shards {
        return Err(Error::TooFewSamples(format!(
            "{m} samples cannot fill {nodes} nodes x {shards_per_node} shards"
        )));
    }
    let mut sorted: Vec<usize> = (0..m).collect();
    sorted.sort_by_key(|&i| ds.labels[i]);
    let shard_size = m / total_shards;

    let mut rng = stream_rng(seed, Stream::Partition, 1);
    let mut order: Vec<usize> = (0..total_shards).collect();
    order.shuffle(&mut rng);

    let node_shards: Vec<Vec<usize>> = order.chunks_exact(shards_per_node).map(<[usize]>::to_vec).collect();
    let lists = node_shards
        .iter()
        .map(|shards| {
            shards
                .iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect()
        })
        .collect();
    Ok(Partition {
        mode: PartitionMode::NonIid,
        shards_per_node,
        lists,
        node_shards,
    })
}

/// `batch_size` distinct positions of node `node`'s list, drawn uniformly.
pub fn sample_batch_indices(part: &Partition, node: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let list = part
        .lists
        .get(node)
        .ok_or_else(|| Error::InvalidArgument(format!("node {node} not in partition of {}", part.nodes())))?;
    if batch_size == 0 || batch_size > list.len() {
        return Err(Error::TooFewSamples(format!(
            "batch size {batch_size} vs node {node} shard of {}",
            list.len()
        )));
    }
    Ok(index::sample(rng, list.len(), batch_size)
        .into_iter()
        .map(|k| list[k])
        .collect())
}

pub fn sample_batch(ds: &Dataset, part: &Partition, node: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Dataset> {
    Ok(ds.subset(&sample_batch_indices(part, node, batch_size, rng)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use std::collections::HashSet;

    fn balanced(classes: usize, per_class: usize) -> Dataset {
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        let features = labels.iter().map(|&y| y as f64).collect();
        Dataset::new(features, labels, 1, classes).unwrap()
    }

    fn image_fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 51, 102, 255, 255, 204, 153, 0]);
        b
    }

    #[test]
    fn parses_hand_built_pair() {
        let labels = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        let ds = dataset_from_idx(&parse_idx_images(&image_fixture()).unwrap(), &parse_idx_labels(&labels).unwrap()).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 4));
        assert_eq!(ds.row(0), &[0.0, 0.2, 0.4, 1.0]);
        assert_eq!(ds.row(1), &[1.0, 0.8, 0.6, 0.0]);
        assert_eq!(ds.labels(), &[7, 3]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        assert!(matches!(
            parse_idx_images(&[0, 0, 8, 3]),
            Err(Error::IdxTruncated { what: "header", offset: 4, .. })
        ));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::IdxTruncated { offset: 0, .. })));
        let mut wrong = image_fixture();
        wrong[3] = 1;
        match parse_idx_images(&wrong) {
            Err(e @ Error::IdxBadMagic { .. }) => assert!(e.to_string().contains("0x00000803")),
            other => panic!("{other:?}"),
        }
        let short = &image_fixture()[..20];
        assert!(matches!(parse_idx_images(short), Err(Error::IdxTruncated { what: "image payload", .. })));
        let img = parse_idx_images(&image_fixture()).unwrap();
        assert!(matches!(
            dataset_from_idx(&img, &[1, 2, 3]),
            Err(Error::IdxCountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let ds = Dataset::new(vec![1.0, 5.0, 3.0, 5.0], vec![0, 1], 2, 2).unwrap();
        let out = Standardizer::fit(&ds).unwrap().apply(&ds).unwrap();
        assert_eq!(out.features(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(3, 4, 25, 2.0, 11).unwrap();
        assert_eq!(a, gen_synthetic(3, 4, 25, 2.0, 11).unwrap());
        assert_eq!(a.class_histogram(), vec![25, 25, 25]);
        let (train, test) = gen_synthetic_split(
            SyntheticSpec { classes: 3, dim: 4, per_class: 25, spread: 2.0, seed: 11 },
            5,
        )
        .unwrap();
        assert_eq!(train, a);
        assert_eq!(test.class_histogram(), vec![5, 5, 5]);
        assert!(gen_synthetic(1, 4, 5, 1.0, 0).is_err());
    }

    #[test]
    fn iid_partition_shapes() {
        let ds = balanced(10, 10);
        let p = partition_iid(&ds, 10, 4).unwrap();
        assert!(p.lists().iter().all(|l| l.len() == 10));
        let all: HashSet<usize> = p.union().into_iter().collect();
        assert_eq!(all.len(), 100);
        let one = partition_iid(&ds, 1, 4).unwrap();
        let mut v = one.node(0).to_vec();
        v.sort();
        assert_eq!(v, (0..100).collect::<Vec<_>>());
        assert!(partition_iid(&ds, 101, 0).is_err());
        // surplus dropped
        let p7 = partition_iid(&ds, 7, 1).unwrap();
        assert!(p7.lists().iter().all(|l| l.len() == 14));
    }

    #[test]
    fn noniid_concentrates_labels() {
        let ds = balanced(10, 100);
        let p = partition_noniid(&ds, 10, 2, 5).unwrap();
        for i in 0..10 {
            let labels: HashSet<usize> = p.node(i).iter().map(|&k| ds.labels()[k]).collect();
            assert!(labels.len() <= 4 && !labels.is_empty());
            assert_eq!(p.node_shards(i).len(), 2);
        }
        assert!(partition_noniid(&ds, 10, 200, 5).is_err());
    }

    #[test]
    fn batches_are_reproducible_subsets() {
        let ds = balanced(4, 10);
        let p = partition_iid(&ds, 4, 2).unwrap();
        let a = sample_batch_indices(&p, 1, 5, &mut rng_from(3)).unwrap();
        assert_eq!(a, sample_batch_indices(&p, 1, 5, &mut rng_from(3)).unwrap());
        assert!(a.iter().all(|k| p.node(1).contains(k)));
        let mut full = sample_batch_indices(&p, 1, 10, &mut rng_from(3)).unwrap();
        full.sort();
        let mut own = p.node(1).to_vec();
        own.sort();
        assert_eq!(full, own);
        assert!(sample_batch_indices(&p, 1, 11, &mut rng_from(3)).is_err());
    }
}
