//! Dataset ingestion (IDX), synthetic blob generation, heterogeneous
//! partitioning (IID / Dirichlet / label shards) and target-label
//! allocation for data generation.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::mix_seed;

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// [N x D], values in [0, 1].
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        if self.features.shape().len() == 2 {
            self.features.cols()
        } else {
            0
        }
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    fn empty_like(&self) -> LabeledDataset {
        LabeledDataset {
            features: Tensor::zeros(vec![0, self.dim().max(1)]),
            labels: vec![],
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionKind {
    Iid,
    /// NIID-1: per-class client shares drawn from Dir(beta).
    Dirichlet { beta: f64 },
    /// NIID-2: each client holds shards of only `labels_per_client` labels.
    LabelShards { labels_per_client: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHistogram {
    pub counts: Vec<usize>,
}

impl LabelHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

/// Loads an IDX image/label file pair (big-endian, MNIST layout).
/// Pixels are scaled by 1/255 into [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = read_all(images_path)?;
    let lbl_bytes = read_all(labels_path)?;
    let mut img = &img_bytes[..];
    let mut lbl = &lbl_bytes[..];

    let magic = img
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("truncated image header".into()))?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = img
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("truncated image header".into()))? as usize;
    let rows = img
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("truncated image header".into()))? as usize;
    let cols = img
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("truncated image header".into()))? as usize;
    let dim = rows * cols;
    if img.len() != n * dim {
        return Err(Error::Format(format!(
            "image payload holds {} bytes, expected {}",
            img.len(),
            n * dim
        )));
    }

    let magic = lbl
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("truncated label header".into()))?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let n_labels = lbl
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("truncated label header".into()))? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    if lbl.len() != n {
        return Err(Error::Format("truncated label payload".into()));
    }

    let data: Vec<f64> = img.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    Ok(LabeledDataset {
        features: if n == 0 {
            Tensor::zeros(vec![0, dim.max(1)])
        } else {
            Tensor::new(vec![n, dim], data)?
        },
        labels,
        num_classes,
    })
}

/// Synthetic stand-in dataset: per-class isotropic Gaussian blobs around
/// fixed seeded centers, clamped to [0, 1].
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> LabeledDataset {
    let mut center_rng = ChaCha12Rng::seed_from_u64(mix_seed(&[seed, 0x51]));
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| center_rng.gen_range(0.0..1.0)).collect())
        .collect();
    let mut sample_rng = ChaCha12Rng::seed_from_u64(mix_seed(&[seed, 0x52]));
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                let g: f64 = sample_rng.sample(StandardNormal);
                data.push((mu + spread * g).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    LabeledDataset {
        features: Tensor::new(vec![labels.len(), dim], data).expect("blob shape"),
        labels,
        num_classes,
    }
}

/// Largest-remainder apportionment of `total` units by `weights`.
/// Ties go to the lowest index. All-zero weights yield all-zero counts.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

fn indices_by_class(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    by_class
}

/// Partitions sample indices among clients. Disjoint, conserving, and
/// deterministic per (dataset, spec).
pub fn partition_indices(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if ds.is_empty() {
        return Err(Error::Input("cannot partition an empty dataset".into()));
    }
    if spec.num_clients == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    let k = spec.num_clients;
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[spec.seed, 0x9a]));
    let mut assignment = match &spec.kind {
        PartitionKind::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            even_chunks(&idx, k)
        }
        PartitionKind::Dirichlet { beta } => {
            if *beta <= 0.0 {
                return Err(Error::Config("dirichlet beta must be > 0".into()));
            }
            let gamma = Gamma::new(*beta, 1.0)
                .map_err(|e| Error::Config(format!("dirichlet beta invalid: {e}")))?;
            let mut clients = vec![Vec::new(); k];
            for mut class_idx in indices_by_class(ds) {
                if class_idx.is_empty() {
                    continue;
                }
                class_idx.shuffle(&mut rng);
                let mut shares: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                if shares.iter().sum::<f64>() <= 0.0 {
                    // Degenerate draws under tiny beta: fall back to one-hot.
                    let lucky = rng.gen_range(0..k);
                    shares = (0..k).map(|i| if i == lucky { 1.0 } else { 0.0 }).collect();
                }
                let counts = largest_remainder(&shares, class_idx.len());
                let mut cursor = 0;
                for (client, &c) in counts.iter().enumerate() {
                    clients[client].extend_from_slice(&class_idx[cursor..cursor + c]);
                    cursor += c;
                }
            }
            clients
        }
        PartitionKind::LabelShards { labels_per_client } => {
            niid2_shards(ds, k, *labels_per_client, &mut rng)?
        }
    };

    // Repair empty clients by moving one sample from the largest client.
    loop {
        let Some(empty) = assignment.iter().position(|c| c.is_empty()) else {
            break;
        };
        let largest = (0..k)
            .max_by_key(|&i| assignment[i].len())
            .expect("nonempty client set");
        if assignment[largest].len() <= 1 {
            return Err(Error::Config(format!(
                "cannot give every one of {k} clients a sample from {} total",
                ds.len()
            )));
        }
        let moved = assignment[largest].pop().unwrap();
        assignment[empty].push(moved);
    }
    Ok(assignment)
}

fn even_chunks(idx: &[usize], k: usize) -> Vec<Vec<usize>> {
    let base = idx.len() / k;
    let extra = idx.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut cursor = 0;
    for client in 0..k {
        let take = base + usize::from(client < extra);
        out.push(idx[cursor..cursor + take].to_vec());
        cursor += take;
    }
    out
}

/// FedAvg-style shard dealing: each class is split into equal shards and
/// clients draw `q` shards of distinct labels, greedily from the labels
/// with the most shards left.
fn niid2_shards(
    ds: &LabeledDataset,
    k: usize,
    q: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<usize>>> {
    let c = ds.num_classes;
    if q == 0 || q > c {
        return Err(Error::Config(format!(
            "labels_per_client {q} out of range 1..={c}"
        )));
    }
    let by_class = indices_by_class(ds);
    let class_sizes: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
    let total_shards = k * q;
    let mut shards_per_class = largest_remainder(&class_sizes, total_shards);
    // Every nonempty class must surface in at least one shard.
    for (i, idx) in by_class.iter().enumerate() {
        if !idx.is_empty() && shards_per_class[i] == 0 {
            let donor = (0..c)
                .filter(|&j| shards_per_class[j] > 1)
                .max_by_key(|&j| shards_per_class[j])
                .ok_or_else(|| Error::Config("niid2 shard allocation unservable".into()))?;
            shards_per_class[donor] -= 1;
            shards_per_class[i] += 1;
        }
    }
    for (i, idx) in by_class.iter().enumerate() {
        if shards_per_class[i] > idx.len() {
            return Err(Error::Config(format!(
                "class {i} has {} samples but needs {} shards",
                idx.len(),
                shards_per_class[i]
            )));
        }
    }

    // Deal q distinct labels to each client, most-remaining first.
    let mut remaining = shards_per_class.clone();
    let mut client_order: Vec<usize> = (0..k).collect();
    client_order.shuffle(rng);
    let mut client_labels: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &client in &client_order {
        for _ in 0..q {
            let mut candidates: Vec<usize> = (0..c)
                .filter(|&l| remaining[l] > 0 && !client_labels[client].contains(&l))
                .collect();
            if candidates.is_empty() {
                return Err(Error::Config(
                    "niid2 dealing cannot give every client distinct labels".into(),
                ));
            }
            candidates.shuffle(rng);
            let pick = *candidates
                .iter()
                .max_by_key(|&&l| remaining[l])
                .unwrap();
            remaining[pick] -= 1;
            client_labels[client].push(pick);
        }
    }

    // Split each class into its shards and hand them out in dealing order.
    let mut class_shards: Vec<Vec<Vec<usize>>> = Vec::with_capacity(c);
    for (i, idx) in by_class.iter().enumerate() {
        let n_shards = shards_per_class[i];
        class_shards.push(if n_shards == 0 {
            Vec::new()
        } else {
            even_chunks(idx, n_shards)
        });
    }
    let mut next_shard = vec![0usize; c];
    let mut clients = vec![Vec::new(); k];
    for &client in &client_order {
        for &label in &client_labels[client] {
            let shard = &class_shards[label][next_shard[label]];
            next_shard[label] += 1;
            if shard.is_empty() {
                return Err(Error::Config(format!("empty shard for label {label}")));
            }
            clients[client].extend_from_slice(shard);
        }
    }
    Ok(clients)
}

/// Splits a dataset into per-client datasets according to the spec.
pub fn partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    let indices = partition_indices(ds, spec)?;
    Ok(indices
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                ds.empty_like()
            } else {
                ds.subset(idx)
            }
        })
        .collect())
}

pub fn label_histogram(ds: &LabeledDataset) -> LabelHistogram {
    let mut counts = vec![0usize; ds.num_classes];
    for &label in &ds.labels {
        counts[label] += 1;
    }
    LabelHistogram { counts }
}

/// d_hat = max(d) - d, elementwise.
pub fn complementary_distribution(d: &LabelHistogram) -> LabelHistogram {
    let m = d.counts.iter().copied().max().unwrap_or(0);
    LabelHistogram {
        counts: d.counts.iter().map(|&c| m - c).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelStrategy {
    Uniform,
    Complementary(LabelHistogram),
}

/// Produces exactly `n` target labels in ascending blocks. Uniform gives
/// each label n/num_classes (+1 for the lowest labels); Complementary
/// apportions by the complementary histogram with largest remainder, and
/// falls back to Uniform when the histogram is all zero.
pub fn allocate_target_labels(
    strategy: &LabelStrategy,
    num_classes: usize,
    n: usize,
) -> Vec<usize> {
    assert!(num_classes >= 1 && n >= 1);
    let counts = match strategy {
        LabelStrategy::Uniform => uniform_counts(num_classes, n),
        LabelStrategy::Complementary(d_hat) => {
            if d_hat.total() == 0 {
                uniform_counts(num_classes, n)
            } else {
                let weights: Vec<f64> = d_hat.counts.iter().map(|&c| c as f64).collect();
                largest_remainder(&weights, n)
            }
        }
    };
    let mut labels = Vec::with_capacity(n);
    for (label, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(label).take(count));
    }
    labels
}

fn uniform_counts(num_classes: usize, n: usize) -> Vec<usize> {
    let base = n / num_classes;
    let extra = n % num_classes;
    (0..num_classes)
        .map(|c| base + usize::from(c < extra))
        .collect()
}
