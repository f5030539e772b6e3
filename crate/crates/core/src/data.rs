//! Datasets and client partitioning.
//!
//! The synthetic task is a Gaussian mixture: one unit-covariance cluster per
//! class, with class means placed at random on a sphere of radius `r`.
//! Partitioning follows the Dirichlet recipe: for each class `k`, draw
//! `p_k ~ Dir_J(α)` and hand client `j` a `p_{k,j}` share of that class's
//! training samples, rounded by largest remainder.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[num_samples, feature_dim]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() < 2 || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature rows", labels.len()),
                actual: format!("{:?}", features.shape()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.row_len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// `(features, labels)` for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.batch(idx)?;
        Dataset::new(features, labels, self.num_classes)
    }

    /// Reshapes each sample to `shape` (e.g. `[C, H, W]` for conv models).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Dataset> {
        if shape.iter().product::<usize>() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", self.feature_dim()),
                actual: format!("sample shape {shape:?}"),
            });
        }
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        let features = Tensor::new(full, self.features.data().to_vec())?;
        Dataset::new(features, self.labels.clone(), self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub radius: f64,
    pub seed: u64,
}

/// Gaussian class clusters with an 80/20 per-class train/test split.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SplitDataset> {
    if spec.num_classes < 2 || spec.samples_per_class < 2 || spec.input_dim == 0 {
        return Err(Error::InvalidArgument(
            "synthetic data needs >=2 classes, >=2 samples per class and a positive dimension"
                .into(),
        ));
    }
    if !(spec.radius.is_finite() && spec.radius >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius {} must be >= 0",
            spec.radius
        )));
    }
    let mut rng = seed::rng(spec.seed, &[]);
    let d = spec.input_dim;
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * spec.radius / norm).collect()
        })
        .collect();

    let n_train = (spec.samples_per_class * 4) / 5;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (k, mean) in means.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let dest = if i < n_train { &mut train } else { &mut test };
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                dest.0.push(m + z);
            }
            dest.1.push(k);
        }
    }
    let build = |(x, y): (Vec<f64>, Vec<usize>)| -> Result<Dataset> {
        Dataset::new(Tensor::new(vec![y.len(), d], x)?, y, spec.num_classes)
    };
    Ok(SplitDataset {
        train: build(train)?,
        test: build(test)?,
    })
}

/// Deterministic train/test split of an imported dataset (per-class 80/20).
pub fn split_dataset(data: &Dataset, seed_value: u64) -> Result<SplitDataset> {
    let mut rng = seed::rng(seed_value, &[seed::TAG_SHUFFLE]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == k).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() * 4) / 5;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitDataset {
        train: data.subset(&train)?,
        test: data.subset(&test)?,
    })
}

/// How client shards were drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    pub kind: PartitionKind,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Plan export format: a JSON list of per-client index arrays.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.clients)?)
    }

    /// True when every index in `0..n` appears in exactly one shard.
    pub fn is_disjoint_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.clients.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Class histogram of each shard.
    pub fn class_histograms(&self, data: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|shard| {
                let mut h = vec![0; data.num_classes];
                for &i in shard {
                    h[data.labels[i]] += 1;
                }
                h
            })
            .collect()
    }
}

/// Splits `n` items in proportions `p` (summing to 1): floors first, then the
/// leftover units go to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(n: usize, p: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&q| q * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

fn sample_dirichlet<R: Rng>(rng: &mut R, alpha: f64, j: usize) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..j).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return None;
    }
    Some(draws.into_iter().map(|g| g / sum).collect())
}

const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Dirichlet non-IID split of `data` over `num_clients` clients.
pub fn partition_dirichlet(
    data: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed_value: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    if data.len() < num_clients {
        return Err(Error::PartitionExhausted {
            attempts: 0,
            reason: format!("{} samples cannot cover {num_clients} clients", data.len()),
        });
    }
    let mut rng = seed::rng(seed_value, &[seed::TAG_PARTITION]);
    let by_class: Vec<Vec<usize>> = (0..data.num_classes)
        .map(|k| (0..data.len()).filter(|&i| data.labels[i] == k).collect())
        .collect();

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut clients = vec![Vec::new(); num_clients];
        let mut ok = true;
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let Some(p) = sample_dirichlet(&mut rng, alpha, num_clients) else {
                ok = false;
                break;
            };
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let counts = largest_remainder(shuffled.len(), &p);
            let mut start = 0;
            for (j, c) in counts.into_iter().enumerate() {
                clients[j].extend_from_slice(&shuffled[start..start + c]);
                start += c;
            }
        }
        if ok && clients.iter().all(|c| !c.is_empty()) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(PartitionPlan {
                clients,
                kind: PartitionKind::Dirichlet { alpha },
                seed: seed_value,
            });
        }
    }
    Err(Error::PartitionExhausted {
        attempts: MAX_PARTITION_ATTEMPTS,
        reason: format!("some client stayed empty with alpha={alpha}, J={num_clients}"),
    })
}

/// Random equal-size shards (sizes differ by at most one).
pub fn partition_iid(data: &Dataset, num_clients: usize, seed_value: u64) -> Result<PartitionPlan> {
    if num_clients == 0 || num_clients > data.len() {
        return Err(Error::InvalidArgument(format!(
            "num_clients must be in 1..={}, got {num_clients}",
            data.len()
        )));
    }
    let mut rng = seed::rng(seed_value, &[seed::TAG_PARTITION]);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let base = data.len() / num_clients;
    let extra = data.len() % num_clients;
    let mut clients = Vec::with_capacity(num_clients);
    let mut start = 0;
    for j in 0..num_clients {
        let size = base + usize::from(j < extra);
        let mut shard = idx[start..start + size].to_vec();
        shard.sort_unstable();
        clients.push(shard);
        start += size;
    }
    Ok(PartitionPlan {
        clients,
        kind: PartitionKind::Iid,
        seed: seed_value,
    })
}

/// Skew statistics of a plan, as printed by `partition-stats`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub num_clients: usize,
    pub min_shard: usize,
    pub max_shard: usize,
    /// Mean over clients of the largest single-class share of the shard.
    pub mean_max_class_share: f64,
    /// Largest `|share_k · K − 1|` over clients and classes.
    pub max_relative_deviation: f64,
    /// Mean over clients of the number of classes present.
    pub mean_classes_present: f64,
}

pub fn partition_stats(plan: &PartitionPlan, data: &Dataset) -> PartitionStats {
    let hists = plan.class_histograms(data);
    let k = data.num_classes as f64;
    let mut max_share_sum = 0.0;
    let mut max_dev: f64 = 0.0;
    let mut present = 0usize;
    for h in &hists {
        let n: usize = h.iter().sum();
        let n = n.max(1) as f64;
        let mut best: f64 = 0.0;
        for &c in h {
            let share = c as f64 / n;
            best = best.max(share);
            max_dev = max_dev.max((share * k - 1.0).abs());
            present += usize::from(c > 0);
        }
        max_share_sum += best;
    }
    let j = hists.len().max(1) as f64;
    PartitionStats {
        num_clients: plan.num_clients(),
        min_shard: plan.clients.iter().map(Vec::len).min().unwrap_or(0),
        max_shard: plan.clients.iter().map(Vec::len).max().unwrap_or(0),
        mean_max_class_share: max_share_sum / j,
        max_relative_deviation: max_dev,
        mean_classes_present: present as f64 / j,
    }
}

const FPDS_MAGIC: &[u8; 4] = b"FPDS";

/// Writes the little-endian `FPDS` dataset format: magic, `u32` sample count,
/// `u32` feature dim, `u32` class count, `f32` features row-major, `u16` labels.
pub fn write_fpds<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    if data.num_classes > u16::MAX as usize + 1 {
        return Err(Error::Codec("too many classes for u16 labels".into()));
    }
    out.write_all(FPDS_MAGIC)?;
    for v in [data.len(), data.feature_dim(), data.num_classes] {
        let v = u32::try_from(v).map_err(|_| Error::Codec(format!("{v} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for &x in data.features.data() {
        out.write_all(&(x as f32).to_le_bytes())?;
    }
    for &l in &data.labels {
        out.write_all(&(l as u16).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_fpds<R: Read>(mut input: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FPDS_MAGIC {
        return Err(Error::Codec(format!("bad magic {magic:?}, expected FPDS")));
    }
    let mut word = [0u8; 4];
    let mut header = [0usize; 3];
    for h in &mut header {
        input.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word) as usize;
    }
    let [n, dim, classes] = header;
    if n == 0 || dim == 0 || classes == 0 {
        return Err(Error::Codec("empty FPDS header field".into()));
    }
    let mut buf = vec![0u8; n * dim * 4];
    input.read_exact(&mut buf)?;
    let features = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut lbuf = vec![0u8; n * 2];
    input.read_exact(&mut lbuf)?;
    let labels = lbuf
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    Dataset::new(Tensor::new(vec![n, dim], features)?, labels, classes)
}

pub fn load_fpds(path: &Path) -> Result<Dataset> {
    read_fpds(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> Dataset {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(x, labels, classes).unwrap()
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec {
            num_classes: 2,
            samples_per_class: 10,
            input_dim: 2,
            radius: 4.0,
            seed: 0,
        };
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a.train.len() + a.test.len(), 20);
        assert_eq!(a.train.class_counts(), vec![8, 8]);
        assert_eq!(a.test.class_counts(), vec![2, 2]);
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_client_gets_everything() {
        let d = toy(3, 10);
        let p = partition_dirichlet(&d, 1, 0.1, 4).unwrap();
        assert_eq!(p.clients[0], (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn iid_even_shards() {
        let d = toy(2, 5);
        let p = partition_iid(&d, 2, 0).unwrap();
        assert_eq!(p.clients[0].len(), 5);
        assert_eq!(p.clients[1].len(), 5);
        assert!(p.is_disjoint_cover(10));
        let p = partition_iid(&d, 3, 0).unwrap();
        let sizes: Vec<usize> = p.clients.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(10, &[0.25, 0.25, 0.5]), vec![3, 2, 5]);
        assert_eq!(largest_remainder(3, &[1.0 / 3.0; 3]), vec![1, 1, 1]);
        assert_eq!(largest_remainder(0, &[0.5, 0.5]), vec![0, 0]);
    }

    #[test]
    fn dirichlet_rejects_bad_args() {
        let d = toy(2, 3);
        assert!(partition_dirichlet(&d, 0, 1.0, 0).is_err());
        assert!(partition_dirichlet(&d, 2, 0.0, 0).is_err());
        assert!(matches!(
            partition_dirichlet(&d, 7, 1.0, 0),
            Err(Error::PartitionExhausted { .. })
        ));
    }

    #[test]
    fn fpds_roundtrip_at_f32() {
        let d = toy(3, 4);
        let mut buf = Vec::new();
        write_fpds(&d, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FPDS");
        assert_eq!(buf.len(), 16 + 12 * 4 + 12 * 2);
        let back = read_fpds(&buf[..]).unwrap();
        assert_eq!(back, d);
        buf[0] = b'X';
        assert!(read_fpds(&buf[..]).is_err());
    }

    #[test]
    fn plan_json_is_list_of_lists() {
        let d = toy(2, 2);
        let p = partition_iid(&d, 2, 1).unwrap();
        let v: Vec<Vec<usize>> = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v, p.clients);
    }
}
