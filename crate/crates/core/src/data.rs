//! Multi-domain datasets: synthetic generation with controllable covariate
//! and conditional shift, domain-exclusive client partitioning, and an IDX
//! reader for real digit images.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Error, Result};
use crate::seed::{self, derive_seed, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled samples drawn from a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Position of each sample in its domain's full sample pool.
    pub indices: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Subset by row positions within this dataset.
    pub fn subset(&self, rows: &[usize]) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id,
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        }
    }

    /// Same samples with features flattened to `(n, d)`.
    pub fn flattened(&self) -> DomainDataset {
        DomainDataset {
            features: self.features.flatten(),
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Train and held-out test pools of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// Per-domain feature transform:
/// `x' = R(scale ⊙ x) + translation + class_offsets[y] + noise * N(0, I)`,
/// where `R` rotates each coordinate pair `(0,1), (2,3), ...` by `rotation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation: f64,
    pub scale: Vec<f64>,
    pub translation: Vec<f64>,
    pub class_offsets: Vec<Vec<f64>>,
    pub noise: f64,
}

impl ShiftSpec {
    pub fn identity(dims: usize, classes: usize) -> Self {
        ShiftSpec {
            rotation: 0.0,
            scale: vec![1.0; dims],
            translation: vec![0.0; dims],
            class_offsets: vec![vec![0.0; dims]; classes],
            noise: 0.0,
        }
    }

    /// A random shift whose magnitude grows with `strength`. Domain `index`
    /// is rotated by `index * strength * pi / 4`.
    pub fn random(dims: usize, classes: usize, index: usize, strength: f64, rng: &mut impl Rng) -> Self {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let scale = (0..dims)
            .map(|_| (0.35 * strength * normal()).exp())
            .collect();
        let translation = (0..dims).map(|_| strength * normal()).collect();
        let class_offsets = (0..classes)
            .map(|_| (0..dims).map(|_| 0.75 * strength * normal()).collect())
            .collect();
        ShiftSpec {
            rotation: index as f64 * strength * PI / 4.0,
            scale,
            translation,
            class_offsets,
            noise: 0.25 * strength,
        }
    }

    fn validate(&self, dims: usize, classes: usize) -> Result<()> {
        if self.scale.len() != dims || self.translation.len() != dims {
            return config("shift scale and translation must have one entry per feature");
        }
        if self.class_offsets.len() != classes || self.class_offsets.iter().any(|o| o.len() != dims) {
            return config("shift class_offsets must be classes x dims");
        }
        if self.scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return config("shift scales must be finite and nonzero");
        }
        let finite = self.rotation.is_finite()
            && self.noise.is_finite()
            && self.noise >= 0.0
            && self.translation.iter().all(|v| v.is_finite())
            && self.class_offsets.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return config("shift parameters must be finite, noise nonnegative");
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], label: usize, rng: &mut impl Rng, out: &mut [f64]) {
        for (o, (&v, &s)) in out.iter_mut().zip(x.iter().zip(&self.scale)) {
            *o = v * s;
        }
        let (sin, cos) = self.rotation.sin_cos();
        for pair in out.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = cos * a - sin * b;
            pair[1] = sin * a + cos * b;
        }
        for (d, o) in out.iter_mut().enumerate() {
            *o += self.translation[d] + self.class_offsets[label][d];
            if self.noise > 0.0 {
                *o += self.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Parameters of the synthetic multi-domain benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_domains: usize,
    pub classes: usize,
    pub dims: usize,
    pub samples_per_domain: usize,
    /// Standard deviation of the class means.
    pub class_sep: f64,
    /// Within-class standard deviation before the domain transform.
    pub base_noise: f64,
    pub test_fraction: f64,
    pub shifts: Vec<ShiftSpec>,
    /// Standardize features with pooled train statistics after generation.
    pub standardize: bool,
}

impl SynthSpec {
    /// Domains that differ only by sampling noise.
    pub fn unshifted(num_domains: usize, classes: usize, dims: usize, samples: usize) -> Self {
        SynthSpec {
            num_domains,
            classes,
            dims,
            samples_per_domain: samples,
            class_sep: 1.0,
            base_noise: 1.0,
            test_fraction: 0.2,
            shifts: vec![ShiftSpec::identity(dims, classes); num_domains],
            standardize: false,
        }
    }

    /// Domains with random shifts of the given strength, drawn from `seed`.
    pub fn shifted(
        num_domains: usize,
        classes: usize,
        dims: usize,
        samples: usize,
        strength: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed);
        let shifts = (0..num_domains)
            .map(|j| ShiftSpec::random(dims, classes, j, strength, &mut rng))
            .collect();
        SynthSpec {
            shifts,
            ..Self::unshifted(num_domains, classes, dims, samples)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return config("synthetic data needs at least 2 domains");
        }
        if self.classes < 2 {
            return config("synthetic data needs at least 2 classes");
        }
        if self.dims == 0 {
            return config("synthetic data needs at least one feature");
        }
        if self.shifts.len() != self.num_domains {
            return config("one shift spec per domain is required");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return config("test_fraction must lie in (0, 1)");
        }
        if !(self.class_sep.is_finite() && self.base_noise.is_finite() && self.base_noise >= 0.0) {
            return config("class_sep and base_noise must be finite");
        }
        let per_class = self.samples_per_domain / self.classes;
        let test = (self.test_fraction * per_class as f64).round() as usize;
        if per_class < 2 || test == 0 || test >= per_class {
            return config("too few samples per class for a train/test split");
        }
        for s in &self.shifts {
            s.validate(self.dims, self.classes)?;
        }
        Ok(())
    }
}

/// Generates every domain's train and test pools.
///
/// Class means are shared by all domains; each domain samples fresh points
/// around them and passes them through its own [`ShiftSpec`].
pub fn synth_domains(spec: &SynthSpec, seed: u64) -> Result<Vec<DomainSplit>> {
    spec.validate()?;
    let (k, d, n) = (spec.classes, spec.dims, spec.samples_per_domain);
    let mut mean_rng = seed::rng(derive_seed(seed, &[tag::DATA]));
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| spec.class_sep * mean_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut domains = spec
        .shifts
        .iter()
        .enumerate()
        .map(|(j, shift)| {
            let mut rng = seed::rng(derive_seed(seed, &[tag::DATA, 1 + j as u64]));
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let mut feats = vec![0.0; n * d];
            let mut base = vec![0.0; d];
            for (i, &y) in labels.iter().enumerate() {
                for (b, m) in base.iter_mut().zip(&means[y]) {
                    *b = m + spec.base_noise * rng.sample::<f64, _>(StandardNormal);
                }
                shift.apply(&base, y, &mut rng, &mut feats[i * d..(i + 1) * d]);
            }
            let all = DomainDataset {
                domain_id: j,
                features: Tensor::new(vec![n, d], feats)?,
                labels,
                num_classes: k,
                split: Split::Train,
                indices: (0..n).collect(),
            };
            let mut split_rng = seed::rng(derive_seed(seed, &[tag::SPLIT, j as u64]));
            Ok(split_train_test(&all, spec.test_fraction, &mut split_rng))
        })
        .collect::<Result<Vec<_>>>()?;
    if spec.standardize {
        standardize(&mut domains);
    }
    Ok(domains)
}

/// Applies one shared per-feature affine map to every domain so the pooled
/// train samples have zero mean and unit variance. Differences between
/// domains are preserved.
pub fn standardize(domains: &mut [DomainSplit]) {
    let d = domains[0].train.features.row_len();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for dom in domains.iter() {
        for r in 0..dom.train.len() {
            for (j, &v) in dom.train.features.row(r).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        n += dom.train.len();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let inv_std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = q / n as f64 - m * m;
            if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 }
        })
        .collect();
    for dom in domains.iter_mut() {
        for set in [&mut dom.train, &mut dom.test] {
            for row in set.features.data_mut().chunks_mut(d) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
        }
    }
}

/// Stratified split: each class contributes `round(fraction * count)` samples
/// to the test pool.
pub fn split_train_test(all: &DomainDataset, fraction: f64, rng: &mut impl Rng) -> DomainSplit {
    let mut by_class = vec![Vec::new(); all.num_classes];
    for (r, &y) in all.labels.iter().enumerate() {
        by_class[y].push(r);
    }
    let mut test_rows = Vec::new();
    for rows in &mut by_class {
        rows.shuffle(rng);
        let t = (fraction * rows.len() as f64).round() as usize;
        test_rows.extend_from_slice(&rows[..t]);
    }
    test_rows.sort_unstable();
    let mut is_test = vec![false; all.len()];
    for &r in &test_rows {
        is_test[r] = true;
    }
    let train_rows: Vec<usize> = (0..all.len()).filter(|&r| !is_test[r]).collect();
    let mut test = all.subset(&test_rows);
    test.split = Split::Test;
    let mut train = all.subset(&train_rows);
    train.split = Split::Train;
    DomainSplit { train, test }
}

/// Assigns each client to exactly one domain and gives it a disjoint random
/// `proportion` of that domain's train pool. Every domain gets at least one
/// client; further clients pick uniformly among domains that still have
/// room for another disjoint share. Returned in client order.
pub fn partition_clients(
    pools: &[DomainDataset],
    num_clients: usize,
    proportion: f64,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    let num_domains = pools.len();
    if num_domains == 0 {
        return config("no domains to partition");
    }
    if num_clients < num_domains {
        return config(format!(
            "{num_clients} clients cannot cover {num_domains} domains"
        ));
    }
    if !(proportion > 0.0 && proportion <= 1.0) {
        return config(format!("proportion must lie in (0, 1], got {proportion}"));
    }
    let share: Vec<usize> = pools
        .iter()
        .map(|p| (proportion * p.len() as f64).round() as usize)
        .collect();
    if let Some(j) = share.iter().position(|&s| s == 0) {
        return config(format!("proportion {proportion} leaves domain {j} clients empty"));
    }
    let capacity: Vec<usize> = pools.iter().zip(&share).map(|(p, &s)| p.len() / s).collect();

    let mut rng = seed::rng(derive_seed(seed, &[tag::PARTITION]));
    let mut clients: Vec<usize> = (0..num_clients).collect();
    clients.shuffle(&mut rng);
    let mut domains: Vec<usize> = (0..num_domains).collect();
    domains.shuffle(&mut rng);

    let mut assignment = vec![0usize; num_clients];
    let mut load = vec![0usize; num_domains];
    for (slot, &c) in clients.iter().enumerate() {
        let j = if slot < num_domains {
            domains[slot]
        } else {
            let open: Vec<usize> = (0..num_domains).filter(|&j| load[j] < capacity[j]).collect();
            if open.is_empty() {
                return config(format!(
                    "proportion {proportion} with {num_clients} clients exceeds the domain pools"
                ));
            }
            open[rng.random_range(0..open.len())]
        };
        assignment[c] = j;
        load[j] += 1;
    }

    let mut orders: Vec<Vec<usize>> = pools
        .iter()
        .map(|p| {
            let mut rows: Vec<usize> = (0..p.len()).collect();
            rows.shuffle(&mut rng);
            rows
        })
        .collect();
    let mut taken = vec![0usize; num_domains];
    let mut out = Vec::with_capacity(num_clients);
    for &j in &assignment {
        let start = taken[j];
        taken[j] += share[j];
        let rows = &mut orders[j][start..start + share[j]];
        rows.sort_unstable();
        out.push(pools[j].subset(rows));
    }
    Ok(out)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file and label file already held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<DomainDataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("empty IDX file".into()));
    }
    let pixels = &images[16..];
    if pixels.len() != count * rows * cols {
        return Err(Error::Format(format!(
            "images: expected {} pixel bytes, found {}",
            count * rows * cols,
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != count {
        return Err(Error::Format(format!(
            "labels: expected {count} bytes, found {}",
            label_bytes.len()
        )));
    }
    let features = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(DomainDataset {
        domain_id: 0,
        features: Tensor::new(vec![count, 1, rows, cols], features)?,
        labels,
        num_classes,
        split: Split::Train,
        indices: (0..count).collect(),
    })
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// laid out as `(n, 1, rows, cols)`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DomainDataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Splits externally loaded domains into train/test pools and relabels
/// their domain ids by position.
pub fn split_loaded(domains: Vec<DomainDataset>, fraction: f64, seed: u64) -> Result<Vec<DomainSplit>> {
    if domains.is_empty() {
        return input("no domains given");
    }
    let classes = domains.iter().map(|d| d.num_classes).max().unwrap_or(2);
    Ok(domains
        .into_iter()
        .enumerate()
        .map(|(j, mut d)| {
            d.domain_id = j;
            d.num_classes = classes;
            let mut rng = seed::rng(derive_seed(seed, &[tag::SPLIT, j as u64]));
            split_train_test(&d, fraction, &mut rng)
        })
        .collect())
}
