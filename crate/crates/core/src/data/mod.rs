//! Datasets, non-IID partitioning, augmentation, and batch scheduling.
//!
//! A [`Dataset`] is a dense NCHW image tensor plus integer labels. Loaders
//! exist for the CIFAR-10 binary format and for a seeded synthetic
//! Gaussian-template task that trains in seconds. Partitioning across
//! clients uses per-class Dirichlet proportions; batch order for a round is
//! a pure function of (seed, round) so that independently running parties
//! agree on batch indices without communicating them.

use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use std::io::Read;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("invalid partition plan: {0}")]
    BadPlan(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
}

/// Dense image classification dataset: images in NCHW order, one integer
/// label per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Malformed(format!(
                "images must be NCHW, got rank {}",
                shape.len()
            )));
        }
        if shape[0] != labels.len() {
            return Err(DataError::Malformed(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        for &l in &labels {
            if l >= classes {
                return Err(DataError::LabelRange { label: l, classes });
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of one image.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gather a minibatch by index.
    pub fn minibatch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.sample_shape();
        let stride = c * h * w;
        let src = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            out.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), c, h, w], out).expect("minibatch shape"),
            labels,
        )
    }

    /// Row-subset view as an owned dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.minibatch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// Per-channel mean and standard deviation over the whole dataset.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let (c, h, w) = self.sample_shape();
        let n = self.len();
        let per = h * w;
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let data = self.images.data();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * per;
                for &v in &data[base..base + per] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (n * per) as f64;
        let mut m = Vec::with_capacity(c);
        let mut s = Vec::with_capacity(c);
        for ch in 0..c {
            let mu = mean[ch] / count;
            let var = (sq[ch] / count - mu * mu).max(0.0);
            m.push(mu as f32);
            s.push((var.sqrt() as f64).max(1e-6) as f32);
        }
        (m, s)
    }

    /// Normalize in place: (x - mean[c]) / std[c].
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) {
        let (c, h, w) = self.sample_shape();
        assert_eq!(mean.len(), c);
        assert_eq!(std.len(), c);
        let per = h * w;
        let n = self.len();
        let data = self.images.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * per;
                for v in &mut data[base..base + per] {
                    *v = (*v - mean[ch]) / std[ch];
                }
            }
        }
    }
}

// ---- CIFAR-10 binary loader ----

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Load one or more CIFAR-10 binary batch files (the `data_batch_*.bin`
/// layout: a label byte followed by 3072 pixel bytes, channel-planar RGB).
/// Pixels are scaled to [0, 1].
pub fn load_cifar10_bins(paths: &[impl AsRef<Path>]) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    for p in paths {
        std::fs::File::open(p.as_ref())?.read_to_end(&mut bytes)?;
    }
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Malformed(format!(
            "file length {} is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3 * 32 * 32);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(DataError::LabelRange { label, classes: 10 });
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], images)?, labels, 10)
}

// ---- synthetic dataset ----

/// Seeded Gaussian-template classification task.
///
/// Each class has a fixed template image drawn once from `template_seed`;
/// a sample is its class template plus i.i.d. noise of scale `noise`.
/// Train and test splits built with the same `template_seed` but different
/// `sample_seed`s share class structure, so accuracy is meaningful.
pub fn synthetic_dataset(
    n: usize,
    classes: usize,
    channels: usize,
    side: usize,
    noise: f32,
    template_seed: u64,
    sample_seed: u64,
) -> Dataset {
    assert!(classes >= 2 && n >= classes);
    let mut trng = ChaCha8Rng::seed_from_u64(template_seed);
    let per = channels * side * side;
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| trng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    let mut srng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        for &t in &templates[class] {
            images.push(t + noise * srng.gen_range(-1.0f32..1.0));
        }
    }
    Dataset::new(
        Tensor::new(vec![n, channels, side, side], images).expect("synthetic shape"),
        labels,
        classes,
    )
    .expect("synthetic dataset")
}

// ---- partitioning ----

/// Index assignment of one dataset across clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("GKT-PARTITION v1\n");
        for (k, idx) in self.assignments.iter().enumerate() {
            let joined: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!("{k}: {}\n", joined.join(",")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines();
        match lines.next() {
            Some("GKT-PARTITION v1") => {}
            other => {
                return Err(DataError::BadPlan(format!(
                    "bad header {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut assignments = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line
                .split_once(':')
                .ok_or_else(|| DataError::BadPlan(format!("line {}: missing ':'", i + 2)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| DataError::BadPlan(format!("line {}: bad client id", i + 2)))?;
            if id != assignments.len() {
                return Err(DataError::BadPlan(format!(
                    "line {}: client ids must be sequential, got {id}",
                    i + 2
                )));
            }
            let rest = rest.trim();
            let idx: Vec<usize> = if rest.is_empty() {
                Vec::new()
            } else {
                rest.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| DataError::BadPlan(format!("line {}: bad index", i + 2)))
                    })
                    .collect::<Result<_, _>>()?
            };
            assignments.push(idx);
        }
        if assignments.is_empty() {
            return Err(DataError::BadPlan("no clients".into()));
        }
        Ok(PartitionPlan { assignments })
    }
}

/// Partition a labeled dataset across `clients` with per-class Dirichlet
/// proportions of concentration `alpha`. Smaller `alpha` gives more skewed
/// label distributions. Every index lands on exactly one client; per-class
/// counts follow largest-remainder rounding of the sampled proportions.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> PartitionPlan {
    assert!(clients >= 1);
    assert!(alpha > 0.0, "alpha must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).expect("valid gamma");
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..classes {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        if idx.is_empty() {
            continue;
        }
        // Dirichlet draw via normalized Gamma samples.
        let mut draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
        let total: f64 = draws.iter().sum();
        for d in &mut draws {
            *d /= total;
        }
        // Largest-remainder rounding of counts.
        let n = idx.len();
        let exact: Vec<f64> = draws.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut short = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..clients).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &k in &order {
            if short == 0 {
                break;
            }
            counts[k] += 1;
            short -= 1;
        }
        let mut cursor = 0;
        for (k, &cnt) in counts.iter().enumerate() {
            assignments[k].extend_from_slice(&idx[cursor..cursor + cnt]);
            cursor += cnt;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    PartitionPlan { assignments }
}

/// IID split: shuffle once, deal round-robin.
pub fn iid_partition(n: usize, clients: usize, seed: u64) -> PartitionPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (i, v) in idx.into_iter().enumerate() {
        assignments[i % clients].push(v);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    PartitionPlan { assignments }
}

// ---- augmentation ----

/// Standard 32x32 recipe: reflect-pad by 4, random crop back to the
/// original size, horizontal flip with probability one half. Deterministic
/// given the rng. Input and output are full NCHW batches.
pub fn augment_batch(batch: &Tensor, rng: &mut impl Rng) -> Tensor {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = 4usize;
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let src = batch.data();
    let mut out = vec![0f32; src.len()];
    // reflect index into [0, len): pad 4 with len >= 5 needs one fold only
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let j = if i < 0 { -i } else if i >= len { 2 * len - 2 - i } else { i };
        j as usize
    };
    for img in 0..n {
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    // position in padded image, mapped back through the
                    // reflect padding to a source pixel
                    let py = (y + dy) as isize - pad as isize;
                    let px = (x + dx) as isize - pad as isize;
                    debug_assert!(ph >= h && pw >= w);
                    let sy = reflect(py, h);
                    let sx = reflect(px, w);
                    let v = src[base + sy * w + sx];
                    let ox = if flip { w - 1 - x } else { x };
                    out[base + y * w + ox] = v;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("augment shape")
}

// ---- batch scheduling ----

/// Batch order for one round: a seeded shuffle of `0..n` chunked into
/// batches of `batch_size` (last batch may be short). Pure in
/// (n, batch_size, seed, round), so any party can reproduce it.
pub fn round_batches(n: usize, batch_size: usize, seed: u64, round: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_loader_reads_handcrafted_records() {
        // two records: label 3 with all-zero pixels except the first (255),
        // label 9 with all 128s
        let mut bytes = vec![0u8; CIFAR_RECORD * 2];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        for b in &mut bytes[CIFAR_RECORD + 1..] {
            *b = 128;
        }
        let dir = std::env::temp_dir().join("gkt-cifar-fixture");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_bins(&[&path]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert!((ds.images.data()[0] - 1.0).abs() < 1e-6);
        assert!((ds.images.data()[1]).abs() < 1e-6);
        let second = &ds.images.data()[3 * 32 * 32..];
        assert!(second.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn cifar_loader_rejects_bad_length_and_label() {
        let dir = std::env::temp_dir().join("gkt-cifar-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let short = dir.join("short.bin");
        std::fs::write(&short, vec![0u8; 100]).unwrap();
        assert!(matches!(
            load_cifar10_bins(&[&short]),
            Err(DataError::Malformed(_))
        ));
        let badlabel = dir.join("badlabel.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        std::fs::write(&badlabel, &bytes).unwrap();
        assert!(matches!(
            load_cifar10_bins(&[&badlabel]),
            Err(DataError::LabelRange { label: 10, .. })
        ));
        std::fs::remove_file(&short).ok();
        std::fs::remove_file(&badlabel).ok();
    }

    #[test]
    fn synthetic_templates_shared_across_splits() {
        let train = synthetic_dataset(40, 4, 3, 8, 0.0, 7, 1);
        let test = synthetic_dataset(40, 4, 3, 8, 0.0, 7, 2);
        // with zero noise, same-class samples are identical across splits
        assert_eq!(
            &train.images.data()[..3 * 64],
            &test.images.data()[..3 * 64]
        );
        let other = synthetic_dataset(40, 4, 3, 8, 0.0, 8, 1);
        assert_ne!(
            &train.images.data()[..3 * 64],
            &other.images.data()[..3 * 64]
        );
    }

    #[test]
    fn synthetic_labels_cycle_all_classes() {
        let ds = synthetic_dataset(10, 4, 1, 4, 0.1, 0, 0);
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn dirichlet_partition_covers_every_index_once() {
        let labels: Vec<usize> = (0..500).map(|i| i % 10).collect();
        let plan = dirichlet_partition(&labels, 10, 7, 0.5, 42);
        let mut seen = vec![false; 500];
        for a in &plan.assignments {
            for &i in a {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn dirichlet_is_deterministic_and_seed_sensitive() {
        let labels: Vec<usize> = (0..300).map(|i| i % 5).collect();
        let a = dirichlet_partition(&labels, 5, 4, 0.5, 1);
        let b = dirichlet_partition(&labels, 5, 4, 0.5, 1);
        let c = dirichlet_partition(&labels, 5, 4, 0.5, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn small_alpha_is_more_skewed_than_large_alpha() {
        // measure label skew as mean over clients of the max class share
        let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        let skew = |alpha: f64| -> f64 {
            let mut acc = 0.0;
            let trials = 5;
            for seed in 0..trials {
                let plan = dirichlet_partition(&labels, 10, 8, alpha, seed);
                let mut per = 0.0;
                let mut clients = 0.0;
                for a in &plan.assignments {
                    if a.is_empty() {
                        continue;
                    }
                    let mut counts = [0usize; 10];
                    for &i in a {
                        counts[labels[i]] += 1;
                    }
                    per += *counts.iter().max().unwrap() as f64 / a.len() as f64;
                    clients += 1.0;
                }
                acc += per / clients;
            }
            acc / trials as f64
        };
        let tight = skew(100.0);
        let loose = skew(0.1);
        assert!(
            loose > tight + 0.1,
            "alpha 0.1 skew {loose:.3} not above alpha 100 skew {tight:.3}"
        );
    }

    #[test]
    fn partition_plan_text_roundtrip() {
        let plan = PartitionPlan {
            assignments: vec![vec![0, 2, 5], vec![1, 3], vec![], vec![4]],
        };
        let text = plan.to_text();
        assert!(text.starts_with("GKT-PARTITION v1\n"));
        let back = PartitionPlan::from_text(&text).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn partition_plan_rejects_bad_input() {
        assert!(PartitionPlan::from_text("nope").is_err());
        assert!(PartitionPlan::from_text("GKT-PARTITION v1\n1: 0,1\n").is_err());
        assert!(PartitionPlan::from_text("GKT-PARTITION v1\n0: x\n").is_err());
        assert!(PartitionPlan::from_text("GKT-PARTITION v1\n").is_err());
    }

    #[test]
    fn iid_partition_is_balanced() {
        let plan = iid_partition(103, 4, 0);
        let sizes: Vec<usize> = plan.assignments.iter().map(|a| a.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().all(|&s| s == 25 || s == 26));
    }

    #[test]
    fn round_batches_is_a_permutation_and_round_sensitive() {
        let batches = round_batches(10, 3, 1, 0);
        assert_eq!(batches.len(), 4);
        assert_eq!(batches.last().unwrap().len(), 1);
        let mut flat: Vec<usize> = batches.iter().flatten().copied().collect();
        flat.sort_unstable();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
        assert_eq!(round_batches(10, 3, 1, 0), round_batches(10, 3, 1, 0));
        assert_ne!(round_batches(10, 3, 1, 0), round_batches(10, 3, 1, 1));
    }

    #[test]
    fn augment_preserves_shape_and_value_set_without_flip_or_shift() {
        // with a rigged rng the transform can still move pixels, so check
        // invariants instead: shape is preserved and values come from the
        // source image (reflect padding introduces no new values)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Tensor::from_fn(&[2, 1, 8, 8], |i| i as f32);
        let out = augment_batch(&batch, &mut rng);
        assert_eq!(out.shape(), batch.shape());
        for img in 0..2 {
            let src: &[f32] = &batch.data()[img * 64..(img + 1) * 64];
            for &v in &out.data()[img * 64..(img + 1) * 64] {
                assert!(src.contains(&v));
            }
        }
    }

    #[test]
    fn augment_identity_when_crop_is_centered_and_no_flip() {
        // scan seeds for a draw of (dy=4, dx=4, flip=false); that setting
        // must reproduce the input exactly
        let batch = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f32).sin());
        let mut found = false;
        for seed in 0..5000 {
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            let dy = probe.gen_range(0..=8usize);
            let dx = probe.gen_range(0..=8usize);
            let flip = probe.gen_bool(0.5);
            if dy == 4 && dx == 4 && !flip {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let out = augment_batch(&batch, &mut rng);
                assert_eq!(out.data(), batch.data());
                found = true;
                break;
            }
        }
        assert!(found, "no identity draw in seed scan");
    }

    #[test]
    fn channel_stats_and_normalize_oracle() {
        // channel 0: values 1 and 3 -> mean 2, std 1; channel 1: all 5s
        let images = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let mut ds = Dataset::new(images, vec![0, 1], 2).unwrap();
        let (m, s) = ds.channel_stats();
        assert!((m[0] - 2.0).abs() < 1e-6 && (s[0] - 1.0).abs() < 1e-5);
        assert!((m[1] - 5.0).abs() < 1e-6);
        let (m2, s2) = (m.clone(), s.clone());
        ds.normalize(&m2, &s2);
        assert!((ds.images.data()[0] + 1.0).abs() < 1e-5);
        assert!((ds.images.data()[2] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn minibatch_gathers_rows() {
        let ds = synthetic_dataset(6, 3, 2, 2, 0.0, 0, 0);
        let (x, y) = ds.minibatch(&[4, 1]);
        assert_eq!(x.shape(), &[2, 2, 2, 2]);
        assert_eq!(y, vec![ds.labels[4], ds.labels[1]]);
        assert_eq!(&x.data()[..8], &ds.images.data()[4 * 8..5 * 8]);
    }

    #[test]
    fn dataset_rejects_label_out_of_range() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(matches!(
            Dataset::new(images, vec![0, 5], 3),
            Err(DataError::LabelRange { label: 5, classes: 3 })
        ));
    }
}
