//! Desk-scale models and datasets.
//!
//! Parameters are a flat `Vec<f64>`. For the MLP the layout is
//! `[W1 (hidden x features), b1, W2 (classes x hidden), b2]`, row-major;
//! the logistic model is `[W (classes x features), b]`.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset shape mismatch: {0}")]
    Shape(String),
    #[error("cannot split {n} samples into {parts} equal parts")]
    Indivisible { n: usize, parts: usize },
    #[error("bad IDX file: {0}")]
    Idx(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_features: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if num_features == 0 || num_classes == 0 {
            return Err(DataError::Shape("need at least one feature and class".into()));
        }
        if features.len() != labels.len() * num_features {
            return Err(DataError::Shape(format!(
                "{} feature values for {} samples of width {num_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Shape(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }

    /// Writes `f0,...,f{p-1},label` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.num_features)
            .map(|i| format!("f{i}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            for x in self.row(i) {
                write!(out, "{x},")?;
            }
            writeln!(out, "{}", self.labels[i])?;
        }
        Ok(())
    }
}

/// Gaussian blobs: class means are random unit directions scaled by
/// `separation`, samples add unit-variance noise. Labels are balanced.
pub fn generate_synthetic(
    master_seed: u64,
    n: usize,
    classes: usize,
    features: usize,
    separation: f64,
) -> Dataset {
    let mut rng = seed::rng(master_seed, "synthetic", &[]);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..features)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * separation / norm).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * features);
    for &y in &labels {
        for mu in &means[y] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + noise);
        }
    }
    Dataset::new(data, labels, features, classes).expect("consistent by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    #[default]
    Iid,
    /// Sort by label, cut into `2M` shards, give each client two.
    NonIid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
    pub seed: u64,
}

/// Splits sample indices into equal, disjoint client shards.
pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>, DataError> {
    let n = data.len();
    let m = spec.clients;
    let mut rng = seed::rng(spec.seed, "partition", &[]);
    match spec.mode {
        PartitionMode::Iid => {
            if m == 0 || !n.is_multiple_of(m) || n == 0 {
                return Err(DataError::Indivisible { n, parts: m });
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            Ok(idx.chunks(n / m).map(<[usize]>::to_vec).collect())
        }
        PartitionMode::NonIid => {
            let parts = 2 * m;
            if m == 0 || !n.is_multiple_of(parts) || n == 0 {
                return Err(DataError::Indivisible { n, parts });
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| data.label(i));
            let shards: Vec<&[usize]> = idx.chunks(n / parts).collect();
            let mut order: Vec<usize> = (0..parts).collect();
            order.shuffle(&mut rng);
            Ok(order
                .chunks(2)
                .map(|pair| pair.iter().flat_map(|&s| shards[s].iter().copied()).collect())
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    /// Multinomial logistic regression.
    Logistic { features: usize, classes: usize },
    /// One tanh hidden layer followed by a softmax output.
    Mlp {
        features: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Model {
    pub fn dim(&self) -> usize {
        match *self {
            Model::Logistic { features, classes } => classes * features + classes,
            Model::Mlp {
                features,
                hidden,
                classes,
            } => hidden * features + hidden + classes * hidden + classes,
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            Model::Logistic { features, .. } | Model::Mlp { features, .. } => features,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Model::Logistic { classes, .. } | Model::Mlp { classes, .. } => classes,
        }
    }

    /// Zeros for the logistic model; uniform Glorot weights and zero biases
    /// for the MLP.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match *self {
            Model::Logistic { .. } => vec![0.0; self.dim()],
            Model::Mlp {
                features,
                hidden,
                classes,
            } => {
                let mut w = Vec::with_capacity(self.dim());
                let a1 = (6.0 / (features + hidden) as f64).sqrt();
                w.extend((0..hidden * features).map(|_| rng.random_range(-a1..a1)));
                w.extend(std::iter::repeat_n(0.0, hidden));
                let a2 = (6.0 / (hidden + classes) as f64).sqrt();
                w.extend((0..classes * hidden).map(|_| rng.random_range(-a2..a2)));
                w.extend(std::iter::repeat_n(0.0, classes));
                w
            }
        }
    }

    fn check(&self, w: &[f64], data: &Dataset) {
        assert_eq!(w.len(), self.dim(), "parameter vector has wrong length");
        assert_eq!(data.num_features(), self.features(), "feature width mismatch");
        assert_eq!(data.num_classes(), self.classes(), "class count mismatch");
    }

    /// Output logits and, for the MLP, hidden activations.
    fn forward(&self, w: &[f64], x: &[f64], hidden_out: &mut Vec<f64>, logits: &mut Vec<f64>) {
        hidden_out.clear();
        logits.clear();
        match *self {
            Model::Logistic { features, classes } => {
                let (wm, b) = w.split_at(classes * features);
                for c in 0..classes {
                    logits.push(dot(&wm[c * features..(c + 1) * features], x) + b[c]);
                }
            }
            Model::Mlp {
                features,
                hidden,
                classes,
            } => {
                let (w1, rest) = w.split_at(hidden * features);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                for h in 0..hidden {
                    hidden_out.push((dot(&w1[h * features..(h + 1) * features], x) + b1[h]).tanh());
                }
                for c in 0..classes {
                    logits.push(dot(&w2[c * hidden..(c + 1) * hidden], hidden_out) + b2[c]);
                }
            }
        }
    }

    /// Mean softmax cross-entropy over `indices` and its gradient.
    pub fn loss_and_gradient(&self, w: &[f64], data: &Dataset, indices: &[usize]) -> (f64, Vec<f64>) {
        self.check(w, data);
        assert!(!indices.is_empty(), "empty batch");
        let mut grad = vec![0.0; self.dim()];
        let mut loss = 0.0;
        let (mut hid, mut logits) = (Vec::new(), Vec::new());
        let mut delta_h = Vec::new();
        for &i in indices {
            let x = data.row(i);
            let y = data.label(i);
            self.forward(w, x, &mut hid, &mut logits);
            let lse = log_sum_exp(&logits);
            loss += lse - logits[y];
            let dz: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(c, z)| (z - lse).exp() - f64::from(u8::from(c == y)))
                .collect();
            match *self {
                Model::Logistic { features, classes } => {
                    for c in 0..classes {
                        axpy(&mut grad[c * features..(c + 1) * features], dz[c], x);
                        grad[classes * features + c] += dz[c];
                    }
                }
                Model::Mlp {
                    features,
                    hidden,
                    classes,
                } => {
                    let o_w1 = 0;
                    let o_b1 = hidden * features;
                    let o_w2 = o_b1 + hidden;
                    let o_b2 = o_w2 + classes * hidden;
                    let w2 = &w[o_w2..o_b2];
                    delta_h.clear();
                    delta_h.resize(hidden, 0.0);
                    for c in 0..classes {
                        axpy(&mut grad[o_w2 + c * hidden..o_w2 + (c + 1) * hidden], dz[c], &hid);
                        grad[o_b2 + c] += dz[c];
                        axpy(&mut delta_h, dz[c], &w2[c * hidden..(c + 1) * hidden]);
                    }
                    for h in 0..hidden {
                        let dh = delta_h[h] * (1.0 - hid[h] * hid[h]);
                        axpy(&mut grad[o_w1 + h * features..o_w1 + (h + 1) * features], dh, x);
                        grad[o_b1 + h] += dh;
                    }
                }
            }
        }
        let scale = 1.0 / indices.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, grad)
    }

    pub fn loss(&self, w: &[f64], data: &Dataset) -> f64 {
        self.check(w, data);
        let (mut hid, mut logits) = (Vec::new(), Vec::new());
        let total: f64 = (0..data.len())
            .map(|i| {
                self.forward(w, data.row(i), &mut hid, &mut logits);
                log_sum_exp(&logits) - logits[data.label(i)]
            })
            .sum();
        total / data.len() as f64
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let (mut hid, mut logits) = (Vec::new(), Vec::new());
        self.forward(w, x, &mut hid, &mut logits);
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &z)| if z > best.1 { (c, z) } else { best })
            .0
    }
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn evaluate(model: &Model, w: &[f64], data: &Dataset) -> f64 {
    model.check(w, data);
    if data.is_empty() {
        return 0.0;
    }
    let correct = (0..data.len())
        .filter(|&i| model.predict(w, data.row(i)) == data.label(i))
        .count();
    correct as f64 / data.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A parsed IDX array: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX file with 1 or 3 dimensions.
pub fn read_idx<R: Read>(mut input: R) -> Result<IdxArray, DataError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != 0x08 {
        return Err(DataError::Idx(format!("unsupported magic {magic:02x?}")));
    }
    let ndim = usize::from(magic[3]);
    if ndim != 1 && ndim != 3 {
        return Err(DataError::Idx(format!("expected 1 or 3 dimensions, got {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        dims.push(u32::from_be_bytes(b) as usize);
    }
    let total: usize = dims.iter().product();
    let mut data = vec![0u8; total];
    input
        .read_exact(&mut data)
        .map_err(|_| DataError::Idx(format!("expected {total} data bytes")))?;
    Ok(IdxArray { dims, data })
}

/// Loads an image/label IDX pair, scaling pixels to `[0, 1]`.
pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset, DataError> {
    let img = read_idx(io::BufReader::new(std::fs::File::open(images)?))?;
    let lab = read_idx(io::BufReader::new(std::fs::File::open(labels)?))?;
    if img.dims.len() != 3 || lab.dims.len() != 1 {
        return Err(DataError::Idx("expected a 3-d image file and a 1-d label file".into()));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(DataError::Idx(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let width = img.dims[1] * img.dims[2];
    let features = img.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = lab.data.iter().map(|&b| usize::from(b)).collect();
    Dataset::new(features, labels, width, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> Model {
        Model::Mlp {
            features: 3,
            hidden: 4,
            classes: 3,
        }
    }

    #[test]
    fn dimensions() {
        assert_eq!(Model::Logistic { features: 16, classes: 4 }.dim(), 68);
        assert_eq!(
            Model::Mlp {
                features: 16,
                hidden: 32,
                classes: 4
            }
            .dim(),
            676
        );
    }

    #[test]
    fn zero_weights_give_log_c() {
        let data = generate_synthetic(1, 20, 4, 5, 2.0);
        let model = Model::Logistic { features: 5, classes: 4 };
        let w = vec![0.0; model.dim()];
        let (loss, _) = model.loss_and_gradient(&w, &data, &[0, 1, 2]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((model.loss(&w, &data) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_is_mean_invariant() {
        let data = generate_synthetic(2, 10, 3, 3, 1.0);
        let model = mlp();
        let w = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        let a = model.loss_and_gradient(&w, &data, &[1, 4, 7]);
        let b = model.loss_and_gradient(&w, &data, &[1, 4, 7, 1, 4, 7]);
        assert!((a.0 - b.0).abs() < 1e-14);
        for (x, y) in a.1.iter().zip(&b.1) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = generate_synthetic(3, 12, 3, 3, 1.5);
        let idx: Vec<usize> = (0..12).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for model in [Model::Logistic { features: 3, classes: 3 }, mlp()] {
            let w: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, g) = model.loss_and_gradient(&w, &data, &idx);
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for i in 0..model.dim() {
                let h = 1e-6;
                let mut up = w.clone();
                let mut dn = w.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (model.loss_and_gradient(&up, &data, &idx).0
                    - model.loss_and_gradient(&dn, &data, &idx).0)
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * gmax, "{model:?} coord {i}");
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(9, 40, 4, 6, 3.0);
        assert_eq!(a, generate_synthetic(9, 40, 4, 6, 3.0));
        assert_ne!(a, generate_synthetic(10, 40, 4, 6, 3.0));
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&y| y == c).count(), 10);
        }
    }

    fn train(model: &Model, data: &Dataset, steps: usize, lr: f64) -> Vec<f64> {
        let mut w = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        let idx: Vec<usize> = (0..data.len()).collect();
        for _ in 0..steps {
            let (_, g) = model.loss_and_gradient(&w, data, &idx);
            axpy(&mut w, -lr, &g);
        }
        w
    }

    #[test]
    fn separation_controls_accuracy() {
        let model = Model::Logistic { features: 8, classes: 4 };
        let easy = generate_synthetic(4, 400, 4, 8, 12.0);
        let w = train(&model, &easy, 200, 0.5);
        assert!(evaluate(&model, &w, &easy) > 0.95);

        let train_set = generate_synthetic(5, 400, 4, 8, 0.0);
        let w = train(&model, &train_set, 200, 0.5);
        let test = generate_synthetic(6, 2000, 4, 8, 0.0);
        let acc = evaluate(&model, &w, &test);
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    #[test]
    fn evaluate_by_hand() {
        let model = Model::Logistic { features: 1, classes: 2 };
        // Class 1 iff x > 0.
        let w = vec![-1.0, 1.0, 0.0, 0.0];
        let data = Dataset::new(vec![-2.0, -1.0, 0.5, 3.0, 1.0], vec![0, 1, 1, 1, 0], 1, 2).unwrap();
        assert!((evaluate(&model, &w, &data) - 0.6).abs() < 1e-15);
        let zero = vec![0.0; 4];
        assert!((evaluate(&model, &zero, &data) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn iid_partition_is_exact_cover() {
        let data = generate_synthetic(1, 120, 4, 2, 1.0);
        let spec = PartitionSpec {
            mode: PartitionMode::Iid,
            clients: 6,
            seed: 3,
        };
        let shards = partition(&data, &spec).unwrap();
        assert_eq!(shards.len(), 6);
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
        assert!(shards.iter().all(|s| s.len() == 20));
        assert!(partition(&data, &PartitionSpec { clients: 7, ..spec }).is_err());
    }

    #[test]
    fn non_iid_two_labels_per_client() {
        let data = generate_synthetic(2, 400, 10, 2, 1.0);
        let shards = partition(&data, &PartitionSpec {
            mode: PartitionMode::NonIid,
            clients: 20,
            seed: 1,
        })
        .unwrap();
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        for s in &shards {
            let mut labels: Vec<usize> = s.iter().map(|&i| data.label(i)).collect();
            labels.sort_unstable();
            labels.dedup();
            assert!(labels.len() <= 2);
        }
    }

    #[test]
    fn loss_decomposes_over_partition() {
        let data = generate_synthetic(7, 60, 3, 3, 1.0);
        let model = mlp();
        let w = model.init(&mut ChaCha8Rng::seed_from_u64(2));
        let shards = partition(&data, &PartitionSpec {
            mode: PartitionMode::Iid,
            clients: 5,
            seed: 0,
        })
        .unwrap();
        let weighted: f64 = shards
            .iter()
            .map(|s| model.loss(&w, &data.subset(s)) / 5.0)
            .sum();
        assert!((weighted - model.loss(&w, &data)).abs() < 1e-12);
    }

    #[test]
    fn idx_round_trip() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        bytes.extend([0, 255, 51, 102]);
        let arr = read_idx(&bytes[..]).unwrap();
        assert_eq!(arr.dims, vec![2, 1, 2]);
        assert_eq!(arr.data, vec![0, 255, 51, 102]);
        assert!(read_idx(&[0u8, 0, 9, 3][..]).is_err());
        assert!(read_idx(&bytes[..bytes.len() - 1]).is_err());

        let dir = std::env::temp_dir().join(format!("cellfed-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("img"), &bytes).unwrap();
        std::fs::write(dir.join("lab"), [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let ds = load_idx_dataset(&dir.join("img"), &dir.join("lab"), 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.row(0), &[0.0, 1.0]);
        assert_eq!(ds.labels(), &[1, 0]);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn csv_export() {
        let data = Dataset::new(vec![1.5, -2.0], vec![1], 2, 2).unwrap();
        let mut out = Vec::new();
        data.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "f0,f1,label\n1.5,-2,1\n");
    }

    #[test]
    fn shape_errors() {
        assert!(Dataset::new(vec![1.0], vec![0, 1], 1, 2).is_err());
        assert!(Dataset::new(vec![1.0], vec![3], 1, 2).is_err());
    }
}
