//! Synthetic two-modality classification data with controlled missingness.
//!
//! Modality A plays the role of images, modality B of text. Class means are
//! built so that information is split across modalities: classes are paired
//! and each pair shares its A-mean, while the B-means pair classes with a
//! one-step offset. A single modality therefore caps accuracy near 50%, and
//! both together identify the class uniquely, which is the regime where
//! prompt retrieval across missing-modality patterns has something to do.
//!
//! Concretely, with `C` classes, classes `{0,1}, {2,3}, ...` share an A-mean
//! and classes `{1,2}, {3,4}, ..., {C-1,0}` share a B-mean; the pair of group
//! ids is unique per class. Token rows are `mean + sigma * N(0, I)`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Which modality is dropped during training, and for what share of samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScenario {
    /// Text (modality B) missing in an `eta` share of samples.
    MissText,
    /// Image (modality A) missing in an `eta` share of samples.
    MissImage,
    /// Image missing in `floor(eta*N/2)` samples, text in a disjoint
    /// `floor(eta*N/2)`.
    MissBoth,
}

/// Missingness applied to the held-out test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestScenario {
    /// Mirror the training scenario.
    SimTrain,
    MissBoth,
    /// No modality dropped.
    FullModal,
    /// Image dropped from every sample.
    TextOnly,
    /// Text dropped from every sample.
    ImageOnly,
}

impl std::fmt::Display for TrainScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainScenario::MissText => "miss-text",
            TrainScenario::MissImage => "miss-image",
            TrainScenario::MissBoth => "miss-both",
        };
        f.write_str(s)
    }
}

impl std::fmt::Display for TestScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TestScenario::SimTrain => "sim-train",
            TestScenario::MissBoth => "miss-both",
            TestScenario::FullModal => "full-modal",
            TestScenario::TextOnly => "text-only",
            TestScenario::ImageOnly => "image-only",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TrainScenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miss-text" => Ok(TrainScenario::MissText),
            "miss-image" => Ok(TrainScenario::MissImage),
            "miss-both" => Ok(TrainScenario::MissBoth),
            other => Err(Error::Config(format!(
                "unknown train scenario '{other}' (expected miss-text, miss-image, miss-both)"
            ))),
        }
    }
}

impl std::str::FromStr for TestScenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim-train" => Ok(TestScenario::SimTrain),
            "miss-both" => Ok(TestScenario::MissBoth),
            "full-modal" => Ok(TestScenario::FullModal),
            "text-only" => Ok(TestScenario::TextOnly),
            "image-only" => Ok(TestScenario::ImageOnly),
            other => Err(Error::Config(format!(
                "unknown test scenario '{other}' (expected sim-train, miss-both, full-modal, \
                 text-only, image-only)"
            ))),
        }
    }
}

/// One labelled sample. A missing modality keeps its token block (zeroed) so
/// downstream shapes never change; the `present_*` flags are the source of
/// truth for the missing pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens_a: Tensor,
    pub tokens_b: Tensor,
    pub present_a: bool,
    pub present_b: bool,
    pub label: usize,
}

impl Sample {
    /// Invariant: a sample never loses both modalities.
    #[must_use]
    pub fn is_valid(&self) -> bool {
        self.present_a || self.present_b
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
}

/// How training samples are spread across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Partition {
    Uniform,
    /// Label-skewed split: per class, client shares drawn from a symmetric
    /// Dirichlet with the given concentration.
    Dirichlet { alpha: f64 },
}

/// `floor(eta * n)` with a tiny nudge so decimal etas that should land on an
/// integer (0.7 * 2000 = 1400) are not floored one short by binary rounding.
#[must_use]
pub(crate) fn floor_share(eta: f64, n: usize) -> usize {
    (((eta * n as f64) + 1e-9).floor() as usize).min(n)
}

fn unit_mean(d: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let v = Tensor::randn(1, d, 1.0, rng);
        let norm = v.norm();
        if norm > 1e-6 {
            let mut v = v;
            v.scale_in_place(1.0 / norm);
            return v;
        }
    }
}

fn noisy_tokens(mean: &Tensor, t: usize, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let d = mean.cols();
    let mut tokens = Tensor::randn(t, d, sigma, rng);
    for i in 0..t {
        let row = tokens.row_slice_mut(i);
        for (x, m) in row.iter_mut().zip(mean.data()) {
            *x += m;
        }
    }
    tokens
}

/// Generates `c_classes * per_class` complete samples, label-major.
///
/// All randomness comes from `rng`; equal inputs give identical data. The
/// caller is expected to shuffle before splitting into train/test.
pub fn generate(
    c_classes: usize,
    per_class: usize,
    t_a: usize,
    t_b: usize,
    d_raw: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    generate_with_counts(c_classes, &vec![per_class; c_classes], t_a, t_b, d_raw, sigma, rng)
}

/// Generates `counts[label]` complete samples per class, label-major.
///
/// Uneven counts let callers split an overall budget that is not divisible
/// by the class count.
pub fn generate_with_counts(
    c_classes: usize,
    counts: &[usize],
    t_a: usize,
    t_b: usize,
    d_raw: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    if c_classes < 2 {
        return Err(Error::Contract("need at least 2 classes".into()));
    }
    if counts.len() != c_classes || counts.contains(&0) {
        return Err(Error::Contract("every class needs a positive sample count".into()));
    }
    if t_a == 0 || t_b == 0 || d_raw == 0 {
        return Err(Error::Contract("token counts and d_raw must be positive".into()));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Contract(format!("sigma must be finite and >= 0, got {sigma}")));
    }

    let groups = c_classes.div_ceil(2);
    let means_a: Vec<Tensor> = (0..groups).map(|_| unit_mean(d_raw, rng)).collect();
    let means_b: Vec<Tensor> = (0..groups).map(|_| unit_mean(d_raw, rng)).collect();

    let mut samples = Vec::with_capacity(counts.iter().sum());
    for label in 0..c_classes {
        let ga = label / 2;
        let gb = ((label + c_classes - 1) % c_classes) / 2;
        for _ in 0..counts[label] {
            samples.push(Sample {
                tokens_a: noisy_tokens(&means_a[ga], t_a, sigma, rng),
                tokens_b: noisy_tokens(&means_b[gb], t_b, sigma, rng),
                present_a: true,
                present_b: true,
                label,
            });
        }
    }
    Ok(samples)
}

fn drop_a(s: &mut Sample) {
    s.tokens_a = Tensor::zeros(s.tokens_a.rows(), s.tokens_a.cols());
    s.present_a = false;
}

fn drop_b(s: &mut Sample) {
    s.tokens_b = Tensor::zeros(s.tokens_b.rows(), s.tokens_b.cols());
    s.present_b = false;
}

/// Applies a training missing-modality scenario in place.
///
/// Requires fully observed input samples and `eta` in `[0, 1]`. Which samples
/// are hit is decided by a shuffle of `rng`, so the same stream reproduces the
/// same pattern.
pub fn apply_missing(
    samples: &mut [Sample],
    scenario: TrainScenario,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    if samples.iter().any(|s| !(s.present_a && s.present_b)) {
        return Err(Error::Contract(
            "apply_missing requires fully observed samples".into(),
        ));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    match scenario {
        TrainScenario::MissText => {
            for &i in order.iter().take(floor_share(eta, n)) {
                drop_b(&mut samples[i]);
            }
        }
        TrainScenario::MissImage => {
            for &i in order.iter().take(floor_share(eta, n)) {
                drop_a(&mut samples[i]);
            }
        }
        TrainScenario::MissBoth => {
            let half = (((eta * n as f64) / 2.0) + 1e-9).floor() as usize;
            for &i in order.iter().take(half) {
                drop_a(&mut samples[i]);
            }
            for &i in order.iter().skip(half).take(half) {
                drop_b(&mut samples[i]);
            }
        }
    }
    debug_assert!(samples.iter().all(Sample::is_valid));
    Ok(())
}

/// Builds the test set from complete held-out samples.
pub fn make_test(
    mut samples: Vec<Sample>,
    test: TestScenario,
    train: TrainScenario,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    match test {
        TestScenario::SimTrain => apply_missing(&mut samples, train, eta, rng)?,
        TestScenario::MissBoth => apply_missing(&mut samples, TrainScenario::MissBoth, eta, rng)?,
        TestScenario::FullModal => {}
        TestScenario::TextOnly => samples.iter_mut().for_each(drop_a),
        TestScenario::ImageOnly => samples.iter_mut().for_each(drop_b),
    }
    Ok(samples)
}

/// Splits samples across `n_clients`.
///
/// Uniform: a shuffle followed by near-equal contiguous chunks. Dirichlet:
/// per-class client shares drawn from `Dir(alpha)`, resampled (up to a bound)
/// until every client is non-empty.
pub fn partition(
    samples: Vec<Sample>,
    n_clients: usize,
    scheme: Partition,
    rng: &mut impl Rng,
) -> Result<Vec<ClientDataset>> {
    let n = samples.len();
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if n_clients > n {
        return Err(Error::Config(format!(
            "cannot spread {n} samples over {n_clients} clients without empty clients"
        )));
    }

    let owners = match scheme {
        Partition::Uniform => uniform_owners(n, n_clients, rng),
        Partition::Dirichlet { alpha } => dirichlet_owners(&samples, n_clients, alpha, rng)?,
    };

    let mut clients: Vec<ClientDataset> = (0..n_clients)
        .map(|client_id| ClientDataset { client_id, samples: Vec::new() })
        .collect();
    for (sample, owner) in samples.into_iter().zip(owners) {
        clients[owner].samples.push(sample);
    }
    debug_assert!(clients.iter().all(|c| !c.samples.is_empty()));
    Ok(clients)
}

fn uniform_owners(n: usize, n_clients: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / n_clients;
    let extra = n % n_clients;
    let mut owners = vec![0usize; n];
    let mut cursor = 0;
    for client in 0..n_clients {
        let size = base + usize::from(client < extra);
        for &i in &order[cursor..cursor + size] {
            owners[i] = client;
        }
        cursor += size;
    }
    owners
}

fn dirichlet_owners(
    samples: &[Sample],
    n_clients: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if n_clients == 1 {
        return Ok(vec![0; samples.len()]);
    }
    // Symmetric Dirichlet via normalized Gamma(alpha, 1) draws, which keeps
    // the dimension a runtime value.
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet: {e}")))?;
    let draw_shares = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        loop {
            let raw: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
            let sum: f64 = raw.iter().sum();
            if sum.is_finite() && sum > 0.0 {
                return raw.into_iter().map(|v| v / sum).collect();
            }
        }
    };

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }

    const MAX_ATTEMPTS: usize = 200;
    for _ in 0..MAX_ATTEMPTS {
        let mut owners = vec![0usize; samples.len()];
        let mut counts = vec![0usize; n_clients];
        for indices in by_class.values() {
            let mut indices = indices.clone();
            indices.shuffle(rng);
            let shares = draw_shares(rng);
            let split = largest_remainder(&shares, indices.len());
            let mut cursor = 0;
            for (client, &take) in split.iter().enumerate() {
                for &i in &indices[cursor..cursor + take] {
                    owners[i] = client;
                    counts[client] += 1;
                }
                cursor += take;
            }
        }
        if counts.iter().all(|&c| c > 0) {
            return Ok(owners);
        }
    }
    Err(Error::Config(format!(
        "dirichlet(alpha={alpha}) could not produce a non-empty split for {n_clients} clients \
         after {MAX_ATTEMPTS} attempts"
    )))
}

/// Integer apportionment of `total` by `shares`, largest remainders first.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = shares
        .iter()
        .map(|&s| (s * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] * total as f64 - (shares[a] * total as f64).floor();
        let fb = shares[b] * total as f64 - (shares[b] * total as f64).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Reference classifiers over raw token features, used to anchor what the
/// learned models achieve. Features are per-modality token means,
/// concatenated when both modalities are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMode {
    Joint,
    AOnly,
    BOnly,
}

fn raw_feature(s: &Sample, mode: RefMode) -> Vec<f64> {
    let mean_rows = |t: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t.rows() as f64;
        }
        out
    };
    match mode {
        RefMode::Joint => {
            let mut f = mean_rows(&s.tokens_a);
            f.extend(mean_rows(&s.tokens_b));
            f
        }
        RefMode::AOnly => mean_rows(&s.tokens_a),
        RefMode::BOnly => mean_rows(&s.tokens_b),
    }
}

fn mode_observed(s: &Sample, mode: RefMode) -> bool {
    match mode {
        RefMode::Joint => s.present_a && s.present_b,
        RefMode::AOnly => s.present_a,
        RefMode::BOnly => s.present_b,
    }
}

/// Nearest-class-mean accuracy on raw features.
///
/// Fits class means on training samples where the required modalities are
/// observed and scores all test samples. Distance ties go to the lowest
/// class index.
pub fn nearest_mean_accuracy(train: &[Sample], test: &[Sample], mode: RefMode) -> Result<f64> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for s in train.iter().filter(|s| mode_observed(s, mode)) {
        let f = raw_feature(s, mode);
        let entry = sums.entry(s.label).or_insert_with(|| (vec![0.0; f.len()], 0));
        for (a, b) in entry.0.iter_mut().zip(&f) {
            *a += b;
        }
        entry.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Contract(
            "nearest-mean reference has no usable training samples".into(),
        ));
    }
    let means: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(label, (mut sum, count))| {
            for v in &mut sum {
                *v /= count as f64;
            }
            (label, sum)
        })
        .collect();

    if test.is_empty() {
        return Err(Error::Contract("nearest-mean reference needs test samples".into()));
    }
    let mut correct = 0usize;
    for s in test {
        let f = raw_feature(s, mode);
        let mut best = (f64::INFINITY, usize::MAX);
        for (label, mean) in &means {
            let d: f64 = f.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, *label);
            }
        }
        if best.1 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Accuracy of always predicting the most frequent training label.
pub fn majority_class_accuracy(train: &[Sample], test: &[Sample]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("majority reference needs non-empty splits".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in train {
        *counts.entry(s.label).or_default() += 1;
    }
    let majority = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(label, _)| *label)
        .expect("non-empty");
    let hits = test.iter().filter(|s| s.label == majority).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Writes client datasets as CSV: one row per sample with the owning client,
/// label, presence flags, then flattened A and B tokens. Floats use Rust's
/// shortest round-trip formatting, so a reload is bit-exact.
pub fn dump_csv(path: &Path, clients: &[ClientDataset]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (t_a, t_b, d_raw) = clients
        .iter()
        .flat_map(|c| c.samples.first())
        .map(|s| (s.tokens_a.rows(), s.tokens_b.rows(), s.tokens_a.cols()))
        .next()
        .ok_or_else(|| Error::Contract("dump_csv needs at least one sample".into()))?;

    let mut header = String::from("client_id,label,present_a,present_b");
    for i in 0..t_a * d_raw {
        header.push_str(&format!(",a{i}"));
    }
    for i in 0..t_b * d_raw {
        header.push_str(&format!(",b{i}"));
    }
    writeln!(file, "{header}")?;

    for client in clients {
        for s in &client.samples {
            if s.tokens_a.shape() != (t_a, d_raw) || s.tokens_b.shape() != (t_b, d_raw) {
                return Err(Error::Contract("dump_csv requires uniform token shapes".into()));
            }
            let mut row = format!(
                "{},{},{},{}",
                client.client_id,
                s.label,
                u8::from(s.present_a),
                u8::from(s.present_b)
            );
            for v in s.tokens_a.data().iter().chain(s.tokens_b.data()) {
                row.push_str(&format!(",{v}"));
            }
            writeln!(file, "{row}")?;
        }
    }
    Ok(())
}

/// Reads a [`dump_csv`] file back. Client ids must form a contiguous range
/// starting at 0; sample order within a client is preserved.
pub fn load_csv(path: &Path, t_a: usize, t_b: usize, d_raw: usize) -> Result<Vec<ClientDataset>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let expected = 4 + (t_a + t_b) * d_raw;
    let mut by_client: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();

    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            let width = line.split(',').count();
            if width != expected {
                return Err(Error::Contract(format!(
                    "csv has {width} columns, expected {expected} for t_a={t_a}, t_b={t_b}, \
                     d_raw={d_raw}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::Contract(format!(
                "csv line {lineno} has {} fields, expected {expected}",
                fields.len()
            )));
        }
        let parse_int = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Contract(format!("csv line {lineno}: bad {what} '{s}'")))
        };
        let client_id = parse_int(fields[0], "client_id")?;
        let label = parse_int(fields[1], "label")?;
        let present_a = fields[2] == "1";
        let present_b = fields[3] == "1";
        let mut values = Vec::with_capacity(expected - 4);
        for f in &fields[4..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Contract(format!("csv line {lineno}: bad float '{f}'")))?;
            values.push(v);
        }
        let tokens_a = Tensor::new(t_a, d_raw, values[..t_a * d_raw].to_vec())?;
        let tokens_b = Tensor::new(t_b, d_raw, values[t_a * d_raw..].to_vec())?;
        let sample = Sample { tokens_a, tokens_b, present_a, present_b, label };
        if !sample.is_valid() {
            return Err(Error::Contract(format!(
                "csv line {lineno}: sample missing both modalities"
            )));
        }
        by_client.entry(client_id).or_default().push(sample);
    }

    if by_client.keys().enumerate().any(|(i, &k)| i != k) {
        return Err(Error::Contract(format!(
            "client ids must be contiguous from 0, got {:?}",
            by_client.keys().collect::<Vec<_>>()
        )));
    }
    Ok(by_client
        .into_iter()
        .map(|(client_id, samples)| ClientDataset { client_id, samples })
        .collect())
}
