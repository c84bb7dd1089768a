//! Synthetic early-prediction task.
//!
//! Classes come in pairs that share a cluster prototype trajectory. Before
//! the divergence frame the two classes of a cluster differ only by a small
//! constant offset of norm `epsilon`, confined to a cluster-specific 2-D
//! feature subspace, with opposite sign for the two classes. From the
//! divergence frame on, each class ramps into its own large smooth
//! deviation. Every sample additionally carries a smooth per-sample
//! nuisance trajectory and i.i.d. Gaussian frame noise, which is what makes
//! the early offset hard (but not impossible) to read.
//!
//! Partial observations expose the first `i * T / N` frames. Networks see
//! them zero-padded to `T` frames together with a binary mask.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputKind;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: usize,
    pub frames: usize,
    pub segments: usize,
    pub features: usize,
    /// Norm of each class's early offset.
    pub epsilon: f64,
    /// Per-frame i.i.d. noise standard deviation.
    pub sigma: f64,
    /// First frame at which paired classes diverge.
    pub divergence_frame: usize,
    /// Amplitude of the late class-specific deviation.
    pub divergence_scale: f64,
    /// Amplitude of the smooth per-sample nuisance trajectory.
    pub nuisance: f64,
    /// Spacing between spline knots of the prototypes, in frames.
    pub knot_spacing: usize,
    /// When set, this share of the training split comes from cluster 0
    /// and the rest is spread evenly over the other clusters.
    pub dominant_cluster_share: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            frames: 40,
            segments: 10,
            features: 12,
            epsilon: 0.25,
            sigma: 0.1,
            divergence_frame: 24,
            divergence_scale: 1.5,
            nuisance: 0.3,
            knot_spacing: 5,
            dominant_cluster_share: None,
            train_size: 2048,
            val_size: 256,
            test_size: 1024,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn clusters(&self) -> usize {
        self.classes / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes % 2 != 0 {
            return Err(Error::config("classes", format!("must be even and at least 2, got {}", self.classes)));
        }
        if self.segments == 0 || self.frames == 0 || self.frames % self.segments != 0 {
            return Err(Error::config(
                "segments",
                format!("frames ({}) must be a positive multiple of segments ({})", self.frames, self.segments),
            ));
        }
        if self.features < 2 {
            return Err(Error::config("features", "need at least two features for the offset subspace"));
        }
        if self.divergence_frame > self.frames {
            return Err(Error::config("divergence_frame", "must not exceed frames"));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("sigma", self.sigma),
            ("divergence_scale", self.divergence_scale),
            ("nuisance", self.nuisance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if self.knot_spacing == 0 {
            return Err(Error::config("knot_spacing", "must be positive"));
        }
        if let Some(s) = self.dominant_cluster_share {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config("dominant_cluster_share", "must lie in [0, 1]"));
            }
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("train_size", "train and test splits must be nonempty"));
        }
        Ok(())
    }

    pub fn segment_frames(&self) -> usize {
        self.frames / self.segments
    }
}

/// One labelled sequence; `frames` is `T x F` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<f64>,
    pub label: usize,
}

impl SequenceSample {
    pub fn cluster(&self) -> usize {
        self.label / 2
    }
}

/// The first `observation_frame` frames of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSequence<'a> {
    pub frames: &'a [f64],
    pub observation_frame: usize,
    pub source_frames: usize,
    pub features: usize,
}

impl PartialSequence<'_> {
    pub fn ratio(&self) -> f64 {
        self.observation_frame as f64 / self.source_frames as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub frames: usize,
    pub segments: usize,
    pub features: usize,
    pub divergence_frame: usize,
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SequenceSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// First `i * T / N` frames of `sample`, for `1 <= i <= N`.
    pub fn make_partial<'a>(&self, sample: &'a SequenceSample, segment: usize) -> Result<PartialSequence<'a>> {
        make_partial(sample, segment, self.frames, self.segments, self.features)
    }

    /// Network input for `samples` observed up to the given segments.
    pub fn input_batch(&self, kind: InputKind, samples: &[&SequenceSample], segments: &[usize]) -> Result<Tensor> {
        if samples.is_empty() || samples.len() != segments.len() {
            return Err(Error::Invalid("input batch needs one segment index per sample".into()));
        }
        let partials = samples
            .iter()
            .zip(segments)
            .map(|(s, &i)| self.make_partial(s, i))
            .collect::<Result<Vec<_>>>()?;
        input_tensor(kind, &partials)
    }
}

pub fn make_partial(sample: &SequenceSample, segment: usize, frames: usize, segments: usize, features: usize) -> Result<PartialSequence<'_>> {
    if segment == 0 || segment > segments {
        return Err(Error::Invalid(format!("segment index {segment} outside 1..={segments}")));
    }
    let tau = segment * frames / segments;
    Ok(PartialSequence {
        frames: &sample.frames[..tau * features],
        observation_frame: tau,
        source_frames: frames,
        features,
    })
}

/// Zero-pads partials to full length and appends the observation mask.
pub fn input_tensor(kind: InputKind, partials: &[PartialSequence<'_>]) -> Result<Tensor> {
    let first = partials
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (t, f) = (first.source_frames, first.features);
    if partials.iter().any(|p| p.source_frames != t || p.features != f) {
        return Err(Error::Invalid("partials of different lengths in one batch".into()));
    }
    if partials.iter().any(|p| p.observation_frame == 0) {
        return Err(Error::Invalid("empty partial sequence".into()));
    }
    let b = partials.len();
    Ok(match kind {
        InputKind::Sequence1d => {
            let c = f + 1;
            let mut data = vec![0.0; b * c * t];
            for (n, p) in partials.iter().enumerate() {
                let base = n * c * t;
                for step in 0..p.observation_frame {
                    for feat in 0..f {
                        data[base + feat * t + step] = p.frames[step * f + feat];
                    }
                    data[base + f * t + step] = 1.0;
                }
            }
            Tensor::new(vec![b, c, t], data)?
        }
        InputKind::Grid2d => {
            let mut data = vec![0.0; b * 2 * t * f];
            for (n, p) in partials.iter().enumerate() {
                let base = n * 2 * t * f;
                let obs = p.observation_frame * f;
                data[base..base + obs].copy_from_slice(p.frames);
                data[base + t * f..base + t * f + obs].fill(1.0);
            }
            Tensor::new(vec![b, 2, t, f], data)?
        }
    })
}

/// Uniform cubic (Catmull-Rom) interpolation of `knots` at `len` points
/// spread over the knot span.
fn spline(knots: &[f64], len: usize) -> Vec<f64> {
    let n = knots.len();
    let at = |i: isize| knots[i.clamp(0, n as isize - 1) as usize];
    (0..len)
        .map(|t| {
            if n == 1 {
                return knots[0];
            }
            let x = t as f64 * (n - 1) as f64 / (len.max(2) - 1) as f64;
            let i = (x.floor() as isize).min(n as isize - 2);
            let u = x - i as f64;
            let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
            0.5 * (2.0 * p1
                + (-p0 + p2) * u
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u)
        })
        .collect()
}

/// `len x features` smooth random trajectory with unit-variance knots.
fn smooth_trajectory(rng: &mut Rng, len: usize, features: usize, spacing: usize) -> Vec<f64> {
    let knots = len.div_ceil(spacing) + 1;
    let mut out = vec![0.0; len * features];
    for f in 0..features {
        let k: Vec<f64> = (0..knots).map(|_| rng::normal(rng, 1.0)).collect();
        for (t, v) in spline(&k, len).into_iter().enumerate() {
            out[t * features + f] = v;
        }
    }
    out
}

/// Row-major `T x K` matrix mapping the nuisance knots of one feature to
/// its trajectory. Knots are i.i.d. standard normal, so the nuisance of a
/// feature has covariance `nuisance^2 * A * A^T`.
pub fn nuisance_basis(spec: &TaskSpec) -> Vec<Vec<f64>> {
    let t = spec.frames;
    let knots = t.div_ceil(2 * spec.knot_spacing) + 1;
    let columns: Vec<Vec<f64>> = (0..knots)
        .map(|k| {
            let mut e = vec![0.0; knots];
            e[k] = 1.0;
            spline(&e, t)
        })
        .collect();
    (0..t).map(|row| columns.iter().map(|c| c[row]).collect()).collect()
}

/// Per-class noiseless mean trajectories, `[class][T x F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: Vec<Vec<f64>>,
}

/// Class mean trajectories implied by `spec` (noise and nuisance excluded).
pub fn class_means(spec: &TaskSpec) -> Result<ClassMeans> {
    spec.validate()?;
    let (t, f) = (spec.frames, spec.features);
    let mut r = rng::stream(spec.seed, 10);
    let mut means = Vec::with_capacity(spec.classes);
    for _ in 0..spec.clusters() {
        let proto = smooth_trajectory(&mut r, t, f, spec.knot_spacing);
        // orthonormal pair spanning the offset subspace
        let mut u: Vec<f64> = (0..f).map(|_| rng::normal(&mut r, 1.0)).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= un);
        let mut v: Vec<f64> = (0..f).map(|_| rng::normal(&mut r, 1.0)).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= vn);
        let theta = r.random::<f64>() * std::f64::consts::TAU;
        let offset: Vec<f64> = (0..f)
            .map(|i| spec.epsilon * (theta.cos() * u[i] + theta.sin() * v[i]))
            .collect();
        for sign in [1.0, -1.0] {
            let late = smooth_trajectory(&mut r, t, f, spec.knot_spacing);
            let mut m = proto.clone();
            for step in 0..t {
                let ramp = if step < spec.divergence_frame {
                    0.0
                } else {
                    (((step - spec.divergence_frame) as f64 + 1.0) / 4.0).min(1.0)
                };
                for i in 0..f {
                    m[step * f + i] += sign * offset[i] + ramp * spec.divergence_scale * late[step * f + i];
                }
            }
            means.push(m);
        }
    }
    Ok(ClassMeans { means })
}

fn draw_split(spec: &TaskSpec, means: &ClassMeans, size: usize, stream: u64, skewed: bool) -> Vec<SequenceSample> {
    let mut r = rng::stream(spec.seed, stream);
    let (t, f) = (spec.frames, spec.features);
    let g = spec.clusters();
    (0..size)
        .map(|_| {
            let cluster = match spec.dominant_cluster_share {
                Some(share) if skewed && g > 1 => {
                    if r.random::<f64>() < share {
                        0
                    } else {
                        1 + r.random_range(0..g - 1)
                    }
                }
                _ => r.random_range(0..g),
            };
            let label = 2 * cluster + r.random_range(0..2);
            let nuisance = smooth_trajectory(&mut r, t, f, 2 * spec.knot_spacing);
            let frames = means.means[label]
                .iter()
                .zip(&nuisance)
                .map(|(m, n)| m + spec.nuisance * n + rng::normal(&mut r, spec.sigma))
                .collect();
            SequenceSample { frames, label }
        })
        .collect()
}

/// Deterministic dataset for `spec`. Only the training split is skewed.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    let means = class_means(spec)?;
    Ok(Dataset {
        classes: spec.classes,
        frames: spec.frames,
        segments: spec.segments,
        features: spec.features,
        divergence_frame: spec.divergence_frame,
        train: draw_split(spec, &means, spec.train_size, 11, true),
        val: draw_split(spec, &means, spec.val_size, 12, false),
        test: draw_split(spec, &means, spec.test_size, 13, false),
    })
}

/// Sample indices and observed segment counts for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub segments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub train: Batch,
    /// Present when the stream was built with disjoint pairs.
    pub val: Option<Batch>,
}

/// Endless stream of training batches over a split of `len` samples.
///
/// The training batch and its observation ratios come from their own
/// streams; the validation batch (drawn from the complement) uses a third,
/// so enabling pairs never changes the training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStream {
    pub len: usize,
    pub batch_size: usize,
    pub segments: usize,
    pub disjoint_pairs: bool,
    pub batch_rng: Rng,
    pub ratio_rng: Rng,
    pub val_rng: Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, segments: usize, seed: u64, disjoint_pairs: bool) -> Result<Self> {
        let needed = if disjoint_pairs { 2 * batch_size } else { batch_size };
        if batch_size == 0 || len < needed {
            return Err(Error::Invalid(format!(
                "split of {len} samples cannot provide {} batch(es) of {batch_size}",
                if disjoint_pairs { 2 } else { 1 }
            )));
        }
        Ok(Self {
            len,
            batch_size,
            segments,
            disjoint_pairs,
            batch_rng: rng::stream(rng::derive(seed, 0x3000), 0),
            ratio_rng: rng::stream(rng::derive(seed, 0x3000), 1),
            val_rng: rng::stream(rng::derive(seed, 0x3000), 2),
        })
    }

    pub fn next_pair(&mut self) -> BatchPair {
        let mut indices = sample(&mut self.batch_rng, self.len, self.batch_size).into_vec();
        indices.sort_unstable();
        let segments = (0..self.batch_size).map(|_| self.ratio_rng.random_range(1..=self.segments)).collect();
        let train = Batch { indices, segments };
        let val = self.disjoint_pairs.then(|| {
            let mut taken = vec![false; self.len];
            for &i in &train.indices {
                taken[i] = true;
            }
            let rest: Vec<usize> = (0..self.len).filter(|&i| !taken[i]).collect();
            let mut picked: Vec<usize> = sample(&mut self.val_rng, rest.len(), self.batch_size)
                .into_iter()
                .map(|k| rest[k])
                .collect();
            picked.sort_unstable();
            let segments = (0..self.batch_size).map(|_| self.val_rng.random_range(1..=self.segments)).collect();
            Batch { indices: picked, segments }
        });
        BatchPair { train, val }
    }
}

impl Iterator for BatchStream {
    type Item = BatchPair;

    fn next(&mut self) -> Option<BatchPair> {
        Some(self.next_pair())
    }
}

const DATA_MAGIC: &[u8; 4] = b"ERA1";
const DATA_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        what: "dataset",
        detail: format!("{v} does not fit in 32 bits"),
    })?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Writes the `ERA1` container.
///
/// Layout (all integers `u32` little-endian): magic, version, classes,
/// frames, segments, features, divergence frame, train/val/test counts;
/// then every sample of train, val and test in order as `T * F` `f64` LE
/// values (row-major, frame by frame) followed by its `u32` label.
pub fn export_dataset(data: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(DATA_MAGIC)?;
    put_u32(w, DATA_VERSION as usize)?;
    for v in [data.classes, data.frames, data.segments, data.features, data.divergence_frame] {
        put_u32(w, v)?;
    }
    for split in [&data.train, &data.val, &data.test] {
        put_u32(w, split.len())?;
    }
    for split in [&data.train, &data.val, &data.test] {
        for s in split {
            for v in &s.frames {
                w.write_all(&v.to_le_bytes())?;
            }
            put_u32(w, s.label)?;
        }
    }
    Ok(())
}

pub fn import_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format {
            what: "dataset",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = get_u32(r)?;
    if version != DATA_VERSION as usize {
        return Err(Error::Format {
            what: "dataset",
            detail: format!("unsupported version {version}"),
        });
    }
    let classes = get_u32(r)?;
    let frames = get_u32(r)?;
    let segments = get_u32(r)?;
    let features = get_u32(r)?;
    let divergence_frame = get_u32(r)?;
    if segments == 0 || frames % segments != 0 || classes == 0 {
        return Err(Error::Format {
            what: "dataset",
            detail: "inconsistent header".into(),
        });
    }
    let counts = [get_u32(r)?, get_u32(r)?, get_u32(r)?];
    let mut splits = Vec::with_capacity(3);
    for n in counts {
        let mut split = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut frames_buf = vec![0.0; frames * features];
            let mut b = [0u8; 8];
            for v in &mut frames_buf {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let label = get_u32(r)?;
            if label >= classes {
                return Err(Error::Format {
                    what: "dataset",
                    detail: format!("label {label} out of range for {classes} classes"),
                });
            }
            split.push(SequenceSample { frames: frames_buf, label });
        }
        splits.push(split);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset {
        classes,
        frames,
        segments,
        features,
        divergence_frame,
        train,
        val,
        test,
    })
}
