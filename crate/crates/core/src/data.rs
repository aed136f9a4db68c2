//! Synthetic multi-label event datasets with realistic duration imbalance.
//!
//! Each clip is a grid of frames. For every class an instance count is drawn
//! from a Poisson distribution, durations are exponential around the class
//! mean, and onsets are uniform. Features are Gaussian noise plus the
//! signature of every active class.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, LabelGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct EventClassSpec {
    pub name: String,
    pub mean_duration_s: f64,
    /// Expected number of instances per clip.
    pub rate_per_clip: f64,
    /// Feature direction added while the class is active.
    pub signature: Vec<f64>,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: Vec<EventClassSpec>,
    pub clip_length_s: f64,
    pub frame_hop_s: f64,
    pub frame_len_s: f64,
    pub clips: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub const DEFAULT_CLIP_LENGTH_S: f64 = 10.0;
pub const DEFAULT_FRAME_HOP_S: f64 = 0.02;
pub const DEFAULT_FRAME_LEN_S: f64 = 0.04;
pub const DEFAULT_FEATURE_DIM: usize = 8;
pub const DEFAULT_NOISE_SIGMA: f64 = 1.0;
pub const DEFAULT_AMPLITUDE: f64 = 3.0;

/// Relative per-frame jitter on the signature amplitude.
const AMPLITUDE_JITTER: f64 = 0.1;

impl DatasetSpec {
    pub fn frames_per_clip(&self) -> usize {
        (self.clip_length_s / self.frame_hop_s).round() as usize
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "{what} must be positive, got {v}"
                )))
            }
        };
        positive("clip length", self.clip_length_s)?;
        positive("frame hop", self.frame_hop_s)?;
        positive("frame length", self.frame_len_s)?;
        positive("noise sigma", self.noise_sigma)?;
        if !(self.frame_hop_s <= self.frame_len_s && self.frame_len_s <= self.clip_length_s) {
            return Err(Error::Validation(format!(
                "need frame hop <= frame length <= clip length, got {} / {} / {}",
                self.frame_hop_s, self.frame_len_s, self.clip_length_s
            )));
        }
        if self.clips == 0 {
            return Err(Error::Validation("dataset needs at least one clip".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Validation(
                "feature dimension must be positive".into(),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::Validation("dataset needs at least one class".into()));
        }
        for c in &self.classes {
            positive(&format!("mean duration of {:?}", c.name), c.mean_duration_s)?;
            positive(&format!("amplitude of {:?}", c.name), c.amplitude)?;
            if !(c.rate_per_clip.is_finite() && c.rate_per_clip >= 0.0) {
                return Err(Error::Validation(format!(
                    "rate of {:?} must be >= 0, got {}",
                    c.name, c.rate_per_clip
                )));
            }
            if c.signature.len() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "signature of {:?} has {} dims, features have {}",
                    c.name,
                    c.signature.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub features: FeatureGrid,
    pub labels: LabelGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub clips: Vec<Clip>,
    /// Number of generated instances per class, before same-class overlaps
    /// are merged.
    pub instances: Vec<u64>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn labels(&self) -> impl Iterator<Item = &LabelGrid> {
        self.clips.iter().map(|c| &c.labels)
    }

    /// Splits off the last `count` clips as a second dataset.
    pub fn split_tail(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count == 0 || count >= self.clips.len() {
            return Err(Error::Validation(format!(
                "cannot split {count} of {} clips",
                self.clips.len()
            )));
        }
        let tail = self.clips.split_off(self.clips.len() - count);
        let mut head_spec = self.spec.clone();
        head_spec.clips = self.clips.len();
        let mut tail_spec = self.spec;
        tail_spec.clips = tail.len();
        // instance counts describe the whole generated set
        Ok((
            Dataset {
                spec: head_spec,
                clips: self.clips,
                instances: self.instances.clone(),
            },
            Dataset {
                spec: tail_spec,
                clips: tail,
                instances: self.instances,
            },
        ))
    }
}

/// Unit-norm Gaussian directions, one per class.
pub fn random_signatures(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect()
}

/// Average instance durations (seconds) of the 25 event classes of the
/// TUT Sound Events / Acoustic Scenes 2016-2017 development data.
pub const TUT_DURATIONS: [(&str, f64); 25] = [
    ("object banging", 0.78),
    ("object impact", 0.35),
    ("object rustling", 2.24),
    ("object snapping", 0.46),
    ("object squeaking", 0.74),
    ("bird singing", 7.63),
    ("brakes squeaking", 1.65),
    ("breathing", 0.43),
    ("car", 6.88),
    ("children", 6.87),
    ("cupboard", 0.65),
    ("cutlery", 0.74),
    ("dishes", 1.24),
    ("drawer", 0.80),
    ("fan", 29.99),
    ("glass jingling", 0.80),
    ("keyboard typing", 0.21),
    ("large vehicle", 14.68),
    ("mouse clicking", 0.14),
    ("mouse wheeling", 0.16),
    ("people talking", 4.09),
    ("people walking", 6.63),
    ("washing dishes", 4.15),
    ("water tap running", 5.92),
    ("wind blowing", 6.09),
];

/// Instance rate is `RATE_SCALE / sqrt(mean duration)`, giving roughly 4%
/// active class-frames overall.
const RATE_SCALE: f64 = 0.46;
/// Classes whose mean duration approaches the clip length are rare: at most
/// this many instances per clip.
const LONG_EVENT_RATE: f64 = 0.05;
const LONG_EVENT_S: f64 = 5.0;
const PRESET_SIGNATURE_SEED: u64 = 0x7475_745f_6c69_6b65;

/// Preset mirroring the class durations and activity imbalance of the TUT
/// development data.
pub fn tut_like_preset() -> DatasetSpec {
    tut_like_preset_with(DEFAULT_FEATURE_DIM, 100, 0)
}

pub fn tut_like_preset_with(feature_dim: usize, clips: usize, seed: u64) -> DatasetSpec {
    let signatures = random_signatures(TUT_DURATIONS.len(), feature_dim, PRESET_SIGNATURE_SEED);
    let classes = TUT_DURATIONS
        .iter()
        .zip(signatures)
        .map(|(&(name, mean), signature)| EventClassSpec {
            name: name.to_string(),
            mean_duration_s: mean,
            rate_per_clip: if mean >= LONG_EVENT_S {
                LONG_EVENT_RATE
            } else {
                RATE_SCALE / mean.sqrt()
            },
            signature,
            amplitude: DEFAULT_AMPLITUDE,
        })
        .collect();
    DatasetSpec {
        classes,
        clip_length_s: DEFAULT_CLIP_LENGTH_S,
        frame_hop_s: DEFAULT_FRAME_HOP_S,
        frame_len_s: DEFAULT_FRAME_LEN_S,
        clips,
        feature_dim,
        noise_sigma: DEFAULT_NOISE_SIGMA,
        seed,
    }
}

/// Generates the dataset described by `spec`; a pure function of the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = spec.frames_per_clip();
    let classes = spec.n_classes();
    let hop = spec.frame_hop_s;
    let clip_len = spec.clip_length_s;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut instances = vec![0u64; classes];
    let mut clips = Vec::with_capacity(spec.clips);
    for _ in 0..spec.clips {
        let mut labels = LabelGrid::zeros(frames, classes)?;
        for (m, class) in spec.classes.iter().enumerate() {
            if class.rate_per_clip == 0.0 {
                continue;
            }
            let count = Poisson::new(class.rate_per_clip)
                .expect("positive rate")
                .sample(&mut rng) as u64;
            instances[m] += count;
            let duration = Exp::new(1.0 / class.mean_duration_s).expect("positive mean");
            for _ in 0..count {
                let d = duration.sample(&mut rng).clamp(hop, clip_len);
                let onset = rng.gen_range(0.0..=clip_len - d);
                // frame k is active when its start time k * hop lies in [onset, onset + d)
                let first = ((onset / hop).ceil() as usize).saturating_sub(1);
                for k in first..frames {
                    let t = k as f64 * hop;
                    if t >= onset + d {
                        break;
                    }
                    if t >= onset {
                        labels.set(k, m, true);
                    }
                }
            }
        }

        let mut features =
            Array2::from_shape_fn((frames, spec.feature_dim), |_| noise.sample(&mut rng));
        for n in 0..frames {
            for (m, class) in spec.classes.iter().enumerate() {
                if !labels.is_active(n, m) {
                    continue;
                }
                let gain = class.amplitude * (1.0 + AMPLITUDE_JITTER * unit.sample(&mut rng));
                for (f, s) in features.row_mut(n).iter_mut().zip(&class.signature) {
                    *f += gain * s;
                }
            }
        }
        clips.push(Clip {
            features: FeatureGrid::new(features)?,
            labels,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        clips,
        instances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub per_class_active_frames: Vec<u64>,
    /// Complement of the active count for each class.
    pub per_class_inactive_frames: Vec<u64>,
    /// Maximal runs of consecutive active frames per class.
    pub per_class_runs: Vec<u64>,
    pub per_class_mean_duration_frames: Vec<f64>,
    pub total_active: u64,
    pub total_inactive: u64,
}

impl DatasetStats {
    pub fn active_fraction(&self) -> f64 {
        self.total_active as f64 / (self.total_active + self.total_inactive) as f64
    }
}

/// Exact active/inactive counts and mean run length per class.
///
/// A class with no active frames reports a mean duration of 0.
pub fn compute_stats(ds: &Dataset) -> DatasetStats {
    let classes = ds.n_classes();
    let mut active = vec![0u64; classes];
    let mut runs = vec![0u64; classes];
    let mut cells = 0u64;
    for clip in &ds.clips {
        let z = &clip.labels;
        cells += (z.n_frames() * z.n_classes()) as u64;
        for m in 0..classes {
            let mut prev = false;
            for n in 0..z.n_frames() {
                let cur = z.is_active(n, m);
                if cur {
                    active[m] += 1;
                    if !prev {
                        runs[m] += 1;
                    }
                }
                prev = cur;
            }
        }
    }
    let frames_total = cells / classes.max(1) as u64;
    let total_active: u64 = active.iter().sum();
    DatasetStats {
        per_class_inactive_frames: active.iter().map(|a| frames_total - a).collect(),
        per_class_mean_duration_frames: active
            .iter()
            .zip(&runs)
            .map(|(&a, &r)| if r == 0 { 0.0 } else { a as f64 / r as f64 })
            .collect(),
        per_class_active_frames: active,
        per_class_runs: runs,
        total_active,
        total_inactive: cells - total_active,
    }
}
