//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use sedloss::data::{Clip, Dataset, DatasetSpec, EventClassSpec};
use sedloss::{FeatureGrid, LabelGrid, PredictionGrid};

/// Micro and macro F1 by counting every cell in nested loops.
#[allow(clippy::needless_range_loop)]
pub fn oracle_fscores(y: &[PredictionGrid], z: &[LabelGrid], threshold: f64) -> (f64, f64) {
    let classes = z[0].n_classes();
    let mut per_class = vec![(0u64, 0u64, 0u64); classes];
    for (yc, zc) in y.iter().zip(z) {
        for n in 0..zc.n_frames() {
            for m in 0..classes {
                let predicted = yc.values()[[n, m]] >= threshold;
                let actual = zc.values()[[n, m]] == 1;
                let e = &mut per_class[m];
                match (predicted, actual) {
                    (true, true) => e.0 += 1,
                    (true, false) => e.1 += 1,
                    (false, true) => e.2 += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let f1 = |tp: u64, fp: u64, fn_: u64| {
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * tp as f64 / d as f64
        }
    };
    let (tp, fp, fn_) = per_class
        .iter()
        .fold((0, 0, 0), |a, e| (a.0 + e.0, a.1 + e.1, a.2 + e.2));
    let macro_f = per_class.iter().map(|e| f1(e.0, e.1, e.2)).sum::<f64>() / classes as f64;
    (f1(tp, fp, fn_), macro_f)
}

/// Fraction of positive/negative pairs ordered correctly, ties counting half.
pub fn pairwise_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn pairs_for(y: &[PredictionGrid], z: &[LabelGrid], class: Option<usize>) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for (yc, zc) in y.iter().zip(z) {
        for n in 0..zc.n_frames() {
            for m in 0..zc.n_classes() {
                if class.is_none_or(|c| c == m) {
                    out.push((yc.values()[[n, m]], zc.values()[[n, m]] == 1));
                }
            }
        }
    }
    out
}

pub fn oracle_micro_auc(y: &[PredictionGrid], z: &[LabelGrid]) -> Option<f64> {
    pairwise_auc(&pairs_for(y, z, None))
}

pub fn oracle_macro_auc(y: &[PredictionGrid], z: &[LabelGrid]) -> Option<f64> {
    let valid: Vec<f64> = (0..z[0].n_classes())
        .filter_map(|m| pairwise_auc(&pairs_for(y, z, Some(m))))
        .collect();
    if valid.is_empty() {
        None
    } else {
        Some(valid.iter().sum::<f64>() / valid.len() as f64)
    }
}

/// Random clips of scores and labels. Scores are drawn from a coarse grid
/// so that ties occur.
pub fn random_scored_clips(
    rng: &mut impl Rng,
    clips: usize,
    frames: usize,
    classes: usize,
) -> (Vec<PredictionGrid>, Vec<LabelGrid>) {
    (0..clips)
        .map(|_| {
            let y =
                Array2::from_shape_fn((frames, classes), |_| rng.gen_range(0..=20) as f64 / 20.0);
            let z = Array2::from_shape_fn((frames, classes), |_| u8::from(rng.gen_bool(0.3)));
            (PredictionGrid::new(y).unwrap(), LabelGrid::new(z).unwrap())
        })
        .unzip()
}

/// Wraps hand-made clips in a dataset with a matching spec.
pub fn dataset_from_clips(clips: Vec<Clip>) -> Dataset {
    let frames = clips[0].labels.n_frames();
    let classes = clips[0].labels.n_classes();
    let dim = clips[0].features.dim();
    let spec = DatasetSpec {
        classes: (0..classes)
            .map(|m| EventClassSpec {
                name: format!("class {m}"),
                mean_duration_s: 0.1,
                rate_per_clip: 1.0,
                signature: vec![0.0; dim],
                amplitude: 1.0,
            })
            .collect(),
        clip_length_s: frames as f64 * 0.02,
        frame_hop_s: 0.02,
        frame_len_s: 0.04,
        clips: clips.len(),
        feature_dim: dim,
        noise_sigma: 1.0,
        seed: 0,
    };
    Dataset {
        spec,
        instances: vec![0; classes],
        clips,
    }
}

/// Two classes, each active exactly when its own feature is positive.
pub fn separable_toy(rng: &mut impl Rng, clips: usize, frames: usize) -> Dataset {
    let clips = (0..clips)
        .map(|_| {
            let x = Array2::from_shape_fn((frames, 2), |_| {
                let v: f64 = rng.gen_range(0.2..1.5);
                if rng.gen_bool(0.3) {
                    v
                } else {
                    -v
                }
            });
            let z = x.mapv(|v| u8::from(v > 0.0));
            Clip {
                features: FeatureGrid::new(x).unwrap(),
                labels: LabelGrid::new(z).unwrap(),
            }
        })
        .collect();
    dataset_from_clips(clips)
}
