//! Central finite-difference checks for the analytic loss and model
//! gradients.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{FeatureGrid, LabelGrid, PredictionGrid};
use crate::losses::{
    class_frequency_counts, loss_dispatch, BatchLossOutput, ClassFrequency, LossSpec,
};
use crate::model::{backward, forward, init_params, ModelDims, ModelParams, ParamGrads};

pub const FD_STEP: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn central_difference<F>(mut x: Array2<f64>, step: f64, f: F) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + step;
        let plus = f(&x);
        x[[r, c]] = orig - step;
        let minus = f(&x);
        x[[r, c]] = orig;
        out[[r, c]] = (plus - minus) / (2.0 * step);
    }
    out
}

/// Central differences of `f` with respect to every model parameter.
pub fn central_difference_params<F>(params: &ModelParams, step: f64, f: F) -> ParamGrads
where
    F: Fn(&ModelParams) -> f64,
{
    let mut work = params.clone();
    let mut out = ParamGrads::zeros(params.dims);
    let mut numeric: Vec<Vec<f64>> = Vec::new();
    for t in 0..4 {
        let len = work.slices()[t].len();
        let mut col = Vec::with_capacity(len);
        for i in 0..len {
            let orig = work.slices()[t][i];
            work.slices_mut()[t][i] = orig + step;
            let plus = f(&work);
            work.slices_mut()[t][i] = orig - step;
            let minus = f(&work);
            work.slices_mut()[t][i] = orig;
            col.push((plus - minus) / (2.0 * step));
        }
        numeric.push(col);
    }
    out.w1.as_slice_mut().unwrap().copy_from_slice(&numeric[0]);
    out.b1.as_slice_mut().unwrap().copy_from_slice(&numeric[1]);
    out.w2.as_slice_mut().unwrap().copy_from_slice(&numeric[2]);
    out.b2.as_slice_mut().unwrap().copy_from_slice(&numeric[3]);
    out
}

/// Signature of an analytic batch loss, so that checks can be pointed at an
/// alternative (for instance deliberately broken) implementation.
pub type AnalyticLoss = dyn Fn(
    &LossSpec,
    &[PredictionGrid],
    &[LabelGrid],
    Option<&ClassFrequency>,
) -> Result<BatchLossOutput>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Where the largest error occurred: case, clip, frame, class.
    pub worst: (usize, usize, usize, usize),
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (case, clip, n, m) = self.worst;
        write!(
            f,
            "{} {:<5} max_rel_err={:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance
        )?;
        if !self.passed() {
            write!(f, " at case {case} clip {clip} entry ({n},{m})")?;
        }
        Ok(())
    }
}

/// Draws a loss of the given family with random admissible hyperparameters.
pub fn random_spec(name: &str, rng: &mut impl Rng) -> Option<LossSpec> {
    Some(match name {
        "bce" => LossSpec::Bce,
        "srl" => LossSpec::Srl {
            alpha: rng.gen_range(0.1..2.0),
            beta: rng.gen_range(0.0..2.0),
        },
        "ifl" => LossSpec::Ifl {
            gamma: rng.gen_range(0.0..2.0),
            c: rng.gen_range(1.0..20.0),
        },
        "afl" => LossSpec::Afl {
            gamma: rng.gen_range(0.0..3.0),
            zeta: rng.gen_range(0.0..3.0),
        },
        "fbtl" => {
            let alpha: f64 = rng.gen_range(0.0..1.0);
            LossSpec::Fbtl {
                alpha,
                beta: 1.0 - alpha,
                gamma: rng.gen_range(0.0..2.0),
                eta: rng.gen_range(0.1..2.0),
            }
        }
        _ => return None,
    })
}

pub const LOSS_NAMES: [&str; 5] = ["bce", "srl", "ifl", "afl", "fbtl"];

/// Random batch with scores in `[1e-3, 1 - 1e-3]`.
pub fn random_batch(
    rng: &mut impl Rng,
    clips: usize,
    frames: usize,
    classes: usize,
) -> (Vec<PredictionGrid>, Vec<LabelGrid>) {
    (0..clips)
        .map(|_| {
            let y = Array2::from_shape_fn((frames, classes), |_| rng.gen_range(1e-3..=1.0 - 1e-3));
            let z = Array2::from_shape_fn((frames, classes), |_| u8::from(rng.gen_bool(0.3)));
            (
                PredictionGrid::new(y).expect("in range"),
                LabelGrid::new(z).expect("binary"),
            )
        })
        .unzip()
}

/// Compares `analytic` against central differences of its own value on
/// `cases` random batches.
pub fn check_loss_with(
    name: &str,
    cases: usize,
    seed: u64,
    analytic: &AnalyticLoss,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        tolerance: LOSS_TOLERANCE,
        worst: (0, 0, 0, 0),
    };
    for case in 0..cases {
        let spec = random_spec(name, &mut rng).ok_or_else(|| {
            crate::Error::Config(format!("unknown loss {name:?} for gradient check"))
        })?;
        let clips = if matches!(spec, LossSpec::Fbtl { .. }) {
            2
        } else {
            1
        };
        let (ys, zs) = random_batch(&mut rng, clips, 5, 3);
        let freq = if spec.needs_class_frequency() {
            Some(class_frequency_counts(&zs)?)
        } else {
            None
        };
        let out = analytic(&spec, &ys, &zs, freq.as_ref())?;
        for clip in 0..clips {
            let numeric = central_difference(ys[clip].values().to_owned(), FD_STEP, |v| {
                let mut perturbed = ys.clone();
                perturbed[clip] = PredictionGrid::new_unclamped(v.clone()).expect("in range");
                loss_dispatch(&spec, &perturbed, &zs, freq.as_ref())
                    .expect("valid batch")
                    .value
            });
            for ((idx, a), n) in out.grads[clip].indexed_iter().zip(numeric.iter()) {
                let err = relative_error(*a, *n);
                if err.is_nan() || err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = (case, clip, idx.0, idx.1);
                }
            }
        }
    }
    Ok(report)
}

pub fn check_loss(name: &str, cases: usize, seed: u64) -> Result<CheckReport> {
    check_loss_with(name, cases, seed, &|spec, ys, zs, freq| {
        loss_dispatch(spec, ys, zs, freq)
    })
}

/// End-to-end check of `loss(forward(params, x))` against backpropagation on
/// a tiny network (D=3, H=4, M=2, N=5).
pub fn check_model(spec: &LossSpec, cases: usize, seed: u64) -> Result<CheckReport> {
    let dims = ModelDims::new(3, 4, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        name: "model".to_string(),
        max_rel_err: 0.0,
        tolerance: MODEL_TOLERANCE,
        worst: (0, 0, 0, 0),
    };
    for case in 0..cases {
        let params = init_params(rng.gen(), dims)?;
        let x = FeatureGrid::new(Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0)))?;
        let z = LabelGrid::new(Array2::from_shape_fn((5, 2), |_| {
            u8::from(rng.gen_bool(0.4))
        }))?;
        let zs = std::slice::from_ref(&z);
        let freq = if spec.needs_class_frequency() {
            Some(class_frequency_counts(zs)?)
        } else {
            None
        };
        let loss_of = |p: &ModelParams| -> Result<BatchLossOutput> {
            let (y, _) = forward(p, &x)?;
            loss_dispatch(spec, &[y], zs, freq.as_ref())
        };
        let (y, cache) = forward(&params, &x)?;
        let out = loss_dispatch(spec, &[y], zs, freq.as_ref())?;
        let grads = backward(&params, &cache, out.grads[0].view())?;
        let numeric =
            central_difference_params(&params, FD_STEP, |p| loss_of(p).expect("valid model").value);
        for (t, (a, n)) in grads.slices().iter().zip(numeric.slices()).enumerate() {
            for (i, (av, nv)) in a.iter().zip(n.iter()).enumerate() {
                let err = relative_error(*av, *nv);
                if err.is_nan() || err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = (case, t, i, 0);
                }
            }
        }
    }
    Ok(report)
}
