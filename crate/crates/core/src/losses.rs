//! Imbalance-aware losses for frame-level multi-label detection.
//!
//! Every loss reports its raw value together with the analytic gradient with
//! respect to the predictions. The per-frame losses (BCE, SRL, IFL, AFL) are
//! plain sums over frames and classes with no averaging. The focal batch
//! Tversky loss (FBTL) pools its sums over a whole mini-batch of clips before
//! taking the ratio.
//!
//! Log-based losses clamp predictions into `[CLAMP_EPS, 1 - CLAMP_EPS]`, so
//! values and gradients stay finite even for saturated scores.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::grid::{clamp_prob, ensure_same_shape, LabelGrid, PredictionGrid};

/// Tolerance on `alpha + beta == 1` for the Tversky trade-off weights.
pub const FBTL_WEIGHT_SUM_TOL: f64 = 1e-12;

/// Value of a per-clip loss and its gradient with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Value of a batch loss and one gradient grid per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossOutput {
    pub value: f64,
    pub grads: Vec<Array2<f64>>,
}

/// Which loss to train with, along with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Bce,
    /// Constant weights on the active (`alpha`) and inactive (`beta`) terms.
    Srl {
        alpha: f64,
        beta: f64,
    },
    /// Active terms scaled by `(c / (N_m + c))^gamma`.
    Ifl {
        gamma: f64,
        c: f64,
    },
    /// Focal modulation `(1-y)^gamma` on active and `y^zeta` on inactive terms.
    Afl {
        gamma: f64,
        zeta: f64,
    },
    Fbtl {
        alpha: f64,
        beta: f64,
        gamma: f64,
        eta: f64,
    },
}

impl LossSpec {
    pub const DEFAULT_IFL_C: f64 = 500.0;
    pub const DEFAULT_FBTL_ETA: f64 = 1.0;

    /// SRL with the active weight fixed at 1.
    pub fn srl(beta: f64) -> Self {
        LossSpec::Srl { alpha: 1.0, beta }
    }

    pub fn ifl(gamma: f64) -> Self {
        LossSpec::Ifl {
            gamma,
            c: Self::DEFAULT_IFL_C,
        }
    }

    pub fn afl(gamma: f64, zeta: f64) -> Self {
        LossSpec::Afl { gamma, zeta }
    }

    pub fn fbtl(alpha: f64, beta: f64, gamma: f64) -> Self {
        LossSpec::Fbtl {
            alpha,
            beta,
            gamma,
            eta: Self::DEFAULT_FBTL_ETA,
        }
    }

    /// Batch dice loss: FBTL without focusing and with symmetric weights.
    pub fn batch_dice() -> Self {
        Self::fbtl(0.5, 0.5, 0.0)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Bce => "bce",
            LossSpec::Srl { .. } => "srl",
            LossSpec::Ifl { .. } => "ifl",
            LossSpec::Afl { .. } => "afl",
            LossSpec::Fbtl { .. } => "fbtl",
        }
    }

    /// `key=value` pairs for the hyperparameters, in equation order.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            LossSpec::Bce => vec![],
            LossSpec::Srl { alpha, beta } => vec![("alpha", alpha), ("beta", beta)],
            LossSpec::Ifl { gamma, c } => vec![("gamma", gamma), ("c", c)],
            LossSpec::Afl { gamma, zeta } => vec![("gamma", gamma), ("zeta", zeta)],
            LossSpec::Fbtl {
                alpha,
                beta,
                gamma,
                eta,
            } => vec![
                ("alpha", alpha),
                ("beta", beta),
                ("gamma", gamma),
                ("eta", eta),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Bce => Ok(()),
            LossSpec::Srl { alpha, beta } => {
                nonneg("srl alpha", alpha)?;
                nonneg("srl beta", beta)
            }
            LossSpec::Ifl { gamma, c } => {
                nonneg("ifl gamma", gamma)?;
                positive("ifl c", c)
            }
            LossSpec::Afl { gamma, zeta } => {
                nonneg("afl gamma", gamma)?;
                nonneg("afl zeta", zeta)
            }
            LossSpec::Fbtl {
                alpha,
                beta,
                gamma,
                eta,
            } => {
                unit_interval("fbtl alpha", alpha)?;
                unit_interval("fbtl beta", beta)?;
                if (alpha + beta - 1.0).abs() > FBTL_WEIGHT_SUM_TOL {
                    return Err(Error::Validation(format!(
                        "fbtl alpha + beta must equal 1, got {alpha} + {beta}"
                    )));
                }
                nonneg("fbtl gamma", gamma)?;
                positive("fbtl eta", eta)
            }
        }
    }

    pub fn needs_class_frequency(&self) -> bool {
        matches!(self, LossSpec::Ifl { .. })
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        for (_, v) in self.params() {
            write!(f, ":{v}")?;
        }
        Ok(())
    }
}

/// Parses a method string `name[:param...]` with parameters in formula
/// order: `bce`, `srl:beta` or `srl:alpha:beta`, `ifl:gamma[:c]`,
/// `afl:gamma:zeta`, `fbtl:alpha:beta:gamma[:eta]`, and `dice` for the batch
/// dice loss. The result is validated.
impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let name = parts.next().unwrap_or_default().to_ascii_lowercase();
        let nums = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("method {s:?}: bad number {p:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let arity = |range: std::ops::RangeInclusive<usize>, usage: &str| {
            if range.contains(&nums.len()) {
                Ok(())
            } else {
                Err(Error::Config(format!("method {s:?}: expected {usage}")))
            }
        };
        let spec = match name.as_str() {
            "bce" => {
                arity(0..=0, "bce")?;
                LossSpec::Bce
            }
            "srl" => {
                arity(1..=2, "srl:beta or srl:alpha:beta")?;
                match nums[..] {
                    [beta] => LossSpec::srl(beta),
                    [alpha, beta] => LossSpec::Srl { alpha, beta },
                    _ => unreachable!(),
                }
            }
            "ifl" => {
                arity(1..=2, "ifl:gamma[:c]")?;
                let mut spec = LossSpec::ifl(nums[0]);
                if let (LossSpec::Ifl { c, .. }, Some(&v)) = (&mut spec, nums.get(1)) {
                    *c = v;
                }
                spec
            }
            "afl" => {
                arity(2..=2, "afl:gamma:zeta")?;
                LossSpec::afl(nums[0], nums[1])
            }
            "fbtl" => {
                arity(3..=4, "fbtl:alpha:beta:gamma[:eta]")?;
                let mut spec = LossSpec::fbtl(nums[0], nums[1], nums[2]);
                if let (LossSpec::Fbtl { eta, .. }, Some(&v)) = (&mut spec, nums.get(3)) {
                    *eta = v;
                }
                spec
            }
            "dice" => {
                arity(0..=0, "dice")?;
                LossSpec::batch_dice()
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown loss {name:?}; expected bce, srl, ifl, afl, fbtl or dice"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn nonneg(what: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Validation(format!("{what} must be >= 0, got {v}")));
    }
    Ok(())
}

fn positive(what: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Validation(format!("{what} must be > 0, got {v}")));
    }
    Ok(())
}

fn unit_interval(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation(format!(
            "{what} must lie in [0, 1], got {v}"
        )));
    }
    Ok(())
}

/// Active-frame count per class over a batch of label grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFrequency {
    pub counts: Vec<u64>,
}

impl ClassFrequency {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    /// IFL weight on the active term of class `m`.
    pub fn ifl_weight(&self, class: usize, gamma: f64, c: f64) -> f64 {
        powf0(c / (self.counts[class] as f64 + c), gamma)
    }
}

pub fn class_frequency_counts<'a, I>(batch_labels: I) -> Result<ClassFrequency>
where
    I: IntoIterator<Item = &'a LabelGrid>,
{
    let mut counts: Option<Vec<u64>> = None;
    for z in batch_labels {
        let counts = counts.get_or_insert_with(|| vec![0; z.n_classes()]);
        if counts.len() != z.n_classes() {
            return Err(Error::Shape(format!(
                "batch mixes {} and {} classes",
                counts.len(),
                z.n_classes()
            )));
        }
        for row in z.values().rows() {
            for (c, &v) in counts.iter_mut().zip(row) {
                *c += u64::from(v);
            }
        }
    }
    counts
        .map(|counts| ClassFrequency { counts })
        .ok_or_else(|| Error::Validation("class frequencies need a nonempty batch".into()))
}

/// `x^p` with `x^0 = 1` for every `x`, including zero.
#[inline]
fn powf0(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else {
        x.powf(p)
    }
}

/// `ln(y)` and `ln(1 - y)` on a clamped score.
#[inline]
fn log_pair(y: f64) -> (f64, f64) {
    (y.ln(), (-y).ln_1p())
}

/// Sums an entrywise loss term. `term(y, active, class)` receives the clamped
/// score and returns `(loss, d loss / d y)`.
fn entrywise<F>(y: &PredictionGrid, z: &LabelGrid, term: F) -> Result<LossOutput>
where
    F: Fn(f64, bool, usize) -> (f64, f64),
{
    ensure_same_shape(y.shape(), z.shape())?;
    let mut grad = Array2::zeros(y.shape());
    let mut value = 0.0;
    Zip::indexed(&mut grad)
        .and(y.values())
        .and(z.values())
        .for_each(|(_, m), g, &yv, &zv| {
            let (v, d) = term(clamp_prob(yv), zv == 1, m);
            value += v;
            *g = d;
        });
    Ok(LossOutput { value, grad })
}

/// Binary cross-entropy summed over frames and classes.
pub fn bce_loss(y: &PredictionGrid, z: &LabelGrid) -> Result<LossOutput> {
    entrywise(y, z, |y, active, _| {
        let (ln_y, ln_1my) = log_pair(y);
        if active {
            (-ln_y, -1.0 / y)
        } else {
            (-ln_1my, 1.0 / (1.0 - y))
        }
    })
}

/// Simple reweighting loss: BCE with weight `alpha` on active and `beta` on
/// inactive terms.
pub fn srl_loss(y: &PredictionGrid, z: &LabelGrid, alpha: f64, beta: f64) -> Result<LossOutput> {
    nonneg("srl alpha", alpha)?;
    nonneg("srl beta", beta)?;
    entrywise(y, z, |y, active, _| {
        let (ln_y, ln_1my) = log_pair(y);
        if active {
            (-alpha * ln_y, -alpha / y)
        } else {
            (-beta * ln_1my, beta / (1.0 - y))
        }
    })
}

/// Inverse frequency loss: active terms of class `m` weighted by
/// `(c / (N_m + c))^gamma`, inactive terms unweighted.
pub fn ifl_loss(
    y: &PredictionGrid,
    z: &LabelGrid,
    gamma: f64,
    c: f64,
    freq: &ClassFrequency,
) -> Result<LossOutput> {
    nonneg("ifl gamma", gamma)?;
    positive("ifl c", c)?;
    if freq.n_classes() != y.n_classes() {
        return Err(Error::Shape(format!(
            "class frequencies cover {} classes, predictions have {}",
            freq.n_classes(),
            y.n_classes()
        )));
    }
    let weights: Vec<f64> = (0..freq.n_classes())
        .map(|m| freq.ifl_weight(m, gamma, c))
        .collect();
    entrywise(y, z, |y, active, m| {
        let (ln_y, ln_1my) = log_pair(y);
        if active {
            let w = weights[m];
            (-w * ln_y, -w / y)
        } else {
            (-ln_1my, 1.0 / (1.0 - y))
        }
    })
}

/// Asymmetric focal loss with separate focusing exponents for active
/// (`gamma`) and inactive (`zeta`) frames.
pub fn afl_loss(y: &PredictionGrid, z: &LabelGrid, gamma: f64, zeta: f64) -> Result<LossOutput> {
    nonneg("afl gamma", gamma)?;
    nonneg("afl zeta", zeta)?;
    entrywise(y, z, |y, active, _| {
        let (ln_y, ln_1my) = log_pair(y);
        if active {
            // d/dy [(1-y)^g ln y] = -g (1-y)^(g-1) ln y + (1-y)^g / y
            let w = powf0(1.0 - y, gamma);
            let dw = if gamma == 0.0 {
                0.0
            } else {
                -gamma * (1.0 - y).powf(gamma - 1.0)
            };
            (-w * ln_y, -(dw * ln_y + w / y))
        } else {
            // d/dy [y^z ln(1-y)] = z y^(z-1) ln(1-y) - y^z / (1-y)
            let w = powf0(y, zeta);
            let dw = if zeta == 0.0 {
                0.0
            } else {
                zeta * y.powf(zeta - 1.0)
            };
            (-w * ln_1my, -(dw * ln_1my - w / (1.0 - y)))
        }
    })
}

/// Pooled sums of the Tversky ratio over a set of clips.
#[derive(Debug, Default, Clone, Copy)]
struct TverskySums {
    /// `sum (1-y)^g y z`
    overlap: f64,
    /// `sum (1-y)^g y`
    focal_pred: f64,
    /// `sum z`
    active: f64,
    /// `sum (1-y)^g y` over inactive cells
    focal_pred_inactive: f64,
    /// `sum (1 - (1-y)^g y)` over active cells
    missed: f64,
}

#[inline]
fn focal_score(y: f64, gamma: f64) -> f64 {
    powf0(1.0 - y, gamma) * y
}

/// d/dy [(1-y)^g y] = (1-y)^g - g y (1-y)^(g-1)
#[inline]
fn focal_score_grad(y: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        (1.0 - y).powf(gamma) - gamma * y * (1.0 - y).powf(gamma - 1.0)
    }
}

impl TverskySums {
    fn accumulate(&mut self, y: &PredictionGrid, z: &LabelGrid, gamma: f64) {
        Zip::from(y.values()).and(z.values()).for_each(|&yv, &zv| {
            let f = focal_score(yv, gamma);
            self.focal_pred += f;
            if zv == 1 {
                self.overlap += f;
                self.active += 1.0;
                self.missed += 1.0 - f;
            } else {
                self.focal_pred_inactive += f;
            }
        });
    }
}

fn check_fbtl_params(alpha: f64, beta: f64, gamma: f64, eta: f64) -> Result<()> {
    LossSpec::Fbtl {
        alpha,
        beta,
        gamma,
        eta,
    }
    .validate()
}

fn check_batch(y_batch: &[PredictionGrid], z_batch: &[LabelGrid]) -> Result<()> {
    if y_batch.is_empty() {
        return Err(Error::Validation("loss needs at least one clip".into()));
    }
    if y_batch.len() != z_batch.len() {
        return Err(Error::Shape(format!(
            "{} prediction grids but {} label grids",
            y_batch.len(),
            z_batch.len()
        )));
    }
    let classes = y_batch[0].n_classes();
    for (y, z) in y_batch.iter().zip(z_batch) {
        ensure_same_shape(y.shape(), z.shape())?;
        if y.n_classes() != classes {
            return Err(Error::Shape(format!(
                "batch mixes {classes} and {} classes",
                y.n_classes()
            )));
        }
    }
    Ok(())
}

/// Focal batch Tversky loss with sums pooled over every clip of the batch.
///
/// Scores are used as given (no clamping), so grids built with
/// [`PredictionGrid::new_unclamped`] are evaluated exactly. For
/// `0 < gamma < 1` a score of exactly 1 has an unbounded gradient.
pub fn fbtl_loss(
    y_batch: &[PredictionGrid],
    z_batch: &[LabelGrid],
    alpha: f64,
    beta: f64,
    gamma: f64,
    eta: f64,
) -> Result<BatchLossOutput> {
    check_fbtl_params(alpha, beta, gamma, eta)?;
    check_batch(y_batch, z_batch)?;

    let mut sums = TverskySums::default();
    for (y, z) in y_batch.iter().zip(z_batch) {
        sums.accumulate(y, z, gamma);
    }
    let numer = sums.overlap + eta;
    let denom = alpha * sums.focal_pred + beta * sums.active + eta;
    // denom - numer, arranged as a sum of nonnegative terms plus the
    // (at most 1e-12 scale) correction for alpha + beta != 1.
    let gap =
        alpha * sums.focal_pred_inactive + beta * sums.missed - (1.0 - alpha - beta) * sums.overlap;
    let value = (gap / denom).max(0.0);

    // dE/dy = -f'(y) (z * denom - alpha * numer) / denom^2
    let inv_d2 = 1.0 / (denom * denom);
    let active_coef = (denom - alpha * numer) * inv_d2;
    let inactive_coef = -alpha * numer * inv_d2;
    let grads = y_batch
        .iter()
        .zip(z_batch)
        .map(|(y, z)| {
            let mut g = Array2::zeros(y.shape());
            Zip::from(&mut g)
                .and(y.values())
                .and(z.values())
                .for_each(|g, &yv, &zv| {
                    let coef = if zv == 1 { active_coef } else { inactive_coef };
                    *g = -focal_score_grad(yv, gamma) * coef;
                });
            g
        })
        .collect();
    Ok(BatchLossOutput { value, grads })
}

/// How the Tversky sums are pooled across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FbtlPooling {
    /// One ratio over the whole mini-batch.
    #[default]
    Batch,
    /// One ratio per clip, summed over clips.
    PerClip,
}

/// Routes a batch to the loss named by `spec`.
///
/// Per-frame losses are summed over clips. `freq` must be given exactly when
/// the spec is IFL.
pub fn loss_dispatch(
    spec: &LossSpec,
    y_batch: &[PredictionGrid],
    z_batch: &[LabelGrid],
    freq: Option<&ClassFrequency>,
) -> Result<BatchLossOutput> {
    loss_dispatch_with(spec, y_batch, z_batch, freq, FbtlPooling::Batch)
}

pub fn loss_dispatch_with(
    spec: &LossSpec,
    y_batch: &[PredictionGrid],
    z_batch: &[LabelGrid],
    freq: Option<&ClassFrequency>,
    pooling: FbtlPooling,
) -> Result<BatchLossOutput> {
    spec.validate()?;
    check_batch(y_batch, z_batch)?;
    match (spec.needs_class_frequency(), freq.is_some()) {
        (true, false) => {
            return Err(Error::Config(
                "the inverse frequency loss needs class frequencies".into(),
            ))
        }
        (false, true) => {
            return Err(Error::Config(format!(
                "class frequencies given to the {} loss, which does not use them",
                spec.name()
            )))
        }
        _ => {}
    }

    if let LossSpec::Fbtl {
        alpha,
        beta,
        gamma,
        eta,
    } = *spec
    {
        return match pooling {
            FbtlPooling::Batch => fbtl_loss(y_batch, z_batch, alpha, beta, gamma, eta),
            FbtlPooling::PerClip => {
                let mut value = 0.0;
                let mut grads = Vec::with_capacity(y_batch.len());
                for (y, z) in y_batch.iter().zip(z_batch) {
                    let out = fbtl_loss(
                        std::slice::from_ref(y),
                        std::slice::from_ref(z),
                        alpha,
                        beta,
                        gamma,
                        eta,
                    )?;
                    value += out.value;
                    grads.extend(out.grads);
                }
                Ok(BatchLossOutput { value, grads })
            }
        };
    }

    let mut value = 0.0;
    let mut grads = Vec::with_capacity(y_batch.len());
    for (y, z) in y_batch.iter().zip(z_batch) {
        let out = match *spec {
            LossSpec::Bce => bce_loss(y, z)?,
            LossSpec::Srl { alpha, beta } => srl_loss(y, z, alpha, beta)?,
            LossSpec::Ifl { gamma, c } => ifl_loss(y, z, gamma, c, freq.expect("checked above"))?,
            LossSpec::Afl { gamma, zeta } => afl_loss(y, z, gamma, zeta)?,
            LossSpec::Fbtl { .. } => unreachable!(),
        };
        value += out.value;
        grads.push(out.grad);
    }
    Ok(BatchLossOutput { value, grads })
}
