//! Frame-by-class matrices shared by the loss, model, and metric code.
//!
//! All grids are stored row-major with one row per time frame and one column
//! per event class (or feature dimension for [`FeatureGrid`]).

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Predictions are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before any log or
/// power is taken.
pub const CLAMP_EPS: f64 = 1e-7;

#[inline]
pub fn clamp_prob(y: f64) -> f64 {
    y.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

fn check_nonempty(rows: usize, cols: usize, what: &str) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Validation(format!(
            "{what} must have at least one frame and one column, got {rows}x{cols}"
        )));
    }
    Ok(())
}

/// Per-frame, per-class detection scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid(Array2<f64>);

impl PredictionGrid {
    /// Builds a grid from scores in `[0, 1]`, clamping them into the open
    /// interval.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let mut grid = Self::new_unclamped(values)?;
        grid.0.mapv_inplace(clamp_prob);
        Ok(grid)
    }

    /// Builds a grid that keeps exact `0` and `1` entries.
    ///
    /// Log-based losses still clamp internally; the batch Tversky loss
    /// evaluates such grids exactly, which is what the closed-form identities
    /// in its tests rely on.
    pub fn new_unclamped(values: Array2<f64>) -> Result<Self> {
        check_nonempty(values.nrows(), values.ncols(), "prediction grid")?;
        if let Some(bad) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "prediction {bad} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_shape_vec(frames: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        let arr = Array2::from_shape_vec((frames, classes), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Per-frame, per-class binary targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid(Array2<u8>);

impl LabelGrid {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        check_nonempty(values.nrows(), values.ncols(), "label grid")?;
        if let Some(bad) = values.iter().find(|v| **v > 1) {
            return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
        }
        Ok(Self(values))
    }

    pub fn from_shape_vec(frames: usize, classes: usize, values: Vec<u8>) -> Result<Self> {
        let arr = Array2::from_shape_vec((frames, classes), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn zeros(frames: usize, classes: usize) -> Result<Self> {
        Self::new(Array2::zeros((frames, classes)))
    }

    pub fn values(&self) -> ArrayView2<'_, u8> {
        self.0.view()
    }

    #[inline]
    pub fn is_active(&self, frame: usize, class: usize) -> bool {
        self.0[[frame, class]] == 1
    }

    pub(crate) fn set(&mut self, frame: usize, class: usize, active: bool) {
        self.0[[frame, class]] = u8::from(active);
    }

    pub fn n_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Labels as 0.0 / 1.0 scores.
    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(f64::from)
    }
}

/// Acoustic features for one clip: frames by feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid(Array2<f64>);

impl FeatureGrid {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_nonempty(values.nrows(), values.ncols(), "feature grid")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "feature grid has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn n_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

pub(crate) fn ensure_same_shape(y: (usize, usize), z: (usize, usize)) -> Result<()> {
    if y != z {
        return Err(Error::Shape(format!(
            "predictions are {}x{} but labels are {}x{}",
            y.0, y.1, z.0, z.1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn prediction_grid_clamps_into_open_interval() {
        let g = PredictionGrid::new(array![[0.0, 1.0, 0.5]]).unwrap();
        let v = g.values();
        assert_eq!(v[[0, 0]], CLAMP_EPS);
        assert_eq!(v[[0, 1]], 1.0 - CLAMP_EPS);
        assert_eq!(v[[0, 2]], 0.5);
    }

    #[test]
    fn prediction_grid_rejects_out_of_range_and_nan() {
        assert!(PredictionGrid::new(array![[1.5]]).is_err());
        assert!(PredictionGrid::new(array![[f64::NAN]]).is_err());
        assert!(PredictionGrid::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn label_grid_rejects_non_binary() {
        assert!(matches!(
            LabelGrid::new(array![[0, 2]]),
            Err(Error::Validation(_))
        ));
        assert!(LabelGrid::new(array![[0, 1]]).is_ok());
    }
}
