//! Context-windowed feed-forward detector.
//!
//! Each frame sees the `2w + 1` surrounding frames (zero-padded at clip
//! edges), passes them through one leaky-ReLU hidden layer, and emits one
//! sigmoid score per class. Backpropagation is written out by hand.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, PredictionGrid};

pub const DEFAULT_LEAK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub window_radius: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, hidden: usize, classes: usize, window_radius: usize) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
            window_radius,
        }
    }

    /// Width of the concatenated context window.
    pub fn window_width(&self) -> usize {
        (2 * self.window_radius + 1) * self.input_dim
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Validation(format!(
                "model dimensions must be positive, got D={} H={} M={}",
                self.input_dim, self.hidden, self.classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub dims: ModelDims,
    pub leak: f64,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            w1: Array2::zeros((dims.hidden, dims.window_width())),
            b1: Array1::zeros(dims.hidden),
            w2: Array2::zeros((dims.classes, dims.hidden)),
            b2: Array1::zeros(dims.classes),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn scale(&mut self, k: f64) {
        self.w1 *= k;
        self.b1 *= k;
        self.w2 *= k;
        self.b2 *= k;
    }

    /// Flat views in declaration order.
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, leak: f64) -> Result<Self> {
        dims.validate()?;
        let g = ParamGrads::zeros(dims);
        Ok(Self {
            w1: g.w1,
            b1: g.b1,
            w2: g.w2,
            b2: g.b2,
            dims,
            leak,
        })
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// L2 norm of each tensor, in declaration order.
    pub fn norms(&self) -> [f64; 4] {
        self.slices()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// He-style initialization: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_params(seed: u64, dims: ModelDims) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(dims, DEFAULT_LEAK)?;
    let w1_dist =
        Normal::new(0.0, (2.0 / dims.window_width() as f64).sqrt()).expect("positive scale");
    params.w1.mapv_inplace(|_| w1_dist.sample(&mut rng));
    let w2_dist = Normal::new(0.0, (2.0 / dims.hidden as f64).sqrt()).expect("positive scale");
    params.w2.mapv_inplace(|_| w2_dist.sample(&mut rng));
    Ok(params)
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    windows: Array2<f64>,
    pre_hidden: Array2<f64>,
    hidden: Array2<f64>,
    /// Sigmoid outputs before clamping.
    scores: Array2<f64>,
}

impl ForwardCache {
    pub fn n_frames(&self) -> usize {
        self.scores.nrows()
    }

    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }
}

/// Stacks frames `n - w ..= n + w` into row `n`, zero-padded past the edges.
fn gather_windows(x: ArrayView2<'_, f64>, radius: usize) -> Array2<f64> {
    let (frames, dim) = x.dim();
    let mut out = Array2::zeros((frames, (2 * radius + 1) * dim));
    for n in 0..frames {
        for k in 0..=2 * radius {
            let Some(src) = (n + k).checked_sub(radius) else {
                continue;
            };
            if src >= frames {
                break;
            }
            out.slice_mut(s![n, k * dim..(k + 1) * dim])
                .assign(&x.row(src));
        }
    }
    out
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn forward(params: &ModelParams, x: &FeatureGrid) -> Result<(PredictionGrid, ForwardCache)> {
    if x.dim() != params.dims.input_dim {
        return Err(Error::Validation(format!(
            "features have {} dims, model expects {}",
            x.dim(),
            params.dims.input_dim
        )));
    }
    let windows = gather_windows(x.values(), params.dims.window_radius);
    let mut pre_hidden = windows.dot(&params.w1.t());
    pre_hidden += &params.b1;
    let leak = params.leak;
    let hidden = pre_hidden.mapv(|v| if v > 0.0 { v } else { leak * v });
    let mut logits = hidden.dot(&params.w2.t());
    logits += &params.b2;
    let scores = logits.mapv(sigmoid);
    let pred = PredictionGrid::new(scores.clone())?;
    Ok((
        pred,
        ForwardCache {
            windows,
            pre_hidden,
            hidden,
            scores,
        },
    ))
}

/// `dL/dlogit = dL/dy * y (1 - y)` using the unclamped sigmoid outputs.
pub fn logit_grad(cache: &ForwardCache, dl_dy: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if dl_dy.dim() != cache.scores.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, forward produced {:?}",
            dl_dy.dim(),
            cache.scores.dim()
        )));
    }
    let mut out = Array2::zeros(dl_dy.dim());
    Zip::from(&mut out)
        .and(dl_dy)
        .and(&cache.scores)
        .for_each(|o, &g, &y| *o = g * y * (1.0 - y));
    Ok(out)
}

pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dl_dy: ArrayView2<'_, f64>,
) -> Result<ParamGrads> {
    if cache.hidden.ncols() != params.dims.hidden
        || cache.windows.ncols() != params.dims.window_width()
        || cache.scores.ncols() != params.dims.classes
    {
        return Err(Error::Shape(
            "forward cache does not match model parameters".into(),
        ));
    }
    let d_logit = logit_grad(cache, dl_dy)?;
    let w2 = d_logit.t().dot(&cache.hidden);
    let b2 = d_logit.sum_axis(Axis(0));
    let mut d_pre = d_logit.dot(&params.w2);
    let leak = params.leak;
    Zip::from(&mut d_pre)
        .and(&cache.pre_hidden)
        .for_each(|d, &p| {
            if p <= 0.0 {
                *d *= leak;
            }
        });
    let w1 = d_pre.t().dot(&cache.windows);
    let b1 = d_pre.sum_axis(Axis(0));
    Ok(ParamGrads { w1, b1, w2, b2 })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEDLMLP1";

/// Writes `magic | D H M w (u64 LE) | leak (f64 LE) | w1 b1 w2 b2 (f64 LE)`.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    let d = params.dims;
    for v in [d.input_dim, d.hidden, d.classes, d.window_radius] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&params.leak.to_le_bytes())?;
    for slice in params.slices() {
        for v in slice {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let bad = |reason: &str| Error::Validation(format!("checkpoint: {reason}"));
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 8];
    let mut next = |input: &mut R| -> Result<[u8; 8]> {
        input.read_exact(&mut word).map_err(|_| bad("truncated"))?;
        Ok(word)
    };
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = usize::try_from(u64::from_le_bytes(next(&mut input)?))
            .map_err(|_| bad("dimension overflow"))?;
    }
    let leak = f64::from_le_bytes(next(&mut input)?);
    let mut params = ModelParams::zeros(ModelDims::new(dims[0], dims[1], dims[2], dims[3]), leak)?;
    for slice in params.slices_mut() {
        for v in slice.iter_mut() {
            *v = f64::from_le_bytes(next(&mut input)?);
        }
    }
    if input.read(&mut word).map_err(|_| bad("read failure"))? != 0 {
        return Err(bad("trailing bytes"));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    use crate::gradcheck::{central_difference_params, relative_error};
    use crate::grid::LabelGrid;
    use crate::losses::bce_loss;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureGrid {
        FeatureGrid::new(Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let dims = ModelDims::new(8, 16, 4, 2);
        let a = init_params(7, dims).unwrap();
        let b = init_params(7, dims).unwrap();
        let c = init_params(8, dims).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.w1, c.w1);
        assert_eq!(a.w1.dim(), (16, 40));
        assert!(a.b1.iter().chain(a.b2.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_params(0, ModelDims::new(0, 4, 2, 1)).is_err());
        assert!(init_params(0, ModelDims::new(3, 0, 2, 1)).is_err());
    }

    #[test]
    fn zero_params_give_half_everywhere() {
        let params = ModelParams::zeros(ModelDims::new(3, 4, 2, 1), DEFAULT_LEAK).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_features(&mut rng, 6, 3);
        let (y, _) = forward(&params, &x).unwrap();
        assert!(y.values().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn single_frame_clip_has_padded_context() {
        let params = init_params(1, ModelDims::new(3, 4, 2, 1)).unwrap();
        let x = FeatureGrid::new(array![[0.5, -0.2, 1.0]]).unwrap();
        let (y, cache) = forward(&params, &x).unwrap();
        assert_eq!(y.shape(), (1, 2));
        assert_eq!(
            cache.windows.row(0).to_vec(),
            vec![0.0, 0.0, 0.0, 0.5, -0.2, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let params = init_params(3, ModelDims::new(5, 8, 3, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_features(&mut rng, 20, 5);
        let (y, _) = forward(&params, &x).unwrap();
        assert!(y.values().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_feature_dim() {
        let params = init_params(3, ModelDims::new(5, 8, 3, 2)).unwrap();
        let x = FeatureGrid::new(Array2::zeros((4, 4))).unwrap();
        assert!(matches!(forward(&params, &x), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let params = init_params(3, ModelDims::new(3, 4, 2, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_features(&mut rng, 5, 3);
        let (_, cache) = forward(&params, &x).unwrap();
        let g = backward(&params, &cache, Array2::zeros((5, 2)).view()).unwrap();
        assert_eq!(g, ParamGrads::zeros(params.dims));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let params = init_params(3, ModelDims::new(3, 4, 2, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_features(&mut rng, 5, 3);
        let (_, cache) = forward(&params, &x).unwrap();
        let up = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let g1 = backward(&params, &cache, up.view()).unwrap();
        let g2 = backward(&params, &cache, (&up * 2.0).view()).unwrap();
        for (a, b) in g1.slices().iter().zip(g2.slices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let params = init_params(3, ModelDims::new(3, 4, 2, 1)).unwrap();
        let other = init_params(3, ModelDims::new(3, 5, 2, 1)).unwrap();
        let x = FeatureGrid::new(Array2::zeros((5, 3))).unwrap();
        let (_, cache) = forward(&params, &x).unwrap();
        assert!(matches!(
            backward(&other, &cache, Array2::zeros((5, 2)).view()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            backward(&params, &cache, Array2::zeros((4, 2)).view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sigmoid_bce_logit_gradient_is_y_minus_z() {
        let params = init_params(9, ModelDims::new(3, 4, 2, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_features(&mut rng, 8, 3);
        let z = LabelGrid::new(Array2::from_shape_fn((8, 2), |_| {
            u8::from(rng.gen_bool(0.4))
        }))
        .unwrap();
        let (y, cache) = forward(&params, &x).unwrap();
        let loss = bce_loss(&y, &z).unwrap();
        let d_logit = logit_grad(&cache, loss.grad.view()).unwrap();
        for ((d, yv), zv) in d_logit.iter().zip(y.values().iter()).zip(z.values().iter()) {
            assert!((d - (yv - f64::from(*zv))).abs() < 1e-10);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_fd() {
        let dims = ModelDims::new(3, 4, 2, 1);
        let params = init_params(21, dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_features(&mut rng, 5, 3);
        let z = LabelGrid::new(Array2::from_shape_fn((5, 2), |_| {
            u8::from(rng.gen_bool(0.5))
        }))
        .unwrap();
        let (y, cache) = forward(&params, &x).unwrap();
        let loss = bce_loss(&y, &z).unwrap();
        let grads = backward(&params, &cache, loss.grad.view()).unwrap();
        let numeric = central_difference_params(&params, 1e-6, |p| {
            bce_loss(&forward(p, &x).unwrap().0, &z).unwrap().value
        });
        for (a, n) in grads.slices().iter().zip(numeric.slices()) {
            for (av, nv) in a.iter().zip(n.iter()) {
                assert!(relative_error(*av, *nv) < 1e-4, "{av} vs {nv}");
            }
        }
    }

    #[test]
    fn padding_isolates_clip_from_distant_zero_frames() {
        let dims = ModelDims::new(3, 6, 2, 2);
        let params = init_params(2, dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_features(&mut rng, 10, 3);
        let (y_short, _) = forward(&params, &x).unwrap();
        let mut long = Array2::zeros((20, 3));
        long.slice_mut(s![5..15, ..]).assign(&x.values());
        let (y_long, _) = forward(&params, &FeatureGrid::new(long).unwrap()).unwrap();
        for n in 0..10 {
            for m in 0..2 {
                let (a, b) = (y_short.values()[[n, m]], y_long.values()[[n + 5, m]]);
                assert!((a - b).abs() < 1e-14, "frame {n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_rejects_corruption() {
        let params = init_params(4, ModelDims::new(3, 4, 2, 1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 5 * 8 + params.n_params() * 8);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), params);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(read_checkpoint(longer.as_slice()).is_err());
    }
}
