//! Dense n-dimensional arrays over 64-bit scalars.
//!
//! All numeric state in the repo lives in [`Tensor`]. Arithmetic always runs
//! in f64; [`FloatMode::F32`] additionally rounds every produced buffer to
//! f32 precision, so a training run in 32-bit mode only ever holds values
//! that are exactly representable as f32 (which is what makes 32-bit
//! checkpoints round-trip bitwise).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch for {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op} expects {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("index {index} out of range {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Global scalar precision of a graph or parameter tree.
///
/// Never mixed within one graph: the mode is fixed at tape/parameter
/// construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FloatMode {
    /// Full f64 arithmetic. Used by gradient-oracle tests.
    F64,
    /// f64 arithmetic with every result rounded to f32 precision. Training default.
    F32,
}

impl FloatMode {
    pub fn name(self) -> &'static str {
        match self {
            FloatMode::F64 => "f64",
            FloatMode::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Option<FloatMode> {
        match s {
            "f64" => Some(FloatMode::F64),
            "f32" => Some(FloatMode::F32),
            _ => None,
        }
    }
}

/// Dense row-major n-d array. `data.len() == product(shape)`, extents >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "extents must be >= 1".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("product(shape) = {n} but data has {} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: extents >= 1
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::RankMismatch {
                op,
                expected: "a rank-2 tensor",
                got: self.shape.clone(),
            }),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Round every element to f32 precision when in 32-bit mode.
    pub fn round_to_mode(&mut self, mode: FloatMode) {
        if mode == FloatMode::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += scale * other`. Shapes must match.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }
}

/// C = A @ B for row-major A [m,k], B [k,n]. Accumulation order is fixed
/// (k ascending), so results are bit-reproducible.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    matmul_acc(a, b, &mut out, m, k, n, 1.0);
    out
}

/// out += scale * (A @ B), same layout as [`matmul`].
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, scale: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // i-k-j order: unit-stride inner loop over both B rows and the output row.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let f = scale * av;
            if f == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += f * bv;
            }
        }
    }
}

/// C = A @ B^T for row-major A [m,k], B [n,k].
pub fn matmul_transb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C = A^T @ B for row-major A [m,k], B [m,n], producing [k,n].
pub fn matmul_transa(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// 2-D transpose of row-major A [m,n] into [n,m].
pub fn transpose2d(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Interpolation taps along one axis under the corner-aligned convention:
/// output sample `i` reads source coordinate `i*(n_in-1)/(n_out-1)`
/// (coordinate 0 when `n_out == 1`). Returns `(lo, hi, w_hi)` per output
/// index; an integer coordinate yields `w_hi == 0` so identity resampling is
/// bitwise exact.
pub fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    debug_assert!(n_in >= 1 && n_out >= 1);
    (0..n_out)
        .map(|i| {
            let x = if n_out == 1 {
                0.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (x.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let w = x - lo as f64;
            (lo, hi, w)
        })
        .collect()
}

/// Flat index into an x-fastest 3-D grid.
#[inline]
pub fn grid_index(x: usize, y: usize, z: usize, nx: usize, ny: usize) -> usize {
    x + nx * (y + ny * z)
}

/// Trilinear resampling of a per-cell feature table.
///
/// `input` holds `nx*ny*nz` rows of `channels` values, rows ordered
/// x-fastest. Produces the same layout at the output grid, corner-aligned.
pub fn resample3d(
    input: &[f64],
    in_grid: [usize; 3],
    out_grid: [usize; 3],
    channels: usize,
) -> Vec<f64> {
    let [ix, iy, iz] = in_grid;
    let [ox, oy, oz] = out_grid;
    debug_assert_eq!(input.len(), ix * iy * iz * channels);
    let tx = axis_taps(ix, ox);
    let ty = axis_taps(iy, oy);
    let tz = axis_taps(iz, oz);
    let mut out = vec![0.0f64; ox * oy * oz * channels];
    for z in 0..oz {
        let (z0, z1, wz) = tz[z];
        for y in 0..oy {
            let (y0, y1, wy) = ty[y];
            for x in 0..ox {
                let (x0, x1, wx) = tx[x];
                let orow = grid_index(x, y, z, ox, oy) * channels;
                // 8 corners; weights multiply out to 1.
                let corners = [
                    (x0, y0, z0, (1.0 - wx) * (1.0 - wy) * (1.0 - wz)),
                    (x1, y0, z0, wx * (1.0 - wy) * (1.0 - wz)),
                    (x0, y1, z0, (1.0 - wx) * wy * (1.0 - wz)),
                    (x1, y1, z0, wx * wy * (1.0 - wz)),
                    (x0, y0, z1, (1.0 - wx) * (1.0 - wy) * wz),
                    (x1, y0, z1, wx * (1.0 - wy) * wz),
                    (x0, y1, z1, (1.0 - wx) * wy * wz),
                    (x1, y1, z1, wx * wy * wz),
                ];
                for (cx, cy, cz, w) in corners {
                    if w == 0.0 {
                        continue;
                    }
                    let irow = grid_index(cx, cy, cz, ix, iy) * channels;
                    for c in 0..channels {
                        out[orow + c] += w * input[irow + c];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`resample3d`]: scatters output-space values back onto the
/// input grid with the same weights.
pub fn resample3d_adjoint(
    grad_out: &[f64],
    in_grid: [usize; 3],
    out_grid: [usize; 3],
    channels: usize,
) -> Vec<f64> {
    let [ix, iy, iz] = in_grid;
    let [ox, oy, oz] = out_grid;
    debug_assert_eq!(grad_out.len(), ox * oy * oz * channels);
    let tx = axis_taps(ix, ox);
    let ty = axis_taps(iy, oy);
    let tz = axis_taps(iz, oz);
    let mut out = vec![0.0f64; ix * iy * iz * channels];
    for z in 0..oz {
        let (z0, z1, wz) = tz[z];
        for y in 0..oy {
            let (y0, y1, wy) = ty[y];
            for x in 0..ox {
                let (x0, x1, wx) = tx[x];
                let grow = grid_index(x, y, z, ox, oy) * channels;
                let corners = [
                    (x0, y0, z0, (1.0 - wx) * (1.0 - wy) * (1.0 - wz)),
                    (x1, y0, z0, wx * (1.0 - wy) * (1.0 - wz)),
                    (x0, y1, z0, (1.0 - wx) * wy * (1.0 - wz)),
                    (x1, y1, z0, wx * wy * (1.0 - wz)),
                    (x0, y0, z1, (1.0 - wx) * (1.0 - wy) * wz),
                    (x1, y0, z1, wx * (1.0 - wy) * wz),
                    (x0, y1, z1, (1.0 - wx) * wy * wz),
                    (x1, y1, z1, wx * wy * wz),
                ];
                for (cx, cy, cz, w) in corners {
                    if w == 0.0 {
                        continue;
                    }
                    let irow = grid_index(cx, cy, cz, ix, iy) * channels;
                    for c in 0..channels {
                        out[irow + c] += w * grad_out[grow + c];
                    }
                }
            }
        }
    }
    out
}
