//! Dense row-major `f64` tensors and the convolution kernels shared by the
//! tape and the verifier.
//!
//! Layout convention: signals are channels-first, `[C, T]`, and all temporal
//! operators act along the last axis. The repo-wide 1-D operator is
//! *correlation with centred taps*: for kernel length `κ` (odd) and
//! `c = (κ-1)/2`,
//!
//! ```text
//! y[o][t] = Σ_cl Σ_j  w[o][cl][j] · x[in(cl)][ t + (j-c)·dilation ]
//! ```
//!
//! with time indices taken modulo `T` in the circular variant and reads
//! outside `[0, T)` treated as zero in the zero-padded variant. The
//! equivariance statements in [`crate::verify`] are orientation-agnostic, so
//! this single convention is used everywhere.

use crate::error::{Error, Result};

/// Dense tensor: extents plus row-major `f64` storage.
///
/// Tensors are immutable values once built; operations return fresh tensors.
/// The optimizer is the one place that updates parameter storage in place,
/// via [`Tensor::data_mut`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Builds a tensor from raw data, checking length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("from_vec (value {bad})")));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar tensors (and 1-element tensors) as `f64`.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// Interprets the tensor as `[C, T]`, the signal layout.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [c, t] => Ok((c, t)),
            _ => Err(Error::shape("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    #[inline]
    pub fn at2(&self, c: usize, t: usize) -> f64 {
        let w = self.shape[self.shape.len() - 1];
        self.data[c * w + t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Euclidean norm of all entries.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise `self + alpha * other`, used by the optimizer and tests.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    /// Cyclic time shift along the last axis: `y[c][t] = x[c][(t - tau) mod T]`.
    pub fn shift_time(&self, tau: i64) -> Tensor {
        let t_len = *self.shape.last().expect("shift_time on rank-0 tensor");
        let rows = self.data.len() / t_len;
        let tau = tau.rem_euclid(t_len as i64) as usize;
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            let src = &self.data[r * t_len..(r + 1) * t_len];
            let dst = &mut out[r * t_len..(r + 1) * t_len];
            for t in 0..t_len {
                dst[t] = src[(t + t_len - tau) % t_len];
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }
}

/// Argument validation shared by both convolution variants.
fn check_conv(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    groups: usize,
    dilation: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, t_len) = x.dims2().map_err(|_| {
        Error::shape(op, format!("input must be [C, T], got {:?}", x.shape()))
    })?;
    let (c_out, c_in_g, kappa) = match w.shape()[..] {
        [a, b, c] => (a, b, c),
        _ => {
            return Err(Error::shape(
                op,
                format!("weight must be [C_out, C_in/groups, kappa], got {:?}", w.shape()),
            ))
        }
    };
    if kappa % 2 == 0 {
        return Err(Error::shape(op, format!("kernel length {kappa} must be odd")));
    }
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::shape(
            op,
            format!("groups {groups} must divide C_in {c_in} and C_out {c_out}"),
        ));
    }
    if c_in_g != c_in / groups {
        return Err(Error::shape(
            op,
            format!("weight C_in/groups {} but input implies {}", c_in_g, c_in / groups),
        ));
    }
    if dilation == 0 || dilation * (kappa - 1) >= t_len {
        return Err(Error::shape(
            op,
            format!("dilation {dilation} with kernel {kappa} exceeds window length {t_len}"),
        ));
    }
    Ok((c_in, t_len, c_out, c_in_g, kappa))
}

/// Grouped circular 1-D correlation with centred taps; output length is
/// exactly `T`, so `conv(shift(x)) == shift(conv(x))` by reindexing.
pub fn conv1d_circular(x: &Tensor, w: &Tensor, groups: usize, dilation: usize) -> Result<Tensor> {
    let (_c_in, t_len, c_out, c_in_g, kappa) = check_conv("conv1d_circular", x, w, groups, dilation)?;
    let centre = (kappa - 1) / 2;
    let out_per_g = c_out / groups;
    let mut y = vec![0.0; c_out * t_len];
    for o in 0..c_out {
        let g = o / out_per_g;
        let row = &mut y[o * t_len..(o + 1) * t_len];
        for cl in 0..c_in_g {
            let xi = g * c_in_g + cl;
            let xrow = &x.data[xi * t_len..(xi + 1) * t_len];
            for j in 0..kappa {
                let wv = w.data[(o * c_in_g + cl) * kappa + j];
                // offset of the tap, folded into [0, T)
                let off = ((j as isize - centre as isize) * dilation as isize)
                    .rem_euclid(t_len as isize) as usize;
                let split = t_len - off;
                for t in 0..split {
                    row[t] += wv * xrow[t + off];
                }
                for t in split..t_len {
                    row[t] += wv * xrow[t + off - t_len];
                }
            }
        }
    }
    Ok(Tensor { shape: vec![c_out, t_len], data: y })
}

/// Gradients of [`conv1d_circular`] with respect to input and weight.
pub(crate) fn conv1d_circular_grads(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    groups: usize,
    dilation: usize,
) -> (Tensor, Tensor) {
    let (c_in, t_len) = x.dims2().unwrap();
    let (c_out, c_in_g, kappa) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let centre = (kappa - 1) / 2;
    let out_per_g = c_out / groups;
    let mut gx = vec![0.0; c_in * t_len];
    let mut gw = vec![0.0; w.numel()];
    for o in 0..c_out {
        let g = o / out_per_g;
        let gyrow = &gy.data[o * t_len..(o + 1) * t_len];
        for cl in 0..c_in_g {
            let xi = g * c_in_g + cl;
            let xrow = &x.data[xi * t_len..(xi + 1) * t_len];
            let gxrow = &mut gx[xi * t_len..(xi + 1) * t_len];
            for j in 0..kappa {
                let off = ((j as isize - centre as isize) * dilation as isize)
                    .rem_euclid(t_len as isize) as usize;
                let split = t_len - off;
                let wv = w.data[(o * c_in_g + cl) * kappa + j];
                let mut acc = 0.0;
                // y[t] reads x[t+off]; so gx[s] gathers gy[s-off] and
                // gw[j] gathers gy[t]*x[t+off].
                for t in 0..split {
                    acc += gyrow[t] * xrow[t + off];
                    gxrow[t + off] += wv * gyrow[t];
                }
                for t in split..t_len {
                    acc += gyrow[t] * xrow[t + off - t_len];
                    gxrow[t + off - t_len] += wv * gyrow[t];
                }
                gw[(o * c_in_g + cl) * kappa + j] += acc;
            }
        }
    }
    (
        Tensor { shape: vec![c_in, t_len], data: gx },
        Tensor { shape: w.shape().to_vec(), data: gw },
    )
}

/// Grouped zero-padded ("same") 1-D correlation; taps outside the window read
/// zero, which is what breaks shift equivariance in the PlainCNN baseline.
pub fn conv1d_zeropad(x: &Tensor, w: &Tensor, groups: usize, dilation: usize) -> Result<Tensor> {
    let (_c_in, t_len, c_out, c_in_g, kappa) = check_conv("conv1d_zeropad", x, w, groups, dilation)?;
    let centre = (kappa - 1) / 2;
    let out_per_g = c_out / groups;
    let mut y = vec![0.0; c_out * t_len];
    for o in 0..c_out {
        let g = o / out_per_g;
        let row = &mut y[o * t_len..(o + 1) * t_len];
        for cl in 0..c_in_g {
            let xi = g * c_in_g + cl;
            let xrow = &x.data[xi * t_len..(xi + 1) * t_len];
            for j in 0..kappa {
                let wv = w.data[(o * c_in_g + cl) * kappa + j];
                let off = (j as isize - centre as isize) * dilation as isize;
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((t_len as isize - off).min(t_len as isize)).max(0) as usize;
                for t in t_lo..t_hi {
                    row[t] += wv * xrow[(t as isize + off) as usize];
                }
            }
        }
    }
    Ok(Tensor { shape: vec![c_out, t_len], data: y })
}

pub(crate) fn conv1d_zeropad_grads(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    groups: usize,
    dilation: usize,
) -> (Tensor, Tensor) {
    let (c_in, t_len) = x.dims2().unwrap();
    let (c_out, c_in_g, kappa) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let centre = (kappa - 1) / 2;
    let out_per_g = c_out / groups;
    let mut gx = vec![0.0; c_in * t_len];
    let mut gw = vec![0.0; w.numel()];
    for o in 0..c_out {
        let g = o / out_per_g;
        let gyrow = &gy.data[o * t_len..(o + 1) * t_len];
        for cl in 0..c_in_g {
            let xi = g * c_in_g + cl;
            let xrow = &x.data[xi * t_len..(xi + 1) * t_len];
            let gxrow = &mut gx[xi * t_len..(xi + 1) * t_len];
            for j in 0..kappa {
                let wv = w.data[(o * c_in_g + cl) * kappa + j];
                let off = (j as isize - centre as isize) * dilation as isize;
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((t_len as isize - off).min(t_len as isize)).max(0) as usize;
                let mut acc = 0.0;
                for t in t_lo..t_hi {
                    let s = (t as isize + off) as usize;
                    acc += gyrow[t] * xrow[s];
                    gxrow[s] += wv * gyrow[t];
                }
                gw[(o * c_in_g + cl) * kappa + j] += acc;
            }
        }
    }
    (
        Tensor { shape: vec![c_in, t_len], data: gx },
        Tensor { shape: w.shape().to_vec(), data: gw },
    )
}

/// Depthwise circular box filter of length `k` (uniform taps `1/k`).
pub fn box_filter_circular(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, _t) = x.dims2()?;
    let w = box_kernel(c, k);
    conv1d_circular(x, &w, c, 1)
}

/// The depthwise weight bank realizing the box filter.
pub fn box_kernel(channels: usize, k: usize) -> Tensor {
    Tensor::filled(&[channels, 1, k], 1.0 / k as f64)
}

/// Global average pool over time: `[C, T] -> [C]`.
pub fn gap_time(x: &Tensor) -> Result<Tensor> {
    let (c, t_len) = x.dims2()?;
    let mut out = vec![0.0; c];
    for ci in 0..c {
        let row = &x.data[ci * t_len..(ci + 1) * t_len];
        out[ci] = row.iter().sum::<f64>() / t_len as f64;
    }
    Ok(Tensor { shape: vec![c], data: out })
}

/// ℓ2 magnitude across the axis slots of each (sensor, feature) pair:
/// input `[(S·A·K), T]` laid out sensor-major (`(s·A + a)·K + k`), output
/// `[(S·K), T]` with `y[s·K + k][t] = sqrt(Σ_a x[(s·A+a)·K + k][t]²)`.
pub fn l2_over_axes(x: &Tensor, sensors: usize, axes: usize) -> Result<Tensor> {
    let (c, t_len) = x.dims2()?;
    if c % (sensors * axes) != 0 {
        return Err(Error::shape(
            "l2_over_axes",
            format!("{c} channels not divisible by {sensors} sensors x {axes} axes"),
        ));
    }
    let k = c / (sensors * axes);
    let mut out = vec![0.0; sensors * k * t_len];
    for s in 0..sensors {
        for f in 0..k {
            let dst = &mut out[(s * k + f) * t_len..(s * k + f + 1) * t_len];
            for a in 0..axes {
                let src = &x.data[((s * axes + a) * k + f) * t_len..((s * axes + a) * k + f + 1) * t_len];
                for t in 0..t_len {
                    dst[t] += src[t] * src[t];
                }
            }
            for v in dst.iter_mut() {
                *v = v.sqrt();
            }
        }
    }
    Ok(Tensor { shape: vec![sensors * k, t_len], data: out })
}

/// Per-sample GroupNorm over `(channels-in-group × time)` with per-channel
/// affine. Returns the normalized output; the tape version also keeps the
/// statistics for the backward pass.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    Ok(group_norm_fwd(x, gamma, beta, groups, eps)?.0)
}

pub(crate) struct GnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn group_norm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<(Tensor, GnStats)> {
    let (c, t_len) = x.dims2()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape("group_norm", format!("{groups} groups do not divide {c} channels")));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "group_norm",
            format!("affine params must have {c} entries, got {}/{}", gamma.numel(), beta.numel()),
        ));
    }
    let cg = c / groups;
    let m = (cg * t_len) as f64;
    let mut out = vec![0.0; x.numel()];
    let mut stats = GnStats { mean: vec![0.0; groups], inv_std: vec![0.0; groups] };
    for g in 0..groups {
        let lo = g * cg * t_len;
        let hi = (g + 1) * cg * t_len;
        let block = &x.data[lo..hi];
        let mean = block.iter().sum::<f64>() / m;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv_std = 1.0 / (var + eps).sqrt();
        stats.mean[g] = mean;
        stats.inv_std[g] = inv_std;
        for ci in 0..cg {
            let ch = g * cg + ci;
            let ga = gamma.data[ch];
            let be = beta.data[ch];
            for t in 0..t_len {
                let idx = ch * t_len + t;
                out[idx] = ga * (x.data[idx] - mean) * inv_std + be;
            }
        }
    }
    Ok((Tensor { shape: vec![c, t_len], data: out }, stats))
}
