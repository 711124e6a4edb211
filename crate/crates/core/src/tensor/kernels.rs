//! Forward/backward loops for the non-elementwise operators. Everything here
//! works on flat channel-last slices; shape checking happens in the graph.

use super::Real;

/// Per-row statistics of a normalization: mean and reciprocal std.
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer norm over the trailing `d` values of each of `rows` rows.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    eps: T,
    out: &mut [T],
) -> NormStats<T> {
    let rows = x.len() / d;
    let inv_d = T::one() / T::cast(d as f64);
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mu = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mu) * r * gain[i] + bias[i];
        }
        mean.push(mu);
        rstd.push(r);
    }
    NormStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    stats: &NormStats<T>,
    dy: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let inv_d = T::one() / T::cast(d as f64);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    let mut dx = dx;
    let mut dgain = dgain;
    let mut dbias = dbias;
    for (row, (xr, gr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
        let (mu, r) = (stats.mean[row], stats.rstd[row]);
        for i in 0..d {
            xhat[i] = (xr[i] - mu) * r;
            dxhat[i] = gr[i] * gain[i];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] = dg[i] + gr[i] * xhat[i];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for i in 0..d {
                db[i] = db[i] + gr[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
            let m2 = dxhat
                .iter()
                .zip(&xhat)
                .map(|(a, b)| *a * *b)
                .sum::<T>()
                * inv_d;
            let dxr = &mut dx[row * d..(row + 1) * d];
            for i in 0..d {
                dxr[i] = dxr[i] + r * (dxhat[i] - m1 - xhat[i] * m2);
            }
        }
    }
}

/// Per-channel mean and biased variance over all rows.
pub(crate) fn channel_moments<T: Real>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let inv_n = T::one() / T::cast(rows as f64);
    let mut mean = vec![T::zero(); d];
    for xr in x.chunks_exact(d) {
        for i in 0..d {
            mean[i] = mean[i] + xr[i];
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_n);
    let mut var = vec![T::zero(); d];
    for xr in x.chunks_exact(d) {
        for i in 0..d {
            let c = xr[i] - mean[i];
            var[i] = var[i] + c * c;
        }
    }
    var.iter_mut().for_each(|v| *v = *v * inv_n);
    (mean, var)
}

/// Affine per-channel normalization with precomputed statistics.
pub(crate) fn channel_normalize<T: Real>(
    x: &[T],
    mean: &[T],
    rstd: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    out: &mut [T],
) {
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for i in 0..d {
            or[i] = (xr[i] - mean[i]) * rstd[i] * gain[i] + bias[i];
        }
    }
}

/// Batch-norm backward. With `batch_stats` the statistics were computed from
/// `x` itself and the full normalization Jacobian applies; otherwise the
/// statistics are constants (eval mode) and the map is affine.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    d: usize,
    batch_stats: bool,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let rows = x.len() / d;
    let inv_n = T::one() / T::cast(rows as f64);
    let mut sum_dxhat = vec![T::zero(); d];
    let mut sum_dxhat_xhat = vec![T::zero(); d];
    let mut sum_dy = vec![T::zero(); d];
    let mut sum_dy_xhat = vec![T::zero(); d];
    for (xr, gr) in x.chunks_exact(d).zip(dy.chunks_exact(d)) {
        for i in 0..d {
            let xhat = (xr[i] - mean[i]) * rstd[i];
            sum_dy[i] = sum_dy[i] + gr[i];
            sum_dy_xhat[i] = sum_dy_xhat[i] + gr[i] * xhat;
            let dxh = gr[i] * gain[i];
            sum_dxhat[i] = sum_dxhat[i] + dxh;
            sum_dxhat_xhat[i] = sum_dxhat_xhat[i] + dxh * xhat;
        }
    }
    if let Some(dg) = dgain {
        for i in 0..d {
            dg[i] = dg[i] + sum_dy_xhat[i];
        }
    }
    if let Some(db) = dbias {
        for i in 0..d {
            db[i] = db[i] + sum_dy[i];
        }
    }
    if let Some(dx) = dx {
        for ((xr, gr), dxr) in x
            .chunks_exact(d)
            .zip(dy.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
        {
            for i in 0..d {
                let dxh = gr[i] * gain[i];
                let v = if batch_stats {
                    let xhat = (xr[i] - mean[i]) * rstd[i];
                    rstd[i]
                        * (dxh - sum_dxhat[i] * inv_n - xhat * sum_dxhat_xhat[i] * inv_n)
                } else {
                    rstd[i] * dxh
                };
                dxr[i] = dxr[i] + v;
            }
        }
    }
}

/// Geometry of a channel-last feature map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MapDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Reorders a `[D, 3, 3]` kernel to `[9, D]` so the inner loop runs over
/// contiguous channels.
pub(crate) fn tap_major<T: Real>(kernel: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 9 * d];
    for c in 0..d {
        for tap in 0..9 {
            out[tap * d + c] = kernel[c * 9 + tap];
        }
    }
    out
}

/// Depthwise 3×3 convolution, stride 1, zero padding 1.
pub(crate) fn dw_conv3x3_forward<T: Real>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    dims: MapDims,
    out: &mut [T],
) {
    let MapDims {
        batch,
        height,
        width,
        channels: d,
    } = dims;
    let taps = tap_major(kernel, d);
    for b in 0..batch {
        for y in 0..height {
            for x0 in 0..width {
                let o = ((b * height + y) * width + x0) * d;
                let orow = &mut out[o..o + d];
                orow.copy_from_slice(bias);
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x0 as isize + kx as isize - 1;
                        if xx < 0 || xx >= width as isize {
                            continue;
                        }
                        let i = ((b * height + yy as usize) * width + xx as usize) * d;
                        let xrow = &x[i..i + d];
                        let k = &taps[(ky * 3 + kx) * d..(ky * 3 + kx + 1) * d];
                        for c in 0..d {
                            orow[c] = orow[c] + xrow[c] * k[c];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dw_conv3x3_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    dims: MapDims,
    mut dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let MapDims {
        batch,
        height,
        width,
        channels: d,
    } = dims;
    let taps = tap_major(kernel, d);
    let mut dtaps = dkernel.as_ref().map(|_| vec![T::zero(); 9 * d]);
    if let Some(db) = dbias {
        for gr in dy.chunks_exact(d) {
            for c in 0..d {
                db[c] = db[c] + gr[c];
            }
        }
    }
    for b in 0..batch {
        for y in 0..height {
            for x0 in 0..width {
                let o = ((b * height + y) * width + x0) * d;
                let grow = &dy[o..o + d];
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x0 as isize + kx as isize - 1;
                        if xx < 0 || xx >= width as isize {
                            continue;
                        }
                        let tap = ky * 3 + kx;
                        let i = ((b * height + yy as usize) * width + xx as usize) * d;
                        if let Some(dx) = dx.as_deref_mut() {
                            let k = &taps[tap * d..(tap + 1) * d];
                            let dxrow = &mut dx[i..i + d];
                            for c in 0..d {
                                dxrow[c] = dxrow[c] + grow[c] * k[c];
                            }
                        }
                        if let Some(dt) = dtaps.as_mut() {
                            let xrow = &x[i..i + d];
                            let dk = &mut dt[tap * d..(tap + 1) * d];
                            for c in 0..d {
                                dk[c] = dk[c] + grow[c] * xrow[c];
                            }
                        }
                    }
                }
            }
        }
    }
    if let (Some(dk), Some(dt)) = (dkernel, dtaps) {
        for c in 0..d {
            for tap in 0..9 {
                dk[c * 9 + tap] = dk[c * 9 + tap] + dt[tap * d + c];
            }
        }
    }
}

/// Gathers non-overlapping `p×p` patches into rows of length `p·p·cin`,
/// ordered (patch_row, patch_col, in_channel).
pub(crate) fn im2col_patches<T: Real>(x: &[T], dims: MapDims, p: usize) -> Vec<T> {
    let MapDims {
        batch,
        height,
        width,
        channels: cin,
    } = dims;
    let (gh, gw) = (height / p, width / p);
    let row_len = p * p * cin;
    let mut cols = vec![T::zero(); batch * gh * gw * row_len];
    for b in 0..batch {
        for ty in 0..gh {
            for tx in 0..gw {
                let r = ((b * gh + ty) * gw + tx) * row_len;
                for py in 0..p {
                    let src = ((b * height + ty * p + py) * width + tx * p) * cin;
                    let dst = r + py * p * cin;
                    cols[dst..dst + p * cin].copy_from_slice(&x[src..src + p * cin]);
                }
            }
        }
    }
    cols
}

/// Scatters patch-row gradients back to image layout (adds into `dx`).
pub(crate) fn col2im_patches<T: Real>(dcols: &[T], dims: MapDims, p: usize, dx: &mut [T]) {
    let MapDims {
        batch,
        height,
        width,
        channels: cin,
    } = dims;
    let (gh, gw) = (height / p, width / p);
    let row_len = p * p * cin;
    for b in 0..batch {
        for ty in 0..gh {
            for tx in 0..gw {
                let r = ((b * gh + ty) * gw + tx) * row_len;
                for py in 0..p {
                    let dst = ((b * height + ty * p + py) * width + tx * p) * cin;
                    let src = r + py * p * cin;
                    for i in 0..p * cin {
                        dx[dst + i] = dx[dst + i] + dcols[src + i];
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
