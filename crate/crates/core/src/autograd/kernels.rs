//! Raw forward/backward loops behind the graph operators.
//!
//! Image-like tensors are stored channel-last (`[height, width, channels]`).
//! Convolution kernels keep the conventional `[out, in, kh, kw]` order and
//! are transposed internally so the innermost loops run over contiguous
//! output channels.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `[out, in, kh, kw]` -> `[kh, kw, in, out]`
fn transpose_kernel(kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; kernel.len()];
    for o in 0..g.out_c {
        for i in 0..g.in_c {
            for y in 0..g.kh {
                for x in 0..g.kw {
                    let src = ((o * g.in_c + i) * g.kh + y) * g.kw + x;
                    let dst = ((y * g.kw + x) * g.in_c + i) * g.out_c + o;
                    out[dst] = kernel[src];
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let wt = transpose_kernel(kernel, g);
    let mut out = vec![0.0; oh * ow * g.out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * g.out_c..][..g.out_c];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                    let px = &input[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                    let wbase = (ky * g.kw + kx) * g.in_c * g.out_c;
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let w = &wt[wbase + ci * g.out_c..][..g.out_c];
                        for (r, &k) in row.iter_mut().zip(w) {
                            *r += v * k;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`; either may be skipped.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let wt = transpose_kernel(kernel, g);
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gwt = want_kernel.then(|| vec![0.0; kernel.len()]);
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &grad_out[(oy * ow + ox) * g.out_c..][..g.out_c];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                    let pbase = (iy * g.in_w + ix) * g.in_c;
                    let wbase = (ky * g.kw + kx) * g.in_c * g.out_c;
                    for ci in 0..g.in_c {
                        let woff = wbase + ci * g.out_c;
                        if let Some(gin) = gin.as_mut() {
                            let w = &wt[woff..][..g.out_c];
                            gin[pbase + ci] += w.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gwt) = gwt.as_mut() {
                            let v = input[pbase + ci];
                            if v != 0.0 {
                                for (w, &d) in gwt[woff..][..g.out_c].iter_mut().zip(go) {
                                    *w += v * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gk = gwt.map(|gwt| {
        let mut gk = vec![0.0; kernel.len()];
        for o in 0..g.out_c {
            for i in 0..g.in_c {
                for y in 0..g.kh {
                    for x in 0..g.kw {
                        gk[((o * g.in_c + i) * g.kh + y) * g.kw + x] =
                            gwt[((y * g.kw + x) * g.in_c + i) * g.out_c + o];
                    }
                }
            }
        }
        gk
    });
    (gin, gk)
}

/// Non-overlapping max pooling; returns the pooled values and, per output,
/// the flat input index of the (first) maximum.
pub fn maxpool2d_forward(
    input: &[f64],
    h: usize,
    w: usize,
    c: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for dy in 0..window {
                for dx in 0..window {
                    let ibase = ((oy * window + dy) * w + ox * window + dx) * c;
                    for ch in 0..c {
                        let v = input[ibase + ch];
                        if v > out[obase + ch] {
                            out[obase + ch] = v;
                            arg[obase + ch] = ibase + ch;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Target-lattice coordinate in `[-1, 1]` for cell `i` of `n`.
#[inline]
pub fn lattice(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// `[s_x, s_y, t_x, t_y]` -> grid `[h, w, 2]` of `(x_src, y_src)`.
pub fn affine_grid_forward(params: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (sx, sy, tx, ty) = (params[0], params[1], params[2], params[3]);
    let mut grid = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let yt = lattice(i, h);
        for j in 0..w {
            let xt = lattice(j, w);
            grid.push(sx * xt + tx);
            grid.push(sy * yt + ty);
        }
    }
    grid
}

pub fn affine_grid_backward(grad: &[f64], h: usize, w: usize) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..h {
        let yt = lattice(i, h);
        for j in 0..w {
            let xt = lattice(j, w);
            let gx = grad[(i * w + j) * 2];
            let gy = grad[(i * w + j) * 2 + 1];
            out[0] += gx * xt;
            out[1] += gy * yt;
            out[2] += gx;
            out[3] += gy;
        }
    }
    out
}

/// One interpolation tap along an axis: source index, weight, and the
/// derivative of the weight with respect to the continuous source position.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub index: usize,
    pub weight: f64,
    pub slope: f64,
}

/// Normalized coordinate -> continuous index, `(c + 1) / 2 * (extent - 1)`.
#[inline]
pub fn to_index(c: f64, extent: usize) -> f64 {
    (c + 1.0) * 0.5 * (extent - 1) as f64
}

/// The (at most two) in-range taps of the hat kernel `max(0, 1 - |p - m|)`.
pub fn taps(pos: f64, extent: usize) -> (i64, [Option<Tap>; 2]) {
    let base = pos.floor();
    let frac = pos - base;
    let b = base as i64;
    let make = |idx: i64, weight: f64, slope: f64| {
        (idx >= 0 && (idx as usize) < extent).then_some(Tap {
                index: idx as usize,
            weight,
            slope,
        })
    };
    (b, [make(b, 1.0 - frac, -1.0), make(b + 1, frac, 1.0)])
}

/// Bilinear read of `fm` (`[hf, wf, d]`) at every grid point; zero outside.
pub fn bilinear_forward(fm: &[f64], hf: usize, wf: usize, d: usize, grid: &[f64]) -> Vec<f64> {
    let n = grid.len() / 2;
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        let (_, tx) = taps(to_index(grid[2 * p], wf), wf);
        let (_, ty) = taps(to_index(grid[2 * p + 1], hf), hf);
        let row = &mut out[p * d..][..d];
        for ty in ty.iter().flatten() {
            for tx in tx.iter().flatten() {
                let w = ty.weight * tx.weight;
                if w == 0.0 {
                    continue;
                }
                let src = &fm[(ty.index * wf + tx.index) * d..][..d];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward(
    fm: &[f64],
    hf: usize,
    wf: usize,
    d: usize,
    grid: &[f64],
    grad: &[f64],
    want_fm: bool,
    want_grid: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = grid.len() / 2;
    let mut gfm = want_fm.then(|| vec![0.0; fm.len()]);
    let mut ggrid = want_grid.then(|| vec![0.0; grid.len()]);
    let sx = 0.5 * (wf - 1) as f64;
    let sy = 0.5 * (hf - 1) as f64;
    for p in 0..n {
        let (_, tx) = taps(to_index(grid[2 * p], wf), wf);
        let (_, ty) = taps(to_index(grid[2 * p + 1], hf), hf);
        let go = &grad[p * d..][..d];
        for ty in ty.iter().flatten() {
            for tx in tx.iter().flatten() {
                let off = (ty.index * wf + tx.index) * d;
                if let Some(gfm) = gfm.as_mut() {
                    let w = ty.weight * tx.weight;
                    if w != 0.0 {
                        for (a, &b) in gfm[off..][..d].iter_mut().zip(go) {
                            *a += w * b;
                        }
                    }
                }
                if let Some(gg) = ggrid.as_mut() {
                    let dot: f64 = fm[off..][..d].iter().zip(go).map(|(a, b)| a * b).sum();
                    gg[2 * p] += dot * ty.weight * tx.slope * sx;
                    gg[2 * p + 1] += dot * tx.weight * ty.slope * sy;
                }
            }
        }
    }
    (gfm, ggrid)
}

/// Normalized footprint of the sampling grid on the `[hf, wf]` source map.
/// Returns `(mask, raw_total)`; a zero total yields the uniform map.
pub fn attention_mask_forward(grid: &[f64], hf: usize, wf: usize) -> (Vec<f64>, f64) {
    let mut raw = vec![0.0; hf * wf];
    let n = grid.len() / 2;
    for p in 0..n {
        let (_, tx) = taps(to_index(grid[2 * p], wf), wf);
        let (_, ty) = taps(to_index(grid[2 * p + 1], hf), hf);
        for ty in ty.iter().flatten() {
            for tx in tx.iter().flatten() {
                raw[ty.index * wf + tx.index] += ty.weight * tx.weight;
            }
        }
    }
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter_mut().for_each(|v| *v /= total);
    } else {
        let u = 1.0 / (hf * wf) as f64;
        raw.iter_mut().for_each(|v| *v = u);
    }
    (raw, total)
}

pub fn attention_mask_backward(
    grid: &[f64],
    hf: usize,
    wf: usize,
    mask: &[f64],
    total: f64,
    grad: &[f64],
) -> Vec<f64> {
    let mut gg = vec![0.0; grid.len()];
    if total <= 0.0 {
        return gg;
    }
    let centered: f64 = grad.iter().zip(mask).map(|(a, b)| a * b).sum();
    let graw: Vec<f64> = grad.iter().map(|g| (g - centered) / total).collect();
    let sx = 0.5 * (wf - 1) as f64;
    let sy = 0.5 * (hf - 1) as f64;
    let n = grid.len() / 2;
    for p in 0..n {
        let (_, tx) = taps(to_index(grid[2 * p], wf), wf);
        let (_, ty) = taps(to_index(grid[2 * p + 1], hf), hf);
        for ty in ty.iter().flatten() {
            for tx in tx.iter().flatten() {
                let g = graw[ty.index * wf + tx.index];
                gg[2 * p] += g * ty.weight * tx.slope * sx;
                gg[2 * p + 1] += g * tx.weight * ty.slope * sy;
            }
        }
    }
    gg
}

/// Integer cells the grid reads from, for branch tracking.
pub fn grid_cells(grid: &[f64], hf: usize, wf: usize) -> impl Iterator<Item = i64> + '_ {
    grid.chunks_exact(2).flat_map(move |c| {
        let (bx, _) = taps(to_index(c[0], wf), wf);
        let (by, _) = taps(to_index(c[1], hf), hf);
        [bx, by]
    })
}

/// Soft-assignment residual encoding.
///
/// `x` is `[n, d]`, `codewords` is `[k, d]`, `smoothing` is `[k]` (already
/// positive). Returns the aggregated residuals `[k, d]` and the assignment
/// matrix `[n, k]`.
pub fn texture_encode_forward(
    x: &[f64],
    codewords: &[f64],
    smoothing: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let k = smoothing.len();
    let mut assign = vec![0.0; n * k];
    // per-(codeword, dim) terms, summed in sorted order so the aggregate is
    // bitwise independent of descriptor order
    let mut terms = vec![0.0; k * d * n];
    for i in 0..n {
        let xi = &x[i * d..][..d];
        let row = &mut assign[i * k..][..k];
        for (j, r) in row.iter_mut().enumerate() {
            let cj = &codewords[j * d..][..d];
            let dist: f64 = xi.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
            *r = -smoothing[j] * dist;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            z += *r;
        }
        for r in row.iter_mut() {
            *r /= z;
        }
        for j in 0..k {
            let a = row[j];
            let cj = &codewords[j * d..][..d];
            for (dd, (&xv, &cv)) in xi.iter().zip(cj).enumerate() {
                terms[(j * d + dd) * n + i] = a * (xv - cv);
            }
        }
    }
    let agg = terms
        .chunks_mut(n)
        .map(|col| {
            col.sort_unstable_by(f64::total_cmp);
            col.iter().sum()
        })
        .collect();
    (agg, assign)
}

/// Gradients of the encoding with respect to descriptors, codewords and
/// smoothing factors given `grad` (`[k, d]`) on the aggregate.
pub fn texture_encode_backward(
    x: &[f64],
    codewords: &[f64],
    smoothing: &[f64],
    assign: &[f64],
    grad: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let k = smoothing.len();
    let mut gx = vec![0.0; x.len()];
    let mut gc = vec![0.0; codewords.len()];
    let mut gs = vec![0.0; k];
    let mut r = vec![0.0; d];
    let mut ga = vec![0.0; k];
    for i in 0..n {
        let xi = &x[i * d..][..d];
        let a = &assign[i * k..][..k];
        for j in 0..k {
            let cj = &codewords[j * d..][..d];
            ga[j] = xi
                .iter()
                .zip(cj)
                .zip(&grad[j * d..][..d])
                .map(|((xv, cv), g)| (xv - cv) * g)
                .sum();
        }
        let mean: f64 = a.iter().zip(&ga).map(|(p, q)| p * q).sum();
        for j in 0..k {
            let cj = &codewords[j * d..][..d];
            let gl = a[j] * (ga[j] - mean);
            let mut dist = 0.0;
            for t in 0..d {
                r[t] = xi[t] - cj[t];
                dist += r[t] * r[t];
            }
            gs[j] -= gl * dist;
            let coef = -2.0 * smoothing[j] * gl;
            let gj = &grad[j * d..][..d];
            for t in 0..d {
                let gr = a[j] * gj[t] + coef * r[t];
                gx[i * d + t] += gr;
                gc[j * d + t] -= gr;
            }
        }
    }
    (gx, gc, gs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_at_integer_position() {
        let (b, t) = taps(2.0, 4);
        assert_eq!(b, 2);
        let t0 = t[0].unwrap();
        assert_eq!((t0.index, t0.weight), (2, 1.0));
        let t1 = t[1].unwrap();
        assert_eq!((t1.index, t1.weight), (3, 0.0));
    }

    #[test]
    fn taps_out_of_range_are_dropped() {
        let (_, t) = taps(-0.5, 4);
        assert!(t[0].is_none());
        assert_eq!(t[1].unwrap().index, 0);
        let (_, t) = taps(10.0, 4);
        assert!(t.iter().all(Option::is_none));
    }

    #[test]
    fn conv_geometry_same_padding() {
        let g = ConvGeometry {
            in_h: 8,
            in_w: 6,
            in_c: 3,
            out_c: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (8, 6));
    }
}
