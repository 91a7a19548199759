//! Forward and adjoint kernels for the non-elementwise primitives.
//!
//! Layout conventions: images and feature planes are `[H, W, C]`,
//! convolution kernels are `[k, k, C_in, C_out]`.

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `dA += dC · Bᵀ` for `C = A·B`.
pub fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (d, bv) in drow.iter().zip(brow) {
                acc += d * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `dB += Aᵀ · dC` for `C = A·B`.
pub fn matmul_grad_b(dc: &[f64], a: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, d) in dbrow.iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

/// Stride-1, zero-padded "same" convolution.
pub fn conv2d(x: &[f64], wt: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { h, w, cin, cout, k } = d;
    let pad = d.pad();
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let orow = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let xin = &x[(sy as usize * w + sx as usize) * cin..][..cin];
                    let wbase = (dy * k + dx) * cin * cout;
                    for (i, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wt[wbase + i * cout..wbase + (i + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    d: ConvDims,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let ConvDims { h, w, cin, cout, k } = d;
    let pad = d.pad();
    for y in 0..h {
        for xx in 0..w {
            let drow = &dout[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for ddx in 0..k {
                    let sx = xx as isize + ddx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let xoff = (sy as usize * w + sx as usize) * cin;
                    let wbase = (dy * k + ddx) * cin * cout;
                    for i in 0..cin {
                        let wrow = wbase + i * cout..wbase + (i + 1) * cout;
                        if let Some(dx) = dx.as_deref_mut() {
                            let mut acc = 0.0;
                            for (g, wv) in drow.iter().zip(&wt[wrow.clone()]) {
                                acc += g * wv;
                            }
                            dx[xoff + i] += acc;
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let xv = x[xoff + i];
                            if xv != 0.0 {
                                for (o, g) in dw[wrow].iter_mut().zip(drow) {
                                    *o += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Continuous pixel coordinate for a normalized coordinate in `[-1, 1]`,
/// clamped to the border. Returns `(coord, d coord / d normalized)`.
#[inline]
fn to_pixel(u: f64, size: usize) -> (f64, f64) {
    let scale = (size as f64 - 1.0) / 2.0;
    let p = (u + 1.0) * scale;
    if p <= 0.0 {
        (0.0, 0.0)
    } else if p >= size as f64 - 1.0 {
        (size as f64 - 1.0, 0.0)
    } else {
        (p, scale)
    }
}

#[inline]
fn cell(p: f64, size: usize) -> (usize, f64) {
    if size == 1 {
        return (0, 0.0);
    }
    let i0 = (p.floor() as usize).min(size - 2);
    (i0, p - i0 as f64)
}

/// Bilinear lookup of `uv` (column coordinate first, then row) on a
/// `[H, W, C]` plane, corners aligned to `-1`/`+1`.
pub fn bilinear(plane: &[f64], h: usize, w: usize, c: usize, uv: &[f64]) -> Vec<f64> {
    let n = uv.len() / 2;
    let mut out = vec![0.0; n * c];
    for q in 0..n {
        let (px, _) = to_pixel(uv[2 * q], w);
        let (py, _) = to_pixel(uv[2 * q + 1], h);
        let (x0, tx) = cell(px, w);
        let (y0, ty) = cell(py, h);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let o = &mut out[q * c..(q + 1) * c];
        let corners = [
            (y0, x0, (1.0 - ty) * (1.0 - tx)),
            (y0, x1, (1.0 - ty) * tx),
            (y1, x0, ty * (1.0 - tx)),
            (y1, x1, ty * tx),
        ];
        for (yy, xx, wgt) in corners {
            if wgt == 0.0 {
                continue;
            }
            let src = &plane[(yy * w + xx) * c..(yy * w + xx + 1) * c];
            for (ov, sv) in o.iter_mut().zip(src) {
                *ov += wgt * sv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward(
    plane: &[f64],
    h: usize,
    w: usize,
    c: usize,
    uv: &[f64],
    dout: &[f64],
    mut dplane: Option<&mut [f64]>,
    mut duv: Option<&mut [f64]>,
) {
    let n = uv.len() / 2;
    for q in 0..n {
        let (px, sx) = to_pixel(uv[2 * q], w);
        let (py, sy) = to_pixel(uv[2 * q + 1], h);
        let (x0, tx) = cell(px, w);
        let (y0, ty) = cell(py, h);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let g = &dout[q * c..(q + 1) * c];
        if let Some(dp) = dplane.as_deref_mut() {
            let corners = [
                (y0, x0, (1.0 - ty) * (1.0 - tx)),
                (y0, x1, (1.0 - ty) * tx),
                (y1, x0, ty * (1.0 - tx)),
                (y1, x1, ty * tx),
            ];
            for (yy, xx, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                let dst = &mut dp[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += wgt * gv;
                }
            }
        }
        if let Some(du) = duv.as_deref_mut() {
            let p = |yy: usize, xx: usize| &plane[(yy * w + xx) * c..(yy * w + xx + 1) * c];
            let (p00, p01, p10, p11) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let dfx = (1.0 - ty) * (p01[ch] - p00[ch]) + ty * (p11[ch] - p10[ch]);
                let dfy = (1.0 - tx) * (p10[ch] - p00[ch]) + tx * (p11[ch] - p01[ch]);
                gx += g[ch] * dfx;
                gy += g[ch] * dfy;
            }
            if w > 1 {
                du[2 * q] += gx * sx;
            }
            if h > 1 {
                du[2 * q + 1] += gy * sy;
            }
        }
    }
}

/// Emission-absorption compositing of `S` samples on each of `R` rays.
/// `sigma: [R, S]`, `rgb: [R, S, 3]`, `deltas: [R, S]` -> `[R, 3]`.
pub fn composite(sigma: &[f64], rgb: &[f64], deltas: &[f64], bg: [f64; 3], s: usize) -> Vec<f64> {
    let r = sigma.len() / s;
    let mut out = vec![0.0; r * 3];
    for ray in 0..r {
        let mut trans = 1.0;
        let mut acc = [0.0; 3];
        for i in 0..s {
            let idx = ray * s + i;
            let e = (-sigma[idx] * deltas[idx]).exp();
            let wgt = trans * (1.0 - e);
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += wgt * rgb[idx * 3 + ch];
            }
            trans *= e;
        }
        for ch in 0..3 {
            out[ray * 3 + ch] = acc[ch] + trans * bg[ch];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn composite_backward(
    sigma: &[f64],
    rgb: &[f64],
    deltas: &[f64],
    bg: [f64; 3],
    s: usize,
    dout: &[f64],
    mut dsigma: Option<&mut [f64]>,
    mut drgb: Option<&mut [f64]>,
) {
    let r = sigma.len() / s;
    let mut trans = vec![0.0; s + 1];
    let mut wgt = vec![0.0; s];
    let mut ex = vec![0.0; s];
    for ray in 0..r {
        trans[0] = 1.0;
        for i in 0..s {
            let idx = ray * s + i;
            ex[i] = (-sigma[idx] * deltas[idx]).exp();
            wgt[i] = trans[i] * (1.0 - ex[i]);
            trans[i + 1] = trans[i] * ex[i];
        }
        let g = &dout[ray * 3..ray * 3 + 3];
        if let Some(dr) = drgb.as_deref_mut() {
            for i in 0..s {
                let idx = ray * s + i;
                for ch in 0..3 {
                    dr[idx * 3 + ch] += wgt[i] * g[ch];
                }
            }
        }
        if let Some(ds) = dsigma.as_deref_mut() {
            // suffix = g · (Σ_{j>i} w_j c_j + T_end · bg)
            let mut suffix = trans[s] * (g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]);
            for i in (0..s).rev() {
                let idx = ray * s + i;
                let gc = g[0] * rgb[idx * 3] + g[1] * rgb[idx * 3 + 1] + g[2] * rgb[idx * 3 + 2];
                ds[idx] += deltas[idx] * (trans[i + 1] * gc - suffix);
                suffix += wgt[i] * gc;
            }
        }
    }
}

/// Per-ray transmittance left after the last sample.
pub fn final_transmittance(sigma: &[f64], deltas: &[f64], s: usize) -> Vec<f64> {
    sigma
        .chunks(s)
        .zip(deltas.chunks(s))
        .map(|(sg, dl)| {
            sg.iter()
                .zip(dl)
                .fold(1.0, |t, (a, b)| t * (-a * b).exp())
        })
        .collect()
}
