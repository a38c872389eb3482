//! Single-item tensor kernels with hand-written backward passes.
//!
//! Activations are channel-major: channel `c`, voxel `i + nx*(j + ny*k)`
//! lives at `c * n + i + nx*(j + ny*k)`.

/// Channel-major activation of one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, dims: [usize; 3]) -> Self {
        Act {
            c,
            dims,
            data: vec![0.0; c * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(a: &Act, b: &Act) -> Act {
        debug_assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Act {
            c: a.c + b.c,
            dims: a.dims,
            data,
        }
    }

    /// Splits off the first `c` channels.
    pub fn split(self, c: usize) -> (Act, Act) {
        let n = self.voxels();
        let mut data = self.data;
        let rest = data.split_off(c * n);
        (
            Act {
                c,
                dims: self.dims,
                data,
            },
            Act {
                c: self.c - c,
                dims: self.dims,
                data: rest,
            },
        )
    }
}

/// `C = alpha * A B + beta * C` for row-major `A (m x k)`, `B (k x n)`, with
/// optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the extents described by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a cubic-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub ks: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn same3(cin: usize, cout: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            ks: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn down2(cin: usize, cout: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            ks: 2,
            stride: 2,
            pad: 0,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            ks: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn taps(&self) -> usize {
        self.ks * self.ks * self.ks
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        d.map(|n| (n + 2 * self.pad - self.ks) / self.stride + 1)
    }
}

/// Column matrix `(cin*ks^3) x n_out`.
fn im2col(x: &Act, s: &ConvSpec, od: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = x.dims;
    let n_in = x.voxels();
    let n_out = od[0] * od[1] * od[2];
    if s.ks == 1 && s.stride == 1 {
        return x.data.clone();
    }
    let mut cols = vec![0.0; s.cin * s.taps() * n_out];
    let (ks, st, pad) = (s.ks as isize, s.stride as isize, s.pad as isize);
    let mut row = 0;
    for c in 0..s.cin {
        let src = &x.data[c * n_in..(c + 1) * n_in];
        for kz in 0..ks {
            for ky in 0..ks {
                for kx in 0..ks {
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oz in 0..od[2] {
                        let iz = oz as isize * st + kz - pad;
                        if iz < 0 || iz >= nz as isize {
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = oy as isize * st + ky - pad;
                            if iy < 0 || iy >= ny as isize {
                                continue;
                            }
                            let srow = nx * (iy as usize + ny * iz as usize);
                            let drow = od[0] * (oy + od[1] * oz);
                            if st == 1 {
                                let lo = (pad - kx).max(0) as usize;
                                let hi = (nx as isize + pad - kx).min(od[0] as isize) as usize;
                                if lo < hi {
                                    let off = (lo as isize + kx - pad) as usize;
                                    dst[drow + lo..drow + hi].copy_from_slice(&src[srow + off..srow + off + hi - lo]);
                                }
                            } else {
                                for ox in 0..od[0] {
                                    let ix = ox as isize * st + kx - pad;
                                    if ix >= 0 && ix < nx as isize {
                                        dst[drow + ox] = src[srow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], s: &ConvSpec, in_dims: [usize; 3], od: [usize; 3]) -> Act {
    let [nx, ny, nz] = in_dims;
    let n_out = od[0] * od[1] * od[2];
    if s.ks == 1 && s.stride == 1 {
        return Act {
            c: s.cin,
            dims: in_dims,
            data: cols.to_vec(),
        };
    }
    let mut dx = Act::zeros(s.cin, in_dims);
    let n_in = dx.voxels();
    let (ks, st, pad) = (s.ks as isize, s.stride as isize, s.pad as isize);
    let mut row = 0;
    for c in 0..s.cin {
        let dst = &mut dx.data[c * n_in..(c + 1) * n_in];
        for kz in 0..ks {
            for ky in 0..ks {
                for kx in 0..ks {
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oz in 0..od[2] {
                        let iz = oz as isize * st + kz - pad;
                        if iz < 0 || iz >= nz as isize {
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = oy as isize * st + ky - pad;
                            if iy < 0 || iy >= ny as isize {
                                continue;
                            }
                            let drow = nx * (iy as usize + ny * iz as usize);
                            let srow = od[0] * (oy + od[1] * oz);
                            for ox in 0..od[0] {
                                let ix = ox as isize * st + kx - pad;
                                if ix >= 0 && ix < nx as isize {
                                    dst[drow + ix as usize] += src[srow + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx
}

/// Convolution with weights `[cout][cin][kz][ky][kx]` and optional bias.
pub fn conv_forward(x: &Act, s: &ConvSpec, w: &[f64], bias: Option<&[f64]>) -> Act {
    debug_assert_eq!(x.c, s.cin);
    debug_assert_eq!(w.len(), s.weight_len());
    let od = s.out_dims(x.dims);
    let n_out = od[0] * od[1] * od[2];
    let cols = im2col(x, s, od);
    let mut y = Act::zeros(s.cout, od);
    gemm(s.cout, s.cin * s.taps(), n_out, w, false, &cols, false, 0.0, &mut y.data);
    if let Some(b) = bias {
        for (c, bc) in b.iter().enumerate() {
            y.data[c * n_out..(c + 1) * n_out].iter_mut().for_each(|v| *v += bc);
        }
    }
    y
}

/// Accumulates `dw` (and `db`) and returns the input gradient when asked.
pub fn conv_backward(
    x: &Act,
    s: &ConvSpec,
    w: &[f64],
    dy: &Act,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Act> {
    let od = dy.dims;
    let n_out = dy.voxels();
    let k = s.cin * s.taps();
    let cols = im2col(x, s, od);
    gemm(s.cout, n_out, k, &dy.data, false, &cols, true, 1.0, dw);
    if let Some(db) = db {
        for (c, g) in db.iter_mut().enumerate() {
            *g += dy.data[c * n_out..(c + 1) * n_out].iter().sum::<f64>();
        }
    }
    if !need_dx {
        return None;
    }
    let mut dcols = cols;
    gemm(k, s.cout, n_out, w, true, &dy.data, false, 0.0, &mut dcols);
    Some(col2im(&dcols, s, x.dims, od))
}

/// Transposed 2x2x2 stride-2 convolution. Weights are `[cout*8][cin]` with
/// row `co*8 + (dz*2 + dy)*2 + dx`.
pub fn up_forward(x: &Act, cout: usize, w: &[f64], bias: &[f64]) -> Act {
    let n_in = x.voxels();
    let [nx, ny, nz] = x.dims;
    let mut z = vec![0.0; cout * 8 * n_in];
    gemm(cout * 8, x.c, n_in, w, false, &x.data, false, 0.0, &mut z);
    let od = [2 * nx, 2 * ny, 2 * nz];
    let mut y = Act::zeros(cout, od);
    let n_out = y.voxels();
    for co in 0..cout {
        for off in 0..8 {
            let (ax, ay, az) = (off & 1, (off >> 1) & 1, off >> 2);
            let src = &z[(co * 8 + off) * n_in..(co * 8 + off + 1) * n_in];
            let dst = &mut y.data[co * n_out..(co + 1) * n_out];
            for k in 0..nz {
                for j in 0..ny {
                    let orow = od[0] * ((2 * j + ay) + od[1] * (2 * k + az));
                    let irow = nx * (j + ny * k);
                    for i in 0..nx {
                        dst[orow + 2 * i + ax] = src[irow + i] + bias[co];
                    }
                }
            }
        }
    }
    y
}

pub fn up_backward(x: &Act, cout: usize, w: &[f64], dy: &Act, dw: &mut [f64], db: &mut [f64]) -> Act {
    let n_in = x.voxels();
    let [nx, ny, nz] = x.dims;
    let od = dy.dims;
    let n_out = dy.voxels();
    let mut dz = vec![0.0; cout * 8 * n_in];
    for co in 0..cout {
        let src = &dy.data[co * n_out..(co + 1) * n_out];
        db[co] += src.iter().sum::<f64>();
        for off in 0..8 {
            let (ax, ay, az) = (off & 1, (off >> 1) & 1, off >> 2);
            let dst = &mut dz[(co * 8 + off) * n_in..(co * 8 + off + 1) * n_in];
            for k in 0..nz {
                for j in 0..ny {
                    let orow = od[0] * ((2 * j + ay) + od[1] * (2 * k + az));
                    let irow = nx * (j + ny * k);
                    for i in 0..nx {
                        dst[irow + i] = src[orow + 2 * i + ax];
                    }
                }
            }
        }
    }
    gemm(cout * 8, n_in, x.c, &dz, false, &x.data, true, 1.0, dw);
    let mut dx = Act::zeros(x.c, x.dims);
    gemm(x.c, cout * 8, n_in, w, true, &dz, false, 0.0, &mut dx.data);
    dx
}

pub const NORM_EPS: f64 = 1e-5;

/// Saved statistics of an instance normalisation.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn inorm_forward(x: &Act, gamma: &[f64], beta: &[f64]) -> (Act, NormCache) {
    let n = x.voxels();
    let mut y = Act::zeros(x.c, x.dims);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = vec![0.0; x.c];
    for c in 0..x.c {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = is;
        let xh = &mut xhat[c * n..(c + 1) * n];
        let out = &mut y.data[c * n..(c + 1) * n];
        for i in 0..n {
            xh[i] = (src[i] - mean) * is;
            out[i] = gamma[c] * xh[i] + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn inorm_backward(cache: &NormCache, gamma: &[f64], dy: &Act, dgamma: &mut [f64], dbeta: &mut [f64]) -> Act {
    let n = dy.voxels();
    let nf = n as f64;
    let mut dx = Act::zeros(dy.c, dy.dims);
    for c in 0..dy.c {
        let g = &dy.data[c * n..(c + 1) * n];
        let xh = &cache.xhat[c * n..(c + 1) * n];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        let k = gamma[c] * cache.inv_std[c] / nf;
        let out = &mut dx.data[c * n..(c + 1) * n];
        for i in 0..n {
            out[i] = k * (nf * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    dx
}

pub const LRELU_SLOPE: f64 = 0.01;

pub fn lrelu(x: &Act) -> Act {
    Act {
        c: x.c,
        dims: x.dims,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { LRELU_SLOPE * v }).collect(),
    }
}

/// Gradient through the leaky rectifier given its pre-activation.
pub fn lrelu_backward(pre: &Act, dy: &Act) -> Act {
    Act {
        c: dy.c,
        dims: dy.dims,
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&p, &g)| if p > 0.0 { g } else { LRELU_SLOPE * g })
            .collect(),
    }
}

/// Per-voxel softmax over channels.
pub fn softmax(logits: &Act) -> Act {
    let n = logits.voxels();
    let k = logits.c;
    let mut out = Act::zeros(k, logits.dims);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(logits.data[c * n + i]);
        }
        let mut s = 0.0;
        for c in 0..k {
            let e = (logits.data[c * n + i] - m).exp();
            out.data[c * n + i] = e;
            s += e;
        }
        for c in 0..k {
            out.data[c * n + i] /= s;
        }
    }
    out
}
