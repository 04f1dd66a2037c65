//! Dense f64 tensors plus the handful of numeric kernels the rest of the
//! crate is built on: matmul, 2D convolution, pooling, fixed-kernel filtering.
//!
//! Layout is always row-major. Images are `[h, w, c]`, feature maps and
//! latents are `[c, h, w]`; the two never mix without an explicit permute.

/// Row-major dense tensor. Shape is immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape. Element count must be preserved.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }
}

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a^T [k,m] * b [k,n] -> [m,n]` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a [m,k] * b^T [n,k] -> [m,n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::new(&[m, n], out)
}

/// 3x3 or 1x1 convolution over `[ci,h,w]` with zero padding.
/// `w` is `[co,ci,kh,kw]`, output `[co,ho,wo]` with `ho = (h + 2p - kh)/s + 1`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, ci2, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(ci, ci2, "conv2d channel mismatch");
    assert_eq!(b.shape, [co]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for c in 0..co {
        let oc = &mut out[c * ho * wo..(c + 1) * ho * wo];
        oc.fill(b.data[c]);
        for ic in 0..ci {
            let xc = &x.data[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((c * ci + ic) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let xrow = &xc[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut oc[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wd {
                                continue;
                            }
                            orow[ox] += wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[co, ho, wo], out)
}

/// Gradient of `conv2d` w.r.t. its input.
pub fn conv2d_grad_input(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    in_shape: &[usize],
) -> Tensor {
    let (ci, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (co, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (ho, wo) = (gy.shape[1], gy.shape[2]);
    let mut gx = vec![0.0; ci * h * wd];
    for c in 0..co {
        let gc = &gy.data[c * ho * wo..(c + 1) * ho * wo];
        for ic in 0..ci {
            let gxc = &mut gx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((c * ci + ic) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let grow = &gc[oy * wo..(oy + 1) * wo];
                        let xrow = &mut gxc[iy as usize * wd..(iy as usize + 1) * wd];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wd {
                                continue;
                            }
                            xrow[ix as usize] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, gx)
}

/// Gradients of `conv2d` w.r.t. weight and bias.
pub fn conv2d_grad_weight(
    gy: &Tensor,
    x: &Tensor,
    stride: usize,
    pad: usize,
    w_shape: &[usize],
) -> (Tensor, Tensor) {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (ho, wo) = (gy.shape[1], gy.shape[2]);
    let mut gw = vec![0.0; co * ci * kh * kw];
    let mut gb = vec![0.0; co];
    for c in 0..co {
        let gc = &gy.data[c * ho * wo..(c + 1) * ho * wo];
        gb[c] = gc.iter().sum();
        for ic in 0..ci {
            let xc = &x.data[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let grow = &gc[oy * wo..(oy + 1) * wo];
                        let xrow = &xc[iy as usize * wd..(iy as usize + 1) * wd];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wd {
                                continue;
                            }
                            acc += grow[ox] * xrow[ix as usize];
                        }
                    }
                    gw[((c * ci + ic) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    (Tensor::new(w_shape, gw), Tensor::new(&[co], gb))
}

/// Average pool `[c,h,w]` by an integer factor that must divide both dims.
pub fn avg_pool(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(h % factor == 0 && w % factor == 0, "pool factor {} on {}x{}", factor, h, w);
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += x.data[(ch * h + oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Adjoint of `avg_pool`: spreads each output gradient evenly over its window.
pub fn avg_pool_grad(gy: &Tensor, factor: usize) -> Tensor {
    let (c, ho, wo) = (gy.shape[0], gy.shape[1], gy.shape[2]);
    let (h, w) = (ho * factor, wo * factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gy.data[(ch * ho + oy) * wo + ox] * inv;
                for dy in 0..factor {
                    for dx in 0..factor {
                        gx[(ch * h + oy * factor + dy) * w + ox * factor + dx] = g;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}

/// Nearest-neighbour upsample of `[c,h,w]` by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(ch * ho + oy) * wo + ox] = x.data[(ch * h + oy / factor) * w + ox / factor];
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Adjoint of `upsample_nearest`: sums gradients over each source cell's copies.
pub fn upsample_nearest_grad(gy: &Tensor, factor: usize) -> Tensor {
    let (c, ho, wo) = (gy.shape[0], gy.shape[1], gy.shape[2]);
    let (h, w) = (ho / factor, wo / factor);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                gx[(ch * h + oy / factor) * w + ox / factor] +=
                    gy.data[(ch * ho + oy) * wo + ox];
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}

/// Correlate a single-channel `[h,w]` map with a small kernel, replicating
/// edge pixels outside the border. Linear in `x`, so the adjoint below is exact.
pub fn filter2d_clamp(x: &Tensor, kernel: &Tensor) -> Tensor {
    let (h, w) = (x.shape[0], x.shape[1]);
    let (kh, kw) = (kernel.shape[0], kernel.shape[1]);
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x0 in 0..w as isize {
            let mut acc = 0.0;
            for ky in 0..kh as isize {
                let sy = (y + ky - ry).clamp(0, h as isize - 1) as usize;
                for kx in 0..kw as isize {
                    let sx = (x0 + kx - rx).clamp(0, w as isize - 1) as usize;
                    acc += kernel.data[(ky * kw as isize + kx) as usize] * x.data[sy * w + sx];
                }
            }
            out[(y * w as isize + x0) as usize] = acc;
        }
    }
    Tensor::new(&[h, w], out)
}

/// Adjoint of `filter2d_clamp`: scatter with the same clamped index pattern.
pub fn filter2d_clamp_grad(gy: &Tensor, kernel: &Tensor) -> Tensor {
    let (h, w) = (gy.shape[0], gy.shape[1]);
    let (kh, kw) = (kernel.shape[0], kernel.shape[1]);
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut gx = vec![0.0; h * w];
    for y in 0..h as isize {
        for x0 in 0..w as isize {
            let g = gy.data[(y * w as isize + x0) as usize];
            for ky in 0..kh as isize {
                let sy = (y + ky - ry).clamp(0, h as isize - 1) as usize;
                for kx in 0..kw as isize {
                    let sx = (x0 + kx - rx).clamp(0, w as isize - 1) as usize;
                    gx[sy * w + sx] += kernel.data[(ky * kw as isize + kx) as usize] * g;
                }
            }
        }
    }
    Tensor::new(&[h, w], gx)
}

/// Bilinear resize of an `[h,w,c]` image. Sample positions follow the usual
/// half-pixel-center convention.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; oh * ow * c];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| x.data[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// `[h,w,c]` to `[c,h,w]`.
pub fn hwc_to_chw(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = x.data[p * c + ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// `[c,h,w]` to `[h,w,c]`.
pub fn chw_to_hwc(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        for ch in 0..c {
            out[p * c + ch] = x.data[ch * h * w + p];
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// `[c,h,w]` to `[c*f*f, h/f, w/f]`; output channel `c*f*f + dy*f + dx` holds
/// the `(dy,dx)` sample of each `f`-by-`f` block of input channel `c`.
pub fn space_to_depth(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(h % f == 0 && w % f == 0, "space_to_depth: {h}x{w} not divisible by {f}");
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; c * f * f * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let oc = ch * f * f + (y % f) * f + (x_ % f);
                out[(oc * oh + y / f) * ow + x_ / f] = x.data[(ch * h + y) * w + x_];
            }
        }
    }
    Tensor::new(&[c * f * f, oh, ow], out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, f: usize) -> Tensor {
    let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(cin % (f * f) == 0, "depth_to_space: {cin} channels not divisible by {}", f * f);
    let c = cin / (f * f);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for oc in 0..cin {
        let ch = oc / (f * f);
        let dy = (oc / f) % f;
        let dx = oc % f;
        for y in 0..h {
            for x_ in 0..w {
                out[(ch * oh + y * f + dy) * ow + x_ * f + dx] = x.data[(oc * h + y) * w + x_];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}
