//! Raw numeric kernels behind the graph ops: stride-1 "same" convolutions
//! (optionally dilated), 2x2 max pooling and bilinear resizing.

use super::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c`, row-major.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserted lengths cover every element addressed through
    // the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    let pad = g.pad() as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, g: ConvGeom, dx_item: &mut [f64]) {
    let k = g.kernel;
    let pad = g.pad() as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx_item[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = (ky * g.dilation) as isize - pad;
                let dxo = (kx * g.dilation) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with "same" zero padding.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeom) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    assert_eq!(cin, wcin, "conv input channels {cin} != weight channels {wcin}");
    assert!(kh == g.kernel && kw == g.kernel, "kernel size mismatch");
    assert_eq!(bias.len(), cout, "bias length mismatch");
    let hw = h * w;
    let kdim = cin * g.kernel * g.kernel;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * hw]
    };
    for i in 0..n {
        let xi = x.item(i);
        let oi = out.item_mut(i);
        for (co, b) in bias.data().iter().enumerate() {
            oi[co * hw..(co + 1) * hw].fill(*b);
        }
        let src: &[f64] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, cin, h, w, g, &mut cols);
            &cols
        };
        gemm(cout, kdim, hw, 1.0, weight.data(), false, src, false, 1.0, oi);
    }
    out
}

/// Gradients of the convolution with respect to its input, weight and bias.
/// Any of the three may be skipped.
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dweight: Option<Tensor>,
    pub dbias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    g: ConvGeom,
    want: [bool; 3],
) -> ConvGrads {
    let [n, cin, h, w] = x.shape();
    let [cout, _, _, _] = weight.shape();
    let hw = h * w;
    let kdim = cin * g.kernel * g.kernel;
    let mut dx = want[0].then(|| Tensor::zeros(x.shape()));
    let mut dweight = want[1].then(|| Tensor::zeros(weight.shape()));
    let mut dbias = want[2].then(|| Tensor::zeros([cout, 1, 1, 1]));
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { kdim * hw }];
    let mut dcols = vec![0.0; if want[0] && !g.is_pointwise() { kdim * hw } else { 0 }];
    for i in 0..n {
        let di = dout.item(i);
        if let Some(db) = dbias.as_mut() {
            for (co, acc) in db.data_mut().iter_mut().enumerate() {
                *acc += di[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dweight.as_mut() {
            let src: &[f64] = if g.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), cin, h, w, g, &mut cols);
                &cols
            };
            gemm(cout, hw, kdim, 1.0, di, false, src, true, 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            if g.is_pointwise() {
                gemm(kdim, cout, hw, 1.0, weight.data(), true, di, false, 1.0, dx.item_mut(i));
            } else {
                gemm(kdim, cout, hw, 1.0, weight.data(), true, di, false, 0.0, &mut dcols);
                col2im(&dcols, cin, h, w, g, dx.item_mut(i));
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index that won. Ties go to the first
/// element in row-major window order.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max pooling needs even sizes, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(input_shape: [usize; 4], argmax: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (g, &idx) in dout.data().iter().zip(argmax) {
        d[idx] += g;
    }
    dx
}

/// Per-axis interpolation taps for half-pixel-centred bilinear resizing.
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(pos - lo as f64);
    }
    t
}

pub fn resize_bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for xx in 0..ow {
                let (x0, x1, fx) = (tx.lo[xx], tx.hi[xx], tx.frac[xx]);
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                d[y * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(input_shape: [usize; 4], dout: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let [_, _, oh, ow] = dout.shape();
    if (h, w) == (oh, ow) {
        return dout.clone();
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut dx = Tensor::zeros(input_shape);
    let src = dout.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        let g = &src[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for xx in 0..ow {
                let (x0, x1, fx) = (tx.lo[xx], tx.hi[xx], tx.frac[xx]);
                let v = g[y * ow + xx];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}
