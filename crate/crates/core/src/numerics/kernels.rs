//! Forward and backward kernels over NHWC tensors.

use super::{NumericsError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output side `ceil(in / stride)`, zero padding split with the extra
    /// row/column at the bottom/right.
    Same,
    Valid,
}

/// Output length and leading pad along one spatial axis.
pub fn conv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize), NumericsError> {
    if stride == 0 {
        return Err(NumericsError::shape("conv", "stride must be at least 1"));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(NumericsError::shape(
                    "conv",
                    format!("kernel {kernel} larger than input {input} with valid padding"),
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvGeom {
    fn new(
        [b, h, w]: [usize; 3],
        [kh, kw]: [usize; 2],
        stride: usize,
        padding: Padding,
    ) -> Result<Self, NumericsError> {
        let (oh, pad_t) = conv_out_dim(h, kh, stride, padding)?;
        let (ow, pad_l) = conv_out_dim(w, kw, stride, padding)?;
        Ok(Self {
            b,
            h,
            w,
            oh,
            ow,
            kh,
            kw,
            stride,
            pad_t,
            pad_l,
        })
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every valid (output, tap) pair.
    #[inline(always)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.b {
            for oy in 0..self.oh {
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad_t as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..self.ow {
                        let out_px = (b * self.oh + oy) * self.ow + ox;
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_l as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let in_px = (b * self.h + iy) * self.w + ix as usize;
                            f(out_px, in_px, ky * self.kw + kx);
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
    depthwise: bool,
) -> Result<(ConvGeom, usize, usize), NumericsError> {
    let [b, h, w, cin] = input.dims4(op)?;
    let (kh, kw, kcin, cout) = if depthwise {
        match kernel.shape() {
            &[kh, kw, c] => (kh, kw, c, c),
            s => {
                return Err(NumericsError::shape(
                    op,
                    format!("kernel must be [kh, kw, C], got {s:?}"),
                ))
            }
        }
    } else {
        let [kh, kw, kcin, cout] = kernel.dims4(op)?;
        (kh, kw, kcin, cout)
    };
    if kcin != cin {
        return Err(NumericsError::shape(
            op,
            format!("input has {cin} channels but kernel expects {kcin}"),
        ));
    }
    let g = ConvGeom::new([b, h, w], [kh, kw], stride, padding)?;
    Ok((g, cin, cout))
}

/// Cross-correlation of `[B,H,W,Cin]` with `[kh,kw,Cin,Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>, NumericsError> {
    let (g, cin, cout) = conv_geom("conv2d", input, kernel, stride, padding, false)?;
    let mut out = vec![T::zero(); g.b * g.oh * g.ow * cout];
    let x = input.data();
    let k = kernel.data();
    let tap_len = cin * cout;
    g.for_each_tap(|o, i, t| {
        let orow = &mut out[o * cout..(o + 1) * cout];
        let px = &x[i * cin..(i + 1) * cin];
        let kt = &k[t * tap_len..(t + 1) * tap_len];
        for (v, krow) in px.iter().zip(kt.chunks_exact(cout)) {
            for (acc, kv) in orow.iter_mut().zip(krow) {
                *acc += *v * *kv;
            }
        }
    });
    Tensor::new(vec![g.b, g.oh, g.ow, cout], out)
}

/// Gradients of [`conv2d`] with respect to its input (when requested) and
/// kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>), NumericsError> {
    let (g, cin, cout) = conv_geom("conv2d", input, kernel, stride, padding, false)?;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let tap_len = cin * cout;
    let mut gk = vec![T::zero(); kernel.len()];
    g.for_each_tap(|o, i, t| {
        let grow = &go[o * cout..(o + 1) * cout];
        let px = &x[i * cin..(i + 1) * cin];
        let gkt = &mut gk[t * tap_len..(t + 1) * tap_len];
        for (v, gkrow) in px.iter().zip(gkt.chunks_exact_mut(cout)) {
            for (acc, gv) in gkrow.iter_mut().zip(grow) {
                *acc += *v * *gv;
            }
        }
    });
    let gx = need_input_grad.then(|| {
        let mut gx = vec![T::zero(); input.len()];
        g.for_each_tap(|o, i, t| {
            let grow = &go[o * cout..(o + 1) * cout];
            let gpx = &mut gx[i * cin..(i + 1) * cin];
            let kt = &k[t * tap_len..(t + 1) * tap_len];
            for (gv, krow) in gpx.iter_mut().zip(kt.chunks_exact(cout)) {
                let mut s = T::zero();
                for (a, b) in grow.iter().zip(krow) {
                    s += *a * *b;
                }
                *gv += s;
            }
        });
        gx
    });
    Ok((
        gx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
    ))
}

/// Per-channel cross-correlation of `[B,H,W,C]` with `[kh,kw,C]`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>, NumericsError> {
    let (g, c, _) = conv_geom("depthwise_conv2d", input, kernel, stride, padding, true)?;
    let mut out = vec![T::zero(); g.b * g.oh * g.ow * c];
    let x = input.data();
    let k = kernel.data();
    g.for_each_tap(|o, i, t| {
        let orow = &mut out[o * c..(o + 1) * c];
        let px = &x[i * c..(i + 1) * c];
        let kt = &k[t * c..(t + 1) * c];
        for ((acc, v), kv) in orow.iter_mut().zip(px).zip(kt) {
            *acc += *v * *kv;
        }
    });
    Tensor::new(vec![g.b, g.oh, g.ow, c], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>), NumericsError> {
    let (g, c, _) = conv_geom("depthwise_conv2d", input, kernel, stride, padding, true)?;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gx = if need_input_grad {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    g.for_each_tap(|o, i, t| {
        let grow = &go[o * c..(o + 1) * c];
        let px = &x[i * c..(i + 1) * c];
        let gkt = &mut gk[t * c..(t + 1) * c];
        for ((acc, v), gv) in gkt.iter_mut().zip(px).zip(grow) {
            *acc += *v * *gv;
        }
        if need_input_grad {
            let kt = &k[t * c..(t + 1) * c];
            let gpx = &mut gx[i * c..(i + 1) * c];
            for ((acc, kv), gv) in gpx.iter_mut().zip(kt).zip(grow) {
                *acc += *kv * *gv;
            }
        }
    });
    let gx = if need_input_grad {
        Some(Tensor::new(input.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::new(kernel.shape().to_vec(), gk)?))
}

/// Adds a per-channel bias along the last axis.
pub fn channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let c = *x.shape().last().unwrap_or(&0);
    if bias.shape() != [c] {
        return Err(NumericsError::shape(
            "channel_bias",
            format!("bias {:?} does not match {c} channels", bias.shape()),
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    Ok(out)
}

/// Sum of `grad` over every axis but the last.
pub fn channel_bias_backward<T: Scalar>(grad: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut gb = vec![T::zero(); c];
    for row in grad.data().chunks_exact(c.max(1)) {
        for (acc, g) in gb.iter_mut().zip(row) {
            *acc += *g;
        }
    }
    Tensor::from_fn(&[c], |i| gb[i])
}

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

/// Passes the gradient where `0 < x < 6`.
pub fn relu6_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() && v < six { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Uses the forward output `y`: `dy/dx = y (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Block average of `[B,H,W,C]` down to `[B,out_h,out_w,C]`.
pub fn avg_pool_to<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, NumericsError> {
    let [b, h, w, c] = x.dims4("avg_pool_to")?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w || h % out_h != 0 || w % out_w != 0 {
        return Err(NumericsError::shape(
            "avg_pool_to",
            format!("cannot tile {h}x{w} into {out_h}x{out_w} equal blocks"),
        ));
    }
    let (fh, fw) = (h / out_h, w / out_w);
    let inv = T::one() / T::of((fh * fw) as f64);
    let mut out = vec![T::zero(); b * out_h * out_w * c];
    let xd = x.data();
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o = ((bi * out_h + y / fh) * out_w + xx / fw) * c;
                let i = ((bi * h + y) * w + xx) * c;
                for (acc, v) in out[o..o + c].iter_mut().zip(&xd[i..i + c]) {
                    *acc += *v;
                }
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Tensor::new(vec![b, out_h, out_w, c], out)
}

pub fn avg_pool_to_backward<T: Scalar>(
    input_shape: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>, NumericsError> {
    let [b, h, w, c] = match input_shape {
        &[b, h, w, c] => [b, h, w, c],
        s => return Err(NumericsError::shape("avg_pool_to", format!("bad shape {s:?}"))),
    };
    let [_, out_h, out_w, _] = grad.dims4("avg_pool_to")?;
    let (fh, fw) = (h / out_h, w / out_w);
    let inv = T::one() / T::of((fh * fw) as f64);
    let gd = grad.data();
    let mut gx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o = ((bi * out_h + y / fh) * out_w + xx / fw) * c;
                let i = ((bi * h + y) * w + xx) * c;
                for (dst, g) in gx[i..i + c].iter_mut().zip(&gd[o..o + c]) {
                    *dst = *g * inv;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Per-channel spatial mean: `[B,H,W,C] -> [B,1,1,C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    x.dims4("global_avg_pool")?;
    avg_pool_to(x, 1, 1)
}

/// `x [B,D] * weight [D,K] + bias [K]`.
pub fn dense<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NumericsError> {
    let [b, d] = x.dims2("dense")?;
    let [wd, k] = weight.dims2("dense")?;
    if wd != d || bias.shape() != [k] {
        return Err(NumericsError::shape(
            "dense",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let wdat = weight.data();
    let mut out = Vec::with_capacity(b * k);
    for row in x.data().chunks_exact(d.max(1)).take(b) {
        let mut acc = bias.data().to_vec();
        for (v, wrow) in row.iter().zip(wdat.chunks_exact(k.max(1))) {
            for (a, wv) in acc.iter_mut().zip(wrow) {
                *a += *v * *wv;
            }
        }
        out.extend_from_slice(&acc);
    }
    if d == 0 {
        out = (0..b).flat_map(|_| bias.data().to_vec()).collect();
    }
    Tensor::new(vec![b, k], out)
}

/// Gradients of [`dense`]: `(dx, dweight, dbias)`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>), NumericsError> {
    let [b, d] = x.dims2("dense")?;
    let [_, k] = weight.dims2("dense")?;
    let gd = grad.data();
    let xd = x.data();
    let wd = weight.data();
    let mut gw = vec![T::zero(); d * k];
    let mut gb = vec![T::zero(); k];
    for bi in 0..b {
        let grow = &gd[bi * k..(bi + 1) * k];
        for (acc, g) in gb.iter_mut().zip(grow) {
            *acc += *g;
        }
        for (v, gwrow) in xd[bi * d..(bi + 1) * d].iter().zip(gw.chunks_exact_mut(k.max(1))) {
            for (acc, g) in gwrow.iter_mut().zip(grow) {
                *acc += *v * *g;
            }
        }
    }
    let gx = if need_input_grad {
        let mut gx = vec![T::zero(); b * d];
        for bi in 0..b {
            let grow = &gd[bi * k..(bi + 1) * k];
            for (dst, wrow) in gx[bi * d..(bi + 1) * d].iter_mut().zip(wd.chunks_exact(k.max(1))) {
                let mut s = T::zero();
                for (a, w) in grow.iter().zip(wrow) {
                    s += *a * *w;
                }
                *dst = s;
            }
        }
        Some(Tensor::new(vec![b, d], gx)?)
    } else {
        None
    };
    Ok((
        gx,
        Tensor::new(vec![d, k], gw)?,
        Tensor::new(vec![k], gb)?,
    ))
}

/// Columns `start..end` of a `[B,K]` tensor.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>, NumericsError> {
    let [b, k] = x.dims2("slice_cols")?;
    if start > end || end > k {
        return Err(NumericsError::shape(
            "slice_cols",
            format!("range {start}..{end} outside {k} columns"),
        ));
    }
    let mut out = Vec::with_capacity(b * (end - start));
    for bi in 0..b {
        out.extend_from_slice(&x.data()[bi * k + start..bi * k + end]);
    }
    Tensor::new(vec![b, end - start], out)
}

pub fn slice_cols_backward<T: Scalar>(
    input_shape: &[usize],
    grad: &Tensor<T>,
    start: usize,
) -> Tensor<T> {
    let (b, k) = (input_shape[0], input_shape[1]);
    let w = grad.shape()[1];
    let mut gx = vec![T::zero(); b * k];
    for bi in 0..b {
        gx[bi * k + start..bi * k + start + w].copy_from_slice(&grad.data()[bi * w..(bi + 1) * w]);
    }
    Tensor::new(input_shape.to_vec(), gx).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution written independently of the kernels.
    fn naive_conv(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        stride: usize,
        pad_t: usize,
        pad_l: usize,
        oh: usize,
        ow: usize,
    ) -> Vec<f64> {
        let s = x.shape();
        let ks = k.shape();
        let (b, h, w, cin) = (s[0], s[1], s[2], s[3]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let mut out = vec![0.0; b * oh * ow * cout];
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as i64 - pad_t as i64;
                                let ix = (ox * stride + dx) as i64 - pad_l as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x.data()
                                        [((n * h + iy as usize) * w + ix as usize) * cin + ci];
                                    let kv = k.data()[((dy * kw + dx) * cin + ci) * cout + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((n * oh + oy) * ow + ox) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn same_padding_geometry() {
        assert_eq!(conv_out_dim(64, 3, 2, Padding::Same).unwrap(), (32, 0));
        assert_eq!(conv_out_dim(5, 3, 1, Padding::Same).unwrap(), (5, 1));
        assert_eq!(conv_out_dim(5, 3, 2, Padding::Same).unwrap(), (3, 1));
        assert_eq!(conv_out_dim(5, 3, 1, Padding::Valid).unwrap(), (3, 0));
        assert!(conv_out_dim(5, 3, 0, Padding::Same).is_err());
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[2, 4, 5, 3], &mut rng);
        let k = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &k, 1, Padding::Same).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::full(&[1, 4, 4, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w, stride, pad) in [(7, 6, 1, Padding::Same), (8, 8, 2, Padding::Same), (7, 9, 2, Padding::Valid)] {
            let x = random(&[2, h, w, 3], &mut rng);
            let k = random(&[3, 3, 3, 4], &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let (oh, pt) = conv_out_dim(h, 3, stride, pad).unwrap();
            let (ow, pl) = conv_out_dim(w, 3, stride, pad).unwrap();
            assert_eq!(y.shape(), &[2, oh, ow, 4]);
            assert_close(y.data(), &naive_conv(&x, &k, stride, pt, pl, oh, ow), 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
        let k = Tensor::zeros(&[3, 3, 2, 4]);
        let err = conv2d(&x, &k, 1, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
    }

    #[test]
    fn depthwise_single_channel_equals_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 6, 6, 1], &mut rng);
        let k3 = random(&[3, 3, 1], &mut rng);
        let k4 = k3.clone().reshape(&[3, 3, 1, 1]).unwrap();
        assert_eq!(
            depthwise_conv2d(&x, &k3, 2, Padding::Same).unwrap(),
            conv2d(&x, &k4, 2, Padding::Same).unwrap()
        );
    }

    #[test]
    fn depthwise_identity_and_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 5, 4], &mut rng);
        let ident = Tensor::from_fn(&[3, 3, 4], |i| if i / 4 == 4 { 1.0 } else { 0.0 });
        assert_eq!(depthwise_conv2d(&x, &ident, 1, Padding::Same).unwrap(), x);

        let k = random(&[3, 3, 4], &mut rng);
        let y = depthwise_conv2d(&x, &k, 2, Padding::Same).unwrap();
        // per-channel loop oracle built from single-channel full convs
        for c in 0..4 {
            let xc = Tensor::from_fn(&[2, 5, 5, 1], |i| x.data()[i * 4 + c]);
            let kc = Tensor::from_fn(&[3, 3, 1, 1], |i| k.data()[i * 4 + c]);
            let (oh, pt) = conv_out_dim(5, 3, 2, Padding::Same).unwrap();
            let want = naive_conv(&xc, &kc, 2, pt, pt, oh, oh);
            let got: Vec<f64> = y.data().iter().skip(c).step_by(4).copied().collect();
            assert_close(&got, &want, 1e-12);
        }
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::<f64>::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[1, 4, 4, 2], 3.0);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[3.0, 3.0]);
        let p = avg_pool_to(&c, 2, 2).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 3.0));
        assert_eq!(avg_pool_to(&c, 4, 4).unwrap(), c);
        assert!(avg_pool_to(&c, 3, 3).is_err());
    }

    #[test]
    fn pooling_matches_block_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 8, 4, 3], &mut rng);
        let p = avg_pool_to(&x, 2, 2).unwrap();
        for b in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    for c in 0..3 {
                        let mut s = 0.0;
                        for y in oy * 4..oy * 4 + 4 {
                            for xx in ox * 2..ox * 2 + 2 {
                                s += x.data()[((b * 8 + y) * 4 + xx) * 3 + c];
                            }
                        }
                        let got = p.data()[((b * 2 + oy) * 2 + ox) * 3 + c];
                        assert!((got - s / 8.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4], &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let bias = random(&[2], &mut rng);
        let y = dense(&x, &Tensor::zeros(&[4, 2]), &bias).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, bias.data());
        }
        let w = random(&[4, 2], &mut rng);
        let y = dense(&x, &w, &bias).unwrap();
        for b in 0..3 {
            for k in 0..2 {
                let want: f64 = bias.data()[k]
                    + (0..4).map(|d| x.data()[b * 4 + d] * w.data()[d * 2 + k]).sum::<f64>();
                assert!((y.data()[b * 2 + k] - want).abs() < 1e-12);
            }
        }
        assert!(dense(&x, &Tensor::zeros(&[3, 2]), &bias).is_err());
    }

    #[test]
    fn pointwise_activations() {
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(relu6(&z).data(), &[0.0; 3]);
        assert_eq!(sigmoid(&z).data(), &[0.5; 3]);
        let b = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(add(&z, &b).unwrap(), b);
        let big = Tensor::<f64>::new(vec![3], vec![10.0, -1.0, 3.0]).unwrap();
        assert_eq!(relu6(&big).data(), &[6.0, 0.0, 3.0]);
        let s = sigmoid(&Tensor::<f64>::new(vec![2], vec![-800.0, 800.0]).unwrap());
        assert!(s.all_finite());
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[1, 6, 6, 2], &mut rng);
        let y = random(&[1, 6, 6, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d(
            &Tensor::from_fn(&[1, 6, 6, 2], |i| a * x.data()[i] + b * y.data()[i]),
            &k,
            1,
            Padding::Same,
        )
        .unwrap();
        let cx = conv2d(&x, &k, 1, Padding::Same).unwrap();
        let cy = conv2d(&y, &k, 1, Padding::Same).unwrap();
        let rhs: Vec<f64> = cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect();
        assert_close(lhs.data(), &rhs, 1e-12);
    }
}
