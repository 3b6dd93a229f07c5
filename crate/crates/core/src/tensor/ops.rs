//! Forward and backward kernels. Every differentiable operation is a pair
//! of plain functions; the tape only records which pair to call.

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// 3D convolution settings. Padding is always "same" (`k / 2`) on every
/// axis, so only the spatial stride changes the output size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dConfig {
    pub stride: usize,
    pub groups: usize,
}

impl Conv3dConfig {
    pub const POINTWISE: Conv3dConfig = Conv3dConfig { stride: 1, groups: 1 };

    pub fn depthwise(channels: usize, stride: usize) -> Self {
        Conv3dConfig { stride, groups: channels }
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], cfg: Conv3dConfig) -> Result<Self> {
        let bad = |m: String| Err(Error::Shape(format!("conv3d: {m}")));
        if x.len() != 5 || k.len() != 5 {
            return bad(format!("expected 5-d input and kernel, got {x:?} and {k:?}"));
        }
        let (n, cin, t, h, w) = (x[0], x[1], x[2], x[3], x[4]);
        let (cout, cin_g, kt, kh, kw) = (k[0], k[1], k[2], k[3], k[4]);
        let g = cfg.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return bad(format!("input {x:?} incompatible with kernel {k:?} in {g} groups"));
        }
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return bad(format!("kernel extents must be odd, got {k:?}"));
        }
        if cfg.stride == 0 {
            return bad("zero stride".into());
        }
        let s = cfg.stride;
        let ho = (h + 2 * (kh / 2) - kh) / s + 1;
        let wo = (w + 2 * (kw / 2) - kw) / s + 1;
        Ok(ConvGeom {
            n,
            cin,
            cout,
            cin_g,
            cout_g: cout / g,
            t,
            h,
            w,
            kt,
            kh,
            kw,
            ho,
            wo,
            stride: s,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.t, self.ho, self.wo]
    }

    fn pointwise(&self) -> bool {
        self.kt == 1 && self.kh == 1 && self.kw == 1 && self.stride == 1 && self.cout_g == self.cout
    }

    fn padded(&self) -> (usize, usize, usize) {
        (self.t + self.kt - 1, self.h + self.kh - 1, self.w + self.kw - 1)
    }

    fn padded_plane(&self) -> usize {
        let (tp, hp, wp) = self.padded();
        tp * hp * wp
    }

    fn taps(&self) -> usize {
        self.kt * self.kh * self.kw
    }

    /// Flat offset of every kernel tap inside a zero-padded plane.
    fn tap_offsets(&self) -> Vec<usize> {
        let (_, hp, wp) = self.padded();
        let mut v = Vec::with_capacity(self.taps());
        for dt in 0..self.kt {
            for dh in 0..self.kh {
                for dw in 0..self.kw {
                    v.push((dt * hp + dh) * wp + dw);
                }
            }
        }
        v
    }

    /// Padded-plane index of the first tap for every output position.
    fn out_bases(&self) -> Vec<usize> {
        let (_, hp, wp) = self.padded();
        let s = self.stride;
        let mut v = Vec::with_capacity(self.t * self.ho * self.wo);
        for t in 0..self.t {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    v.push((t * hp + oh * s) * wp + ow * s);
                }
            }
        }
        v
    }

    /// Input planes of sample `n`, zero-padded by `k / 2` on every side.
    fn pad_sample(&self, xd: &[f64], n: usize, buf: &mut [f64]) {
        let (_, hp, wp) = self.padded();
        let (pt, ph, pw) = (self.kt / 2, self.kh / 2, self.kw / 2);
        let pp = self.padded_plane();
        let plane = self.t * self.h * self.w;
        buf.fill(0.0);
        for c in 0..self.cin {
            let src = &xd[(n * self.cin + c) * plane..][..plane];
            let dst = &mut buf[c * pp..][..pp];
            for t in 0..self.t {
                for y in 0..self.h {
                    let d = ((t + pt) * hp + y + ph) * wp + pw;
                    dst[d..d + self.w].copy_from_slice(&src[(t * self.h + y) * self.w..][..self.w]);
                }
            }
        }
    }

    /// Adds the interior of padded gradient planes into sample `n` of `gx`.
    fn unpad_sample(&self, buf: &[f64], n: usize, gx: &mut [f64]) {
        let (_, hp, wp) = self.padded();
        let (pt, ph, pw) = (self.kt / 2, self.kh / 2, self.kw / 2);
        let pp = self.padded_plane();
        let plane = self.t * self.h * self.w;
        for c in 0..self.cin {
            let src = &buf[c * pp..][..pp];
            let dst = &mut gx[(n * self.cin + c) * plane..][..plane];
            for t in 0..self.t {
                for y in 0..self.h {
                    let d = ((t + pt) * hp + y + ph) * wp + pw;
                    dst[(t * self.h + y) * self.w..][..self.w].copy_from_slice(&src[d..d + self.w]);
                }
            }
        }
    }
}

/// Cross-correlation with "same" padding and spatial stride.
pub fn conv3d_forward(x: &Tensor, k: &Tensor, cfg: Conv3dConfig) -> Result<Tensor> {
    let geo = ConvGeom::new(x.shape(), k.shape(), cfg)?;
    let mut out = vec![0.0; geo.out_shape().iter().product()];
    let (xd, kd) = (x.data(), k.data());
    let in_plane = geo.t * geo.h * geo.w;
    let out_plane = geo.t * geo.ho * geo.wo;
    if geo.pointwise() {
        for n in 0..geo.n {
            for oc in 0..geo.cout {
                let o = &mut out[(n * geo.cout + oc) * out_plane..][..out_plane];
                for ic in 0..geo.cin {
                    let wv = kd[oc * geo.cin + ic];
                    let xi = &xd[(n * geo.cin + ic) * in_plane..][..in_plane];
                    for (a, b) in o.iter_mut().zip(xi) {
                        *a += wv * b;
                    }
                }
            }
        }
        return Tensor::new(geo.out_shape(), out);
    }
    let (offs, bases, taps, pp) = (geo.tap_offsets(), geo.out_bases(), geo.taps(), geo.padded_plane());
    let mut pad = vec![0.0; geo.cin * pp];
    for n in 0..geo.n {
        geo.pad_sample(xd, n, &mut pad);
        for oc in 0..geo.cout {
            let g = oc / geo.cout_g;
            let o = &mut out[(n * geo.cout + oc) * out_plane..][..out_plane];
            for icg in 0..geo.cin_g {
                let ic = g * geo.cin_g + icg;
                let kw = &kd[(oc * geo.cin_g + icg) * taps..][..taps];
                let xp = &pad[ic * pp..][..pp];
                for (ov, &b) in o.iter_mut().zip(&bases) {
                    let win = &xp[b..];
                    let mut acc = 0.0;
                    for (wv, &off) in kw.iter().zip(&offs) {
                        acc += wv * win[off];
                    }
                    *ov += acc;
                }
            }
        }
    }
    Tensor::new(geo.out_shape(), out)
}

/// Gradients of [`conv3d_forward`] with respect to input and kernel.
pub fn conv3d_backward(gout: &Tensor, x: &Tensor, k: &Tensor, cfg: Conv3dConfig) -> Result<(Tensor, Tensor)> {
    let geo = ConvGeom::new(x.shape(), k.shape(), cfg)?;
    if gout.shape() != geo.out_shape().as_slice() {
        return Err(Error::Shape(format!(
            "conv3d backward: output grad {:?} does not match {:?}",
            gout.shape(),
            geo.out_shape()
        )));
    }
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; k.numel()];
    let (xd, kd, gd) = (x.data(), k.data(), gout.data());
    let in_plane = geo.t * geo.h * geo.w;
    let out_plane = geo.t * geo.ho * geo.wo;
    if geo.pointwise() {
        for n in 0..geo.n {
            for oc in 0..geo.cout {
                let go = &gd[(n * geo.cout + oc) * out_plane..][..out_plane];
                for ic in 0..geo.cin {
                    let wv = kd[oc * geo.cin + ic];
                    let xi = &xd[(n * geo.cin + ic) * in_plane..][..in_plane];
                    let gxi = &mut gx[(n * geo.cin + ic) * in_plane..][..in_plane];
                    let mut acc = 0.0;
                    for ((g, a), xv) in go.iter().zip(gxi.iter_mut()).zip(xi) {
                        *a += wv * g;
                        acc += g * xv;
                    }
                    gk[oc * geo.cin + ic] += acc;
                }
            }
        }
        return Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(k.shape().to_vec(), gk)?));
    }
    let (offs, bases, taps, pp) = (geo.tap_offsets(), geo.out_bases(), geo.taps(), geo.padded_plane());
    let mut pad = vec![0.0; geo.cin * pp];
    let mut gpad = vec![0.0; geo.cin * pp];
    for n in 0..geo.n {
        geo.pad_sample(xd, n, &mut pad);
        gpad.fill(0.0);
        for oc in 0..geo.cout {
            let g = oc / geo.cout_g;
            let go = &gd[(n * geo.cout + oc) * out_plane..][..out_plane];
            for icg in 0..geo.cin_g {
                let ic = g * geo.cin_g + icg;
                let kidx = (oc * geo.cin_g + icg) * taps;
                let kw = &kd[kidx..][..taps];
                let gkw = &mut gk[kidx..][..taps];
                let xp = &pad[ic * pp..][..pp];
                let gp = &mut gpad[ic * pp..][..pp];
                for (&gv, &b) in go.iter().zip(&bases) {
                    if gv == 0.0 {
                        continue;
                    }
                    let (win, gwin) = (&xp[b..], &mut gp[b..]);
                    for ((wv, gw), &off) in kw.iter().zip(gkw.iter_mut()).zip(&offs) {
                        gwin[off] += wv * gv;
                        *gw += gv * win[off];
                    }
                }
            }
        }
        geo.unpad_sample(&gpad, n, &mut gx);
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(k.shape().to_vec(), gk)?))
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("batchnorm needs at least 2 dims, got {shape:?}")));
    }
    let rest: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], rest))
}

/// Saved state of a normalization forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub training: bool,
}

/// Batch statistics of a training-mode normalization (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "batchnorm affine of {} / {} values for {c} channels",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(())
}

/// Per-channel normalization over batch and positions. With `running`
/// set, those statistics replace the batch statistics (evaluation mode).
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: Option<&BnStats>,
) -> Result<(Tensor, BnCache, BnStats)> {
    let (n, c, rest) = bn_dims(x.shape())?;
    check_affine(c, gamma, beta)?;
    if n * rest == 0 {
        return Err(Error::Shape("batchnorm over an empty batch".into()));
    }
    let xd = x.data();
    let m = (n * rest) as f64;
    let (mean, var) = match running {
        Some(stats) => {
            if stats.mean.len() != c || stats.var.len() != c {
                return Err(Error::Shape("running statistics do not match channels".into()));
            }
            (stats.mean.clone(), stats.var.clone())
        }
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let s = &xd[(b * c + ch) * rest..][..rest];
                    mean[ch] += s.iter().sum::<f64>();
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            for b in 0..n {
                for ch in 0..c {
                    let s = &xd[(b * c + ch) * rest..][..rest];
                    var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * rest;
            for i in base..base + rest {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                y[i] = gd[ch] * h + bd[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnCache { x_hat: Tensor::new(shape, x_hat)?, inv_std, training: running.is_none() },
        BnStats { mean, var },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(gy: &Tensor, gamma: &Tensor, cache: &BnCache) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, rest) = bn_dims(gy.shape())?;
    if gy.shape() != cache.x_hat.shape() {
        return Err(Error::Shape("batchnorm backward shape mismatch".into()));
    }
    let (gd, xh, ga) = (gy.data(), cache.x_hat.data(), gamma.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * rest;
            for i in base..base + rest {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * xh[i];
            }
        }
    }
    let m = (n * rest) as f64;
    let mut dx = vec![0.0; gd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * rest;
            let k = ga[ch] * cache.inv_std[ch];
            for i in base..base + rest {
                dx[i] = if cache.training {
                    k * (gd[i] - dbeta[ch] / m - xh[i] * dgamma[ch] / m)
                } else {
                    k * gd[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(gy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn relu_backward(gy: &Tensor, x: &Tensor) -> Tensor {
    zip(gy, x, |g, v| if v > 0.0 { g } else { 0.0 })
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x * sigmoid(x)`.
pub fn swish_forward(x: &Tensor) -> Tensor {
    map(x, |v| v * sigmoid(v))
}

pub fn swish_backward(gy: &Tensor, x: &Tensor) -> Tensor {
    zip(gy, x, |g, v| {
        let s = sigmoid(v);
        g * s * (1.0 + v * (1.0 - s))
    })
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        .expect("same shape")
}

/// `[N, C, ...] -> [N, C]` mean over trailing dimensions.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, rest) = bn_dims(x.shape())?;
    if rest == 0 {
        return Err(Error::Shape("pooling over zero positions".into()));
    }
    let out = x.data().chunks(rest).map(|s| s.iter().sum::<f64>() / rest as f64).collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(gy: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let (n, c, rest) = bn_dims(in_shape)?;
    if gy.shape() != [n, c] {
        return Err(Error::Shape("pool backward shape mismatch".into()));
    }
    let inv = 1.0 / rest as f64;
    let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, rest)).collect();
    Tensor::new(in_shape.to_vec(), data)
}

/// `x [N, I] * w[O, I]^T + b[O]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, i, o) = linear_dims(x, w, b)?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            out[r * o + c] = bd[c] + (0..i).map(|k| xd[r * i + k] * wd[c * i + k]).sum::<f64>();
        }
    }
    Tensor::new(vec![n, o], out)
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape(), b.shape()) {
        ([n, i], [o, i2], [o2]) if i == i2 && o == o2 => Ok((*n, *i, *o)),
        (xs, ws, bs) => Err(Error::Shape(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}"))),
    }
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(gy: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    if gy.shape() != [n, o] {
        return Err(Error::Shape("linear backward shape mismatch".into()));
    }
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut dx = vec![0.0; n * i];
    let mut dw = vec![0.0; o * i];
    let mut db = vec![0.0; o];
    for r in 0..n {
        for c in 0..o {
            let g = gd[r * o + c];
            db[c] += g;
            for k in 0..i {
                dx[r * i + k] += g * wd[c * i + k];
                dw[c * i + k] += g * xd[r * i + k];
            }
        }
    }
    Ok((Tensor::new(vec![n, i], dx)?, Tensor::new(vec![o, i], dw)?, Tensor::new(vec![o], db)?))
}

/// Batched product of 3-d tensors, optionally transposing the trailing two
/// axes of either operand. A batch extent of 1 broadcasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulSpec {
    pub trans_a: bool,
    pub trans_b: bool,
}

struct MmGeom {
    na: usize,
    nb: usize,
    n: usize,
    p: usize,
    q: usize,
    r: usize,
}

fn mm_geom(a: &[usize], b: &[usize], spec: MatmulSpec) -> Result<MmGeom> {
    if a.len() != 3 || b.len() != 3 {
        return Err(Error::Shape(format!("matmul needs 3-d operands, got {a:?} and {b:?}")));
    }
    let (p, q) = if spec.trans_a { (a[2], a[1]) } else { (a[1], a[2]) };
    let (q2, r) = if spec.trans_b { (b[2], b[1]) } else { (b[1], b[2]) };
    let (na, nb) = (a[0], b[0]);
    let n = na.max(nb);
    if q != q2 || !(na == n || na == 1) || !(nb == n || nb == 1) {
        return Err(Error::Shape(format!("matmul of {a:?} and {b:?} with {spec:?}")));
    }
    Ok(MmGeom { na, nb, n, p, q, r })
}

impl MmGeom {
    fn a_idx(&self, spec: MatmulSpec, n: usize, p: usize, q: usize) -> usize {
        let n = if self.na == 1 { 0 } else { n };
        if spec.trans_a {
            (n * self.q + q) * self.p + p
        } else {
            (n * self.p + p) * self.q + q
        }
    }

    fn b_idx(&self, spec: MatmulSpec, n: usize, q: usize, r: usize) -> usize {
        let n = if self.nb == 1 { 0 } else { n };
        if spec.trans_b {
            (n * self.r + r) * self.q + q
        } else {
            (n * self.q + q) * self.r + r
        }
    }
}

pub fn matmul_forward(a: &Tensor, b: &Tensor, spec: MatmulSpec) -> Result<Tensor> {
    let g = mm_geom(a.shape(), b.shape(), spec)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; g.n * g.p * g.r];
    for n in 0..g.n {
        for p in 0..g.p {
            for q in 0..g.q {
                let av = ad[g.a_idx(spec, n, p, q)];
                if av == 0.0 {
                    continue;
                }
                let o = &mut out[(n * g.p + p) * g.r..][..g.r];
                for (r, slot) in o.iter_mut().enumerate() {
                    *slot += av * bd[g.b_idx(spec, n, q, r)];
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.p, g.r], out)
}

/// Returns `(da, db)`; broadcast operands receive the batch sum.
pub fn matmul_backward(gy: &Tensor, a: &Tensor, b: &Tensor, spec: MatmulSpec) -> Result<(Tensor, Tensor)> {
    let g = mm_geom(a.shape(), b.shape(), spec)?;
    if gy.shape() != [g.n, g.p, g.r] {
        return Err(Error::Shape("matmul backward shape mismatch".into()));
    }
    let (ad, bd, gd) = (a.data(), b.data(), gy.data());
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    for n in 0..g.n {
        for p in 0..g.p {
            for q in 0..g.q {
                let ai = g.a_idx(spec, n, p, q);
                let av = ad[ai];
                let mut acc = 0.0;
                for r in 0..g.r {
                    let gv = gd[(n * g.p + p) * g.r + r];
                    let bi = g.b_idx(spec, n, q, r);
                    acc += gv * bd[bi];
                    db[bi] += gv * av;
                }
                da[ai] += acc;
            }
        }
    }
    Ok((Tensor::new(a.shape().to_vec(), da)?, Tensor::new(b.shape().to_vec(), db)?))
}

/// Softmax cross-entropy over `[N, K]` logits.
#[derive(Debug, Clone)]
pub struct CeOutput {
    /// Mean negative log-likelihood.
    pub loss: f64,
    /// `log p(label | x)` per sample.
    pub logliks: Vec<f64>,
    pub probs: Tensor,
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CeOutput> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::Shape(format!("cross-entropy needs [N, K] logits, got {s:?}"))),
    };
    if n == 0 {
        return Err(Error::Shape("cross-entropy over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidValue(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![0.0; n * k];
    let mut logliks = Vec::with_capacity(n);
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (j, v) in row.iter().enumerate() {
            probs[i * k + j] = (v - lse).exp();
        }
        logliks.push(row[label] - lse);
    }
    let loss = -logliks.iter().sum::<f64>() / n as f64;
    Ok(CeOutput { loss, logliks, probs: Tensor::new(vec![n, k], probs)? })
}

pub fn softmax_cross_entropy_backward(gloss: f64, probs: &Tensor, labels: &[usize]) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let mut g = probs.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        g[i * k + l] -= 1.0;
    }
    for v in &mut g {
        *v *= gloss / n as f64;
    }
    Tensor::new(vec![n, k], g).expect("probs shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight seven-loop reference convolution.
    fn conv_reference(x: &Tensor, k: &Tensor, cfg: Conv3dConfig) -> Tensor {
        let (n, cin, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
        let (cout, cin_g, kt, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3], k.shape()[4]);
        let s = cfg.stride;
        let ho = (h + 2 * (kh / 2) - kh) / s + 1;
        let wo = (w + 2 * (kw / 2) - kw) / s + 1;
        let cout_g = cout / cfg.groups;
        let mut out = Tensor::zeros(&[n, cout, t, ho, wo]);
        let xi = |b: usize, c: usize, tt: isize, hh: isize, ww: isize| -> f64 {
            if tt < 0 || hh < 0 || ww < 0 || tt >= t as isize || hh >= h as isize || ww >= w as isize {
                0.0
            } else {
                x.data()[(((b * cin + c) * t + tt as usize) * h + hh as usize) * w + ww as usize]
            }
        };
        for b in 0..n {
            for oc in 0..cout {
                let grp = oc / cout_g;
                for ot in 0..t {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = 0.0;
                            for icg in 0..cin_g {
                                for dt in 0..kt {
                                    for dh in 0..kh {
                                        for dw in 0..kw {
                                            let wv = k.data()[(((oc * cin_g + icg) * kt + dt) * kh + dh) * kw + dw];
                                            acc += wv
                                                * xi(
                                                    b,
                                                    grp * cin_g + icg,
                                                    (ot + dt) as isize - (kt / 2) as isize,
                                                    (oh * s + dh) as isize - (kh / 2) as isize,
                                                    (ow * s + dw) as isize - (kw / 2) as isize,
                                                );
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((b * cout + oc) * t + ot) * ho + oh) * wo + ow] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::new(vec![1, 1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        assert_eq!(conv3d_forward(&x, &k, Conv3dConfig::POINTWISE).unwrap(), x);
    }

    #[test]
    fn depthwise_ones_interior_is_27() {
        let x = Tensor::full(&[1, 2, 5, 5, 5], 1.0);
        let k = Tensor::full(&[2, 1, 3, 3, 3], 1.0);
        let y = conv3d_forward(&x, &k, Conv3dConfig::depthwise(2, 1)).unwrap();
        let centre = ((2 * 5 + 2) * 5) + 2;
        assert_eq!(y.data()[centre], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn matches_reference_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 4, 5, 5], 1.0, &mut rng);
        let cases = [
            (vec![4, 3, 3, 3, 3], Conv3dConfig { stride: 1, groups: 1 }),
            (vec![4, 3, 1, 3, 3], Conv3dConfig { stride: 2, groups: 1 }),
            (vec![3, 1, 5, 3, 3], Conv3dConfig::depthwise(3, 2)),
            (vec![3, 1, 3, 5, 5], Conv3dConfig::depthwise(3, 1)),
            (vec![2, 3, 1, 1, 1], Conv3dConfig::POINTWISE),
            (vec![2, 3, 1, 1, 1], Conv3dConfig { stride: 2, groups: 1 }),
        ];
        for (ks, cfg) in cases {
            let k = Tensor::randn(&ks, 1.0, &mut rng);
            let fast = conv3d_forward(&x, &k, cfg).unwrap();
            let slow = conv_reference(&x, &k, cfg);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{ks:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[1, 3, 2, 4, 4]);
        assert!(conv3d_forward(&x, &Tensor::zeros(&[2, 2, 1, 1, 1]), Conv3dConfig::POINTWISE).is_err());
        assert!(conv3d_forward(&x, &Tensor::zeros(&[2, 3, 2, 1, 1]), Conv3dConfig::POINTWISE).is_err());
        assert!(conv3d_forward(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[2, 3, 1, 1, 1]), Conv3dConfig::POINTWISE).is_err());
    }

    #[test]
    fn conv_backward_zero_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 2, 3, 4, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng);
        let cfg = Conv3dConfig { stride: 2, groups: 1 };
        let y = conv3d_forward(&x, &k, cfg).unwrap();
        let zero = Tensor::zeros(y.shape());
        let (gx, gk) = conv3d_backward(&zero, &x, &k, cfg).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(gk.max_abs(), 0.0);

        // Integer-valued grads keep every sum exact.
        let g1 = Tensor::new(y.shape().to_vec(), (0..y.numel()).map(|i| (i % 7) as f64 - 3.0).collect()).unwrap();
        let g2 = Tensor::new(y.shape().to_vec(), (0..y.numel()).map(|i| (i % 5) as f64 - 2.0).collect()).unwrap();
        let xi = Tensor::new(x.shape().to_vec(), (0..x.numel()).map(|i| (i % 3) as f64).collect()).unwrap();
        let ki = Tensor::new(k.shape().to_vec(), (0..k.numel()).map(|i| (i % 4) as f64 - 1.0).collect()).unwrap();
        let mut g12 = g1.clone();
        g12.add_assign(&g2).unwrap();
        let (a1, b1) = conv3d_backward(&g1, &xi, &ki, cfg).unwrap();
        let (a2, b2) = conv3d_backward(&g2, &xi, &ki, cfg).unwrap();
        let (a12, b12) = conv3d_backward(&g12, &xi, &ki, cfg).unwrap();
        for ((s, p), q) in a12.data().iter().zip(a1.data()).zip(a2.data()) {
            assert_eq!(*s, p + q);
        }
        for ((s, p), q) in b12.data().iter().zip(b1.data()).zip(b2.data()) {
            assert_eq!(*s, p + q);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let out = softmax_cross_entropy(&Tensor::zeros(&[1, 2]), &[0]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
        assert!(softmax_cross_entropy(&Tensor::zeros(&[1, 2]), &[2]).is_err());
        assert!(softmax_cross_entropy(&Tensor::zeros(&[0, 2]), &[]).is_err());
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::randn(&[16, 5], 4.0, &mut rng);
        let labels: Vec<usize> = (0..16).map(|i| i % 5).collect();
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        for row in out.probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for l in &out.logliks {
            let p = l.exp();
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn pooling_constant() {
        let x = Tensor::full(&[2, 3, 2, 2, 2], 1.5);
        let y = global_avg_pool_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn batchnorm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 3, 2, 3, 3], 2.5, &mut rng);
        let (y, _, _) = batchnorm_forward(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), None).unwrap();
        let rest = 18;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + ch) * rest..][..rest].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
