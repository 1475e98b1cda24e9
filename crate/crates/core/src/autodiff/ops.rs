//! Differentiable tensor operations.
//!
//! Every op computes its forward value eagerly and, when the tape is
//! recording and an input is attached, pushes a backward rule that
//! accumulates exact analytic gradients into the parents' buffers.

use super::tape::{BoxedBackward, Tape};
use super::tensor::Tensor;
use super::AutodiffError;
use std::sync::Arc;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Element strides for broadcasting `shape` against `out`: size-1 axes get
/// stride 0 so the same element is reused along the broadcast direction.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] > 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Walks every output position of a broadcast binary op, yielding the
/// linear indices into the output and both inputs.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..total {
        f(io, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
        }
    }
}

fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, AutodiffError> {
    if a.len() != b.len() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        })
        .collect()
}

impl Tape {
    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + Send + 'static,
    ) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let parent = a.node();
        let ad = a.shared_data();
        self.record(parent.is_some(), a.shape().to_vec(), Arc::new(out), || {
            Box::new(move |gout, store| {
                let id = parent.expect("attached unary op has a parent");
                let buf = store.buf(id, ad.len());
                for i in 0..ad.len() {
                    buf[i] += gout[i] * df(ad[i]);
                }
            })
        })
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| -x, |_| -1.0)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// `x * sigmoid(x)`, the base activation of the spline layers.
    pub fn silu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x * sigmoid(x), |x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// Square root; callers keep inputs strictly positive on the gradient
    /// path (see the edge-magnitude loss, which adds a floor).
    pub fn sqrt(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::sqrt, |x| 0.5 / x.sqrt())
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::ln, |x| 1.0 / x)
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, |x| c * x, move |_| c)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, |x| x + c, |_| 1.0)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor, AutodiffError> {
        let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.shared_data(), b.shared_data());
        let same = a.shape() == b.shape();
        let mut out = vec![0.0; n];
        if same {
            for i in 0..n {
                out[i] = f(ad[i], bd[i]);
            }
        } else {
            for_each_broadcast(&out_shape, a.shape(), b.shape(), |io, ia, ib| {
                out[io] = f(ad[ia], bd[ib]);
            });
        }
        let (an, bn) = (a.node(), b.node());
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        let osh = out_shape.clone();
        Ok(self.record(
            an.is_some() || bn.is_some(),
            out_shape,
            Arc::new(out),
            move || {
                Box::new(move |gout, store| {
                    if let Some(ia) = an {
                        let buf = store.buf(ia, ad.len());
                        if same {
                            for i in 0..ad.len() {
                                buf[i] += gout[i] * df(ad[i], bd[i]).0;
                            }
                        } else {
                            for_each_broadcast(&osh, &ash, &bsh, |io, iia, iib| {
                                buf[iia] += gout[io] * df(ad[iia], bd[iib]).0;
                            });
                        }
                    }
                    if let Some(ib) = bn {
                        let buf = store.buf(ib, bd.len());
                        if same {
                            for i in 0..bd.len() {
                                buf[i] += gout[i] * df(ad[i], bd[i]).1;
                            }
                        } else {
                            for_each_broadcast(&osh, &ash, &bsh, |io, iia, iib| {
                                buf[iib] += gout[io] * df(ad[iia], bd[iib]).1;
                            });
                        }
                    }
                })
            },
        ))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let (ad, bd) = (a.shared_data(), b.shared_data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += av * *b;
                }
            }
        }
        let (an, bn) = (a.node(), b.node());
        Ok(self.record(
            an.is_some() || bn.is_some(),
            vec![m, n],
            Arc::new(out),
            move || {
                Box::new(move |gout, store| {
                    if let Some(ia) = an {
                        // dA = dC * B^T
                        let buf = store.buf(ia, m * k);
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            let arow = &mut buf[i * k..(i + 1) * k];
                            for kk in 0..k {
                                let brow = &bd[kk * n..(kk + 1) * n];
                                let acc: f64 =
                                    grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                                arow[kk] += acc;
                            }
                        }
                    }
                    if let Some(ib) = bn {
                        // dB = A^T * dC
                        let buf = store.buf(ib, k * n);
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            let arow = &ad[i * k..(i + 1) * k];
                            for (kk, &av) in arow.iter().enumerate() {
                                if av == 0.0 {
                                    continue;
                                }
                                let brow = &mut buf[kk * n..(kk + 1) * n];
                                for (b, g) in brow.iter_mut().zip(grow) {
                                    *b += av * *g;
                                }
                            }
                        }
                    }
                })
            },
        ))
    }

    /// `[m,n] -> [n,m]`.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ash = a.shape();
        if ash.len() != 2 {
            return Err(AutodiffError::BadShape {
                op: "transpose",
                msg: format!("expected rank 2, got {ash:?}"),
            });
        }
        let (m, n) = (ash[0], ash[1]);
        let ad = a.shared_data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let an = a.node();
        Ok(self.record(an.is_some(), vec![n, m], Arc::new(out), move || {
            Box::new(move |gout, store| {
                let buf = store.buf(an.expect("attached"), m * n);
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += gout[j * m + i];
                    }
                }
            })
        }))
    }

    /// Reinterprets the buffer under a new shape without copying.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor, AutodiffError> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(AutodiffError::BadShape {
                op: "reshape",
                msg: format!("cannot view {:?} as {shape:?}", a.shape()),
            });
        }
        let an = a.node();
        let len = a.numel();
        if self.is_enabled() && an.is_some() {
            let id = self.push_node(
                len,
                Some(Box::new(move |gout: &[f64], store: &mut super::tape::GradStore| {
                    let buf = store.buf(an.expect("attached"), len);
                    for i in 0..len {
                        buf[i] += gout[i];
                    }
                }) as BoxedBackward),
            );
            Ok(Tensor::from_shared(shape, a.shared_data(), Some(id)))
        } else {
            Ok(Tensor::from_shared(shape, a.shared_data(), None))
        }
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    ///
    /// `x` is `[C_in,H,W]`, `w` is `[C_out,C_in,k,k]`, and the optional bias
    /// is `[C_out]`. Output size `(H + 2*pad - k)/stride + 1` must divide
    /// exactly; there is no implicit floor.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor, AutodiffError> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(AutodiffError::BadShape {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        let (c_in, h, wd_) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let out_dim = |size: usize| -> Result<usize, AutodiffError> {
            let padded = size + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(AutodiffError::NonIntegralConv {
                    size,
                    k,
                    pad,
                    stride,
                });
            }
            Ok((padded - k) / stride + 1)
        };
        let ho = out_dim(h)?;
        let wo = out_dim(wd_)?;

        let xd = x.shared_data();
        let wdat = w.shared_data();
        let bd = bias.map(|b| b.shared_data());
        let mut out = vec![0.0; c_out * ho * wo];

        // Valid output range along one axis for a given kernel offset.
        let range = |size: usize, kk: usize, odim: usize| -> (usize, usize) {
            let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
            let hi_raw = size + pad;
            if hi_raw <= kk {
                return (1, 0); // empty
            }
            let hi = ((hi_raw - 1 - kk) / stride).min(odim.saturating_sub(1));
            (lo, hi)
        };

        for co in 0..c_out {
            let out_plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            if let Some(b) = &bd {
                out_plane.fill(b[co]);
            }
            for ci in 0..c_in {
                let x_plane = &xd[ci * h * wd_..(ci + 1) * h * wd_];
                let w_base = (co * c_in + ci) * k * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = range(h, ky, ho);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..k {
                        let wv = wdat[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = range(wd_, kx, wo);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo + 1;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            if stride == 1 {
                                let ix0 = iy * wd_ + ox_lo + kx - pad;
                                let src = &x_plane[ix0..ix0 + len];
                                let dst = &mut out_plane[oy * wo + ox_lo..oy * wo + ox_lo + len];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            } else {
                                let in_row = &x_plane[iy * wd_..(iy + 1) * wd_];
                                let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                                for ox in ox_lo..=ox_hi {
                                    out_row[ox] += wv * in_row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }

        let (xn, wn, bn) = (x.node(), w.node(), bias.and_then(|b| b.node()));
        let attached = xn.is_some() || wn.is_some() || bn.is_some();
        let xd2 = Arc::clone(&xd);
        let wd2 = Arc::clone(&wdat);
        Ok(self.record(attached, vec![c_out, ho, wo], Arc::new(out), move || {
            Box::new(move |gout, store| {
                let range = |size: usize, kk: usize, odim: usize| -> (usize, usize) {
                    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
                    let hi_raw = size + pad;
                    if hi_raw <= kk {
                        return (1, 0);
                    }
                    let hi = ((hi_raw - 1 - kk) / stride).min(odim.saturating_sub(1));
                    (lo, hi)
                };
                if let Some(id) = xn {
                    let dx = store.buf(id, c_in * h * wd_);
                    for co in 0..c_out {
                        let g_plane = &gout[co * ho * wo..(co + 1) * ho * wo];
                        for ci in 0..c_in {
                            let dx_plane = &mut dx[ci * h * wd_..(ci + 1) * h * wd_];
                            let w_base = (co * c_in + ci) * k * k;
                            for ky in 0..k {
                                let (oy_lo, oy_hi) = range(h, ky, ho);
                                if oy_lo > oy_hi {
                                    continue;
                                }
                                for kx in 0..k {
                                    let wv = wd2[w_base + ky * k + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let (ox_lo, ox_hi) = range(wd_, kx, wo);
                                    if ox_lo > ox_hi {
                                        continue;
                                    }
                                    let len = ox_hi - ox_lo + 1;
                                    for oy in oy_lo..=oy_hi {
                                        let iy = oy * stride + ky - pad;
                                        if stride == 1 {
                                            let ix0 = iy * wd_ + ox_lo + kx - pad;
                                            let dst = &mut dx_plane[ix0..ix0 + len];
                                            let src = &g_plane[oy * wo + ox_lo..oy * wo + ox_lo + len];
                                            for (d, g) in dst.iter_mut().zip(src) {
                                                *d += wv * *g;
                                            }
                                        } else {
                                            let dx_row = &mut dx_plane[iy * wd_..(iy + 1) * wd_];
                                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                                            for ox in ox_lo..=ox_hi {
                                                dx_row[ox * stride + kx - pad] += wv * g_row[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(id) = wn {
                    let dw = store.buf(id, c_out * c_in * k * k);
                    for co in 0..c_out {
                        let g_plane = &gout[co * ho * wo..(co + 1) * ho * wo];
                        for ci in 0..c_in {
                            let x_plane = &xd2[ci * h * wd_..(ci + 1) * h * wd_];
                            let w_base = (co * c_in + ci) * k * k;
                            for ky in 0..k {
                                let (oy_lo, oy_hi) = range(h, ky, ho);
                                if oy_lo > oy_hi {
                                    continue;
                                }
                                for kx in 0..k {
                                    let (ox_lo, ox_hi) = range(wd_, kx, wo);
                                    if ox_lo > ox_hi {
                                        continue;
                                    }
                                    let len = ox_hi - ox_lo + 1;
                                    let mut acc = 0.0;
                                    for oy in oy_lo..=oy_hi {
                                        let iy = oy * stride + ky - pad;
                                        if stride == 1 {
                                            let ix0 = iy * wd_ + ox_lo + kx - pad;
                                            let xs = &x_plane[ix0..ix0 + len];
                                            let gs = &g_plane[oy * wo + ox_lo..oy * wo + ox_lo + len];
                                            acc += xs
                                                .iter()
                                                .zip(gs)
                                                .map(|(x, g)| x * g)
                                                .sum::<f64>();
                                        } else {
                                            let x_row = &x_plane[iy * wd_..(iy + 1) * wd_];
                                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                                            for ox in ox_lo..=ox_hi {
                                                acc += x_row[ox * stride + kx - pad] * g_row[ox];
                                            }
                                        }
                                    }
                                    dw[w_base + ky * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(id) = bn {
                    let db = store.buf(id, c_out);
                    for co in 0..c_out {
                        let g_plane = &gout[co * ho * wo..(co + 1) * ho * wo];
                        db[co] += g_plane.iter().sum::<f64>();
                    }
                }
            })
        }))
    }

    /// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
    pub fn up2_nearest(&mut self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(AutodiffError::BadShape {
                op: "up2_nearest",
                msg: format!("expected [C,H,W], got {xs:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.shared_data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = xd[(ci * h + y) * w + x_];
                    let base = (ci * ho + 2 * y) * wo + 2 * x_;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + wo] = v;
                    out[base + wo + 1] = v;
                }
            }
        }
        let xn = x.node();
        Ok(self.record(xn.is_some(), vec![c, ho, wo], Arc::new(out), move || {
            Box::new(move |gout, store| {
                let buf = store.buf(xn.expect("attached"), c * h * w);
                for ci in 0..c {
                    for y in 0..h {
                        for x_ in 0..w {
                            let base = (ci * ho + 2 * y) * wo + 2 * x_;
                            buf[(ci * h + y) * w + x_] +=
                                gout[base] + gout[base + 1] + gout[base + wo] + gout[base + wo + 1];
                        }
                    }
                }
            })
        }))
    }

    /// Stacks `[C1,H,W]` and `[C2,H,W]` into `[C1+C2,H,W]`.
    pub fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[1..] != bsh[1..] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_channels",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (c1, c2, h, w) = (ash[0], bsh[0], ash[1], ash[2]);
        let mut out = Vec::with_capacity((c1 + c2) * h * w);
        out.extend_from_slice(a.data());
        out.extend_from_slice(b.data());
        let (an, bn) = (a.node(), b.node());
        let split = c1 * h * w;
        let blen = c2 * h * w;
        Ok(self.record(
            an.is_some() || bn.is_some(),
            vec![c1 + c2, h, w],
            Arc::new(out),
            move || {
                Box::new(move |gout, store| {
                    if let Some(id) = an {
                        let buf = store.buf(id, split);
                        for i in 0..split {
                            buf[i] += gout[i];
                        }
                    }
                    if let Some(id) = bn {
                        let buf = store.buf(id, blen);
                        for i in 0..blen {
                            buf[i] += gout[split + i];
                        }
                    }
                })
            },
        ))
    }

    /// Concatenates `[T,d1]` and `[T,d2]` along columns into `[T,d1+d2]`.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[0] != bsh[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (t, d1, d2) = (ash[0], ash[1], bsh[1]);
        let d = d1 + d2;
        let (ad, bd) = (a.shared_data(), b.shared_data());
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            out[r * d..r * d + d1].copy_from_slice(&ad[r * d1..(r + 1) * d1]);
            out[r * d + d1..(r + 1) * d].copy_from_slice(&bd[r * d2..(r + 1) * d2]);
        }
        let (an, bn) = (a.node(), b.node());
        Ok(self.record(
            an.is_some() || bn.is_some(),
            vec![t, d],
            Arc::new(out),
            move || {
                Box::new(move |gout, store| {
                    if let Some(id) = an {
                        let buf = store.buf(id, t * d1);
                        for r in 0..t {
                            for j in 0..d1 {
                                buf[r * d1 + j] += gout[r * d + j];
                            }
                        }
                    }
                    if let Some(id) = bn {
                        let buf = store.buf(id, t * d2);
                        for r in 0..t {
                            for j in 0..d2 {
                                buf[r * d2 + j] += gout[r * d + d1 + j];
                            }
                        }
                    }
                })
            },
        ))
    }

    /// Extracts columns `[start, start+len)` of a `[T,d]` tensor.
    pub fn slice_cols(
        &mut self,
        a: &Tensor,
        start: usize,
        len: usize,
    ) -> Result<Tensor, AutodiffError> {
        let ash = a.shape();
        if ash.len() != 2 || start + len > ash[1] {
            return Err(AutodiffError::BadShape {
                op: "slice_cols",
                msg: format!("cannot take cols {start}..{} of {ash:?}", start + len),
            });
        }
        let (t, d) = (ash[0], ash[1]);
        let ad = a.shared_data();
        let mut out = vec![0.0; t * len];
        for r in 0..t {
            out[r * len..(r + 1) * len].copy_from_slice(&ad[r * d + start..r * d + start + len]);
        }
        let an = a.node();
        Ok(self.record(an.is_some(), vec![t, len], Arc::new(out), move || {
            Box::new(move |gout, store| {
                let buf = store.buf(an.expect("attached"), t * d);
                for r in 0..t {
                    for j in 0..len {
                        buf[r * d + start + j] += gout[r * len + j];
                    }
                }
            })
        }))
    }

    /// Per-row normalization to zero mean and unit variance followed by a
    /// learned affine map: `y = gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, AutodiffError> {
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(AutodiffError::BadShape {
                op: "layer_norm",
                msg: format!("expected [T,d], got {xs:?}"),
            });
        }
        let (t, d) = (xs[0], xs[1]);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: gamma.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let xd = x.shared_data();
        let gd = gamma.shared_data();
        let bd = beta.shared_data();
        let mut out = vec![0.0; t * d];
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        for r in 0..t {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mu) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
        let attached = xn.is_some() || gn.is_some() || bn.is_some();
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        Ok(self.record(attached, vec![t, d], Arc::new(out), move || {
            Box::new(move |gout, store| {
                if let Some(id) = gn {
                    let buf = store.buf(id, d);
                    for r in 0..t {
                        for j in 0..d {
                            buf[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(id) = bn {
                    let buf = store.buf(id, d);
                    for r in 0..t {
                        for j in 0..d {
                            buf[j] += gout[r * d + j];
                        }
                    }
                }
                if let Some(id) = xn {
                    let buf = store.buf(id, t * d);
                    for r in 0..t {
                        let g = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_a = 0.0;
                        let mut mean_ax = 0.0;
                        for j in 0..d {
                            let a = g[j] * gd[j];
                            mean_a += a;
                            mean_ax += a * xh[j];
                        }
                        mean_a /= d as f64;
                        mean_ax /= d as f64;
                        let inv = inv_std[r];
                        for j in 0..d {
                            let a = g[j] * gd[j];
                            buf[r * d + j] += inv * (a - mean_a - xh[j] * mean_ax);
                        }
                    }
                }
            })
        }))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(AutodiffError::BadShape {
                op: "softmax_rows",
                msg: format!("expected rank 2, got {xs:?}"),
            });
        }
        let (r, c) = (xs[0], xs[1]);
        let xd = x.shared_data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        let xn = x.node();
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        Ok(self.record(xn.is_some(), vec![r, c], out, move || {
            Box::new(move |gout, store| {
                let buf = store.buf(xn.expect("attached"), r * c);
                for i in 0..r {
                    let yrow = &y[i * c..(i + 1) * c];
                    let grow = &gout[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..c {
                        buf[i * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            })
        }))
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let s: f64 = x.data().iter().sum();
        let xn = x.node();
        let len = x.numel();
        self.record(xn.is_some(), vec![1], Arc::new(vec![s]), move || {
            Box::new(move |gout, store| {
                let g = gout[0];
                let buf = store.buf(xn.expect("attached"), len);
                for v in buf.iter_mut() {
                    *v += g;
                }
            })
        })
    }

    /// Mean of all elements as a `[1]` scalar.
    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let s = self.sum_all(x);
        self.scale(&s, 1.0 / x.numel() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data)
    }

    #[test]
    fn add_matches_example() {
        let mut tape = Tape::inference();
        let out = tape
            .add(&t(vec![2], vec![1.0, 2.0]), &t(vec![2], vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::inference();
        let err = tape
            .add(&t(vec![2], vec![1.0, 2.0]), &t(vec![3], vec![1.0, 2.0, 3.0]))
            .unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
    }

    #[test]
    fn broadcast_add_bias_over_plane() {
        let mut tape = Tape::inference();
        let x = t(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 1, 1], vec![10.0, 20.0]);
        let out = tape.add(&x, &b).unwrap();
        assert_eq!(out.data(), &[11.0, 12.0, 23.0, 24.0]);
    }

    #[test]
    fn silu_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.silu(&x);
        assert_eq!(y.item(), 0.0);
        // The [1]-shaped output doubles as the loss; d silu/dx at 0 is 0.5.
        let mut grads = tape.backward(&y).unwrap();
        let g = grads.take(x.node().unwrap()).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::inference();
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 1], vec![1.0, 1.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::inference();
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(tape.matmul(&eye, &x).unwrap().data(), x.data());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::inference();
        let x = t(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(vec![1, 1, 1, 1], vec![1.0]);
        let out = tape.conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_center() {
        let mut tape = Tape::inference();
        let x = Tensor::full(vec![1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let out = tape.conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0); // corner sees a 2x2 patch
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let mut tape = Tape::inference();
        let x = Tensor::full(vec![1, 4, 4], 1.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let err = tape.conv2d(&x, &w, None, 2, 1).unwrap_err();
        assert!(matches!(err, AutodiffError::NonIntegralConv { .. }));
    }

    #[test]
    fn conv2d_k2_s2_halves() {
        let mut tape = Tape::inference();
        let x = Tensor::full(vec![1, 4, 4], 3.0);
        let w = Tensor::full(vec![1, 1, 2, 2], 0.25);
        let out = tape.conv2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn up2_repeats_blocks() {
        let mut tape = Tape::inference();
        let x = t(vec![1, 1, 1], vec![7.0]);
        let out = tape.up2_nearest(&x).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn down_up_constant_fixed_point() {
        let mut tape = Tape::inference();
        let x = Tensor::full(vec![1, 4, 4], 0.6);
        let w = Tensor::full(vec![1, 1, 2, 2], 0.25);
        let down = tape.conv2d(&x, &w, None, 2, 0).unwrap();
        let up = tape.up2_nearest(&down).unwrap();
        assert_eq!(up.shape(), x.shape());
        for &v in up.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_split_shapes() {
        let mut tape = Tape::inference();
        let a = Tensor::zeros(vec![1, 2, 2]);
        let b = Tensor::full(vec![1, 2, 2], 1.0);
        let out = tape.concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        assert_eq!(&out.data()[0..4], &[0.0; 4]);
        assert_eq!(&out.data()[4..8], &[1.0; 4]);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let mut tape = Tape::inference();
        let x = Tensor::full(vec![2, 4], 3.7);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);
        let out = tape.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::inference();
        let x = t(vec![1, 4], vec![0.1, -2.0, 3.5, 0.7]);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);
        let out = tape.layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 4.0;
        let var: f64 = out.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::inference();
        let x = t(vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]);
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(&y.data()[0..2], &[0.5, 0.5]);
        assert!((y.data()[2] - 1.0).abs() < 1e-12);
        assert!(y.data()[3] >= 0.0 && y.data()[3] < 1e-300);
        for r in 0..2 {
            let s: f64 = y.data()[r * 2..(r + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let loss = tape.sum_all(&x);
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.take(x.node().unwrap()).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_gives_x() {
        let mut tape = Tape::new();
        let x0 = t(vec![3], vec![1.0, -2.0, 3.0]);
        let x = tape.leaf(&x0);
        let sq = tape.mul(&x, &x).unwrap();
        let total = tape.sum_all(&sq);
        let half = tape.scale(&total, 0.5);
        let mut grads = tape.backward(&half).unwrap();
        assert_eq!(grads.take(x.node().unwrap()).unwrap(), x0.data());
    }

    #[test]
    fn backward_accumulates_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        let s1 = tape.sum_all(&x);
        let s2 = tape.sum_all(&x);
        let loss = tape.add(&s1, &s2).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.take(x.node().unwrap()).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        let c = t(vec![2], vec![5.0, 5.0]);
        let y = tape.mul(&x, &c).unwrap();
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(x.node().unwrap()).unwrap(), &[5.0, 5.0]);
    }
}
