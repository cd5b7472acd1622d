use super::graph::{Graph, Var};
use super::{gemm, Tensor};

fn unary_elementwise(
    g: &mut Graph,
    a: Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var {
    let x = g.value(a);
    let value = Tensor::new(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect());
    g.custom(
        &[a],
        value,
        Box::new(move |ctx| {
            let x = &ctx.inputs[0].data;
            let y = &ctx.out.data;
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gr, (&xi, &yi))| gr * df(xi, yi))
                    .collect(),
            )]
        }),
    )
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "add: shape mismatch");
        let value = Tensor::new(
            x.shape.clone(),
            x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
        );
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "sub: shape mismatch");
        let value = Tensor::new(
            x.shape.clone(),
            x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect(),
        );
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "mul: shape mismatch");
        let value = Tensor::new(
            x.shape.clone(),
            x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
        );
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| {
                let (x, y) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(g, v)| g * v).collect()),
                    ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(g, v)| g * v).collect()),
                ]
            }),
        )
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        let c = self.constant(c.clone());
        self.mul(a, c)
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let c = self.constant(c.clone());
        self.add(a, c)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * k).collect());
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * k).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v + k).collect());
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.custom(
            &[a],
            Tensor::scalar(s),
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(
            x.shape.len() == 2 && y.shape.len() == 2 && x.shape[1] == y.shape[0],
            "matmul: {:?} x {:?}",
            x.shape,
            y.shape
        );
        let (n, k, m) = (x.shape[0], x.shape[1], y.shape[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, 1.0, &x.data, false, &y.data, false, 0.0, &mut out);
        self.custom(
            &[a, b],
            Tensor::new(vec![n, m], out),
            Box::new(move |ctx| {
                let (x, y) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, ctx.grad, false, y, true, 0.0, &mut d);
                    d
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * m];
                    gemm(k, n, m, 1.0, x, true, ctx.grad, false, 0.0, &mut d);
                    d
                });
                vec![da, db]
            }),
        )
    }

    /// Adds a per-channel bias to `[B, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.shape[1];
        assert_eq!(bv.numel(), c, "bias size");
        let inner: usize = xv.shape[2..].iter().product();
        let mut data = xv.data.clone();
        for (chunk_idx, chunk) in data.chunks_mut(inner).enumerate() {
            let bias = bv.data[chunk_idx % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(xv.shape.clone(), data);
        self.custom(
            &[x, b],
            value,
            Box::new(move |ctx| {
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (chunk_idx, chunk) in ctx.grad.chunks(inner).enumerate() {
                        d[chunk_idx % c] += chunk.iter().sum::<f64>();
                    }
                    d
                });
                vec![Some(ctx.grad.to_vec()), db]
            }),
        )
    }

    /// `x [n, k] * w [k, m] + b [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        unary_elementwise(
            self,
            a,
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        unary_elementwise(
            self,
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        unary_elementwise(self, a, softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        unary_elementwise(self, a, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        unary_elementwise(self, a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        unary_elementwise(self, a, |x| x * x, |x, _| 2.0 * x)
    }

    /// 2D convolution, `x [B, Ci, H, W]`, `w [Co, Ci, k, k]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bsz, ci, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (co, k) = (wv.shape[0], wv.shape[2]);
        assert_eq!(
            wv.shape[1], ci,
            "conv2d: channel mismatch {:?} vs {:?}",
            xv.shape, wv.shape
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (rows, hw) = (ci * k * k, ho * wo);
        let mut cols = vec![0.0; bsz * rows * hw];
        let mut out = vec![0.0; bsz * co * hw];
        for bi in 0..bsz {
            let col = &mut cols[bi * rows * hw..(bi + 1) * rows * hw];
            im2col(
                &xv.data[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                ci,
                h,
                wd,
                k,
                stride,
                pad,
                ho,
                wo,
                col,
            );
            gemm(
                co,
                rows,
                hw,
                1.0,
                &wv.data,
                false,
                col,
                false,
                0.0,
                &mut out[bi * co * hw..(bi + 1) * co * hw],
            );
        }
        let conv = self.custom(
            &[x, w],
            Tensor::new(vec![bsz, co, ho, wo], out),
            Box::new(move |ctx| {
                let wdata = &ctx.inputs[1].data;
                let mut dx = ctx.needs[0].then(|| vec![0.0; bsz * ci * h * wd]);
                let mut dw = ctx.needs[1].then(|| vec![0.0; co * rows]);
                let mut dcol = vec![0.0; rows * hw];
                for bi in 0..bsz {
                    let g = &ctx.grad[bi * co * hw..(bi + 1) * co * hw];
                    let col = &cols[bi * rows * hw..(bi + 1) * rows * hw];
                    if let Some(dw) = dw.as_mut() {
                        gemm(co, hw, rows, 1.0, g, false, col, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, co, hw, 1.0, wdata, true, g, false, 0.0, &mut dcol);
                        col2im(
                            &dcol,
                            ci,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            ho,
                            wo,
                            &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                        );
                    }
                }
                vec![dx, dw]
            }),
        );
        match b {
            Some(b) => self.add_bias(conv, b),
            None => conv,
        }
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        for plane in 0..b * c {
            let src = &xv.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(vec![b, c, h2, w2], out),
            Box::new(move |ctx| {
                let mut d = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    let g = &ctx.grad[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += g[y * w2 + xx];
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// 2x2 average pooling of `[B, C, H, W]` (H and W even).
    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * h2 * w2];
        for plane in 0..b * c {
            let src = &xv.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 * 2 {
                for xx in 0..w2 * 2 {
                    dst[(y / 2) * w2 + xx / 2] += 0.25 * src[y * w + xx];
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(vec![b, c, h2, w2], out),
            Box::new(move |ctx| {
                let mut d = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    let g = &ctx.grad[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 * 2 {
                        for xx in 0..w2 * 2 {
                            dst[y * w + xx] = 0.25 * g[(y / 2) * w2 + xx / 2];
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Global average over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c) = (xv.shape[0], xv.shape[1]);
        let hw: usize = xv.shape[2..].iter().product();
        let out: Vec<f64> = xv
            .data
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        self.custom(
            &[x],
            Tensor::new(vec![b, c], out),
            Box::new(move |ctx| {
                let mut d = Vec::with_capacity(b * c * hw);
                for &g in ctx.grad {
                    d.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                vec![Some(d)]
            }),
        )
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let outer = self.value(xs[0]).shape[0];
        let rest = self.value(xs[0]).shape[2..].to_vec();
        let inner: usize = rest.iter().product();
        let chans: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(s[0], outer);
                assert_eq!(&s[2..], &rest[..], "concat: trailing shapes differ");
                s[1]
            })
            .collect();
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(v).data[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = vec![outer, total];
        shape.extend(rest);
        self.custom(
            xs,
            Tensor::new(shape, out),
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f64>> = chans
                    .iter()
                    .map(|&c| Vec::with_capacity(outer * c * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &c) in chans.iter().enumerate() {
                        grads[gi].extend_from_slice(&ctx.grad[off..off + c * inner]);
                        off += c * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&ctx.needs)
                    .map(|(g, &n)| n.then_some(g))
                    .collect()
            }),
        )
    }

    /// `x[:, start..start + len]` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (outer, c) = (xv.shape[0], xv.shape[1]);
        assert!(start + len <= c);
        let inner: usize = xv.shape[2..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data[(o * c + start) * inner..(o * c + start + len) * inner]);
        }
        let mut shape = xv.shape.clone();
        shape[1] = len;
        self.custom(
            &[x],
            Tensor::new(shape, out),
            Box::new(move |ctx| {
                let mut d = vec![0.0; outer * c * inner];
                for o in 0..outer {
                    d[(o * c + start) * inner..(o * c + start + len) * inner]
                        .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Elementwise binary cross-entropy of logits against targets in
    /// `[0, 1]`; same shape as `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.numel(), "one target per logit");
        let out: Vec<f64> = lv
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &t)| softplus_scalar(x) - t * x)
            .collect();
        let targets = targets.to_vec();
        self.custom(
            &[logits],
            Tensor::new(lv.shape.clone(), out),
            Box::new(move |ctx| {
                let x = &ctx.inputs[0].data;
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x.iter().zip(&targets))
                        .map(|(g, (&xi, &t))| g * (sigmoid_scalar(xi) - t))
                        .collect(),
                )]
            }),
        )
    }

    /// Softmax cross-entropy over column groups of `logits [B, K]`.
    /// `targets[b * groups.len() + g]` is the class index within group `g`.
    /// Returns the per-sample, per-group losses `[B, G]`.
    pub fn grouped_cross_entropy(
        &mut self,
        logits: Var,
        groups: &[(usize, usize)],
        targets: &[usize],
    ) -> Var {
        let lv = self.value(logits);
        let (b, k) = (lv.shape[0], lv.shape[1]);
        let ng = groups.len();
        assert_eq!(targets.len(), b * ng, "one target per sample and group");
        let mut losses = vec![0.0; b * ng];
        let mut probs = vec![0.0; b * k];
        for bi in 0..b {
            let row = &lv.data[bi * k..(bi + 1) * k];
            for (gi, &(off, len)) in groups.iter().enumerate() {
                let seg = &row[off..off + len];
                let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = seg.iter().map(|v| (v - m).exp()).sum();
                let lse = m + z.ln();
                let t = targets[bi * ng + gi];
                assert!(t < len, "target {t} outside group of {len}");
                losses[bi * ng + gi] = lse - seg[t];
                for j in 0..len {
                    probs[bi * k + off + j] = (seg[j] - lse).exp();
                }
            }
        }
        let groups = groups.to_vec();
        let targets = targets.to_vec();
        self.custom(
            &[logits],
            Tensor::new(vec![b, ng], losses),
            Box::new(move |ctx| {
                let mut d = vec![0.0; b * k];
                for bi in 0..b {
                    for (gi, &(off, len)) in groups.iter().enumerate() {
                        let g = ctx.grad[bi * ng + gi];
                        if g == 0.0 {
                            continue;
                        }
                        for j in 0..len {
                            d[bi * k + off + j] += g * probs[bi * k + off + j];
                        }
                        d[bi * k + off + targets[bi * ng + gi]] -= g;
                    }
                }
                vec![Some(d)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += eps;
                let mut m = x.clone();
                m.data[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = 1.0f64.max(x.abs()).max(y.abs());
            assert!((x - y).abs() / scale < tol, "index {i}: {x} vs {y}");
        }
    }

    fn seq(shape: &[usize], phase: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64 + phase) * 0.731).sin()).collect(),
        )
    }

    /// Checks d(sum(out * probe))/d(input) against finite differences.
    fn check(inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            let probe = seq(&g.value(out).shape.clone(), 0.3);
            g.value(out)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let probe = seq(&g.value(out).shape.clone(), 0.3);
        let grads = g.backward_with(out, probe.data);
        for (i, v) in vars.iter().enumerate() {
            let numeric = numeric_grad(&inputs[i], &|t| {
                let mut vals = inputs.clone();
                vals[i] = t.clone();
                eval(&vals)
            });
            assert_close(grads.wrt(*v).unwrap(), &numeric, 1e-6);
        }
    }

    #[test]
    fn bce_grads_and_values() {
        let targets = [0.0, 1.0, 1.0, 0.0, 0.5, 1.0];
        check(vec![seq(&[2, 3], 0.2)], &|g, v| {
            g.bce_with_logits(v[0], &targets)
        });
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 3.0]));
        let l = g.bce_with_logits(x, &[1.0, 0.0]);
        let v = &g.value(l).data;
        assert!((v[0] - 2f64.ln()).abs() < 1e-12);
        assert!((v[1] - (1.0 + 3f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn elementwise_grads() {
        check(vec![seq(&[2, 3], 0.0), seq(&[2, 3], 1.0)], &|g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            let c = g.softplus(b);
            let d = g.sigmoid(c);
            let e = g.tanh(d);
            let f = g.square(e);
            g.add(f, v[0])
        });
        check(vec![seq(&[7], 0.2)], &|g, v| g.leaky_relu(v[0], 0.2));
    }

    #[test]
    fn matmul_and_bias_grads() {
        check(
            vec![seq(&[3, 4], 0.0), seq(&[4, 2], 2.0), seq(&[2], 5.0)],
            &|g, v| g.linear(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn conv_grads() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            check(
                vec![
                    seq(&[2, 3, 6, 6], 0.0),
                    seq(&[4, 3, k, k], 1.0),
                    seq(&[4], 3.0),
                ],
                &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = seq(&[1, 2, 5, 5], 0.0);
        let w = seq(&[3, 2, 3, 3], 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 2, 1);
        let out = g.value(y);
        assert_eq!(out.shape, vec![1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((out.data[(o * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resampling_and_reduction_grads() {
        check(vec![seq(&[2, 3, 4, 4], 0.0)], &|g, v| g.upsample2x(v[0]));
        check(vec![seq(&[2, 3, 4, 4], 0.0)], &|g, v| g.avg_pool2x(v[0]));
        check(vec![seq(&[2, 3, 4, 4], 0.0)], &|g, v| g.mean_spatial(v[0]));
        check(
            vec![seq(&[2, 3, 2, 2], 0.0), seq(&[2, 1, 2, 2], 1.0)],
            &|g, v| {
                let c = g.concat_channels(&[v[0], v[1]]);
                g.slice_channels(c, 1, 3)
            },
        );
        check(vec![seq(&[3, 4], 0.0)], &|g, v| {
            let r = g.reshape(v[0], &[12]);
            g.mean(r)
        });
    }

    #[test]
    fn grouped_ce_grads_and_values() {
        let logits = seq(&[2, 7], 0.0);
        check(vec![logits.clone()], &|g, v| {
            g.grouped_cross_entropy(v[0], &[(0, 3), (3, 4)], &[1, 0, 2, 3])
        });
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 7]));
        let ce = g.grouped_cross_entropy(l, &[(0, 3), (3, 4)], &[0, 0]);
        let v = &g.value(ce).data;
        assert!((v[0] - 3f64.ln()).abs() < 1e-12);
        assert!((v[1] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(seq(&[3], 0.0));
        let b = g.leaf(seq(&[3], 1.0));
        let c = g.mul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap(), &g.value(a).data[..]);
    }
}
