//! Reverse-mode tape over dense arrays.
//!
//! A `Graph` is built per forward pass: leaves are parameter or input
//! snapshots, every op records a backward closure, and `backward` walks the
//! tape once in reverse. Evaluation is pure given a parameter snapshot, so
//! independent graphs may run on separate threads.

use crate::arr::Arr;
use crate::real::{rf, Real};
use crate::tensor::{FeatureMap, Padding, SeparableKernel};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn FnOnce(&Arr<T>, &mut GradBuf<T>)>;

struct Node<T> {
    value: Arr<T>,
    backward: Option<BackFn<T>>,
}

/// Per-node gradient slots filled during the backward walk.
pub struct GradBuf<T> {
    slots: Vec<Option<Arr<T>>>,
}

impl<T: Real> GradBuf<T> {
    fn accumulate(&mut self, idx: usize, delta: Arr<T>) {
        match &mut self.slots[idx] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Arr<T>> {
        self.slots[var.0].as_ref()
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr<T>, backward: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr<T>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &Arr<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }

    /// Reverse sweep from `loss` (which must be scalar-shaped).
    pub fn backward(&mut self, loss: Var) -> GradBuf<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut buf = GradBuf {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
        };
        buf.slots[loss.0] = Some(Arr::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if buf.slots[i].is_none() {
                continue;
            }
            if let Some(back) = self.nodes[i].backward.take() {
                let g = buf.slots[i].take().unwrap();
                back(&g, &mut buf);
                buf.slots[i] = Some(g);
            }
        }
        buf
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dims(), self.value(b).dims());
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Arr::new(self.value(a).dims().to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a.0, g.clone());
                buf.accumulate(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dims(), self.value(b).dims());
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Arr::new(self.value(a).dims().to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a.0, g.clone());
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                buf.accumulate(b.0, neg);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dims(), self.value(b).dims());
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Arr::new(av.dims().to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(bv.data()) {
                    *d = *d * y;
                }
                let mut db = g.clone();
                for (d, &x) in db.data_mut().iter_mut().zip(av.data()) {
                    *d = *d * x;
                }
                buf.accumulate(a.0, da);
                buf.accumulate(b.0, db);
            })),
        )
    }

    /// y = alpha * x + beta, elementwise with constants.
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let a: T = rf(alpha);
        let b: T = rf(beta);
        let data = self.value(x).data().iter().map(|&v| a * v + b).collect();
        let value = Arr::new(self.value(x).dims().to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let mut dx = g.clone();
                for v in dx.data_mut() {
                    *v = *v * a;
                }
                buf.accumulate(x.0, dx);
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let value = Arr::new(self.value(x).dims().to_vec(), data);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d = *d * yv * (T::one() - yv);
                }
                buf.accumulate(x.0, dx);
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let value = Arr::new(self.value(x).dims().to_vec(), data);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d = *d * (T::one() - yv * yv);
                }
                buf.accumulate(x.0, dx);
            })),
        )
    }

    // ---- convolution and filtering ----

    /// Same-size 2-D convolution with zero padding, stride 1, odd kernel.
    /// `w` has shape [c_out, c_in, k, k], `b` has shape [c_out].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let (ci, h, wd) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let (co, wci, k) = (wv.dims()[0], wv.dims()[1], wv.dims()[2]);
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert_eq!(k % 2, 1, "conv2d kernel must be odd");
        assert_eq!(bv.len(), co);
        let p = k / 2;
        let mut out = vec![T::zero(); co * h * wd];
        conv2d_forward(xv.data(), wv.data(), bv.data(), &mut out, ci, co, h, wd, k, p);
        let value = Arr::new(vec![co, h, wd], out);
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let mut dx = vec![T::zero(); ci * h * wd];
                let mut dw = vec![T::zero(); co * ci * k * k];
                let mut db = vec![T::zero(); co];
                conv2d_backward(
                    g.data(),
                    xv.data(),
                    wv.data(),
                    &mut dx,
                    &mut dw,
                    &mut db,
                    ci,
                    co,
                    h,
                    wd,
                    k,
                    p,
                );
                buf.accumulate(x.0, Arr::new(vec![ci, h, wd], dx));
                buf.accumulate(w.0, Arr::new(vec![co, ci, k, k], dw));
                buf.accumulate(b.0, Arr::new(vec![co], db));
            })),
        )
    }

    /// Depthwise separable Gaussian smoothing with a fixed (non-trainable)
    /// kernel; backward applies the exact adjoint under the same padding.
    pub fn gaussian_smooth(&mut self, x: Var, taps: &[T], radius: usize, padding: Padding) -> Var {
        let xv = self.value(x).clone();
        let dims = xv.dims().to_vec();
        let fm = FeatureMap::new(dims[0], dims[1], dims[2], xv.into_data()).expect("finite map");
        let kernel = SeparableKernel {
            taps: taps.to_vec(),
            radius,
            padding,
        };
        let out = kernel.apply(&fm).into_arr();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                let gm = FeatureMap::new(dims[0], dims[1], dims[2], g.data().to_vec())
                    .expect("finite grad");
                buf.accumulate(x.0, kernel.apply_adjoint(&gm).into_arr());
            })),
        )
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let quarter: T = rf(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        let data = xv.data();
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] =
                        (data[base] + data[base + 1] + data[base + w] + data[base + w + 1])
                            * quarter;
                }
            }
        }
        self.push(
            Arr::new(vec![c, oh, ow], out),
            Some(Box::new(move |g, buf| {
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = g.data()[(ch * oh + y) * ow + xx] * quarter;
                            let base = (ch * h + 2 * y) * w + 2 * xx;
                            dx[base] = dx[base] + gv;
                            dx[base + 1] = dx[base + 1] + gv;
                            dx[base + w] = dx[base + w] + gv;
                            dx[base + w + 1] = dx[base + w + 1] + gv;
                        }
                    }
                }
                buf.accumulate(x.0, Arr::new(vec![c, h, w], dx));
            })),
        )
    }

    /// Global average pooling, C×H×W -> [C].
    pub fn gap(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let inv: T = rf(1.0 / (h * w) as f64);
        let hw = h * w;
        let out: Vec<T> = (0..c)
            .map(|ch| {
                xv.data()[ch * hw..(ch + 1) * hw]
                    .iter()
                    .copied()
                    .sum::<T>()
                    * inv
            })
            .collect();
        self.push(
            Arr::new(vec![c], out),
            Some(Box::new(move |g, buf| {
                let mut dx = vec![T::zero(); c * hw];
                for ch in 0..c {
                    let gv = g.data()[ch] * inv;
                    for v in dx[ch * hw..(ch + 1) * hw].iter_mut() {
                        *v = gv;
                    }
                }
                buf.accumulate(x.0, Arr::new(vec![c, h, w], dx));
            })),
        )
    }

    /// Channels [lo, hi) of a C×H×W map.
    pub fn channel_slice(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        assert!(lo < hi && hi <= c);
        let hw = h * w;
        let out = xv.data()[lo * hw..hi * hw].to_vec();
        self.push(
            Arr::new(vec![hi - lo, h, w], out),
            Some(Box::new(move |g, buf| {
                let mut dx = vec![T::zero(); c * hw];
                dx[lo * hw..hi * hw].copy_from_slice(g.data());
                buf.accumulate(x.0, Arr::new(vec![c, h, w], dx));
            })),
        )
    }

    /// Per-pixel softmax across the channel dimension, max-stabilized.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (k, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let hw = h * w;
        let mut out = vec![T::zero(); k * hw];
        for p in 0..hw {
            let mut m = xv.data()[p];
            for ch in 1..k {
                m = m.max(xv.data()[ch * hw + p]);
            }
            let mut z = T::zero();
            for ch in 0..k {
                let e = (xv.data()[ch * hw + p] - m).exp();
                out[ch * hw + p] = e;
                z = z + e;
            }
            for ch in 0..k {
                out[ch * hw + p] = out[ch * hw + p] / z;
            }
        }
        let value = Arr::new(vec![k, h, w], out);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let mut dx = vec![T::zero(); k * hw];
                for p in 0..hw {
                    let mut s = T::zero();
                    for ch in 0..k {
                        s = s + g.data()[ch * hw + p] * y.data()[ch * hw + p];
                    }
                    for ch in 0..k {
                        dx[ch * hw + p] =
                            y.data()[ch * hw + p] * (g.data()[ch * hw + p] - s);
                    }
                }
                buf.accumulate(x.0, Arr::new(vec![k, h, w], dx));
            })),
        )
    }

    /// Stabilized softmax over a vector.
    pub fn softmax_vec(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let m = xv
            .data()
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| a.max(b));
        let mut out: Vec<T> = xv.data().iter().map(|&v| (v - m).exp()).collect();
        let z: T = out.iter().copied().sum();
        for v in out.iter_mut() {
            *v = *v / z;
        }
        let value = Arr::new(vec![n], out);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let s: T = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv)
                    .sum();
                let dx: Vec<T> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| yv * (gv - s))
                    .collect();
                buf.accumulate(x.0, Arr::from_vec(dx));
            })),
        )
    }

    /// Multiply a 1×H×W map into every channel of a C×H×W map.
    pub fn broadcast_mul(&mut self, map: Var, x: Var) -> Var {
        let mv = self.value(map).clone();
        let xv = self.value(x).clone();
        assert_eq!(mv.dims()[0], 1, "broadcast map must be single channel");
        assert_eq!(&mv.dims()[1..], &xv.dims()[1..]);
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let hw = h * w;
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = mv.data()[p] * xv.data()[ch * hw + p];
            }
        }
        self.push(
            Arr::new(vec![c, h, w], out),
            Some(Box::new(move |g, buf| {
                let mut dm = vec![T::zero(); hw];
                let mut dx = vec![T::zero(); c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        let gv = g.data()[ch * hw + p];
                        dm[p] = dm[p] + gv * xv.data()[ch * hw + p];
                        dx[ch * hw + p] = gv * mv.data()[p];
                    }
                }
                buf.accumulate(map.0, Arr::new(vec![1, h, w], dm));
                buf.accumulate(x.0, Arr::new(vec![c, h, w], dx));
            })),
        )
    }

    /// Gate-score mixing: sum_k pi[k] * z_k over K same-shaped maps.
    pub fn weighted_sum_maps(&mut self, pi: Var, zs: &[Var]) -> Var {
        let piv = self.value(pi).clone();
        assert_eq!(piv.len(), zs.len());
        let dims = self.value(zs[0]).dims().to_vec();
        let zvals: Vec<Arr<T>> = zs.iter().map(|&z| self.value(z).clone()).collect();
        for zv in &zvals {
            assert_eq!(zv.dims(), &dims[..]);
        }
        let n = zvals[0].len();
        let mut out = vec![T::zero(); n];
        for (k, zv) in zvals.iter().enumerate() {
            let w = piv.data()[k];
            for (o, &z) in out.iter_mut().zip(zv.data()) {
                *o = *o + w * z;
            }
        }
        let zs_owned: Vec<Var> = zs.to_vec();
        self.push(
            Arr::new(dims.clone(), out),
            Some(Box::new(move |g, buf| {
                let mut dpi = vec![T::zero(); zvals.len()];
                for (k, zv) in zvals.iter().enumerate() {
                    dpi[k] = g
                        .data()
                        .iter()
                        .zip(zv.data())
                        .map(|(&gv, &zvv)| gv * zvv)
                        .sum();
                    let w = piv.data()[k];
                    let mut dz = g.clone();
                    for v in dz.data_mut() {
                        *v = *v * w;
                    }
                    buf.accumulate(zs_owned[k].0, dz);
                }
                buf.accumulate(pi.0, Arr::from_vec(dpi));
            })),
        )
    }

    /// Per-channel RMS normalization over the spatial extent with a learnable
    /// gain: y_c = gain_c * x_c / sqrt(mean(x_c^2) + eps).
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        assert_eq!(gv.len(), c);
        let hw = h * w;
        let inv_n: T = rf(1.0 / hw as f64);
        let epst: T = rf(eps);
        let mut scale = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let xs = &xv.data()[ch * hw..(ch + 1) * hw];
            let m: T = xs.iter().map(|&v| v * v).sum::<T>() * inv_n + epst;
            let s = m.sqrt().recip();
            scale[ch] = s;
            let gc = gv.data()[ch];
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(xs) {
                *o = gc * v * s;
            }
        }
        self.push(
            Arr::new(vec![c, h, w], out),
            Some(Box::new(move |g, buf| {
                let mut dx = vec![T::zero(); c * hw];
                let mut dgain = vec![T::zero(); c];
                for ch in 0..c {
                    let xs = &xv.data()[ch * hw..(ch + 1) * hw];
                    let gs = &g.data()[ch * hw..(ch + 1) * hw];
                    let s = scale[ch];
                    let gc = gv.data()[ch];
                    let dot: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    dgain[ch] = dot * s;
                    // d/dx of x * (mean(x^2)+eps)^(-1/2)
                    let coef = gc * s * s * s * inv_n * dot;
                    for i in 0..hw {
                        dx[ch * hw + i] = gc * s * gs[i] - coef * xs[i];
                    }
                }
                buf.accumulate(x.0, Arr::new(vec![c, h, w], dx));
                buf.accumulate(gain.0, Arr::from_vec(dgain));
            })),
        )
    }

    // ---- vector ops ----

    /// y = W x + b with W of shape [m, n].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let (m, n) = (wv.dims()[0], wv.dims()[1]);
        assert_eq!(xv.len(), n, "linear input length mismatch");
        assert_eq!(bv.len(), m);
        let mut out = bv.data().to_vec();
        for i in 0..m {
            let row = &wv.data()[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for (rw, &xx) in row.iter().zip(xv.data()) {
                acc = acc + *rw * xx;
            }
            out[i] = out[i] + acc;
        }
        self.push(
            Arr::new(vec![m], out),
            Some(Box::new(move |g, buf| {
                let mut dx = vec![T::zero(); n];
                let mut dw = vec![T::zero(); m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    let row = &wv.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dx[j] = dx[j] + gi * row[j];
                        dw[i * n + j] = gi * xv.data()[j];
                    }
                }
                buf.accumulate(x.0, Arr::from_vec(dx));
                buf.accumulate(w.0, Arr::new(vec![m, n], dw));
                buf.accumulate(b.0, g.clone());
            })),
        )
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (n, m) = (av.len(), bv.len());
        let mut out = av.into_data();
        out.extend_from_slice(bv.data());
        self.push(
            Arr::from_vec(out),
            Some(Box::new(move |g, buf| {
                buf.accumulate(a.0, Arr::from_vec(g.data()[..n].to_vec()));
                buf.accumulate(b.0, Arr::from_vec(g.data()[n..n + m].to_vec()));
            })),
        )
    }

    /// Multiply any-shaped value by a scalar variable (shape [1]).
    pub fn scalar_mul(&mut self, s: Var, v: Var) -> Var {
        let sv = self.value(s).item();
        let vv = self.value(v).clone();
        let data = vv.data().iter().map(|&x| sv * x).collect();
        self.push(
            Arr::new(vv.dims().to_vec(), data),
            Some(Box::new(move |g, buf| {
                let ds: T = g
                    .data()
                    .iter()
                    .zip(vv.data())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum();
                buf.accumulate(s.0, Arr::scalar(ds));
                let mut dv = g.clone();
                for x in dv.data_mut() {
                    *x = *x * sv;
                }
                buf.accumulate(v.0, dv);
            })),
        )
    }

    /// Columnwise max over the rows of an N×E matrix (ties to the first row).
    pub fn row_max(&mut self, m: Var) -> Var {
        let mv = self.value(m);
        let (rows, cols) = (mv.dims()[0], mv.dims()[1]);
        let mut out = mv.data()[..cols].to_vec();
        let mut arg = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = mv.data()[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        self.push(
            Arr::from_vec(out),
            Some(Box::new(move |g, buf| {
                let mut dm = vec![T::zero(); rows * cols];
                for c in 0..cols {
                    dm[arg[c] * cols + c] = g.data()[c];
                }
                buf.accumulate(m.0, Arr::new(vec![rows, cols], dm));
            })),
        )
    }

    /// Columnwise mean over the rows of an N×E matrix.
    pub fn row_mean(&mut self, m: Var) -> Var {
        let mv = self.value(m);
        let (rows, cols) = (mv.dims()[0], mv.dims()[1]);
        let inv: T = rf(1.0 / rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] = out[c] + mv.data()[r * cols + c];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        self.push(
            Arr::from_vec(out),
            Some(Box::new(move |g, buf| {
                let mut dm = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dm[r * cols + c] = g.data()[c] * inv;
                    }
                }
                buf.accumulate(m.0, Arr::new(vec![rows, cols], dm));
            })),
        )
    }

    /// Stack equal-length vectors into an N×E matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let cols = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert_eq!(self.value(r).len(), cols);
            data.extend_from_slice(self.value(r).data());
        }
        let n = rows.len();
        let rows_owned = rows.to_vec();
        self.push(
            Arr::new(vec![n, cols], data),
            Some(Box::new(move |g, buf| {
                for (i, &r) in rows_owned.iter().enumerate() {
                    buf.accumulate(
                        r.0,
                        Arr::from_vec(g.data()[i * cols..(i + 1) * cols].to_vec()),
                    );
                }
            })),
        )
    }

    /// Select one row of an N×E matrix (embedding lookup).
    pub fn row_select(&mut self, m: Var, row: usize) -> Var {
        let mv = self.value(m);
        let (rows, cols) = (mv.dims()[0], mv.dims()[1]);
        assert!(row < rows);
        let out = mv.data()[row * cols..(row + 1) * cols].to_vec();
        self.push(
            Arr::from_vec(out),
            Some(Box::new(move |g, buf| {
                let mut dm = vec![T::zero(); rows * cols];
                dm[row * cols..(row + 1) * cols].copy_from_slice(g.data());
                buf.accumulate(m.0, Arr::new(vec![rows, cols], dm));
            })),
        )
    }

    // ---- losses and reductions ----

    /// Binary cross-entropy of a probability (shape [1]) against a 0/1 label,
    /// with the probability clamped to [1e-7, 1 - 1e-7].
    pub fn bce(&mut self, prob: Var, target: f64) -> Var {
        let eps = 1e-7;
        let p_raw = self.value(prob).item();
        let p = p_raw
            .max(rf(eps))
            .min(rf(1.0 - eps));
        let t: T = rf(target);
        let one = T::one();
        let loss = -(t * p.ln() + (one - t) * (one - p).ln());
        let clamped = p_raw < rf::<T>(eps) || p_raw > rf::<T>(1.0 - eps);
        self.push(
            Arr::scalar(loss),
            Some(Box::new(move |g, buf| {
                let d = if clamped {
                    T::zero()
                } else {
                    (-t / p + (one - t) / (one - p)) * g.item()
                };
                buf.accumulate(prob.0, Arr::scalar(d));
            })),
        )
    }

    /// Summed next-token negative log-likelihood over a T×V logit matrix with
    /// a stabilized log-softmax.
    pub fn nll_seq(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits).clone();
        let (t_len, vocab) = (lv.dims()[0], lv.dims()[1]);
        assert_eq!(t_len, targets.len());
        let mut loss = T::zero();
        let mut softmaxes = vec![T::zero(); t_len * vocab];
        for (t, &target) in targets.iter().enumerate() {
            assert!(target < vocab, "target id out of vocabulary");
            let row = &lv.data()[t * vocab..(t + 1) * vocab];
            let m = row.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b));
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                softmaxes[t * vocab + j] = e;
                z = z + e;
            }
            for v in softmaxes[t * vocab..(t + 1) * vocab].iter_mut() {
                *v = *v / z;
            }
            loss = loss + z.ln() + m - row[target];
        }
        let targets_owned = targets.to_vec();
        self.push(
            Arr::scalar(loss),
            Some(Box::new(move |g, buf| {
                let gs = g.item();
                let mut dl = softmaxes;
                for (t, &target) in targets_owned.iter().enumerate() {
                    dl[t * vocab + target] = dl[t * vocab + target] - T::one();
                }
                for v in dl.iter_mut() {
                    *v = *v * gs;
                }
                buf.accumulate(logits.0, Arr::new(vec![t_len, vocab], dl));
            })),
        )
    }

    /// Fixed-probe scalar readout: sum(probe ⊙ x).
    pub fn dot_const(&mut self, x: Var, probe: Arr<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dims(), probe.dims());
        let s: T = xv
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(
            Arr::scalar(s),
            Some(Box::new(move |g, buf| {
                let gs = g.item();
                let mut dx = probe;
                for v in dx.data_mut() {
                    *v = *v * gs;
                }
                buf.accumulate(x.0, dx);
            })),
        )
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let s: T = xv.data().iter().map(|&v| v * v).sum();
        self.push(
            Arr::scalar(s),
            Some(Box::new(move |g, buf| {
                let gs = g.item();
                let two = T::one() + T::one();
                let mut dx = xv;
                for v in dx.data_mut() {
                    *v = two * *v * gs;
                }
                buf.accumulate(x.0, dx);
            })),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    out: &mut [T],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
    p: usize,
) {
    for o in 0..co {
        let plane = &mut out[o * h * wd..(o + 1) * h * wd];
        for v in plane.iter_mut() {
            *v = b[o];
        }
    }
    for o in 0..co {
        for i in 0..ci {
            for dy in 0..k {
                for y in 0..h {
                    let yy = y as isize + dy as isize - p as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let in_row = &x[(i * h + yy as usize) * wd..(i * h + yy as usize + 1) * wd];
                    let out_base = (o * h + y) * wd;
                    for dx in 0..k {
                        let wv = w[((o * ci + i) * k + dy) * k + dx];
                        let x_lo = p.saturating_sub(dx);
                        let x_hi = (wd + p - dx).min(wd);
                        for xx in x_lo..x_hi {
                            out[out_base + xx] =
                                out[out_base + xx] + wv * in_row[xx + dx - p];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    g: &[T],
    x: &[T],
    w: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
    p: usize,
) {
    for o in 0..co {
        let mut acc = T::zero();
        for &gv in &g[o * h * wd..(o + 1) * h * wd] {
            acc = acc + gv;
        }
        db[o] = acc;
    }
    for o in 0..co {
        for i in 0..ci {
            for dy in 0..k {
                for y in 0..h {
                    let yy = y as isize + dy as isize - p as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let in_base = (i * h + yy as usize) * wd;
                    let g_base = (o * h + y) * wd;
                    for dx_tap in 0..k {
                        let widx = ((o * ci + i) * k + dy) * k + dx_tap;
                        let wv = w[widx];
                        let x_lo = p.saturating_sub(dx_tap);
                        let x_hi = (wd + p - dx_tap).min(wd);
                        let mut wacc = T::zero();
                        for xx in x_lo..x_hi {
                            let gv = g[g_base + xx];
                            wacc = wacc + gv * x[in_base + xx + dx_tap - p];
                            dx[in_base + xx + dx_tap - p] =
                                dx[in_base + xx + dx_tap - p] + wv * gv;
                        }
                        dw[widx] = dw[widx] + wacc;
                    }
                }
            }
        }
    }
}
