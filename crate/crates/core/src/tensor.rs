//! Feature maps, boundary padding policies, and sampled-Gaussian separable
//! smoothing.
//!
//! A `FeatureMap` is a dense C×H×W activation block; smoothing is applied
//! depthwise (each channel independently) as two 1-D passes with a sampled
//! Gaussian kernel normalized to unit sum.

use crate::arr::Arr;
use crate::error::{Error, Result};
use crate::real::{rf, Real};

/// Boundary handling for spatial filtering.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Mirror about the edge sample without duplicating it (period 2n-2).
    Reflect,
    /// Wrap around (torus).
    Circular,
    /// Clamp to the edge sample.
    Replicate,
}

impl Padding {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reflect" => Ok(Padding::Reflect),
            "circular" => Ok(Padding::Circular),
            "replicate" => Ok(Padding::Replicate),
            other => Err(Error::invalid(format!("unknown padding `{other}`"))),
        }
    }
}

/// Fold an out-of-range signed index into [0, n) under the given policy.
#[inline]
pub fn fold_index(i: isize, n: usize, padding: Padding) -> usize {
    let n_i = n as isize;
    if i >= 0 && i < n_i {
        return i as usize;
    }
    match padding {
        Padding::Circular => i.rem_euclid(n_i) as usize,
        Padding::Replicate => i.clamp(0, n_i - 1) as usize,
        Padding::Reflect => {
            if n == 1 {
                return 0;
            }
            let period = 2 * n_i - 2;
            let m = i.rem_euclid(period);
            if m < n_i {
                m as usize
            } else {
                (period - m) as usize
            }
        }
    }
}

/// Dense rank-3 activation block, shape C×H×W, immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "feature map dims must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite entries"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: T) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_sum(&self, c: usize) -> T {
        self.channel(c).iter().copied().sum()
    }

    pub fn l1_norm(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Mean over channels, producing a single-channel map.
    pub fn mean_channel(&self) -> FeatureMap<T> {
        let hw = self.height * self.width;
        let inv = rf::<T>(1.0 / self.channels as f64);
        let mut data = vec![T::zero(); hw];
        for c in 0..self.channels {
            for (o, v) in data.iter_mut().zip(self.channel(c)) {
                *o = *o + *v;
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        FeatureMap {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn into_arr(self) -> Arr<T> {
        Arr::new(vec![self.channels, self.height, self.width], self.data)
    }

    pub fn from_arr(arr: Arr<T>) -> Result<Self> {
        let dims = arr.dims().to_vec();
        if dims.len() != 3 {
            return Err(Error::invalid(format!(
                "expected rank-3 array, got {:?}",
                dims
            )));
        }
        FeatureMap::new(dims[0], dims[1], dims[2], arr.into_data())
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Axis-aligned crop; the region must lie inside the map.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {x0},{y0},{w},{h} out of bounds for {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(FeatureMap {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Bilinear resize (half-pixel centers, edges clamped).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        FeatureMap::from_fn(self.channels, out_h, out_w, |c, y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let x0 = (fx.floor() as usize).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let wy = rf::<T>(fy - y0 as f64);
            let wx = rf::<T>(fx - x0 as f64);
            let one = T::one();
            let a = self.get(c, y0, x0) * (one - wx) + self.get(c, y0, x1) * wx;
            let b = self.get(c, y1, x0) * (one - wx) + self.get(c, y1, x1) * wx;
            a * (one - wy) + b * wy
        })
    }
}

/// Sampled-Gaussian smoothing specification: scale, truncation radius, and
/// boundary policy.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    sigma: f64,
    radius: usize,
    padding: Padding,
}

impl GaussianSpec {
    /// Radius defaults to ceil(3*sigma), which keeps >= 99.6% of the mass.
    pub fn new(sigma: f64) -> Result<Self> {
        Self::with_radius(sigma, (3.0 * sigma).ceil() as usize)
    }

    pub fn with_radius(sigma: f64, radius: usize) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if radius < 1 {
            return Err(Error::invalid("kernel radius must be >= 1"));
        }
        Ok(GaussianSpec {
            sigma,
            radius,
            padding: Padding::Reflect,
        })
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn radius(&self) -> usize {
        self.radius
    }
    pub fn pad(&self) -> Padding {
        self.padding
    }

    /// The normalized 1-D kernel, k(i) for i in [-radius, radius].
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.radius as isize;
        let inv_2s2 = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut k: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 * inv_2s2).exp())
            .collect();
        let sum: f64 = k.iter().sum();
        for v in k.iter_mut() {
            *v /= sum;
        }
        k
    }
}

/// One 1-D gather pass along a line: out[o] = sum_j k[j] * in[fold(o + j - r)].
///
/// `table` maps padded positions t in [0, n + 2r) to folded source indices.
#[inline]
fn line_pass<T: Real>(input: &[T], out: &mut [T], kernel: &[T], table: &[usize]) {
    let taps = kernel.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (j, &kj) in kernel.iter().enumerate().take(taps) {
            acc = acc + kj * input[table[o + j]];
        }
        *slot = acc;
    }
}

/// Adjoint of `line_pass`: scatter g[o] * k[j] back onto the folded source.
#[inline]
fn line_pass_adjoint<T: Real>(grad_out: &[T], acc_in: &mut [T], kernel: &[T], table: &[usize]) {
    for (o, &g) in grad_out.iter().enumerate() {
        for (j, &kj) in kernel.iter().enumerate() {
            acc_in[table[o + j]] = acc_in[table[o + j]] + kj * g;
        }
    }
}

/// Precomputed fold table for a padded axis of length n with radius r.
pub(crate) fn fold_table(n: usize, radius: usize, padding: Padding) -> Vec<usize> {
    (0..n + 2 * radius)
        .map(|t| fold_index(t as isize - radius as isize, n, padding))
        .collect()
}

pub(crate) struct SeparableKernel<T> {
    pub taps: Vec<T>,
    pub radius: usize,
    pub padding: Padding,
}

impl<T: Real> SeparableKernel<T> {
    pub fn from_spec(spec: &GaussianSpec) -> Self {
        SeparableKernel {
            taps: spec.kernel().iter().map(|&v| rf(v)).collect(),
            radius: spec.radius(),
            padding: spec.pad(),
        }
    }

    /// Depthwise separable filtering: horizontal pass, then vertical.
    pub fn apply(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let (c, h, w) = x.shape();
        let tx = fold_table(w, self.radius, self.padding);
        let ty = fold_table(h, self.radius, self.padding);
        let mut tmp = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                line_pass(
                    &x.data()[base..base + w],
                    &mut tmp[base..base + w],
                    &self.taps,
                    &tx,
                );
            }
        }
        // Vertical pass, row-major: out[y] accumulates k[j] * tmp[fold(y+j-r)].
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            let plane = ch * h * w;
            for y in 0..h {
                let dst = &mut out[plane + y * w..plane + (y + 1) * w];
                for (j, &kj) in self.taps.iter().enumerate() {
                    let src_row = ty[y + j];
                    let src = &tmp[plane + src_row * w..plane + (src_row + 1) * w];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = *d + kj * s;
                    }
                }
            }
        }
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: out,
        }
    }

    /// Adjoint of `apply` (vertical adjoint, then horizontal adjoint).
    pub fn apply_adjoint(&self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let (c, h, w) = grad.shape();
        let tx = fold_table(w, self.radius, self.padding);
        let ty = fold_table(h, self.radius, self.padding);
        let mut tmp = vec![T::zero(); c * h * w];
        for ch in 0..c {
            let plane = ch * h * w;
            for y in 0..h {
                let g = &grad.data()[plane + y * w..plane + (y + 1) * w];
                for (j, &kj) in self.taps.iter().enumerate() {
                    let dst_row = ty[y + j];
                    let dst = &mut tmp[plane + dst_row * w..plane + (dst_row + 1) * w];
                    for (d, &s) in dst.iter_mut().zip(g.iter()) {
                        *d = *d + kj * s;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                line_pass_adjoint(
                    &tmp[base..base + w],
                    &mut out[base..base + w],
                    &self.taps,
                    &tx,
                );
            }
        }
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: out,
        }
    }
}

/// Depthwise Gaussian smoothing with the sampled, unit-sum kernel.
pub fn gaussian_smooth<T: Real>(x: &FeatureMap<T>, spec: &GaussianSpec) -> Result<FeatureMap<T>> {
    let kernel = SeparableKernel::from_spec(spec);
    let out = kernel.apply(x);
    out.clone().into_arr().check_finite("gaussian_smooth")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sinusoid(n: usize, period: f64) -> FeatureMap<f64> {
        FeatureMap::from_fn(1, n, n, |_, _, x| {
            (2.0 * std::f64::consts::PI * x as f64 / period).sin()
        })
    }

    /// Continuous-kernel attenuation of a sinusoid of angular frequency w.
    fn continuous_attenuation(sigma: f64, omega: f64) -> f64 {
        (-sigma * sigma * omega * omega / 2.0).exp()
    }

    /// Projection amplitude of `map` onto the same sinusoid.
    fn amplitude_ratio(map: &FeatureMap<f64>, period: f64) -> f64 {
        let n = map.width();
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..map.height() {
            for x in 0..n {
                let s = (2.0 * std::f64::consts::PI * x as f64 / period).sin();
                num += map.get(0, y, x) * s;
                den += s * s;
            }
        }
        num / den
    }

    #[test]
    fn kernel_is_normalized_symmetric_positive() {
        for sigma in [0.5, 1.0, 2.0, 7.0, 15.0] {
            let spec = GaussianSpec::new(sigma).unwrap();
            let k = spec.kernel();
            assert_eq!(k.len(), 2 * spec.radius() + 1);
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} for sigma {sigma}");
            for i in 0..k.len() {
                assert!(k[i] > 0.0);
                assert!((k[i] - k[k.len() - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(GaussianSpec::new(0.0).is_err());
        assert!(GaussianSpec::new(-1.0).is_err());
        assert!(GaussianSpec::with_radius(1.0, 0).is_err());
        assert!(GaussianSpec::new(f64::NAN).is_err());
    }

    #[test]
    fn constant_map_is_fixed_point() {
        let x = FeatureMap::<f64>::constant(2, 9, 9, 5.0);
        for pad in [Padding::Circular, Padding::Reflect, Padding::Replicate] {
            let spec = GaussianSpec::new(1.7).unwrap().padding(pad);
            let y = gaussian_smooth(&x, &spec).unwrap();
            for &v in y.data() {
                assert!((v - 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_center_value_matches_hand_computed_kernel() {
        // 1-D weights exp(-i^2/2): 1, .6065, .1353, .0111; center^2 = 0.1592.
        let mut x = FeatureMap::<f64>::zeros(1, 9, 9);
        x.set(0, 4, 4, 1.0);
        let spec = GaussianSpec::new(1.0).unwrap().padding(Padding::Circular);
        assert_eq!(spec.radius(), 3);
        let y = gaussian_smooth(&x, &spec).unwrap();
        assert!((y.get(0, 4, 4) - 0.1592).abs() < 1e-3);
    }

    #[test]
    fn sinusoid_attenuation_matches_transfer_function() {
        // period 16, sigma 2: exp(-sigma^2 w^2 / 2) = 0.7346 within 2%.
        let x = sinusoid(64, 16.0);
        let spec = GaussianSpec::new(2.0).unwrap().padding(Padding::Circular);
        let y = gaussian_smooth(&x, &spec).unwrap();
        let ratio = amplitude_ratio(&y, 16.0);
        let expect = continuous_attenuation(2.0, 2.0 * std::f64::consts::PI / 16.0);
        assert!((expect - 0.7346).abs() < 5e-4);
        assert!(
            (ratio - expect).abs() / expect < 0.02,
            "ratio {ratio} vs {expect}"
        );
    }

    #[test]
    fn reflect_fold_matches_mirror_convention() {
        assert_eq!(fold_index(-1, 5, Padding::Reflect), 1);
        assert_eq!(fold_index(-2, 5, Padding::Reflect), 2);
        assert_eq!(fold_index(5, 5, Padding::Reflect), 3);
        assert_eq!(fold_index(9, 5, Padding::Reflect), 1);
        assert_eq!(fold_index(-7, 3, Padding::Reflect), 1);
        assert_eq!(fold_index(-1, 1, Padding::Reflect), 0);
        assert_eq!(fold_index(-1, 5, Padding::Circular), 4);
        assert_eq!(fold_index(7, 5, Padding::Circular), 2);
        assert_eq!(fold_index(-3, 5, Padding::Replicate), 0);
        assert_eq!(fold_index(11, 5, Padding::Replicate), 4);
    }

    #[test]
    fn radius_larger_than_map_still_finite_and_conserving() {
        let x = FeatureMap::<f64>::from_fn(1, 6, 6, |_, y, x| ((y * 7 + x * 3) % 5) as f64 * 0.25);
        let spec = GaussianSpec::new(15.0).unwrap().padding(Padding::Circular);
        assert_eq!(spec.radius(), 45);
        let y = gaussian_smooth(&x, &spec).unwrap();
        let sx = x.channel_sum(0);
        let sy = y.channel_sum(0);
        assert!((sx - sy).abs() <= 1e-9 * x.l1_norm().max(1.0));
    }

    #[test]
    fn adjoint_is_transpose_of_forward() {
        // <A x, y> == <x, A^T y> for random x, y under every padding.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        for pad in [Padding::Circular, Padding::Reflect, Padding::Replicate] {
            let spec = GaussianSpec::new(1.5).unwrap().padding(pad);
            let k = SeparableKernel::from_spec(&spec);
            let x = FeatureMap::<f64>::from_fn(2, 7, 5, |_, _, _| rng.gen_range(-1.0..1.0));
            let y = FeatureMap::<f64>::from_fn(2, 7, 5, |_, _, _| rng.gen_range(-1.0..1.0));
            let ax = k.apply(&x);
            let aty = k.apply_adjoint(&y);
            let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{pad:?}: {lhs} vs {rhs}");
        }
    }

    proptest! {
        #[test]
        fn mass_conserved_under_circular_padding(seed in 0u64..500, sigma in 0.6f64..6.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let x = FeatureMap::<f64>::from_fn(1, 12, 12, |_, _, _| rng.gen_range(-2.0..2.0));
            let spec = GaussianSpec::new(sigma).unwrap().padding(Padding::Circular);
            let y = gaussian_smooth(&x, &spec).unwrap();
            let diff = (x.channel_sum(0) - y.channel_sum(0)).abs();
            prop_assert!(diff <= 1e-9 * x.l1_norm().max(1.0));
        }

        #[test]
        fn linearity(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let x = FeatureMap::<f64>::from_fn(1, 8, 8, |_, _, _| rng.gen_range(-1.0..1.0));
            let y = FeatureMap::<f64>::from_fn(1, 8, 8, |_, _, _| rng.gen_range(-1.0..1.0));
            let spec = GaussianSpec::new(1.3).unwrap();
            let combo = x.zip(&y, |u, v| a * u + b * v).unwrap();
            let lhs = gaussian_smooth(&combo, &spec).unwrap();
            let sx = gaussian_smooth(&x, &spec).unwrap();
            let sy = gaussian_smooth(&y, &spec).unwrap();
            for i in 0..lhs.data().len() {
                prop_assert!((lhs.data()[i] - (a * sx.data()[i] + b * sy.data()[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn shift_commutes_under_circular(seed in 0u64..200, sx in 0usize..8, sy in 0usize..8) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let x = FeatureMap::<f64>::from_fn(1, 8, 8, |_, _, _| rng.gen_range(-1.0..1.0));
            let spec = GaussianSpec::new(1.1).unwrap().padding(Padding::Circular);
            let shift = |m: &FeatureMap<f64>| {
                FeatureMap::from_fn(1, 8, 8, |c, y, xx| m.get(c, (y + sy) % 8, (xx + sx) % 8))
            };
            let a = gaussian_smooth(&shift(&x), &spec).unwrap();
            let b = shift(&gaussian_smooth(&x, &spec).unwrap());
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
