//! Central finite-difference gradient estimation over a parameter store,
//! the independent oracle every analytic backward pass is checked against.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::real::{rf, Real};
use crate::store::ParameterStore;

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Perturbation step; 1e-5 is appropriate in double precision.
    pub eps: f64,
    /// Per-parameter coordinate budget; larger arrays are subsampled.
    pub probe_cap: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            probe_cap: 64,
            seed: 0,
        }
    }
}

/// Per-parameter estimates at the probed coordinates.
pub type FdEstimate<T> = BTreeMap<String, Vec<(usize, T)>>;

fn fnv64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Central differences (L(t+eps) - L(t-eps)) / (2 eps) for every scalar
/// parameter, or a seeded subsample of coordinates for large arrays.
pub fn finite_diff_grad<T: Real>(
    loss_fn: impl Fn(&ParameterStore<T>) -> Result<T>,
    params: &ParameterStore<T>,
    opts: &FdOptions,
) -> Result<FdEstimate<T>> {
    if !(opts.eps > 0.0) {
        return Err(Error::invalid("finite-difference eps must be positive"));
    }
    let eps: T = rf(opts.eps);
    let two_eps = eps + eps;
    let mut work = params.clone();
    let mut out: FdEstimate<T> = BTreeMap::new();
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in names {
        let numel = params.value(&name)?.len();
        let coords: Vec<usize> = if numel <= opts.probe_cap {
            (0..numel).collect()
        } else {
            let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ fnv64(&name));
            let mut picked = rand::seq::index::sample(&mut rng, numel, opts.probe_cap).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut estimates = Vec::with_capacity(coords.len());
        for idx in coords {
            let original = work.value(&name)?[idx];
            work.value_mut(&name)?[idx] = original + eps;
            let plus = loss_fn(&work)?;
            work.value_mut(&name)?[idx] = original - eps;
            let minus = loss_fn(&work)?;
            work.value_mut(&name)?[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric {
                    name: format!("{name}[{idx}]"),
                    message: "non-finite loss at perturbed point".to_string(),
                });
            }
            estimates.push((idx, (plus - minus) / two_eps));
        }
        out.insert(name, estimates);
    }
    Ok(out)
}

/// Relative error with a floor that keeps near-zero pairs comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("theta", vec![1], vec![3.0]).unwrap();
        let est = finite_diff_grad(
            |s| Ok(s.value("theta").unwrap()[0].powi(2)),
            &store,
            &FdOptions::default(),
        )
        .unwrap();
        let g = est["theta"][0].1;
        assert!((g - 6.0).abs() < 1e-6, "got {g}");
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("a", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        store.insert("b", vec![2], vec![0.0, 4.0]).unwrap();
        let est = finite_diff_grad(|_| Ok(7.25), &store, &FdOptions::default()).unwrap();
        for (_, coords) in est {
            for (_, g) in coords {
                assert_eq!(g, 0.0);
            }
        }
    }

    #[test]
    fn large_arrays_are_subsampled_deterministically() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("big", vec![500], vec![0.1; 500]).unwrap();
        let opts = FdOptions {
            probe_cap: 64,
            ..Default::default()
        };
        let loss = |s: &ParameterStore<f64>| {
            Ok(s.value("big").unwrap().iter().map(|v| v * v).sum::<f64>())
        };
        let a = finite_diff_grad(loss, &store, &opts).unwrap();
        let b = finite_diff_grad(loss, &store, &opts).unwrap();
        assert_eq!(a["big"].len(), 64);
        assert_eq!(
            a["big"].iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            b["big"].iter().map(|(i, _)| *i).collect::<Vec<_>>()
        );
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", vec![1], vec![1.0]).unwrap();
        let err = finite_diff_grad(
            |s| Ok((1.0 - s.value("w").unwrap()[0]).ln()),
            &store,
            &FdOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Numeric { name, .. } => assert!(name.starts_with("w[")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaussian_smooth_energy_matches_adjoint_backward() {
        // loss = 0.5 * ||G x||^2; analytic gradient is G^T (G x).
        use crate::tensor::{gaussian_smooth, FeatureMap, GaussianSpec, Padding, SeparableKernel};
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = FeatureMap::<f64>::from_fn(1, 6, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let spec = GaussianSpec::new(1.2).unwrap().padding(Padding::Reflect);
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", vec![36], x.data().to_vec()).unwrap();

        let spec2 = spec.clone();
        let est = finite_diff_grad(
            |s| {
                let m = FeatureMap::new(1, 6, 6, s.value("x").unwrap().to_vec()).unwrap();
                let y = gaussian_smooth(&m, &spec2)?;
                Ok(0.5 * y.data().iter().map(|v| v * v).sum::<f64>())
            },
            &store,
            &FdOptions {
                probe_cap: 36,
                ..Default::default()
            },
        )
        .unwrap();

        let kernel = SeparableKernel::from_spec(&spec);
        let y = kernel.apply(&x);
        let analytic = kernel.apply_adjoint(&y);
        for (idx, num) in &est["x"] {
            let rel = relative_error(analytic.data()[*idx], *num);
            assert!(rel <= 1e-4, "coord {idx}: rel err {rel}");
        }
    }
}
