//! Synthetic point clouds.

use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::cloud::{normalize_cloud, PointCloud};
use crate::error::Result;
use crate::Rng;

/// `n` points uniform on `[-1, 1]^3`, each with one scalar feature uniform
/// on `[-1, 1]`.
pub fn gen_random_cloud(n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = Rng::seed_from_u64(seed);
    random_cloud(n, &mut rng)
}

pub fn random_cloud(n: usize, rng: &mut Rng) -> Result<PointCloud> {
    let coords = (0..3 * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let feats = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    PointCloud::new(coords, feats, 3, 1)
}

/// Shapes of the two-class synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
}

/// `n` points on the surface of a unit sphere or cube, jittered by Gaussian
/// noise of standard deviation `noise`, then centered and scaled to unit
/// radius. Features are the normalized coordinates.
pub fn surface_cloud(shape: Shape, n: usize, noise: f64, rng: &mut Rng) -> Result<PointCloud> {
    let mut coords = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let p: [f64; 3] = match shape {
            Shape::Sphere => loop {
                let v: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(rng));
                let r = libm::sqrt(v.iter().map(|x| x * x).sum());
                if r > 1e-12 {
                    break v.map(|x| x / r);
                }
            },
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let mut v: [f64; 3] = core::array::from_fn(|_| rng.random_range(-1.0..=1.0));
                v[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
                v
            }
        };
        coords.extend_from_slice(&p);
    }
    if noise > 0.0 {
        let jitter = Normal::new(0.0, noise).expect("positive std");
        coords.iter_mut().for_each(|c| *c += jitter.sample(rng));
    }
    let cloud = normalize_cloud(&PointCloud::new(coords, Vec::new(), 3, 0)?)?;
    let feats = cloud.coords().to_vec();
    cloud.with_feats(feats, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_cloud_bounds() {
        let c = gen_random_cloud(1000, 3).unwrap();
        assert_eq!((c.len(), c.dim(), c.features()), (1000, 3, 1));
        assert!(c.coords().iter().chain(c.feats()).all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_cloud() {
        assert_eq!(gen_random_cloud(50, 7).unwrap(), gen_random_cloud(50, 7).unwrap());
        assert_ne!(gen_random_cloud(50, 7).unwrap(), gen_random_cloud(50, 8).unwrap());
    }

    #[test]
    fn mean_near_zero() {
        let c = gen_random_cloud(100_000 / 3 + 1, 11).unwrap();
        let m = c.coords().iter().sum::<f64>() / c.coords().len() as f64;
        assert!(m.abs() < 0.02, "{m}");
    }

    #[test]
    fn sphere_points_on_unit_radius() {
        let mut rng = Rng::seed_from_u64(0);
        let c = surface_cloud(Shape::Sphere, 200, 0.0, &mut rng).unwrap();
        let max = c
            .coords()
            .chunks(3)
            .map(|p| libm::sqrt(p.iter().map(|v| v * v).sum()))
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert_eq!(c.feats(), c.coords());
    }
}
