//! Point clouds, regular grids and the lattice that places grid points in
//! space.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest spatial dimension the engine accepts.
pub const MAX_DIM: usize = 3;

/// A set of `n` coordinate/feature pairs scattered in `dim`-dimensional space.
///
/// Coordinates and features are stored row-major: point `i` owns
/// `coords[i*dim..(i+1)*dim]` and `feats[i*features..(i+1)*features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<f64>,
    feats: Vec<f64>,
    dim: usize,
    features: usize,
}

impl PointCloud {
    pub fn new(coords: Vec<f64>, feats: Vec<f64>, dim: usize, features: usize) -> Result<Self> {
        check_dim(dim)?;
        if coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "coordinate buffer of length {} is not a positive multiple of dim {dim}",
                coords.len()
            )));
        }
        let n = coords.len() / dim;
        if feats.len() != n * features {
            return Err(Error::Data(format!(
                "{n} points with {features} features need {} values, got {}",
                n * features,
                feats.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite coordinate at point {} axis {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            coords,
            feats,
            dim,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.feats[i * self.features..(i + 1) * self.features]
    }

    /// Features as an `n × features` tensor.
    pub fn feat_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.features], self.feats.clone())
            .expect("validated at construction")
    }

    pub fn with_feats(&self, feats: Vec<f64>, features: usize) -> Result<Self> {
        Self::new(self.coords.clone(), feats, self.dim, features)
    }

    pub fn meta(&self) -> CloudMeta {
        CloudMeta {
            points: self.len(),
            dim: self.dim,
            features: self.features,
        }
    }
}

/// Sizes of a point cloud, without the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloudMeta {
    pub points: usize,
    pub dim: usize,
    pub features: usize,
}

/// A regular lattice of `resolution^dim` points spanning `[lo, hi]^dim`,
/// endpoints included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub lo: f64,
    pub hi: f64,
    pub dim: usize,
}

impl GridSpec {
    pub fn new(resolution: usize, lo: f64, hi: f64, dim: usize) -> Result<Self> {
        let spec = Self {
            resolution,
            lo,
            hi,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid over the normalized domain `[-1, 1]^dim`.
    pub fn unit(resolution: usize, dim: usize) -> Result<Self> {
        Self::new(resolution, -1.0, 1.0, dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("grid resolution must be at least 1".into()));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Config(format!(
                "grid domain needs finite lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        check_dim(self.dim)
    }

    /// `resolution^dim`.
    pub fn num_points(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }

    /// Distance between neighboring lattice points along an axis.
    pub fn spacing(&self) -> f64 {
        if self.resolution > 1 {
            (self.hi - self.lo) / (self.resolution - 1) as f64
        } else {
            self.hi - self.lo
        }
    }

    /// Coordinate of lattice step `t` along any axis.
    pub fn axis_value(&self, t: usize) -> f64 {
        if self.resolution == 1 {
            0.5 * (self.lo + self.hi)
        } else if t + 1 == self.resolution {
            self.hi
        } else {
            self.lo + t as f64 * self.spacing()
        }
    }

    /// Lattice steps of flat index `i`, last axis fastest.
    pub fn unravel(&self, mut i: usize, out: &mut [usize]) {
        for axis in (0..self.dim).rev() {
            out[axis] = i % self.resolution;
            i /= self.resolution;
        }
    }
}

/// Lattice coordinates of `spec` as a flat `resolution^dim × dim` buffer,
/// row-major with the last axis varying fastest.
pub fn make_grid_coords(spec: &GridSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.num_points();
    let mut out = Vec::with_capacity(n * spec.dim);
    let mut steps = [0usize; MAX_DIM];
    for i in 0..n {
        spec.unravel(i, &mut steps[..spec.dim]);
        out.extend(steps[..spec.dim].iter().map(|&t| spec.axis_value(t)));
    }
    Ok(out)
}

/// Features living on the lattice described by `spec`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub spec: GridSpec,
    pub feats: Tensor,
}

impl Grid {
    pub fn new(spec: GridSpec, feats: Tensor) -> Result<Self> {
        spec.validate()?;
        if feats.shape().len() != 2 || feats.rows() != spec.num_points() {
            return Err(crate::error::shape_err(
                "grid",
                feats.shape(),
                &[spec.num_points()],
            ));
        }
        Ok(Self { spec, feats })
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn coords(&self) -> Vec<f64> {
        make_grid_coords(&self.spec).expect("spec validated at construction")
    }
}

/// Centers a cloud at the origin and scales it so the farthest point has
/// Euclidean norm 1. A cloud whose points all coincide collapses to the
/// origin. Features are untouched.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let dim = cloud.dim();
    let n = cloud.len();
    if cloud.coords().iter().any(|c| !c.is_finite()) {
        return Err(Error::Data("non-finite coordinate".into()));
    }
    let mut centroid = [0.0; MAX_DIM];
    for p in cloud.coords().chunks_exact(dim) {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    for c in &mut centroid[..dim] {
        *c /= n as f64;
    }
    let mut coords: Vec<f64> = cloud
        .coords()
        .chunks_exact(dim)
        .flat_map(|p| p.iter().zip(&centroid).map(|(v, c)| v - c))
        .collect();
    let max_norm = coords
        .chunks_exact(dim)
        .map(|p| libm::sqrt(p.iter().map(|v| v * v).sum::<f64>()))
        .fold(0.0, f64::max);
    if max_norm > 0.0 {
        for v in &mut coords {
            *v /= max_norm;
        }
    } else {
        coords.iter_mut().for_each(|v| *v = 0.0);
    }
    PointCloud::new(coords, cloud.feats().to_vec(), dim, cloud.features())
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        Err(Error::Config(format!(
            "spatial dimension must be in 1..={MAX_DIM}, got {dim}"
        )))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_coords_1d_inclusive() {
        let spec = GridSpec::new(3, -1.0, 1.0, 1).unwrap();
        assert_eq!(make_grid_coords(&spec).unwrap(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn grid_coords_unit_square_row_major() {
        let spec = GridSpec::new(2, 0.0, 1.0, 2).unwrap();
        assert_eq!(
            make_grid_coords(&spec).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn grid_9_cubed() {
        let spec = GridSpec::unit(9, 3).unwrap();
        assert_eq!(make_grid_coords(&spec).unwrap().len(), 729 * 3);
    }

    #[test]
    fn single_point_grid_is_centered() {
        let spec = GridSpec::new(1, 0.0, 4.0, 2).unwrap();
        assert_eq!(make_grid_coords(&spec).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(GridSpec::new(0, -1.0, 1.0, 3), Err(Error::Config(_))));
        assert!(matches!(GridSpec::new(3, 1.0, 1.0, 3), Err(Error::Config(_))));
        assert!(matches!(GridSpec::new(3, -1.0, 1.0, 4), Err(Error::Config(_))));
        assert!(matches!(GridSpec::new(3, -1.0, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_two_points() {
        let c = PointCloud::new(vec![2.0, 0.0, 4.0, 0.0], vec![7.0, 8.0], 2, 1).unwrap();
        let n = normalize_cloud(&c).unwrap();
        assert_eq!(n.coords(), &[-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(n.feats(), &[7.0, 8.0]);
    }

    #[test]
    fn normalize_singleton() {
        let c = PointCloud::new(vec![5.0, 5.0, 5.0], vec![], 3, 0).unwrap();
        assert_eq!(normalize_cloud(&c).unwrap().coords(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_finite() {
        let err = PointCloud::new(vec![0.0, f64::NAN], vec![], 2, 0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn mismatched_feature_rows() {
        assert!(PointCloud::new(vec![0.0, 1.0, 2.0], vec![1.0], 3, 2).is_err());
    }
}
