//! Point-cloud data model, file I/O, synthetic shapes and augmentation.

mod augment;
mod io;
mod synthetic;

pub use augment::{augment, augment_traced, rotate_z, AugmentSpec, AugmentTrace, RotationMode};
pub use io::{
    export_ply, load_cloud, load_ply_with_scalars, parse_off, parse_ply, parse_xyz, write_ply,
    CloudFormat, LoadOptions, TriMesh,
};
pub use synthetic::{generate_synthetic, ShapeFamily, SyntheticSpec, CREASE_BAND};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Part label given to clutter points appended by [`augment`].
pub const CLUTTER_LABEL: usize = usize::MAX;

/// `N x C` point features; the first three channels are xyz coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    n_points: usize,
    n_channels: usize,
    pub cloud_label: Option<usize>,
    point_labels: Option<Vec<usize>>,
    crease_flags: Option<Vec<bool>>,
}

impl PointCloud {
    /// Builds a cloud from row-major `n_channels`-wide rows.
    pub fn new(points: Vec<f64>, n_channels: usize) -> Result<Self> {
        if n_channels < 3 {
            return Err(Error::InvalidInput(format!(
                "point clouds need at least 3 channels, got {n_channels}"
            )));
        }
        if points.is_empty() {
            return Err(Error::InvalidInput("empty point cloud".into()));
        }
        if !points.len().is_multiple_of(n_channels) {
            return Err(Error::InvalidInput(format!(
                "{} values do not form rows of {n_channels} channels",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value in point {}",
                i / n_channels
            )));
        }
        Ok(Self {
            n_points: points.len() / n_channels,
            points,
            n_channels,
            cloud_label: None,
            point_labels: None,
            crease_flags: None,
        })
    }

    pub fn from_xyz(xyz: &[[f64; 3]]) -> Result<Self> {
        Self::new(xyz.iter().flatten().copied().collect(), 3)
    }

    pub fn with_cloud_label(mut self, label: usize) -> Self {
        self.cloud_label = Some(label);
        self
    }

    pub fn with_point_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n_points {
            return Err(Error::InvalidInput(format!(
                "{} point labels for {} points",
                labels.len(),
                self.n_points
            )));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    /// Attaches per-point crease/edge membership flags.
    pub fn with_crease_flags(mut self, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != self.n_points {
            return Err(Error::InvalidInput(format!(
                "{} crease flags for {} points",
                flags.len(),
                self.n_points
            )));
        }
        self.crease_flags = Some(flags);
        Ok(self)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.n_channels..(i + 1) * self.n_channels]
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    pub fn point_labels(&self) -> Option<&[usize]> {
        self.point_labels.as_deref()
    }

    pub fn crease_flags(&self) -> Option<&[bool]> {
        self.crease_flags.as_deref()
    }

    /// Applies `f` to every xyz triple in place; other channels are untouched.
    pub fn map_xyz(&mut self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) {
        for row in self.points.chunks_exact_mut(self.n_channels) {
            let q = f([row[0], row[1], row[2]]);
            row[..3].copy_from_slice(&q);
        }
    }

    /// Rows `indices` (in that order), with labels and flags carried along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_points) {
            return Err(Error::InvalidInput(format!(
                "point index {bad} out of range for {} points",
                self.n_points
            )));
        }
        let mut points = Vec::with_capacity(indices.len() * self.n_channels);
        for &i in indices {
            points.extend_from_slice(self.point(i));
        }
        let mut out = Self::new(points, self.n_channels)?;
        out.cloud_label = self.cloud_label;
        out.point_labels = self
            .point_labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        out.crease_flags = self
            .crease_flags
            .as_ref()
            .map(|f| indices.iter().map(|&i| f[i]).collect());
        Ok(out)
    }

    /// Appends rows from `other`, which must have the same channel count.
    pub(crate) fn extend(&mut self, other: &PointCloud) {
        debug_assert_eq!(self.n_channels, other.n_channels);
        self.points.extend_from_slice(&other.points);
        self.n_points += other.n_points;
        if let (Some(a), Some(b)) = (&mut self.point_labels, &other.point_labels) {
            a.extend_from_slice(b);
        } else {
            self.point_labels = None;
        }
        if let (Some(a), Some(b)) = (&mut self.crease_flags, &other.crease_flags) {
            a.extend_from_slice(b);
        } else {
            self.crease_flags = None;
        }
    }

    /// All channels as an `N x C` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![self.n_points, self.n_channels], &self.points)
            .expect("cloud shape is consistent")
    }

    /// The xyz channels as an `N x 3` tensor.
    pub fn coords_tensor<T: Real>(&self) -> Tensor<T> {
        let data: Vec<f64> = (0..self.n_points).flat_map(|i| self.xyz(i)).collect();
        Tensor::from_f64(vec![self.n_points, 3], &data).expect("cloud shape is consistent")
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..self.n_points {
            let p = self.xyz(i);
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / self.n_points as f64)
    }
}

/// Centers xyz on the origin and scales so the farthest point has norm 1.
///
/// A cloud whose points all coincide maps to all-zero coordinates.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let mut out = cloud.clone();
    out.map_xyz(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
    let max_norm = (0..out.n_points)
        .map(|i| {
            let p = out.xyz(i);
            (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
        })
        .fold(0.0, f64::max);
    if max_norm > 0.0 {
        out.map_xyz(|p| p.map(|v| v / max_norm));
    } else {
        out.map_xyz(|_| [0.0; 3]);
    }
    out
}
