use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{PointCloud, CLUTTER_LABEL};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationMode {
    None,
    ZAxis,
    FullSo3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub scale_range: [f64; 2],
    /// Maximum absolute offset per axis.
    pub translate_range: f64,
    pub rotation_mode: RotationMode,
    pub dropout_keep: f64,
    pub jitter_sigma: f64,
    pub clutter_fraction: f64,
    pub seed: u64,
}

impl AugmentSpec {
    /// Leaves geometry untouched; only the final shuffle applies.
    pub fn identity(seed: u64) -> Self {
        Self {
            scale_range: [1.0, 1.0],
            translate_range: 0.0,
            rotation_mode: RotationMode::None,
            dropout_keep: 1.0,
            jitter_sigma: 0.0,
            clutter_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let finite = [lo, hi, self.translate_range, self.dropout_keep, self.jitter_sigma, self.clutter_fraction]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("augmentation ranges must be finite".into()));
        }
        if lo > hi {
            return Err(Error::Config(format!("scale range [{lo}, {hi}] is inverted")));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout_keep {} not in (0, 1]", self.dropout_keep)));
        }
        if self.translate_range < 0.0 || self.jitter_sigma < 0.0 || self.clutter_fraction < 0.0 {
            return Err(Error::Config("translate, jitter and clutter must be non-negative".into()));
        }
        Ok(())
    }
}

/// What [`augment_traced`] drew, for inspection and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentTrace {
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub translation: [f64; 3],
    /// Source index of every output row (`None` for clutter).
    pub source: Vec<Option<usize>>,
}

const MIN_POINTS_AFTER_DROPOUT: usize = 8;

/// Rotates xyz about the z axis by `angle` radians.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let m = z_rotation(angle);
    let mut out = cloud.clone();
    out.map_xyz(|p| apply(&m, p));
    out
}

fn z_rotation(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn apply(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

// Uniform rotation from a normalized Gaussian quaternion.
fn random_so3(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let g: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            break g.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn augment(cloud: &PointCloud, spec: &AugmentSpec) -> Result<PointCloud> {
    augment_traced(cloud, spec).map(|(c, _)| c)
}

/// Applies rotate, scale, translate, jitter, dropout, clutter and shuffle,
/// in that order, drawing everything from `spec.seed`.
pub fn augment_traced(cloud: &PointCloud, spec: &AugmentSpec) -> Result<(PointCloud, AugmentTrace)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = cloud.clone();

    let rotation = match spec.rotation_mode {
        RotationMode::None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        RotationMode::ZAxis => z_rotation(rng.random_range(0.0..std::f64::consts::TAU)),
        RotationMode::FullSo3 => random_so3(&mut rng),
    };
    if spec.rotation_mode != RotationMode::None {
        out.map_xyz(|p| apply(&rotation, p));
    }

    let [lo, hi] = spec.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
    if scale != 1.0 {
        out.map_xyz(|p| p.map(|v| v * scale));
    }

    let mut translation = [0.0; 3];
    if spec.translate_range > 0.0 {
        let t = spec.translate_range;
        translation = [0; 3].map(|_| rng.random_range(-t..=t));
        out.map_xyz(|p| [p[0] + translation[0], p[1] + translation[1], p[2] + translation[2]]);
    }

    if spec.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
        out.map_xyz(|p| p.map(|v| v + noise.sample(&mut rng)));
    }

    let mut source: Vec<Option<usize>> = (0..out.n_points()).map(Some).collect();
    if spec.dropout_keep < 1.0 {
        let keep = (out.n_points() as f64 * spec.dropout_keep).round() as usize;
        if keep < MIN_POINTS_AFTER_DROPOUT {
            return Err(Error::InvalidInput(format!(
                "dropout keeps {keep} points, fewer than {MIN_POINTS_AFTER_DROPOUT}"
            )));
        }
        let mut idx: Vec<usize> = (0..out.n_points()).collect();
        idx.partial_shuffle(&mut rng, keep);
        let mut kept = idx[..keep].to_vec();
        kept.sort_unstable();
        out = out.select(&kept)?;
        source = kept.into_iter().map(Some).collect();
    }

    if spec.clutter_fraction > 0.0 {
        let extra = (out.n_points() as f64 * spec.clutter_fraction).round() as usize;
        if extra > 0 {
            let c = out.n_channels();
            let mut pts = vec![0.0; extra * c];
            for row in pts.chunks_exact_mut(c) {
                for v in &mut row[..3] {
                    *v = rng.random_range(-1.0..=1.0);
                }
            }
            let mut clutter = PointCloud::new(pts, c)?;
            if out.point_labels().is_some() {
                clutter = clutter.with_point_labels(vec![CLUTTER_LABEL; extra])?;
            }
            if out.crease_flags().is_some() {
                clutter = clutter.with_crease_flags(vec![false; extra])?;
            }
            out.extend(&clutter);
            source.extend(std::iter::repeat_n(None, extra));
        }
    }

    let mut order: Vec<usize> = (0..out.n_points()).collect();
    order.shuffle(&mut rng);
    out = out.select(&order)?;
    let source = order.iter().map(|&i| source[i]).collect();

    Ok((
        out,
        AugmentTrace {
            rotation,
            scale,
            translation,
            source,
        },
    ))
}
