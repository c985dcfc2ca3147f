use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{augment, generate_synthetic, normalize_unit_sphere, AugmentSpec, PointCloud, RotationMode, ShapeFamily, SyntheticSpec};

/// Classes of the desk-scale classification set, in label order.
pub const DESK_CLASSES: [ShapeFamily; 4] = [
    ShapeFamily::Sphere,
    ShapeFamily::Cube,
    ShapeFamily::CylinderWithCaps,
    ShapeFamily::LBracket,
];

/// One training or test example. Classification uses `label`;
/// segmentation uses the cloud's point labels and picks its head by
/// `category`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Part ids of every category (segmentation only).
    pub part_sets: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Keeps the first `per_class` samples of each label.
    pub fn take_per_class(&self, per_class: usize) -> Self {
        let mut seen = std::collections::HashMap::new();
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                let c = seen.entry(s.label).or_insert(0usize);
                *c += 1;
                *c <= per_class
            })
            .cloned()
            .collect();
        Self {
            samples,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSpec {
    pub n_points: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Independent per-axis scale range applied before normalization.
    pub aniso_range: [f64; 2],
    pub seed: u64,
}

impl Default for DeskSpec {
    fn default() -> Self {
        Self {
            n_points: 512,
            train_per_class: 200,
            test_per_class: 50,
            aniso_range: [0.75, 1.25],
            seed: 0,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b, c] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

// Random anisotropic scale and z rotation, then unit-sphere normalization.
fn vary(cloud: PointCloud, aniso: [f64; 2], seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = aniso;
    let s: [f64; 3] = [0; 3].map(|_| if lo < hi { rng.random_range(lo..hi) } else { lo });
    let mut c = cloud;
    c.map_xyz(|p| [p[0] * s[0], p[1] * s[1], p[2] * s[2]]);
    let spec = AugmentSpec {
        rotation_mode: RotationMode::ZAxis,
        ..AugmentSpec::identity(rng.random())
    };
    Ok(normalize_unit_sphere(&augment(&c, &spec)?))
}

fn check(spec: &DeskSpec) -> Result<()> {
    let [lo, hi] = spec.aniso_range;
    if spec.n_points == 0 || !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Config(format!("invalid dataset spec {spec:?}")));
    }
    Ok(())
}

/// The four-class classification set: `(train, test)`.
pub fn desk_classification(spec: &DeskSpec) -> Result<(Dataset, Dataset)> {
    check(spec)?;
    let split = |which: u64, per_class: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(per_class * DESK_CLASSES.len());
        for i in 0..per_class {
            for (label, &family) in DESK_CLASSES.iter().enumerate() {
                let seed = mix(spec.seed, which, label as u64, i as u64);
                let raw = generate_synthetic(&SyntheticSpec {
                    shape_family: family,
                    n_points: spec.n_points,
                    seed,
                    part_labels: false,
                })?;
                let cloud = vary(raw, spec.aniso_range, seed ^ 1)?.with_cloud_label(label);
                samples.push(Sample {
                    cloud,
                    label,
                    category: 0,
                });
            }
        }
        Ok(Dataset {
            samples,
            class_names: DESK_CLASSES.iter().map(|f| f.name().to_string()).collect(),
            part_sets: Vec::new(),
        })
    };
    Ok((split(0, spec.train_per_class)?, split(1, spec.test_per_class)?))
}

/// Cylinder part segmentation (0 = side wall, 1 = caps): `(train, test)`.
/// The per-class counts of `spec` are the per-split counts here.
pub fn cylinder_segmentation(spec: &DeskSpec) -> Result<(Dataset, Dataset)> {
    check(spec)?;
    let split = |which: u64, count: usize| -> Result<Dataset> {
        let samples = (0..count)
            .map(|i| {
                let seed = mix(spec.seed, 10 + which, 0, i as u64);
                let raw = generate_synthetic(&SyntheticSpec {
                    shape_family: ShapeFamily::CylinderWithCaps,
                    n_points: spec.n_points,
                    seed,
                    part_labels: true,
                })?;
                Ok(Sample {
                    cloud: vary(raw, spec.aniso_range, seed ^ 1)?,
                    label: 0,
                    category: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            class_names: vec![ShapeFamily::CylinderWithCaps.name().to_string()],
            part_sets: vec![vec![0, 1]],
        })
    };
    Ok((split(0, spec.train_per_class)?, split(1, spec.test_per_class)?))
}
