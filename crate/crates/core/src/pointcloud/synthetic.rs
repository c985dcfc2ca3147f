//! Procedural shapes used as a small, fully controlled dataset.
//!
//! Every generator samples its surface uniformly by area. Shapes with sharp
//! features record, per point, whether it lies within [`CREASE_BAND`] of an
//! analytic crease or edge.

use std::f64::consts::{PI, SQRT_2};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

/// Distance to a crease below which a point is flagged as crease.
pub const CREASE_BAND: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    PlaneWithCrease,
    Cube,
    Sphere,
    CylinderWithCaps,
    LBracket,
    ChairLike,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::PlaneWithCrease,
        ShapeFamily::Cube,
        ShapeFamily::Sphere,
        ShapeFamily::CylinderWithCaps,
        ShapeFamily::LBracket,
        ShapeFamily::ChairLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::PlaneWithCrease => "plane-with-crease",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::CylinderWithCaps => "cylinder-with-caps",
            ShapeFamily::LBracket => "l-bracket",
            ShapeFamily::ChairLike => "chair-like",
        }
    }

    /// Number of distinct part labels the family emits.
    pub fn n_parts(self) -> usize {
        match self {
            ShapeFamily::PlaneWithCrease
            | ShapeFamily::Sphere
            | ShapeFamily::CylinderWithCaps
            | ShapeFamily::LBracket => 2,
            ShapeFamily::Cube => 6,
            ShapeFamily::ChairLike => 3,
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown shape family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape_family: ShapeFamily,
    pub n_points: usize,
    pub seed: u64,
    pub part_labels: bool,
}

struct Sample {
    p: [f64; 3],
    part: usize,
    crease: bool,
}

/// Samples one cloud; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PointCloud> {
    if spec.n_points == 0 {
        return Err(Error::InvalidInput("synthetic cloud needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sampler: fn(&mut ChaCha8Rng) -> Sample = match spec.shape_family {
        ShapeFamily::PlaneWithCrease => plane_with_crease,
        ShapeFamily::Cube => cube,
        ShapeFamily::Sphere => sphere,
        ShapeFamily::CylinderWithCaps => cylinder_with_caps,
        ShapeFamily::LBracket => l_bracket,
        ShapeFamily::ChairLike => chair_like,
    };
    let samples: Vec<Sample> = (0..spec.n_points).map(|_| sampler(&mut rng)).collect();
    let points = samples.iter().flat_map(|s| s.p).collect();
    let mut cloud = PointCloud::new(points, 3)?
        .with_crease_flags(samples.iter().map(|s| s.crease).collect())?;
    if spec.part_labels {
        cloud = cloud.with_point_labels(samples.iter().map(|s| s.part).collect())?;
    }
    Ok(cloud)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

// Two 2 x 2 half-sheets z = |x| folded along the y axis (90 degree dihedral).
fn plane_with_crease(rng: &mut ChaCha8Rng) -> Sample {
    let x = uniform(rng, -1.0, 1.0);
    let y = uniform(rng, -1.0, 1.0);
    Sample {
        p: [x, y, x.abs()],
        part: usize::from(x >= 0.0),
        crease: SQRT_2 * x.abs() < CREASE_BAND,
    }
}

// Surface of [-0.5, 0.5]^3; parts are the six faces.
fn cube(rng: &mut ChaCha8Rng) -> Sample {
    let face = rng.random_range(0..6usize);
    let axis = face / 2;
    let sign = if face % 2 == 0 { 0.5 } else { -0.5 };
    let mut p = [0.0; 3];
    p[axis] = sign;
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    p[u] = uniform(rng, -0.5, 0.5);
    p[v] = uniform(rng, -0.5, 0.5);
    let edge_dist = (0.5 - p[u].abs()).min(0.5 - p[v].abs());
    Sample {
        p,
        part: face,
        crease: edge_dist < CREASE_BAND,
    }
}

// Unit sphere; parts are the two hemispheres split at z = 0.
fn sphere(rng: &mut ChaCha8Rng) -> Sample {
    loop {
        let g: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
        let r = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if r > 1e-12 {
            let p = g.map(|v| v / r);
            return Sample {
                p,
                part: usize::from(p[2] >= 0.0),
                crease: false,
            };
        }
    }
}

// Radius 0.5, height 1 along z. Part 0 is the side wall, part 1 the caps.
fn cylinder_with_caps(rng: &mut ChaCha8Rng) -> Sample {
    const R: f64 = 0.5;
    const H: f64 = 1.0;
    let side = 2.0 * PI * R * H;
    let caps = 2.0 * PI * R * R;
    if rng.random::<f64>() * (side + caps) < side {
        let t = uniform(rng, 0.0, 2.0 * PI);
        let z = uniform(rng, -H / 2.0, H / 2.0);
        Sample {
            p: [R * t.cos(), R * t.sin(), z],
            part: 0,
            crease: H / 2.0 - z.abs() < CREASE_BAND,
        }
    } else {
        let t = uniform(rng, 0.0, 2.0 * PI);
        let r = R * rng.random::<f64>().sqrt();
        let z = if rng.random::<bool>() { H / 2.0 } else { -H / 2.0 };
        Sample {
            p: [r * t.cos(), r * t.sin(), z],
            part: 1,
            crease: R - r < CREASE_BAND,
        }
    }
}

// Two unit plates meeting at a right angle along the y axis.
fn l_bracket(rng: &mut ChaCha8Rng) -> Sample {
    let a = rng.random::<f64>();
    let y = rng.random::<f64>();
    if rng.random::<bool>() {
        Sample {
            p: [a, y, 0.0],
            part: 0,
            crease: a < CREASE_BAND,
        }
    } else {
        Sample {
            p: [0.0, y, a],
            part: 1,
            crease: a < CREASE_BAND,
        }
    }
}

// Seat plate, back plate and four thin cylindrical legs.
fn chair_like(rng: &mut ChaCha8Rng) -> Sample {
    const LEG_R: f64 = 0.04;
    const LEG_H: f64 = 0.8;
    let leg_area = 2.0 * PI * LEG_R * LEG_H;
    let total = 1.0 + 1.0 + 4.0 * leg_area;
    let pick = rng.random::<f64>() * total;
    if pick < 1.0 {
        let x = uniform(rng, -0.5, 0.5);
        let y = uniform(rng, -0.5, 0.5);
        let edge = (0.5 - x.abs()).min(0.5 - y.abs());
        Sample {
            p: [x, y, 0.0],
            part: 0,
            crease: edge < CREASE_BAND,
        }
    } else if pick < 2.0 {
        let x = uniform(rng, -0.5, 0.5);
        let z = uniform(rng, 0.0, 1.0);
        Sample {
            p: [x, -0.5, z],
            part: 1,
            crease: z < CREASE_BAND,
        }
    } else {
        let leg = rng.random_range(0..4usize);
        let cx = if leg % 2 == 0 { -0.45 } else { 0.45 };
        let cy = if leg / 2 == 0 { -0.45 } else { 0.45 };
        let t = uniform(rng, 0.0, 2.0 * PI);
        let z = uniform(rng, -LEG_H, 0.0);
        Sample {
            p: [cx + LEG_R * t.cos(), cy + LEG_R * t.sin(), z],
            part: 2,
            crease: z > -CREASE_BAND,
        }
    }
}
