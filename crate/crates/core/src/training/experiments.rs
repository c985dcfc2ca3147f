use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, Dataset, TrainConfig, VoteConfig};
use crate::error::{Error, Result};
use crate::model::{FusionMode, Gdanet, ModelConfig};
use crate::pointcloud::{augment, rotate_z, AugmentSpec, RotationMode};
use crate::tensor::{ParamStore, Real};

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub use_knn_local: bool,
    pub use_self_attention: bool,
    pub use_sharp: bool,
    pub use_gentle: bool,
    pub use_voting: bool,
}

impl AblationToggles {
    pub const FULL: Self = Self {
        use_knn_local: true,
        use_self_attention: false,
        use_sharp: true,
        use_gentle: true,
        use_voting: false,
    };

    pub const KNN_ONLY: Self = Self {
        use_knn_local: true,
        use_self_attention: false,
        use_sharp: false,
        use_gentle: false,
        use_voting: false,
    };

    pub fn fusion(&self) -> Result<FusionMode> {
        Ok(match (self.use_self_attention, self.use_sharp, self.use_gentle) {
            (true, false, false) => FusionMode::SelfAttention,
            (true, _, _) => {
                return Err(Error::Config(
                    "self-attention replaces the sharp/gentle branches; enable one or the other".into(),
                ))
            }
            (false, true, true) => FusionMode::Both,
            (false, true, false) => FusionMode::SharpOnly,
            (false, false, true) => FusionMode::GentleOnly,
            (false, false, false) => FusionMode::None,
        })
    }

    /// `base` with this row's structural switches applied.
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        Ok(ModelConfig {
            fusion: self.fusion()?,
            use_knn_local: self.use_knn_local,
            ..base.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: AblationToggles,
    /// Test accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("knn,self_attention,sharp,gentle,voting,mean_accuracy,accuracies\n");
        let flag = |b: bool| if b { "1" } else { "0" };
        for r in &self.rows {
            let t = r.toggles;
            let accs: Vec<String> = r.accuracies.iter().map(|a| a.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                flag(t.use_knn_local),
                flag(t.use_self_attention),
                flag(t.use_sharp),
                flag(t.use_gentle),
                flag(t.use_voting),
                r.mean(),
                accs.join(";")
            ));
        }
        out
    }

    pub fn row(&self, toggles: AblationToggles) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.toggles == toggles)
    }
}

/// Trains and evaluates one model per (row, seed). The seed drives both the
/// initialization and the training order; every row gets the same budget.
/// Rows with voting use `votes`, the others a single plain pass.
pub fn run_ablation<T: Real>(
    base: &ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    rows: &[AblationToggles],
    train_cfg: &TrainConfig,
    votes: &VoteConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    let configs: Vec<ModelConfig> = rows.iter().map(|t| t.apply(base)).collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (toggles, cfg) in rows.iter().zip(configs) {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (model, mut store) = Gdanet::init::<T>(ModelConfig { seed, ..cfg.clone() })?;
            train(&model, &mut store, train_set, &TrainConfig { seed, ..train_cfg.clone() })?;
            let v = if toggles.use_voting { votes.clone() } else { VoteConfig::plain() };
            accuracies.push(evaluate(&model, &store, test_set, &v)?.overall_accuracy);
        }
        out.push(AblationRow {
            toggles: *toggles,
            accuracies,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustnessMode {
    /// Grid values are point counts kept per cloud.
    Dropout,
    /// Grid values are rotation angles about z, in degrees.
    RotateZ,
    /// Grid values are angles about a random axis per cloud, in degrees.
    RotateSo3,
    /// Grid values are Gaussian jitter standard deviations.
    Jitter,
    /// Grid values are fractions of uniform clutter points added.
    Clutter,
}

fn rotate_axis(cloud: &crate::pointcloud::PointCloud, axis: [f64; 3], angle: f64) -> crate::pointcloud::PointCloud {
    // Rodrigues' rotation formula.
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    let m = [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ];
    let mut out = cloud.clone();
    out.map_xyz(|p| [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]));
    out
}

fn perturb(data: &Dataset, mode: RobustnessMode, value: f64, seed: u64) -> Result<Dataset> {
    let mut out = data.clone();
    for (i, s) in out.samples.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let n = s.cloud.n_points();
        s.cloud = match mode {
            RobustnessMode::Dropout => {
                let keep = value.round();
                if !(keep >= 1.0 && keep <= n as f64) {
                    return Err(Error::Config(format!("cannot keep {value} of {n} points")));
                }
                let keep = keep as usize;
                if keep == n {
                    continue;
                }
                let mut idx = sample(&mut rng, n, keep).into_vec();
                idx.sort_unstable();
                s.cloud.select(&idx)?
            }
            RobustnessMode::RotateZ => {
                if value == 0.0 {
                    continue;
                }
                rotate_z(&s.cloud, value.to_radians())
            }
            RobustnessMode::RotateSo3 => {
                if value == 0.0 {
                    continue;
                }
                let v: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                rotate_axis(&s.cloud, v.map(|a| a / norm), value.to_radians())
            }
            RobustnessMode::Jitter | RobustnessMode::Clutter => {
                if value == 0.0 {
                    continue;
                }
                let mut spec = AugmentSpec {
                    rotation_mode: RotationMode::None,
                    ..AugmentSpec::identity(rng.random())
                };
                if mode == RobustnessMode::Jitter {
                    spec.jitter_sigma = value;
                } else {
                    spec.clutter_fraction = value;
                }
                augment(&s.cloud, &spec)?
            }
        };
    }
    Ok(out)
}

/// Evaluates a trained model under one perturbation per grid value.
/// Returns `(grid_value, accuracy)` pairs; a zero perturbation (or a full
/// point count) leaves the clouds untouched.
pub fn run_robustness<T: Real>(
    model: &Gdanet,
    store: &ParamStore<T>,
    test_set: &Dataset,
    mode: RobustnessMode,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&value| {
            let data = perturb(test_set, mode, value, seed)?;
            let report = evaluate(model, store, &data, &VoteConfig::plain())?;
            Ok((value, report.overall_accuracy))
        })
        .collect()
}

/// `grid_value,accuracy` rows.
pub fn robustness_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("grid_value,accuracy\n");
    for (g, a) in curve {
        out.push_str(&format!("{g},{a}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_data, tiny_model};
    use super::*;
    use crate::model::Task;

    #[test]
    fn toggles_map_to_fusion_modes() {
        assert_eq!(AblationToggles::FULL.fusion().unwrap(), FusionMode::Both);
        assert_eq!(AblationToggles::KNN_ONLY.fusion().unwrap(), FusionMode::None);
        let bad = AblationToggles {
            use_self_attention: true,
            ..AblationToggles::FULL
        };
        assert!(matches!(bad.fusion(), Err(Error::Config(_))));
        let base = ModelConfig::default();
        // The full row is the default network.
        assert_eq!(AblationToggles::FULL.apply(&base).unwrap(), base);
    }

    #[test]
    fn ablation_table_has_one_row_per_toggle_set() {
        let (train_set, test) = tiny_data();
        let all_off = AblationToggles {
            use_knn_local: false,
            use_self_attention: false,
            use_sharp: false,
            use_gentle: false,
            use_voting: false,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let rows = [AblationToggles::FULL, all_off];
        let votes = VoteConfig::plain();
        let table = run_ablation::<f32>(&tiny_model(Task::Classification), &train_set, &test, &rows, &cfg, &votes, &[1, 2]).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.accuracies.len() == 2));
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("0,0,0,0,0,"));
        let contradictory = AblationToggles {
            use_self_attention: true,
            ..AblationToggles::FULL
        };
        let err = run_ablation::<f32>(&tiny_model(Task::Classification), &train_set, &test, &[contradictory], &cfg, &votes, &[1]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn identity_grid_points_equal_plain_evaluation() {
        let (model, store) = Gdanet::init::<f32>(tiny_model(Task::Classification)).unwrap();
        let (_, test) = tiny_data();
        let plain = evaluate(&model, &store, &test, &VoteConfig::plain()).unwrap().overall_accuracy;
        let n = test.samples[0].cloud.n_points() as f64;
        for (mode, identity) in [
            (RobustnessMode::Dropout, n),
            (RobustnessMode::RotateZ, 0.0),
            (RobustnessMode::RotateSo3, 0.0),
            (RobustnessMode::Jitter, 0.0),
            (RobustnessMode::Clutter, 0.0),
        ] {
            let curve = run_robustness(&model, &store, &test, mode, &[identity], 3).unwrap();
            assert_eq!(curve, vec![(identity, plain)], "{mode:?}");
        }
        let curve = run_robustness(&model, &store, &test, RobustnessMode::Dropout, &[n, 16.0], 3).unwrap();
        assert_eq!(robustness_csv(&curve).lines().count(), 3);
        assert!(run_robustness(&model, &store, &test, RobustnessMode::Dropout, &[n + 1.0], 3).is_err());
    }

    #[test]
    fn rodrigues_matches_z_rotation() {
        let c = crate::pointcloud::PointCloud::from_xyz(&[[1.0, 2.0, 3.0]]).unwrap();
        let a = rotate_axis(&c, [0.0, 0.0, 1.0], 0.7);
        let b = rotate_z(&c, 0.7);
        for k in 0..3 {
            assert!((a.xyz(0)[k] - b.xyz(0)[k]).abs() < 1e-12);
        }
    }
}
