//! Sharp-gentle complementary attention.
//!
//! Every original point attends to all points of the sharp component and,
//! separately, to all points of the gentle component:
//!
//! ```text
//! W_s = Θ_o(X_o) Θ_s(X_s)ᵀ / √d_k      Y_s = X_o + W_s Ψ_s(X_s)
//! W_g = Φ_o(X_o) Φ_g(X_g)ᵀ / √d_k      Y_g = X_o + W_g Ψ_g(X_g)
//! Z   = Y_s ⊕ Y_g
//! ```
//!
//! The value MLPs Ψ end in a zero-initialized layer, so a fresh module maps
//! `X_o` to `X_o ⊕ X_o`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gdm::VariationSplit;
use crate::tensor::{Bound, Mlp, MlpInit, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgcamConfig {
    /// Key width `d_k` of the Θ/Φ embeddings.
    pub embed_dim: usize,
    /// Normalize each attention row with a softmax. Off by default: the
    /// weights are raw scaled dot products.
    pub row_softmax: bool,
    pub channel_norm: bool,
}

impl Default for SgcamConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            row_softmax: false,
            channel_norm: false,
        }
    }
}

/// Six independent MLPs: `Θ_o, Θ_s` (sharp keys), `Φ_o, Φ_g` (gentle keys)
/// and the value transforms `Ψ_s, Ψ_g`.
#[derive(Clone, Debug)]
pub struct SgcamParams {
    pub theta_o: Mlp,
    pub theta_s: Mlp,
    pub phi_o: Mlp,
    pub phi_g: Mlp,
    pub psi_s: Mlp,
    pub psi_g: Mlp,
    pub channels: usize,
    pub config: SgcamConfig,
}

impl SgcamParams {
    /// Registers the six MLPs under `{prefix}.theta_o` etc.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        config: SgcamConfig,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || config.embed_dim == 0 {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        let d = config.embed_dim;
        let key = MlpInit {
            channel_norm: config.channel_norm,
            ..MlpInit::default()
        };
        let value = MlpInit {
            zero_last: true,
            ..key
        };
        let mut sub = 0u64;
        let mut mlp = |name: &str, widths: &[usize], init: MlpInit| {
            sub += 1;
            Mlp::new(
                store,
                &format!("{prefix}.{name}"),
                channels,
                widths,
                init,
                seed.wrapping_add(sub.wrapping_mul(0x0100_0000_01B3)),
            )
        };
        Ok(Self {
            theta_o: mlp("theta_o", &[d, d], key)?,
            theta_s: mlp("theta_s", &[d, d], key)?,
            phi_o: mlp("phi_o", &[d, d], key)?,
            phi_g: mlp("phi_g", &[d, d], key)?,
            psi_s: mlp("psi_s", &[channels, channels], value)?,
            psi_g: mlp("psi_g", &[channels, channels], value)?,
            channels,
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.theta_o, &self.theta_s, &self.phi_o, &self.phi_g, &self.psi_s, &self.psi_g]
            .iter()
            .flat_map(|m| m.layers())
            .map(|l| l.param_count())
            .sum()
    }
}

/// Attention weights of one fusion, `N x M` each.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub w_sharp: Tensor<T>,
    pub w_gentle: Tensor<T>,
}

/// Tape handles produced by [`fuse_vars`].
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub z: Var,
    pub w_sharp: Option<Var>,
    pub w_gentle: Option<Var>,
}

fn check_rows<T: Real>(tape: &Tape<T>, op: &'static str, x: Var, channels: usize) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != channels {
        return Err(Error::Shape {
            op,
            lhs: s,
            rhs: vec![0, channels],
        });
    }
    Ok(s[0])
}

// `q(x_o) k(x_c)ᵀ / √d_k`, optionally row-normalized.
fn attention<T: Real>(
    tape: &Tape<T>,
    bound: &Bound,
    cfg: &SgcamConfig,
    q: &Mlp,
    k: &Mlp,
    x_o: Var,
    x_c: Var,
) -> Result<Var> {
    let qo = q.forward(tape, bound, x_o)?;
    let kc = k.forward(tape, bound, x_c)?;
    let kt = tape.transpose(kc)?;
    let w = tape.matmul(qo, kt)?;
    let w = tape.scale(w, T::from_f64_lossy(1.0 / (cfg.embed_dim as f64).sqrt()));
    if cfg.row_softmax {
        tape.softmax(w, 1)
    } else {
        Ok(w)
    }
}

/// Records `W_s` and `W_g` for the given component rows.
pub fn attention_vars<T: Real>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &SgcamParams,
    x_o: Var,
    x_s: Var,
    x_g: Var,
) -> Result<(Var, Var)> {
    check_rows(tape, "attention", x_o, params.channels)?;
    let ms = check_rows(tape, "attention", x_s, params.channels)?;
    let mg = check_rows(tape, "attention", x_g, params.channels)?;
    if ms != mg {
        return Err(Error::Shape {
            op: "attention",
            lhs: tape.shape(x_s),
            rhs: tape.shape(x_g),
        });
    }
    let c = &params.config;
    let ws = attention(tape, bound, c, &params.theta_o, &params.theta_s, x_o, x_s)?;
    let wg = attention(tape, bound, c, &params.phi_o, &params.phi_g, x_o, x_g)?;
    Ok((ws, wg))
}

fn branch<T: Real>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &SgcamParams,
    keys: (&Mlp, &Mlp),
    value: &Mlp,
    x_o: Var,
    x_c: Var,
) -> Result<(Var, Var)> {
    let w = attention(tape, bound, &params.config, keys.0, keys.1, x_o, x_c)?;
    let v = value.forward(tape, bound, x_c)?;
    let wv = tape.matmul(w, v)?;
    Ok((tape.add(x_o, wv)?, w))
}

/// Fuses `x_o` with the rows of `features` selected by `sharp` and `gentle`.
///
/// A `None` branch is switched off and contributes `x_o` unchanged, so the
/// output width is `2C` either way.
pub fn fuse_indices<T: Real>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &SgcamParams,
    x_o: Var,
    features: Var,
    sharp: Option<&[usize]>,
    gentle: Option<&[usize]>,
) -> Result<FusionVars> {
    check_rows(tape, "fuse", x_o, params.channels)?;
    check_rows(tape, "fuse", features, params.channels)?;
    let (y_s, w_sharp) = match sharp {
        Some(idx) => {
            let x_s = tape.gather_rows(features, idx)?;
            let keys = (&params.theta_o, &params.theta_s);
            let (y, w) = branch(tape, bound, params, keys, &params.psi_s, x_o, x_s)?;
            (y, Some(w))
        }
        None => (x_o, None),
    };
    let (y_g, w_gentle) = match gentle {
        Some(idx) => {
            let x_g = tape.gather_rows(features, idx)?;
            let keys = (&params.phi_o, &params.phi_g);
            let (y, w) = branch(tape, bound, params, keys, &params.psi_g, x_o, x_g)?;
            (y, Some(w))
        }
        None => (x_o, None),
    };
    Ok(FusionVars {
        z: tape.concat(&[y_s, y_g], 1)?,
        w_sharp,
        w_gentle,
    })
}

/// Both branches, with components taken from `split`.
pub fn fuse_vars<T: Real>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &SgcamParams,
    x_o: Var,
    split: &VariationSplit,
    features: Var,
) -> Result<FusionVars> {
    if split.n_points() != tape.shape(features).first().copied().unwrap_or(0) {
        return Err(Error::InvalidInput(format!(
            "split covers {} points but the features have {} rows",
            split.n_points(),
            tape.shape(features).first().copied().unwrap_or(0)
        )));
    }
    fuse_indices(tape, bound, params, x_o, features, Some(split.sharp_idx()), Some(split.gentle_idx()))
}

/// Baseline: both branches attend to all of `x_o`.
pub fn self_attention_vars<T: Real>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &SgcamParams,
    x_o: Var,
) -> Result<FusionVars> {
    let n = check_rows(tape, "self_attention", x_o, params.channels)?;
    let all: Vec<usize> = (0..n).collect();
    fuse_indices(tape, bound, params, x_o, x_o, Some(&all), Some(&all))
}

fn with_tape<T: Real, R>(
    store: &ParamStore<T>,
    f: impl FnOnce(&Tape<T>, &Bound) -> Result<R>,
) -> Result<R> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    f(&tape, &bound)
}

/// Value-level `W_s`, `W_g`.
pub fn attention_matrices<T: Real>(
    params: &SgcamParams,
    store: &ParamStore<T>,
    x_o: &Tensor<T>,
    x_s: &Tensor<T>,
    x_g: &Tensor<T>,
) -> Result<AttentionRecord<T>> {
    with_tape(store, |tape, bound| {
        let (o, s, g) = (tape.constant(x_o.clone()), tape.constant(x_s.clone()), tape.constant(x_g.clone()));
        let (ws, wg) = attention_vars(tape, bound, params, o, s, g)?;
        Ok(AttentionRecord {
            w_sharp: tape.value(ws).clone(),
            w_gentle: tape.value(wg).clone(),
        })
    })
}

/// Value-level fusion, `N x 2C`.
pub fn fuse<T: Real>(
    params: &SgcamParams,
    store: &ParamStore<T>,
    x_o: &Tensor<T>,
    split: &VariationSplit,
    features: &Tensor<T>,
) -> Result<Tensor<T>> {
    with_tape(store, |tape, bound| {
        let (o, f) = (tape.constant(x_o.clone()), tape.constant(features.clone()));
        let out = fuse_vars(tape, bound, params, o, split, f)?;
        Ok(tape.value(out.z).clone())
    })
}

pub fn self_attention_fuse<T: Real>(
    params: &SgcamParams,
    store: &ParamStore<T>,
    x_o: &Tensor<T>,
) -> Result<Tensor<T>> {
    with_tape(store, |tape, bound| {
        let o = tape.constant(x_o.clone());
        let out = self_attention_vars(tape, bound, params, o)?;
        Ok(tape.value(out.z).clone())
    })
}

/// Row `anchor` of each attention matrix: `(sharp, gentle)`.
pub fn export_attention<T: Real>(record: &AttentionRecord<T>, anchor: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = record.w_sharp.rows();
    if anchor >= n || anchor >= record.w_gentle.rows() {
        return Err(Error::InvalidInput(format!(
            "anchor {anchor} out of range for {n} points"
        )));
    }
    let row = |t: &Tensor<T>| t.row(anchor).iter().map(|v| v.as_f64()).collect();
    Ok((row(&record.w_sharp), row(&record.w_gentle)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
    use crate::tensor::{init_params, InitScheme};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        init_params(shape, InitScheme::KaimingUniform, seed)
    }

    fn setup(c: usize, d: usize, seed: u64) -> (SgcamParams, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let cfg = SgcamConfig {
            embed_dim: d,
            ..SgcamConfig::default()
        };
        let p = SgcamParams::new(&mut store, "att", c, cfg, seed).unwrap();
        // Give the value MLPs nonzero final layers so the tests see them.
        for (i, prm) in store.iter_mut().enumerate() {
            if prm.name.contains("psi") && prm.name.ends_with(".1.w") {
                prm.tensor = rand(prm.tensor.shape(), 1000 + i as u64);
            }
        }
        (p, store)
    }

    // Plain-loop evaluation of one MLP on one row.
    fn mlp_row(store: &ParamStore<f64>, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = mlp.layers().len();
        for (l, layer) in mlp.layers().iter().enumerate() {
            let w = store.tensor(layer.weight);
            let b = store.tensor(layer.bias);
            h = (0..layer.out_dim)
                .map(|o| {
                    let s: f64 = (0..layer.in_dim).map(|i| h[i] * w.at(i, o)).sum::<f64>() + b.data()[o];
                    if l + 1 < n { s.max(0.0) } else { s }
                })
                .collect();
        }
        h
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn parameter_layout() {
        let mut store = ParamStore::<f32>::new();
        let p = SgcamParams::new(&mut store, "b0", 8, SgcamConfig::default(), 0).unwrap();
        // Four key MLPs 8->64->64, two value MLPs 8->8->8.
        let key = 8 * 64 + 64 + 64 * 64 + 64;
        let value = 2 * (8 * 8 + 8);
        assert_eq!(p.param_count(), 4 * key + 2 * value);
        assert_eq!(store.count_scalars(), p.param_count());
        assert!(store.get("b0.psi_g.1.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert_ne!(store.get("b0.theta_o.0.w"), store.get("b0.theta_s.0.w"));
    }

    #[test]
    fn zero_key_mlps_give_zero_attention() {
        let (p, mut store) = setup(3, 4, 1);
        store.zero_where(|n| n.contains("theta"));
        let r = attention_matrices(&p, &store, &rand(&[5, 3], 2), &rand(&[2, 3], 3), &rand(&[2, 3], 4)).unwrap();
        assert!(r.w_sharp.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.w_sharp.shape(), &[5, 2]);
    }

    #[test]
    fn identity_embeddings_give_scaled_squared_norm() {
        let c = 4;
        let (p, mut store) = setup(c, c, 1);
        for prm in store.iter_mut() {
            if prm.name.contains("theta") && prm.name.ends_with(".w") {
                prm.tensor = Tensor::identity(c);
            } else if prm.name.ends_with(".b") {
                prm.tensor = Tensor::zeros(prm.tensor.shape());
            }
        }
        // Nonnegative rows pass through the ReLU unchanged.
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 0.5, 3.0], vec![0.0, 1.0, 1.0, 0.0]]).unwrap();
        let r = attention_matrices(&p, &store, &x, &x, &x).unwrap();
        let want = (1.0 + 4.0 + 0.25 + 9.0) / 2.0;
        assert!((r.w_sharp.at(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_two_matmul_oracle() {
        let (p, store) = setup(3, 5, 7);
        let (xo, xs, xg) = (rand(&[6, 3], 1), rand(&[2, 3], 2), rand(&[2, 3], 3));
        let r = attention_matrices(&p, &store, &xo, &xs, &xg).unwrap();
        let s = 1.0 / 5f64.sqrt();
        for i in 0..6 {
            for j in 0..2 {
                let ws = dot(&mlp_row(&store, &p.theta_o, xo.row(i)), &mlp_row(&store, &p.theta_s, xs.row(j))) * s;
                let wg = dot(&mlp_row(&store, &p.phi_o, xo.row(i)), &mlp_row(&store, &p.phi_g, xg.row(j))) * s;
                assert!((r.w_sharp.at(i, j) - ws).abs() < 1e-10);
                assert!((r.w_gentle.at(i, j) - wg).abs() < 1e-10);
            }
        }
        assert!(matches!(
            attention_matrices(&p, &store, &xo, &xs, &rand(&[3, 3], 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn fresh_module_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let p = SgcamParams::new(&mut store, "a", 4, SgcamConfig::default(), 3).unwrap();
        let x = rand(&[8, 4], 5);
        let split = VariationSplit::from_scores((0..8).map(|i| i as f64).collect(), 2).unwrap();
        let z = fuse(&p, &store, &x, &split, &x).unwrap();
        for i in 0..8 {
            assert_eq!(&z.row(i)[..4], x.row(i));
            assert_eq!(&z.row(i)[4..], x.row(i));
        }
        let z = self_attention_fuse(&p, &store, &x).unwrap();
        assert_eq!(&z.row(3)[4..], x.row(3));
    }

    #[test]
    fn fuse_matches_loop_oracle() {
        let (p, store) = setup(3, 4, 11);
        let x = rand(&[8, 3], 12);
        let split = VariationSplit::from_scores(vec![0.3, 0.9, 0.1, 0.5, 0.8, 0.2, 0.05, 0.6], 2).unwrap();
        let z = fuse(&p, &store, &x, &split, &x).unwrap();
        let s = 0.5;
        for i in 0..8 {
            let mut ys = x.row(i).to_vec();
            let mut yg = x.row(i).to_vec();
            for (&js, &jg) in split.sharp_idx().iter().zip(split.gentle_idx()) {
                let ws = dot(&mlp_row(&store, &p.theta_o, x.row(i)), &mlp_row(&store, &p.theta_s, x.row(js))) * s;
                let wg = dot(&mlp_row(&store, &p.phi_o, x.row(i)), &mlp_row(&store, &p.phi_g, x.row(jg))) * s;
                let vs = mlp_row(&store, &p.psi_s, x.row(js));
                let vg = mlp_row(&store, &p.psi_g, x.row(jg));
                for c in 0..3 {
                    ys[c] += ws * vs[c];
                    yg[c] += wg * vg[c];
                }
            }
            for c in 0..3 {
                assert!((z.at(i, c) - ys[c]).abs() < 1e-10);
                assert!((z.at(i, 3 + c) - yg[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_component_point_adds_one_term() {
        let (p, store) = setup(2, 3, 4);
        let x = rand(&[2, 2], 8);
        let split = VariationSplit::from_scores(vec![1.0, 0.0], 1).unwrap();
        let z = fuse(&p, &store, &x, &split, &x).unwrap();
        let v = mlp_row(&store, &p.psi_s, x.row(0));
        for i in 0..2 {
            let w = dot(&mlp_row(&store, &p.theta_o, x.row(i)), &mlp_row(&store, &p.theta_s, x.row(0)))
                / 3f64.sqrt();
            for c in 0..2 {
                assert!((z.at(i, c) - (x.at(i, c) + w * v[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_equals_full_index_fuse() {
        let (p, store) = setup(3, 4, 5);
        let x = rand(&[6, 3], 6);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let xv = tape.constant(x.clone());
        let all: Vec<usize> = (0..6).collect();
        let full = fuse_indices(&tape, &bound, &p, xv, xv, Some(&all), Some(&all)).unwrap();
        let direct = self_attention_fuse(&p, &store, &x).unwrap();
        assert!(tape.value(full.z).max_abs_diff(&direct) < 1e-12);
        let one = rand(&[1, 3], 9);
        let z = self_attention_fuse(&p, &store, &one).unwrap();
        assert_eq!(z.shape(), &[1, 6]);
    }

    #[test]
    fn component_order_does_not_matter() {
        let (p, store) = setup(3, 4, 5);
        let x = rand(&[8, 3], 6);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let xv = tape.constant(x.clone());
        let a = fuse_indices(&tape, &bound, &p, xv, xv, Some(&[1, 4, 6]), None).unwrap();
        let b = fuse_indices(&tape, &bound, &p, xv, xv, Some(&[6, 1, 4]), None).unwrap();
        assert!(tape.value(a.z).max_abs_diff(&tape.value(b.z)) < 1e-12);
    }

    #[test]
    fn every_output_row_depends_on_every_component_row() {
        let (p, store) = setup(3, 4, 8);
        let x = rand(&[6, 3], 9);
        let split = VariationSplit::from_scores(vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0], 2).unwrap();
        for i in 0..6 {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let xo = tape.constant(x.clone());
            let feats = tape.param(x.clone());
            let out = fuse_vars(&tape, &bound, &p, xo, &split, feats).unwrap();
            let row = tape.gather_rows(out.z, &[i]).unwrap();
            let loss = tape.sum(row);
            let g = tape.backward(loss).unwrap();
            let g = g.get(feats).unwrap();
            for &j in split.sharp_idx().iter().chain(split.gentle_idx()) {
                assert!(g.row(j).iter().any(|v| v.abs() > 1e-12), "row {i} ignores component {j}");
            }
        }
    }

    #[test]
    fn fuse_gradients_cover_all_six_mlps() {
        let (p, store) = setup(3, 4, 21);
        let x = rand(&[8, 3], 22);
        let split = VariationSplit::from_scores(vec![0.3, 0.9, 0.1, 0.5, 0.8, 0.2, 0.05, 0.6], 2).unwrap();
        let weights = rand(&[8, 6], 23);
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|q| q.tensor.clone()));
        let r = check_gradients(
            &inputs,
            |tape, vars| {
                let bound = Bound::from_vars(vars[1..].to_vec());
                let out = fuse_vars(tape, &bound, &p, vars[0], &split, vars[0])?;
                let w = tape.constant(weights.clone());
                Ok(tape.sum(tape.mul(out.z, w)?))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        assert_eq!(r.checked, inputs.iter().map(|t| t.numel()).sum::<usize>());
    }

    #[test]
    fn row_softmax_normalizes() {
        let mut store = ParamStore::<f64>::new();
        let cfg = SgcamConfig {
            embed_dim: 4,
            row_softmax: true,
            ..SgcamConfig::default()
        };
        let p = SgcamParams::new(&mut store, "a", 3, cfg, 2).unwrap();
        let r = attention_matrices(&p, &store, &rand(&[5, 3], 1), &rand(&[3, 3], 2), &rand(&[3, 3], 3)).unwrap();
        for i in 0..5 {
            assert!((r.w_gentle.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn export_rows() {
        let (p, store) = setup(3, 4, 2);
        let r = attention_matrices(&p, &store, &rand(&[4, 3], 1), &rand(&[2, 3], 2), &rand(&[2, 3], 3)).unwrap();
        let (s, g) = export_attention(&r, 2).unwrap();
        assert_eq!(s, r.w_sharp.row(2));
        assert_eq!(g, r.w_gentle.row(2));
        assert!(matches!(export_attention(&r, 4), Err(Error::InvalidInput(_))));
        let zero = AttentionRecord {
            w_sharp: Tensor::<f32>::zeros(&[1, 3]),
            w_gentle: Tensor::zeros(&[1, 3]),
        };
        assert_eq!(export_attention(&zero, 0).unwrap(), (vec![0.0; 3], vec![0.0; 3]));
    }

    #[test]
    fn bad_split_is_rejected() {
        let (p, store) = setup(3, 4, 2);
        let x = rand(&[4, 3], 1);
        let split = VariationSplit::from_scores(vec![1.0; 6], 2).unwrap();
        assert!(matches!(fuse(&p, &store, &x, &split, &x), Err(Error::InvalidInput(_))));
    }
}
