use super::{init_params, Bound, InitScheme, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// Affine layer `y = x W + b` with `W: [in, out]`, applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.w"),
            init_params(&[in_dim, out_dim], weight_init, seed),
        )?;
        let bias = store.add(format!("{name}.b"), init_params(&[out_dim], InitScheme::Zeros, 0))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let xw = tape.matmul(x, bound.var(self.weight))?;
        tape.add(xw, bound.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// Pointwise MLP shared across rows: affine + ReLU on hidden layers, and
/// `last_activation` after the final affine layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    // (gamma, beta) per hidden layer when channel normalization is enabled.
    norms: Vec<(usize, usize)>,
    last_activation: Activation,
}

/// Construction options for [`Mlp::new`].
#[derive(Clone, Copy, Debug)]
pub struct MlpInit {
    pub zero_last: bool,
    pub last_activation: Activation,
    pub channel_norm: bool,
}

impl Default for MlpInit {
    fn default() -> Self {
        Self {
            zero_last: false,
            last_activation: Activation::None,
            channel_norm: false,
        }
    }
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        init: MlpInit,
        seed: u64,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("MLP `{name}` needs non-empty positive widths")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut norms = Vec::new();
        let mut prev = in_dim;
        for (l, &w) in widths.iter().enumerate() {
            let last = l + 1 == widths.len();
            let scheme = if last && init.zero_last {
                InitScheme::Zeros
            } else {
                InitScheme::KaimingUniform
            };
            let layer_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(l as u64 + 1);
            layers.push(Linear::new(store, &format!("{name}.{l}"), prev, w, scheme, layer_seed)?);
            if init.channel_norm && !last {
                let gamma = store.add(
                    format!("{name}.{l}.norm.gamma"),
                    super::Tensor::filled(&[w], T::one()),
                )?;
                let beta = store.add(format!("{name}.{l}.norm.beta"), super::Tensor::zeros(&[w]))?;
                norms.push((gamma, beta));
            }
            prev = w;
        }
        Ok(Self {
            layers,
            norms,
            last_activation: init.last_activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn last_activation(&self) -> Activation {
        self.last_activation
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let pre = self.layers[0].forward(tape, bound, x)?;
        self.forward_after_first(tape, bound, pre)
    }

    /// Continues from the pre-activation output of the first layer; used
    /// when a caller evaluates the first affine map in a factorized form.
    pub fn forward_after_first<T: Real>(&self, tape: &Tape<T>, bound: &Bound, pre: Var) -> Result<Var> {
        let mut h = self.activate(tape, bound, pre, 0)?;
        for l in 1..self.layers.len() {
            h = self.layers[l].forward(tape, bound, h)?;
            h = self.activate(tape, bound, h, l)?;
        }
        Ok(h)
    }

    /// Normalization and activation that follow affine layer `l`.
    pub fn activate<T: Real>(&self, tape: &Tape<T>, bound: &Bound, h: Var, l: usize) -> Result<Var> {
        let last = l + 1 == self.layers.len();
        if last {
            return Ok(match self.last_activation {
                Activation::None => h,
                Activation::Relu => tape.relu(h),
            });
        }
        let mut h = h;
        if let Some(&(gamma, beta)) = self.norms.get(l) {
            h = tape.channel_norm(h)?;
            h = tape.mul(h, bound.var(gamma))?;
            h = tape.add(h, bound.var(beta))?;
        }
        Ok(tape.relu(h))
    }
}

/// Applies `mlp` to the rows of `x`.
pub fn mlp_forward<T: Real>(tape: &Tape<T>, bound: &Bound, mlp: &Mlp, x: Var) -> Result<Var> {
    mlp.forward(tape, bound, x)
}
