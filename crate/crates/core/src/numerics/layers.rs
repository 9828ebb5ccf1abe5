//! Layer primitives built on the tape.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{bail, Result};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

/// Affine map over the last axis: `input[.., in] x weight[in, out] + bias[out]`.
pub fn dense<T: Real>(g: &Graph<T>, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let h = g.matmul(input, weight)?;
    g.add_bias(h, bias)
}

pub fn layer_norm<T: Real>(g: &Graph<T>, input: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
    g.layer_norm(input, gain, bias, eps)
}

/// Softmax of `logits / temperature` over the last axis.
pub fn softmax_t<T: Real>(g: &Graph<T>, logits: Var, temperature: T) -> Result<Var> {
    g.softmax(logits, temperature)
}

/// Inverted dropout; identity when `rate == 0`.
pub fn dropout<T: Real, R: Rng>(g: &Graph<T>, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        bail!(Parameter, "dropout rate must be in [0, 1), got {}", rate);
    }
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let shape = g.shape(x);
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform_tensor<T: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Parameter ids of a dense layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseIds {
    /// Glorot-uniform weight, zero bias.
    pub fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        DenseIds {
            weight: store.add(format!("{name}.weight"), uniform_tensor(&[inputs, outputs], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(DenseIds { weight: require(store, &format!("{name}.weight"))?, bias: require(store, &format!("{name}.bias"))? })
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        dense(g, x, p.var(self.weight), p.var(self.bias))
    }
}

/// Parameter ids of a layer normalisation.
#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormIds {
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        NormIds {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(NormIds { gain: require(store, &format!("{name}.gain"))?, bias: require(store, &format!("{name}.bias"))? })
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), T::lit(LAYER_NORM_EPS))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn require<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    match store.find(name) {
        Some(id) => Ok(id),
        None => bail!(Config, "missing parameter block '{}'", name),
    }
}

/// Gated recurrent unit parameters.
///
/// Gate columns are ordered update, reset, candidate. `input` is
/// `[in, 3 * units]`, `recurrent_gates` is `[units, 2 * units]` (update and
/// reset), `recurrent_candidate` is `[units, units]`, `bias` is `[3 * units]`.
///
/// ```text
/// u  = sigmoid(x W_u + h U_u + b_u)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// c  = tanh(x W_c + (r * h) U_c + b_c)
/// h' = u * h + (1 - u) * c
/// ```
#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub input: ParamId,
    pub recurrent_gates: ParamId,
    pub recurrent_candidate: ParamId,
    pub bias: ParamId,
    pub units: usize,
}

impl GruIds {
    /// Weights uniform in `±1/sqrt(units)`, zero bias.
    pub fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, inputs: usize, units: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (units as f64).sqrt();
        GruIds {
            input: store.add(format!("{name}.input"), uniform_tensor(&[inputs, 3 * units], bound, rng)),
            recurrent_gates: store.add(format!("{name}.recurrent_gates"), uniform_tensor(&[units, 2 * units], bound, rng)),
            recurrent_candidate: store.add(format!("{name}.recurrent_candidate"), uniform_tensor(&[units, units], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[3 * units])),
            units,
        }
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let input = require(store, &format!("{name}.input"))?;
        let units = store.get(input).shape()[1] / 3;
        Ok(GruIds {
            input,
            recurrent_gates: require(store, &format!("{name}.recurrent_gates"))?,
            recurrent_candidate: require(store, &format!("{name}.recurrent_candidate"))?,
            bias: require(store, &format!("{name}.bias"))?,
            units,
        })
    }
}

/// Runs a GRU left to right over `inputs: [batch, steps, in]` (or `[steps, in]`)
/// from hidden state `h0: [batch, units]` (or `[units]`).
///
/// Returns the hidden state at every step, shaped like the input with the
/// feature axis replaced by `units`.
pub fn gru_sequence<T: Real>(g: &Graph<T>, inputs: Var, p: &Bound, ids: &GruIds, h0: Var) -> Result<Var> {
    let shape = g.shape(inputs);
    let (batch, steps, features, unbatched) = match shape.as_slice() {
        [t, f] => (1, *t, *f, true),
        [b, t, f] => (*b, *t, *f, false),
        _ => bail!(Dimension, "gru input must be [steps, in] or [batch, steps, in], got {:?}", shape),
    };
    if steps == 0 {
        bail!(Dimension, "gru over an empty sequence");
    }
    if !g.data(inputs).iter().all(|x| x.is_finite()) {
        bail!(Numeric, "non-finite gru input");
    }
    let units = ids.units;
    let h0_shape = g.shape(h0);
    if h0_shape.iter().product::<usize>() != batch * units {
        bail!(Dimension, "h0 of shape {:?} for batch {} and {} units", h0_shape, batch, units);
    }
    let x = g.reshape(inputs, &[batch, steps, features])?;
    let projected = dense(g, x, p.var(ids.input), p.var(ids.bias))?;
    let mut h = g.reshape(h0, &[batch, units])?;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.slice(projected, 1, t, 1)?;
        let xt = g.reshape(xt, &[batch, 3 * units])?;
        let hg = g.matmul(h, p.var(ids.recurrent_gates))?;
        let u = g.sigmoid(g.add(g.slice(xt, 1, 0, units)?, g.slice(hg, 1, 0, units)?)?);
        let r = g.sigmoid(g.add(g.slice(xt, 1, units, units)?, g.slice(hg, 1, units, units)?)?);
        let rh = g.matmul(g.mul(r, h)?, p.var(ids.recurrent_candidate))?;
        let c = g.tanh(g.add(g.slice(xt, 1, 2 * units, units)?, rh)?);
        // h' = c + u * (h - c)
        h = g.add(c, g.mul(u, g.sub(h, c)?)?)?;
        outputs.push(g.reshape(h, &[batch, 1, units])?);
    }
    let out = g.concat(&outputs, 1)?;
    if unbatched {
        g.reshape(out, &[steps, units])
    } else {
        Ok(out)
    }
}
