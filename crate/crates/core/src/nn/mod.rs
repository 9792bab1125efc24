//! Small multilayer perceptrons with a reverse-mode tape, Adam, running input
//! normalization and a checkpoint container.

pub mod checkpoint;
pub mod norm;
pub mod optim;
pub mod tape;

use nalgebra::DMatrix;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use norm::RunningNorm;
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};

pub trait Real: nalgebra::RealField + Copy + Serialize + DeserializeOwned {}
impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tape already consumed by a backward pass")]
    TapeReused,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Elu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn f<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp() - T::one()
                }
            }
            Activation::Relu => x.max(T::zero()),
        }
    }

    #[inline]
    pub fn df<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    #[inline]
    pub fn d2f<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity | Activation::Relu => T::zero(),
            Activation::Tanh => {
                let t = x.tanh();
                let two: T = nalgebra::convert(2.0);
                -two * t * (T::one() - t * t)
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::zero()
                } else {
                    x.exp()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Layer<T: Real> {
    pub w: DMatrix<T>,
    /// Column vector (`out × 1`).
    pub b: DMatrix<T>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct NetParams<T: Real> {
    pub layers: Vec<Layer<T>>,
}

/// Tape handles of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub input: Var,
    /// `(W, b)` per layer.
    pub params: Vec<(Var, Var)>,
    /// Pre-activations per layer.
    pub pre: Vec<Var>,
    pub out: Var,
}

impl<T: Real> NetParams<T> {
    /// Uniform Glorot initialisation; the output layer is scaled by `out_gain`.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, output: Activation, out_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (i, o) = (sizes[k], sizes[k + 1]);
                let mut lim = (6.0 / (i + o) as f64).sqrt();
                if k + 1 == n {
                    lim *= out_gain;
                }
                Layer {
                    w: DMatrix::from_fn(o, i, |_, _| nalgebra::convert(rng.random_range(-lim..=lim))),
                    b: DMatrix::zeros(o, 1),
                    act: if k + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize], acts: &[Activation]) -> Self {
        assert_eq!(acts.len() + 1, sizes.len());
        Self {
            layers: acts
                .iter()
                .enumerate()
                .map(|(k, a)| Layer {
                    w: DMatrix::zeros(sizes[k + 1], sizes[k]),
                    b: DMatrix::zeros(sizes[k + 1], 1),
                    act: *a,
                })
                .collect(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.n_in()];
        s.extend(self.layers.iter().map(|l| l.w.nrows()));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Consecutive layer shapes compose and every parameter is finite.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Shape("no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.b.nrows() != l.w.nrows() || l.b.ncols() != 1 {
                return Err(NnError::Shape(format!("layer {k}: bias does not match weight rows")));
            }
            if k > 0 && self.layers[k - 1].w.nrows() != l.w.ncols() {
                return Err(NnError::Shape(format!("layer {k}: input width does not match previous output")));
            }
            if l.w.iter().chain(l.b.iter()).any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite("parameter"));
            }
        }
        Ok(())
    }

    /// Batched evaluation without recording (`x` is features × batch).
    pub fn eval(&self, x: &DMatrix<T>) -> Result<DMatrix<T>, NnError> {
        if x.nrows() != self.n_in() {
            return Err(NnError::Shape(format!("input has {} rows, net expects {}", x.nrows(), self.n_in())));
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = &l.w * &h;
            for mut c in z.column_iter_mut() {
                c += l.b.column(0);
            }
            z.apply(|v| *v = l.act.f(*v));
            h = z;
        }
        Ok(h)
    }

    /// Records the forward pass; parameter tensors get ids `id0 + 2k` (W) and
    /// `id0 + 2k + 1` (b).
    pub fn record(&self, tape: &mut Tape<T>, x: Var, id0: usize) -> Result<NetVars, NnError> {
        let mut h = x;
        let mut params = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let w = tape.param(id0 + 2 * k, &l.w);
            let b = tape.param(id0 + 2 * k + 1, &l.b);
            let z = tape.linear(w, b, h)?;
            params.push((w, b));
            pre.push(z);
            h = match l.act {
                Activation::Identity => z,
                a => tape.act(a, z),
            };
        }
        Ok(NetVars {
            input: x,
            params,
            pre,
            out: h,
        })
    }

    /// Records `∂(Σ_rows seed ⊙ y)/∂x` as differentiable tape ops.
    pub fn record_input_gradient(&self, tape: &mut Tape<T>, vars: &NetVars, seed: Var) -> Result<Var, NnError> {
        let mut g = seed;
        for (k, l) in self.layers.iter().enumerate().rev() {
            let gz = match l.act {
                Activation::Identity => g,
                a => {
                    let d = tape.act_deriv(a, vars.pre[k]);
                    tape.mul(d, g)?
                }
            };
            g = tape.mat_t_mul(vars.params[k].0, gz)?;
        }
        Ok(g)
    }

    /// Parameter gradients in tensor order (`W0, b0, W1, ...`), zero where the
    /// output did not depend on a tensor.
    pub fn collect_grads(&self, g: &Gradients<T>, id0: usize) -> Vec<DMatrix<T>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            out.push(g.param(id0 + 2 * k).cloned().unwrap_or_else(|| DMatrix::zeros(l.w.nrows(), l.w.ncols())));
            out.push(g.param(id0 + 2 * k + 1).cloned().unwrap_or_else(|| DMatrix::zeros(l.b.nrows(), 1)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn tensors(&self) -> Vec<&DMatrix<T>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }
}

/// One recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T: Real> {
    pub y: DMatrix<T>,
    pub tape: Tape<T>,
    pub vars: NetVars,
}

#[derive(Debug, Clone)]
pub struct NetGrads<T: Real> {
    /// `W0, b0, W1, b1, ...`
    pub params: Vec<DMatrix<T>>,
    pub input: DMatrix<T>,
}

pub fn forward<T: Real>(net: &NetParams<T>, x: &DMatrix<T>) -> Result<Forward<T>, NnError> {
    if x.nrows() != net.n_in() {
        return Err(NnError::Shape(format!("input has {} rows, net expects {}", x.nrows(), net.n_in())));
    }
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let vars = net.record(&mut tape, xi, 0)?;
    Ok(Forward {
        y: tape.value(vars.out).clone(),
        tape,
        vars,
    })
}

/// Gradients of `⟨dy, y⟩` with respect to every parameter and the input.
pub fn backward<T: Real>(net: &NetParams<T>, pass: &mut Forward<T>, dy: &DMatrix<T>) -> Result<NetGrads<T>, NnError> {
    let g = pass.tape.backward(pass.vars.out, dy.clone())?;
    let x = pass.tape.value(pass.vars.input);
    Ok(NetGrads {
        params: net.collect_grads(&g, 0),
        input: g.wrt(pass.vars.input).cloned().unwrap_or_else(|| DMatrix::zeros(x.nrows(), x.ncols())),
    })
}

/// `‖∂y/∂x‖₂` per column for a single-output net.
pub fn input_gradient_norm<T: Real>(net: &NetParams<T>, x: &DMatrix<T>) -> Result<Vec<T>, NnError> {
    if net.n_out() != 1 {
        return Err(NnError::Shape(format!("input gradient norm needs one output, net has {}", net.n_out())));
    }
    let mut pass = forward(net, x)?;
    let ones = DMatrix::from_element(1, x.ncols(), T::one());
    let g = backward(net, &mut pass, &ones)?;
    Ok(g.input.column_iter().map(|c| c.norm()).collect())
}

#[cfg(test)]
mod tests;
