//! Reverse-mode tape over batched matrices (features × batch).
//!
//! Every recorded op is itself differentiable, including `ActDeriv`, so a
//! graph that already contains an input gradient can be differentiated again.

use nalgebra::DMatrix;

use super::{Activation, NnError, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(usize),
    /// `W x + b` with `b` broadcast over columns.
    Linear(Var, Var, Var),
    /// `Wᵀ y`.
    MatTMul(Var, Var),
    Act(Activation, Var),
    ActDeriv(Activation, Var),
    Mul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    /// Column sums, `1 × batch`.
    SumRows(Var),
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: DMatrix<T>,
    op: Op<T>,
}

#[derive(Debug, Clone)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    used: bool,
}

/// Adjoints of one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    nodes: Vec<Option<DMatrix<T>>>,
    params: Vec<(usize, DMatrix<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of a node, `None` when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&DMatrix<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Accumulated gradient of parameter tensor `id`.
    pub fn param(&self, id: usize) -> Option<&DMatrix<T>> {
        self.params.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(usize, DMatrix<T>)] {
        &self.params
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(slot: &mut Option<DMatrix<T>>, g: DMatrix<T>) {
    match slot {
        Some(s) => *s += g,
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            used: false,
        }
    }

    fn push(&mut self, value: DMatrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: DMatrix<T>) -> Var {
        self.push(m, Op::Input)
    }

    /// Records parameter tensor `id` with its current value.
    pub fn param(&mut self, id: usize, m: &DMatrix<T>) -> Var {
        self.push(m.clone(), Op::Param(id))
    }

    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var, NnError> {
        let (wm, bm, xm) = (self.value(w), self.value(b), self.value(x));
        if wm.ncols() != xm.nrows() || bm.nrows() != wm.nrows() || bm.ncols() != 1 {
            return Err(NnError::Shape(format!(
                "linear: W {}x{}, b {}x{}, x {}x{}",
                wm.nrows(),
                wm.ncols(),
                bm.nrows(),
                bm.ncols(),
                xm.nrows(),
                xm.ncols()
            )));
        }
        let mut y = wm * xm;
        for mut c in y.column_iter_mut() {
            c += bm.column(0);
        }
        Ok(self.push(y, Op::Linear(w, b, x)))
    }

    pub fn mat_t_mul(&mut self, w: Var, y: Var) -> Result<Var, NnError> {
        let (wm, ym) = (self.value(w), self.value(y));
        if wm.nrows() != ym.nrows() {
            return Err(NnError::Shape(format!("WᵀY: W {} rows, Y {} rows", wm.nrows(), ym.nrows())));
        }
        let v = wm.tr_mul(ym);
        Ok(self.push(v, Op::MatTMul(w, y)))
    }

    pub fn act(&mut self, k: Activation, x: Var) -> Var {
        let v = self.value(x).map(|z| k.f(z));
        self.push(v, Op::Act(k, x))
    }

    pub fn act_deriv(&mut self, k: Activation, x: Var) -> Var {
        let v = self.value(x).map(|z| k.df(z));
        self.push(v, Op::ActDeriv(k, x))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(NnError::Shape(format!("{what}: {:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).component_mul(self.value(b));
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n: T = nalgebra::convert(m.len() as f64);
        let v = DMatrix::from_element(1, 1, m.sum() / n);
        self.push(v, Op::Mean(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sum();
        let v = DMatrix::from_row_slice(1, v.len(), v.as_slice());
        self.push(v, Op::SumRows(a))
    }

    /// Reverse pass seeded with `seed` at `out`. A tape supports one pass.
    pub fn backward(&mut self, out: Var, seed: DMatrix<T>) -> Result<Gradients<T>, NnError> {
        if self.used {
            return Err(NnError::TapeReused);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(NnError::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        self.used = true;
        let mut adj: Vec<Option<DMatrix<T>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(seed);
        let mut params: Vec<(usize, DMatrix<T>)> = Vec::new();
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => *acc += &g,
                    None => params.push((*id, g)),
                },
                Op::Linear(w, b, x) => {
                    let (wv, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                    accumulate(&mut adj[w.0], &g * xv.transpose());
                    let gb = g.column_sum();
                    accumulate(&mut adj[b.0], DMatrix::from_column_slice(gb.len(), 1, gb.as_slice()));
                    accumulate(&mut adj[x.0], wv.tr_mul(&g));
                }
                Op::MatTMul(w, y) => {
                    let (wv, yv) = (&self.nodes[w.0].value, &self.nodes[y.0].value);
                    accumulate(&mut adj[w.0], yv * g.transpose());
                    accumulate(&mut adj[y.0], wv * &g);
                }
                Op::Act(k, x) => {
                    let d = self.nodes[x.0].value.map(|z| k.df(z));
                    accumulate(&mut adj[x.0], d.component_mul(&g));
                }
                Op::ActDeriv(k, x) => {
                    let d = self.nodes[x.0].value.map(|z| k.d2f(z));
                    accumulate(&mut adj[x.0], d.component_mul(&g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = bv.component_mul(&g);
                    let gb = av.component_mul(&g);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], -g);
                }
                Op::Scale(a, c) => accumulate(&mut adj[a.0], g * *c),
                Op::AddScalar(a) => accumulate(&mut adj[a.0], g),
                Op::Square(a) => {
                    let two: T = nalgebra::convert(2.0);
                    let d = self.nodes[a.0].value.component_mul(&g) * two;
                    accumulate(&mut adj[a.0], d);
                }
                Op::Sum(a) => {
                    let s = &self.nodes[a.0].value;
                    accumulate(&mut adj[a.0], DMatrix::from_element(s.nrows(), s.ncols(), g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let s = &self.nodes[a.0].value;
                    let n: T = nalgebra::convert(s.len() as f64);
                    accumulate(&mut adj[a.0], DMatrix::from_element(s.nrows(), s.ncols(), g[(0, 0)] / n));
                }
                Op::SumRows(a) => {
                    let s = &self.nodes[a.0].value;
                    let d = DMatrix::from_fn(s.nrows(), s.ncols(), |_, c| g[(0, c)]);
                    accumulate(&mut adj[a.0], d);
                }
            }
        }
        for (_, g) in &params {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite("parameter gradient"));
            }
        }
        params.sort_by_key(|(i, _)| *i);
        Ok(Gradients { nodes: adj, params })
    }
}
