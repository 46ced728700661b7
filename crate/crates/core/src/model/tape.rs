//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output matrix. [`Tape::backward`] walks the nodes in reverse and
//! accumulates parameter gradients. Row vectors are `1 x n` matrices.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::{ModelError, ModelParams, ParamGrads, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Compressed adjacency over the rows of a node matrix.
#[derive(Debug, Clone, Default)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<u32>,
}

impl Csr {
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn neighbors_of(&self, v: usize) -> &[u32] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }
}

enum Op {
    Param(ParamId),
    Input,
    /// `x w^T (+ b)`
    Linear { x: Var, w: Var, b: Option<Var> },
    AddBias { x: Var, b: Var },
    Gather { x: Var, rows: Rc<[u32]> },
    NeighborMean { x: Var, adj: Rc<Csr> },
    SegmentMean { x: Var, offsets: Rc<[usize]> },
    Add(Var, Var),
    Mul(Var, Var),
    Mask { x: Var, mask: Array2<f64> },
    PRelu { x: Var, slope: Var },
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    NormalizeRows { x: Var, norms: Vec<f64> },
    /// Scalar loss whose gradient w.r.t. `x` was computed in the forward pass.
    Loss { x: Var, grad: Array2<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.tensors.len()],
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0] {
            Node {
                value: Some(a), ..
            } => a.view(),
            Node {
                op: Op::Param(id), ..
            } => self.params.tensors[id.0].view(),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; one node per parameter per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut y = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            y += &self.value(b);
        }
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let y = &self.value(x) + &self.value(b);
        self.push(y, Op::AddBias { x, b })
    }

    pub fn gather(&mut self, x: Var, rows: Rc<[u32]>) -> Var {
        let src = self.value(x);
        let mut y = Array2::zeros((rows.len(), src.ncols()));
        for (mut out, &r) in y.rows_mut().into_iter().zip(rows.iter()) {
            out.assign(&src.row(r as usize));
        }
        self.push(y, Op::Gather { x, rows })
    }

    /// Row `v` of the output is the mean of the rows of `x` adjacent to `v`,
    /// or zero for isolated rows.
    pub fn neighbor_mean(&mut self, x: Var, adj: Rc<Csr>) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows(), adj.rows());
        let mut y = Array2::zeros(src.raw_dim());
        for (v, mut out) in y.rows_mut().into_iter().enumerate() {
            let nb = adj.neighbors_of(v);
            if nb.is_empty() {
                continue;
            }
            for &u in nb {
                out += &src.row(u as usize);
            }
            out /= nb.len() as f64;
        }
        self.push(y, Op::NeighborMean { x, adj })
    }

    /// Mean of each row segment `offsets[g]..offsets[g + 1]`.
    pub fn segment_mean(&mut self, x: Var, offsets: Rc<[usize]>) -> Var {
        let src = self.value(x);
        let groups = offsets.len() - 1;
        let mut y = Array2::zeros((groups, src.ncols()));
        for (g, mut out) in y.rows_mut().into_iter().enumerate() {
            let seg = src.slice(s![offsets[g]..offsets[g + 1], ..]);
            out.assign(&seg.mean_axis(Axis(0)).expect("nonempty segment"));
        }
        self.push(y, Op::SegmentMean { x, offsets })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.value(a) + &self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = &self.value(a) * &self.value(b);
        self.push(y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mask(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let y = &self.value(x) * &mask;
        self.push(y, Op::Mask { x, mask })
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere; `slope` is a `1 x 1` node.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let a = self.scalar(slope);
        let y = self.value(x).mapv(|v| if v >= 0.0 { v } else { a * v });
        self.push(y, Op::PRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(y, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(y, Op::ConcatRows(parts))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, ModelError> {
        let src = self.value(x);
        let mut y = src.to_owned();
        let mut norms = Vec::with_capacity(y.nrows());
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(ModelError::Loss(crate::losses::LossError::ZeroNorm(i)));
            }
            row /= n;
            norms.push(n);
        }
        Ok(self.push(y, Op::NormalizeRows { x, norms }))
    }

    /// Records a scalar loss of `x` with a precomputed gradient.
    pub fn loss(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        debug_assert_eq!(grad.dim(), self.value(x).dim());
        self.push(Array2::from_elem((1, 1), value), Op::Loss { x, grad })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms))
    }

    /// Gradients of the scalar `root` w.r.t. every parameter.
    pub fn backward(&self, root: Var) -> Result<ParamGrads, ModelError> {
        let mut grads = ParamGrads::zeros_like(self.params);
        self.backward_into(root, 1.0, &mut grads)?;
        grads.check_finite(self.params)?;
        Ok(grads)
    }

    /// Adds `scale * d(root)/d(param)` into `out`.
    pub fn backward_into(&self, root: Var, scale: f64, out: &mut ParamGrads) -> Result<(), ModelError> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), scale));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(id) => out.tensors[id.0] += &g,
                Op::Input => {}
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    acc(&mut grads, *x, g.dot(&wv));
                    acc(&mut grads, *w, g.t().dot(&self.value(*x)));
                    if let Some(b) = b {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::AddBias { x, b } => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g);
                }
                Op::Gather { x, rows } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    for (gr, &r) in g.rows().into_iter().zip(rows.iter()) {
                        let mut target = dx.row_mut(r as usize);
                        target += &gr;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::NeighborMean { x, adj } => {
                    let mut dx = Array2::zeros(g.raw_dim());
                    for v in 0..adj.rows() {
                        let nb = adj.neighbors_of(v);
                        if nb.is_empty() {
                            continue;
                        }
                        let share = &g.row(v) / nb.len() as f64;
                        for &u in nb {
                            let mut target = dx.row_mut(u as usize);
                            target += &share;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SegmentMean { x, offsets } => {
                    let mut dx = Array2::zeros((offsets[offsets.len() - 1], g.ncols()));
                    for gi in 0..offsets.len() - 1 {
                        let len = (offsets[gi + 1] - offsets[gi]) as f64;
                        let share = &g.row(gi) / len;
                        for r in offsets[gi]..offsets[gi + 1] {
                            dx.row_mut(r).assign(&share);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * &self.value(*b));
                    acc(&mut grads, *b, &g * &self.value(*a));
                }
                Op::Mask { x, mask } => acc(&mut grads, *x, &g * mask),
                Op::PRelu { x, slope } => {
                    let a = self.scalar(*slope);
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    let mut da = 0.0;
                    Zip::from(&mut dx).and(&xv).and(&g).for_each(|d, &xi, &gi| {
                        if xi < 0.0 {
                            *d = a * gi;
                            da += gi * xi;
                        }
                    });
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *slope, Array2::from_elem((1, 1), da));
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                    acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    // d(x/|x|) = (g - y (y . g)) / |x|
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut dx = g;
                    for ((mut d, yr), &n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let proj = yr.dot(&d);
                        d.scaled_add(-proj, &yr);
                        d /= n;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Loss { x, grad } => acc(&mut grads, *x, grad * g[[0, 0]]),
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut grads, v, Array2::from_elem((1, 1), w * g[[0, 0]]));
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
