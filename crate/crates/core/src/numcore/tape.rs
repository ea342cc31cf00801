//! Define-by-run reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op computes its
//! value eagerly and records how to push gradients back to its inputs.
//! Sequences from several samples can be packed side by side along the
//! column (frame) axis; [`Segments`] tells the time-aware ops where one
//! sample ends and the next begins.

use std::borrow::Cow;
use std::rc::Rc;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Column layout of a packed batch: `(start, len)` per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    spans: Vec<(usize, usize)>,
    total: usize,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &len in lengths {
            spans.push((at, len));
            at += len;
        }
        Self { spans, total: at }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn count(&self) -> usize {
        self.spans.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

enum Op {
    Const,
    Param { offset: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddCol(Var, Var),
    Broadcast(Var, Rc<Segments>),
    SegMean(Var, Rc<Segments>),
    Unfold(Var, usize, Rc<Segments>),
    VCat(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    MaskedMse {
        pred: Var,
        target: Rc<Matrix>,
        cols: Rc<[bool]>,
        count: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    label: Cow<'static, str>,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, label: impl Into<Cow<'static, str>>) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            label: label.into(),
        });
        Var(idx)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn label(&self, v: Var) -> &str {
        &self.nodes[v.0].label
    }

    /// Rename a node; the label shows up in non-finite errors.
    pub fn name(&mut self, v: Var, label: impl Into<Cow<'static, str>>) -> Var {
        self.nodes[v.0].label = label.into();
        v
    }

    /// Fails with the label of the first node whose value was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(i) => Err(Error::NonFinite(format!(
                "node #{i} `{}`",
                self.nodes[i].label
            ))),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, "const")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let info = store.info(id);
        let offset = info.offset;
        let label = info.name.clone();
        self.push(store.matrix(id), Op::Param { offset }, label)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k), "scale")
    }

    /// `x + b` with the column vector `b` added to every column.
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.cols(), 1, "add_col expects a column vector");
        assert_eq!(bv.rows(), xv.rows(), "add_col row mismatch");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let br = bv.get(r, 0);
            v.row_mut(r).iter_mut().for_each(|e| *e += br);
        }
        self.push(v, Op::AddCol(x, b), "add_col")
    }

    /// Repeat column `s` of an `R×S` matrix across every frame of segment `s`.
    pub fn broadcast(&mut self, x: Var, segs: &Rc<Segments>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), segs.count(), "broadcast expects one column per segment");
        let mut v = Matrix::zeros(xv.rows(), segs.total());
        for r in 0..xv.rows() {
            let row = v.row_mut(r);
            for (s, &(start, len)) in segs.spans().iter().enumerate() {
                row[start..start + len].fill(xv.get(r, s));
            }
        }
        self.push(v, Op::Broadcast(x, segs.clone()), "broadcast")
    }

    /// Per-segment mean over frames: `R×total → R×S`.
    pub fn seg_mean(&mut self, x: Var, segs: &Rc<Segments>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), segs.total(), "seg_mean column mismatch");
        let mut v = Matrix::zeros(xv.rows(), segs.count());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            for (s, &(start, len)) in segs.spans().iter().enumerate() {
                let m = row[start..start + len].iter().sum::<f64>() / len.max(1) as f64;
                v.set(r, s, m);
            }
        }
        self.push(v, Op::SegMean(x, segs.clone()), "seg_mean")
    }

    /// Temporal im2col: row block `k` holds `x` shifted by `k - (width-1)/2`
    /// frames, zero outside the owning segment. `R×total → (R·width)×total`.
    pub fn unfold(&mut self, x: Var, width: usize, segs: &Rc<Segments>) -> Var {
        assert!(width >= 1);
        let xv = self.value(x);
        assert_eq!(xv.cols(), segs.total(), "unfold column mismatch");
        let rows = xv.rows();
        let half = (width - 1) / 2;
        let mut v = Matrix::zeros(rows * width, segs.total());
        for k in 0..width {
            let shift = k as isize - half as isize;
            for r in 0..rows {
                let src = xv.row(r);
                let dst = v.row_mut(k * rows + r);
                for &(start, len) in segs.spans() {
                    for j in 0..len {
                        let i = j as isize + shift;
                        if i >= 0 && (i as usize) < len {
                            dst[start + j] = src[start + i as usize];
                        }
                    }
                }
            }
        }
        self.push(v, Op::Unfold(x, width, segs.clone()), "unfold")
    }

    /// Stack along rows.
    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vcat(&mats);
        self.push(v, Op::VCat(parts.to_vec()), "vcat")
    }

    /// Columns of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: Rc<[usize]>) -> Var {
        let tv = self.value(table);
        let mut v = Matrix::zeros(tv.rows(), ids.len());
        for r in 0..tv.rows() {
            let src = tv.row(r);
            let dst = v.row_mut(r);
            for (j, &id) in ids.iter().enumerate() {
                dst[j] = src[id];
            }
        }
        self.push(v, Op::Gather(table, ids), "gather")
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu);
        self.push(v, Op::Silu(x), "silu")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), "tanh")
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x), "square")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    /// Mean of `(pred - target)²` over entries in columns flagged `true`.
    pub fn masked_mse(&mut self, pred: Var, target: Rc<Matrix>, cols: Rc<[bool]>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "masked_mse prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        if cols.len() != pv.cols() {
            return Err(Error::shape(format!(
                "masked_mse mask length {} vs {} columns",
                cols.len(),
                pv.cols()
            )));
        }
        let n_cols = cols.iter().filter(|&&c| c).count();
        if n_cols == 0 {
            return Err(Error::empty("masked_mse has no masked columns"));
        }
        let count = n_cols * pv.rows();
        let mut acc = 0.0;
        for r in 0..pv.rows() {
            let (p, t) = (pv.row(r), target.row(r));
            for c in 0..pv.cols() {
                if cols[c] {
                    let d = p[c] - t[c];
                    acc += d * d;
                }
            }
        }
        let v = Matrix::scalar(acc / count as f64);
        Ok(self.push(
            v,
            Op::MaskedMse {
                pred,
                target,
                cols,
                count,
            },
            "masked_mse",
        ))
    }

    /// Reverse pass from a scalar `root`. Overwrites `store`'s gradient buffer
    /// with d(root)/d(param) and returns the root value.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<f64> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        self.check_finite()?;
        store.zero_grads();
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    let dst = &mut store.grads_mut()[*offset..*offset + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.as_slice()) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, av.shape());
                    g.matmul_nt_acc(bv, ga);
                    let gb = slot(&mut grads, *b, bv.shape());
                    av.matmul_tn_acc(&g, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g.map(|x| k * x)),
                Op::AddCol(x, b) => {
                    acc(&mut grads, *x, &g);
                    let gb = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                    acc(&mut grads, *b, &gb);
                }
                Op::Broadcast(x, segs) => {
                    let xs = self.value(*x).shape();
                    let gx = slot(&mut grads, *x, xs);
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        for (s, &(start, len)) in segs.spans().iter().enumerate() {
                            *gx.at_mut(r, s) += row[start..start + len].iter().sum::<f64>();
                        }
                    }
                }
                Op::SegMean(x, segs) => {
                    let xs = self.value(*x).shape();
                    let gx = slot(&mut grads, *x, xs);
                    for r in 0..g.rows() {
                        let dst = gx.row_mut(r);
                        for (s, &(start, len)) in segs.spans().iter().enumerate() {
                            let share = g.get(r, s) / len.max(1) as f64;
                            dst[start..start + len].iter_mut().for_each(|d| *d += share);
                        }
                    }
                }
                Op::Unfold(x, width, segs) => {
                    let xs = self.value(*x).shape();
                    let rows = xs.0;
                    let half = (width - 1) / 2;
                    let gx = slot(&mut grads, *x, xs);
                    for k in 0..*width {
                        let shift = k as isize - half as isize;
                        for r in 0..rows {
                            let src = g.row(k * rows + r);
                            let dst = gx.row_mut(r);
                            for &(start, len) in segs.spans() {
                                for j in 0..len {
                                    let i = j as isize + shift;
                                    if i >= 0 && (i as usize) < len {
                                        dst[start + i as usize] += src[start + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::VCat(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let ps = self.value(*p).shape();
                        let gp = slot(&mut grads, *p, ps);
                        for r in 0..ps.0 {
                            for (d, s) in gp.row_mut(r).iter_mut().zip(g.row(row + r)) {
                                *d += s;
                            }
                        }
                        row += ps.0;
                    }
                }
                Op::Gather(table, ids) => {
                    let ts = self.value(*table).shape();
                    let gt = slot(&mut grads, *table, ts);
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        let dst = gt.row_mut(r);
                        for (j, &id) in ids.iter().enumerate() {
                            dst[id] += src[j];
                        }
                    }
                }
                Op::Silu(x) => {
                    let gx = g.zip_map(self.value(*x), |gi, xi| gi * silu_grad(xi));
                    acc(&mut grads, *x, &gx);
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |gi, yi| gi * (1.0 - yi * yi));
                    acc(&mut grads, *x, &gx);
                }
                Op::Square(x) => {
                    let gx = g.zip_map(self.value(*x), |gi, xi| 2.0 * gi * xi);
                    acc(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let xs = self.value(*x).shape();
                    acc(&mut grads, *x, &Matrix::filled(xs.0, xs.1, g.get(0, 0)));
                }
                Op::MaskedMse {
                    pred,
                    target,
                    cols,
                    count,
                } => {
                    let pv = self.value(*pred);
                    let k = 2.0 * g.get(0, 0) / *count as f64;
                    let gp = slot(&mut grads, *pred, pv.shape());
                    for r in 0..pv.rows() {
                        let (p, t) = (pv.row(r), target.row(r));
                        let dst = gp.row_mut(r);
                        for c in 0..pv.cols() {
                            if cols[c] {
                                dst[c] += k * (p[c] - t[c]);
                            }
                        }
                    }
                }
            }
        }
        Ok(rv.get(0, 0))
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        empty => *empty = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("theta", &[1], vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let th = tape.param(&store, id);
        let sq = tape.square(th);
        let root = tape.sum(sq);
        let val = tape.backward(root, &mut store).unwrap();
        assert_eq!(val, 9.0);
        assert_eq!(store.grads(), &[6.0]);
    }

    #[test]
    fn linear_gradient_is_coefficients() {
        let c = vec![1.5, -2.0, 0.25, 4.0];
        for theta in [vec![0.0; 4], vec![1.0, -3.0, 2.0, 7.5]] {
            let mut store = ParamStore::new();
            let id = store.register("theta", &[4, 1], theta).unwrap();
            let mut tape = Tape::new();
            let cv = tape.constant(Matrix::from_vec(1, 4, c.clone()));
            let th = tape.param(&store, id);
            let root = tape.matmul(cv, th);
            tape.backward(root, &mut store).unwrap();
            assert_eq!(store.grads(), c.as_slice());
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut store = ParamStore::new();
        let id = store.register("w", &[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let err = tape.backward(w, &mut store).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot { rows: 2, cols: 1 }));
    }

    #[test]
    fn nan_reports_first_offending_node() {
        let mut store = ParamStore::new();
        let id = store.register("w", &[1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let bad = tape.constant(Matrix::scalar(f64::NAN));
        let bad = tape.name(bad, "poisoned_input");
        let y = tape.mul(w, bad);
        let root = tape.sum(y);
        match tape.backward(root, &mut store) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("poisoned_input"), "{msg}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn reused_param_accumulates() {
        // f = w·w + 3w  → 2w + 3
        let mut store = ParamStore::new();
        let id = store.register("w", &[1], vec![2.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let w2 = tape.mul(w, w);
        let w3 = tape.scale(w, 3.0);
        let s = tape.add(w2, w3);
        let root = tape.sum(s);
        tape.backward(root, &mut store).unwrap();
        assert_eq!(store.grads(), &[7.0]);
    }

    #[test]
    fn unfold_respects_segment_edges() {
        let segs = Rc::new(Segments::from_lengths(&[2, 3]));
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let u = tape.unfold(x, 3, &segs);
        let v = tape.value(u);
        assert_eq!(v.row(0), &[0.0, 1.0, 0.0, 3.0, 4.0]);
        assert_eq!(v.row(1), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(v.row(2), &[2.0, 0.0, 4.0, 5.0, 0.0]);
    }
}
