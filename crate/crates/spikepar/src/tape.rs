//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive records its output value plus a backward closure that
//! maps the output gradient to per-parent gradient contributions. The tape
//! order is a topological order by construction, so [`Tape::backward`]
//! replays it once in reverse.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug)]
pub struct Var {
    pub(crate) idx: usize,
    tape_id: u64,
}

type BackFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

struct Node<S> {
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    back: Option<BackFn<S>>,
    needs_grad: bool,
    is_param: bool,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    id: u64,
    grad_enabled: bool,
}

/// Gradient buffers produced by one backward pass, keyed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    tape_id: u64,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        if v.tape_id != self.tape_id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Forward-only tape: no backward closures are retained.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, t: Tensor<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let rg = requires_grad && self.grad_enabled;
        nodes.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            back: None,
            needs_grad: rg,
            is_param: rg,
        });
        Var { idx: nodes.len() - 1, tape_id: self.id }
    }

    pub fn constant(&self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        assert_eq!(v.tape_id, self.id, "Var used on a foreign tape");
        Rc::clone(&self.nodes.borrow()[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape.clone()
    }

    /// Records a new node. `back` maps the output gradient to one optional
    /// contribution per parent (same order). Dropped when gradients are
    /// disabled or no parent needs them.
    pub fn push(&self, value: Tensor<S>, parents: &[Var], back: Option<BackFn<S>>) -> Var {
        self.push_rc(Rc::new(value), parents, back)
    }

    pub fn push_rc(&self, value: Rc<Tensor<S>>, parents: &[Var], back: Option<BackFn<S>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let mut needs = false;
        let mut pidx = Vec::with_capacity(parents.len());
        for p in parents {
            assert_eq!(p.tape_id, self.id, "Var used on a foreign tape");
            needs |= nodes[p.idx].needs_grad;
            pidx.push(p.idx);
        }
        needs &= self.grad_enabled;
        nodes.push(Node {
            value,
            parents: pidx,
            back: if needs { back } else { None },
            needs_grad: needs,
            is_param: false,
        });
        Var { idx: nodes.len() - 1, tape_id: self.id }
    }

    /// Reverse sweep from a scalar loss. Fills gradient buffers for every
    /// grad-requiring leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if loss.tape_id != self.id {
            return Err(Error::Usage("loss was not produced on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if loss.idx >= nodes.len() {
            return Err(Error::Usage("loss index out of tape bounds".into()));
        }
        if nodes[loss.idx].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                nodes[loss.idx].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![S::one()]);
        for i in (0..=loss.idx).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            if let Some(back) = &node.back {
                let g = grads[i].as_ref().unwrap();
                let contribs = back(g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (p, c) in node.parents.iter().zip(contribs) {
                    let (p, c) = (*p, match c {
                        Some(c) => c,
                        None => continue,
                    });
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(c.len(), nodes[p].value.numel());
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(c) {
                                *a += v;
                            }
                        }
                        slot => *slot = Some(c),
                    }
                }
            }
            if !node.is_param {
                grads[i] = None; // intermediate gradients are not retained
            }
        }
        Ok(Gradients { grads, tape_id: self.id })
    }

    // --- elementwise primitives ---------------------------------------

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(
            out,
            &[a, b],
            Some(Box::new(move |g| vec![Some(g.to_vec()), Some(g.to_vec())])),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x - y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(
            out,
            &[a, b],
            Some(Box::new(move |g| {
                vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
            })),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        Ok(self.push(
            out,
            &[a, b],
            Some(Box::new(move |g| {
                let da = g.iter().zip(&cb.data).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(&ca.data).map(|(&g, &x)| g * x).collect();
                vec![Some(da), Some(db)]
            })),
        ))
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x * c).collect(),
        };
        self.push(
            out,
            &[a],
            Some(Box::new(move |g| vec![Some(g.iter().map(|&v| v * c).collect())])),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data.iter().fold(S::zero(), |acc, &v| acc + v);
        let n = va.numel();
        self.push(
            Tensor::scalar(s),
            &[a],
            Some(Box::new(move |g| vec![Some(vec![g[0]; n])])),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, S::one() / S::of_usize(n))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let n: usize = shape.iter().product();
        if n != va.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", va.shape, shape),
            });
        }
        let out = Tensor { shape, data: va.data.clone() };
        Ok(self.push(out, &[a], Some(Box::new(move |g| vec![Some(g.to_vec())]))))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let y = Rc::new(Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x.sigmoid()).collect(),
        });
        let yc = Rc::clone(&y);
        self.push_rc(
            y,
            &[a],
            Some(Box::new(move |g| {
                let d = g
                    .iter()
                    .zip(&yc.data)
                    .map(|(&g, &y)| g * y * (S::one() - y))
                    .collect();
                vec![Some(d)]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect(),
        };
        let ca = Rc::clone(&va);
        self.push(
            out,
            &[a],
            Some(Box::new(move |g| {
                let d = g
                    .iter()
                    .zip(&ca.data)
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                vec![Some(d)]
            })),
        )
    }

    pub fn tanh_op(&self, a: Var) -> Var {
        let va = self.value(a);
        let y = Rc::new(Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x.tanh()).collect(),
        });
        let yc = Rc::clone(&y);
        self.push_rc(
            y,
            &[a],
            Some(Box::new(move |g| {
                let d = g.iter().zip(&yc.data).map(|(&g, &y)| g * (S::one() - y * y)).collect();
                vec![Some(d)]
            })),
        )
    }

    /// `a: [rows, cols] + bias: [cols]`, broadcast over rows.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(bias);
        if va.shape.len() != 2 || vb.shape != vec![va.shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (rows, cols) = (va.shape[0], va.shape[1]);
        let mut data = va.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vb.data[c];
            }
        }
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(
            out,
            &[a, bias],
            Some(Box::new(move |g| {
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            })),
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut c = vec![S::zero(); m * n];
        matmul_nn(&va.data, &vb.data, &mut c, m, k, n);
        let out = Tensor { shape: vec![m, n], data: c };
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        Ok(self.push(
            out,
            &[a, b],
            Some(Box::new(move |g| {
                // dA = dC @ B^T, dB = A^T @ dC
                let mut da = vec![S::zero(); m * k];
                matmul_nt(g, &cb.data, &mut da, m, n, k);
                let mut db = vec![S::zero(); k * n];
                matmul_tn(&ca.data, g, &mut db, k, m, n);
                vec![Some(da), Some(db)]
            })),
        ))
    }

    /// `x: [B, D] @ w: [D, M] + b: [M]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Mean over time and spatial axes of `[T, B, C, H, W]` -> `[B, C]`.
    pub fn pool_time_spatial(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 5 {
            return Err(Error::Dimension {
                op: "pool_time_spatial",
                msg: format!("expected rank-5 input, got {:?}", vx.shape),
            });
        }
        let (t, b, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3], vx.shape[4]);
        let hw = h * w;
        let denom = S::of_usize(t * hw);
        let mut out = vec![S::zero(); b * c];
        for ti in 0..t {
            for bi in 0..b {
                for ci in 0..c {
                    let base = ((ti * b + bi) * c + ci) * hw;
                    let mut s = S::zero();
                    for i in 0..hw {
                        s += vx.data[base + i];
                    }
                    out[bi * c + ci] += s / denom;
                }
            }
        }
        let out = Tensor { shape: vec![b, c], data: out };
        Ok(self.push(
            out,
            &[x],
            Some(Box::new(move |g| {
                let mut dx = vec![S::zero(); t * b * c * hw];
                for ti in 0..t {
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[bi * c + ci] / denom;
                            let base = ((ti * b + bi) * c + ci) * hw;
                            for i in 0..hw {
                                dx[base + i] = gv;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            })),
        ))
    }

    /// Mean over spatial axes of `[B, C, H, W]` -> `[B, C]`.
    pub fn pool_spatial(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 4 {
            return Err(Error::Dimension {
                op: "pool_spatial",
                msg: format!("expected rank-4 input, got {:?}", vx.shape),
            });
        }
        let (b, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let x5 = self.reshape(x, vec![1, b, c, h, w])?;
        self.pool_time_spatial(x5)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// --- matmul kernels ----------------------------------------------------

/// c += a @ b; a: m×k, b: k×n, c: m×n.
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// c += a @ b^T; a: m×k, b: n×k, c: m×n.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// c += a^T @ b; a: k×m, b: k×n, c: m×n.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// --- finite-difference checker ------------------------------------------

/// Compares the tape's analytic gradient of `f` at `x` against central
/// finite differences (accumulated in f64). Returns the max relative error
/// over the checked coordinates.
///
/// `f` must be deterministic and smooth at `x`; spiking layers must be run
/// in soft mode for the comparison to be meaningful.
pub fn finite_diff_check<S: Scalar, F>(
    f: F,
    x: &Tensor<S>,
    eps: f64,
    coords: Option<&[usize]>,
) -> f64
where
    F: Fn(&Tape<S>, Var) -> Var,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&tape, xv);
    let grads = tape.backward(loss).expect("finite_diff_check: backward failed");
    let analytic = grads.get(xv).expect("input received no gradient");

    let eval = |xt: &Tensor<S>| -> f64 {
        let t = Tape::no_grad();
        let v = t.leaf(xt.clone(), false);
        let l = f(&t, v);
        t.value(l).item().as_f64()
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut xp = x.clone();
        xp.data[i] = xp.data[i] + S::of_f64(eps);
        let mut xm = x.clone();
        xm.data[i] = xm.data[i] - S::of_f64(eps);
        let numeric = (eval(&xp) - eval(&xm)) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor64 {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape: Tape<f64> = Tape::new();
        let i3 = tape.constant(Tensor::from_fn(&[3, 3], |i| {
            if i / 3 == i % 3 { 1.0 } else { 0.0 }
        }));
        let b = tape.constant(t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(i3, b).unwrap();
        assert_eq!(tape.value(c).data, vec![1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_hand_binary() {
        // [[1,1],[0,1]] x [[1,0],[1,1]] = [[2,1],[1,1]]
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(t64(&[2, 2], &[1., 1., 0., 1.]));
        let b = tape.constant(t64(&[2, 2], &[1., 0., 1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![2., 1., 1., 1.]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let tape: Tape<f64> = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.value(c).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape: Tape<f64> = Tape::new();
        let w = tape.leaf(t64(&[3], &[1., 2., 3.]), true);
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape: Tape<f64> = Tape::new();
        let w = tape.leaf(t64(&[2], &[1., 2.]), true);
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2., 4.]);
    }

    #[test]
    fn detached_tensor_receives_no_gradient() {
        let tape: Tape<f64> = Tape::new();
        let w = tape.leaf(t64(&[2], &[1., 2.]), true);
        let d = tape.constant(t64(&[2], &[5., 7.]));
        let p = tape.mul(w, d).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(d).is_none());
        assert_eq!(g.get(w).unwrap(), &[5., 7.]);
    }

    #[test]
    fn backward_rejects_foreign_loss() {
        let t1: Tape<f64> = Tape::new();
        let t2: Tape<f64> = Tape::new();
        let w = t2.leaf(Tensor::scalar(1.0), true);
        let l = t2.sum(w);
        assert!(matches!(t1.backward(l), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let tape: Tape<f64> = Tape::new();
        let w = tape.leaf(t64(&[2], &[1., 2.]), true);
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn fd_check_sum_is_tight() {
        let x = t64(&[4], &[0.3, -1.2, 2.0, 0.7]);
        let err = finite_diff_check(|t, v| t.sum(v), &x, 1e-3, None);
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn fd_check_quadratic_form() {
        let x = t64(&[3], &[0.5, -0.25, 1.5]);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v).unwrap();
                t.sum(sq)
            },
            &x,
            1e-3,
            None,
        );
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn fd_check_matmul_sigmoid_chain() {
        let x = t64(&[2, 3], &[0.1, -0.4, 0.9, 0.2, -0.7, 0.3]);
        let w = t64(&[3, 2], &[0.5, -0.2, 0.3, 0.8, -0.6, 0.1]);
        let err = finite_diff_check(
            move |t, v| {
                let wv = t.constant(w.clone());
                let y = t.matmul(v, wv).unwrap();
                let s = t.sigmoid(y);
                t.sum(s)
            },
            &x,
            1e-3,
            None,
        );
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape: Tape<f32> = Tape::new();
            let a = tape.constant(Tensor::from_fn(&[8, 8], |i| (i as f32 * 0.13).sin()));
            let b = tape.constant(Tensor::from_fn(&[8, 8], |i| (i as f32 * 0.29).cos()));
            let c = tape.matmul(a, b).unwrap();
            tape.value(c).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
