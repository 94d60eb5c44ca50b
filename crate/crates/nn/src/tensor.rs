//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a `[rows, cols]` matrix; vectors are `[1, n]` and scalars
//! `[1, 1]`. Ops build an acyclic graph of `Rc` nodes; [`backward`] walks it
//! in reverse topological order and accumulates gradients into tracked leaves
//! (parameters) until [`Tensor::zero_grad`] clears them. Graphs are rebuilt on
//! every forward pass; single-threaded use gives bit-identical results.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::NnError;
use crate::scalar::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// RAII guard disabling graph construction (inference mode).
pub struct NoGradGuard {
    prev: bool,
}

/// Disable autodiff tracking until the returned guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<T> = Box<dyn Fn(&Inner<T>)>;

pub(crate) struct Inner<T: Real> {
    id: u64,
    rows: usize,
    cols: usize,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
}

/// A 2-D tensor; cheap to clone (shares storage and graph node).
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.inner.rows)
            .field("cols", &self.inner.cols)
            .field("tracked", &self.inner.tracked)
            .finish()
    }
}

fn debug_check_finite<T: Real>(op: &str, data: &[T]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by op `{op}`"
    );
}

impl<T: Real> Tensor<T> {
    fn leaf(rows: usize, cols: usize, data: Vec<T>, tracked: bool) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                rows,
                cols,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                tracked,
            }),
        }
    }

    /// Untracked constant tensor.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        Self::leaf(rows, cols, data, false)
    }

    /// Tracked leaf: gradients accumulate here across backward calls.
    pub fn param(rows: usize, cols: usize, data: Vec<T>) -> Self {
        Self::leaf(rows, cols, data, true)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, vec![v])
    }

    /// Row vector `[1, n]`.
    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(1, n, data)
    }

    fn op(
        rows: usize,
        cols: usize,
        data: Vec<T>,
        op_name: &str,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        assert_eq!(data.len(), rows * cols, "op `{op_name}`: bad output shape");
        debug_check_finite(op_name, &data);
        let tracked = grad_enabled() && parents.iter().any(|p| p.inner.tracked);
        if !tracked {
            return Self::leaf(rows, cols, data, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                rows,
                cols,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
                tracked: true,
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    pub fn numel(&self) -> usize {
        self.inner.rows * self.inner.cols
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    /// Copy of the underlying data, row-major.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        assert!(r < self.inner.rows && c < self.inner.cols, "index out of bounds");
        self.inner.data.borrow()[r * self.inner.cols + c]
    }

    /// Scalar value of a `[1,1]` tensor.
    pub fn value(&self) -> T {
        assert_eq!(self.numel(), 1, "value() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the data in place (shape must match). Used by optimizers,
    /// checkpoint loading, and finite-difference probes.
    pub fn set_data(&self, data: &[T]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub fn is_finite_all(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Copy of the accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add an externally supplied gradient (element-wise) into this
    /// tensor's accumulator, as if a backward pass had produced it.
    pub fn accumulate_grad(&self, g: &[T]) {
        assert_eq!(g.len(), self.numel(), "accumulate_grad length mismatch");
        self.with_grad_mut(|pg| {
            for (p, &gi) in pg.iter_mut().zip(g.iter()) {
                *p = *p + gi;
            }
        });
    }

    fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        self.inner.with_grad_mut(f)
    }

    /// Same data as an untracked constant (detached from the graph).
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.inner.rows, self.inner.cols, self.to_vec())
    }
}

impl<T: Real> Inner<T> {
    fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.rows * self.cols]);
        f(g);
    }

    /// Gradient of this node during backward; zeros if nothing reached it.
    fn grad_snapshot(&self) -> Option<Vec<T>> {
        self.grad.borrow().clone()
    }

    fn data_snapshot(&self) -> Vec<T> {
        self.data.borrow().clone()
    }
}

// ---------------------------------------------------------------------------
// Backward driver
// ---------------------------------------------------------------------------

/// Run reverse-mode accumulation from a scalar loss.
///
/// Gradients are *added* into every tracked leaf reachable from `loss`;
/// call [`Tensor::zero_grad`] (or the optimizer's zero step) between steps.
pub fn backward<T: Real>(loss: &Tensor<T>) -> Result<(), NnError> {
    if loss.numel() != 1 {
        return Err(NnError::InvalidConfig(
            "backward requires a scalar loss".into(),
        ));
    }
    if !loss.value().is_finite() {
        return Err(NnError::NonFinite("loss".into()));
    }
    let order = topo_order(loss)?;
    loss.with_grad_mut(|g| g[0] = g[0] + T::one());
    for node in order.iter().rev() {
        let inner = &*node.inner;
        if inner.backward.is_none() {
            continue;
        }
        if inner.grad.borrow().is_none() {
            continue;
        }
        (inner.backward.as_ref().unwrap())(inner);
    }
    // Intermediate grads are only scratch space; drop them so reused
    // parameters are the only tensors holding accumulated gradients.
    for node in order.iter() {
        if node.inner.backward.is_some() {
            node.zero_grad();
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Mark {
    Visiting,
    Done,
}

fn topo_order<T: Real>(root: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnError> {
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut marks: HashMap<u64, Mark> = HashMap::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    marks.insert(root.inner.id, Mark::Visiting);
    while let Some((node, next_child)) = stack.pop() {
        if next_child < node.inner.parents.len() {
            let child = node.inner.parents[next_child].clone();
            stack.push((node, next_child + 1));
            if child.inner.tracked {
                match marks.get(&child.inner.id) {
                    Some(Mark::Visiting) => return Err(NnError::GraphCycle),
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(child.inner.id, Mark::Visiting);
                        stack.push((child, 0));
                    }
                }
            }
        } else {
            marks.insert(node.inner.id, Mark::Done);
            order.push(node);
        }
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    fn assert_same_shape(&self, other: &Tensor<T>, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "op `{op}`: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.assert_same_shape(other, "add");
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Tensor::op(
            self.rows(),
            self.cols(),
            out,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for (p, &gi) in pg.iter_mut().zip(g.iter()) {
                        *p = *p + gi;
                    }
                });
                node.parents[1].with_grad_mut(|pg| {
                    for (p, &gi) in pg.iter_mut().zip(g.iter()) {
                        *p = *p + gi;
                    }
                });
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.assert_same_shape(other, "sub");
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Tensor::op(
            self.rows(),
            self.cols(),
            out,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(|node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for (p, &gi) in pg.iter_mut().zip(g.iter()) {
                        *p = *p + gi;
                    }
                });
                node.parents[1].with_grad_mut(|pg| {
                    for (p, &gi) in pg.iter_mut().zip(g.iter()) {
                        *p = *p - gi;
                    }
                });
            }),
        )
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.assert_same_shape(other, "mul");
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Tensor::op(
            self.rows(),
            self.cols(),
            out,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(|node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let a = node.parents[0].inner.data_snapshot();
                let b = node.parents[1].inner.data_snapshot();
                node.parents[0].with_grad_mut(|pg| {
                    for i in 0..pg.len() {
                        pg[i] = pg[i] + g[i] * b[i];
                    }
                });
                node.parents[1].with_grad_mut(|pg| {
                    for i in 0..pg.len() {
                        pg[i] = pg[i] + g[i] * a[i];
                    }
                });
            }),
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.inner.data.borrow().iter().map(|&x| x * c).collect();
        Tensor::op(
            self.rows(),
            self.cols(),
            out,
            "scale",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for i in 0..pg.len() {
                        pg[i] = pg[i] + g[i] * c;
                    }
                });
            }),
        )
    }

    /// Add a constant matrix (no gradient flows into the constant).
    pub fn add_const(&self, m: &[T]) -> Tensor<T> {
        assert_eq!(m.len(), self.numel(), "add_const length mismatch");
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            a.iter().zip(m.iter()).map(|(&x, &y)| x + y).collect()
        };
        Tensor::op(
            self.rows(),
            self.cols(),
            out,
            "add_const",
            vec![self.clone()],
            Box::new(|node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for i in 0..pg.len() {
                        pg[i] = pg[i] + g[i];
                    }
                });
            }),
        )
    }

    /// `[n,d] + [1,d]` broadcast add.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Tensor<T> {
        assert_eq!(bias.rows(), 1, "bias must be a row vector");
        assert_eq!(bias.cols(), self.cols(), "bias width mismatch");
        let (n, d) = self.shape();
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let b = bias.inner.data.borrow();
            let mut v = Vec::with_capacity(n * d);
            for r in 0..n {
                for c in 0..d {
                    v.push(a[r * d + c] + b[c]);
                }
            }
            v
        };
        Tensor::op(
            n,
            d,
            out,
            "add_bias",
            vec![self.clone(), bias.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for i in 0..pg.len() {
                        pg[i] = pg[i] + g[i];
                    }
                });
                node.parents[1].with_grad_mut(|pg| {
                    for r in 0..n {
                        for c in 0..d {
                            pg[c] = pg[c] + g[r * d + c];
                        }
                    }
                });
            }),
        )
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (n, d) = self.shape();
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let mut v = vec![T::zero(); n * d];
            for r in 0..n {
                for c in 0..d {
                    v[c * n + r] = a[r * d + c];
                }
            }
            v
        };
        Tensor::op(
            d,
            n,
            out,
            "transpose",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for r in 0..n {
                        for c in 0..d {
                            pg[r * d + c] = pg[r * d + c] + g[c * n + r];
                        }
                    }
                });
            }),
        )
    }

    /// Same data under a new `[rows, cols]` shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor<T> {
        assert_eq!(rows * cols, self.numel(), "reshape numel mismatch");
        let out = self.to_vec();
        Tensor::op(
            rows,
            cols,
            out,
            "reshape",
            vec![self.clone()],
            Box::new(|node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for i in 0..pg.len() {
                        pg[i] = pg[i] + g[i];
                    }
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            T::gemm(
                m, k, n,
                T::one(),
                &a, k as isize, 1,
                &b, n as isize, 1,
                T::zero(),
                &mut out, n as isize, 1,
            );
        }
        debug_check_finite("matmul", &out);
        Tensor::op(
            m,
            n,
            out,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let a = node.parents[0].inner.data_snapshot();
                let b = node.parents[1].inner.data_snapshot();
                // dA += G * B^T
                node.parents[0].with_grad_mut(|pg| {
                    T::gemm(
                        m, n, k,
                        T::one(),
                        &g, n as isize, 1,
                        &b, 1, n as isize,
                        T::one(),
                        pg, k as isize, 1,
                    );
                });
                // dB += A^T * G
                node.parents[1].with_grad_mut(|pg| {
                    T::gemm(
                        k, m, n,
                        T::one(),
                        &a, 1, k as isize,
                        &g, n as isize, 1,
                        T::one(),
                        pg, n as isize, 1,
                    );
                });
            }),
        )
    }

    /// `A * B^T`: `[m,k] x [n,k] -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Tensor<T> {
        let (m, k) = self.shape();
        let (n, k2) = other.shape();
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            T::gemm(
                m, k, n,
                T::one(),
                &a, k as isize, 1,
                &b, 1, k as isize,
                T::zero(),
                &mut out, n as isize, 1,
            );
        }
        debug_check_finite("matmul_nt", &out);
        Tensor::op(
            m,
            n,
            out,
            "matmul_nt",
            vec![self.clone(), other.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let a = node.parents[0].inner.data_snapshot();
                let b = node.parents[1].inner.data_snapshot();
                // dA += G * B
                node.parents[0].with_grad_mut(|pg| {
                    T::gemm(
                        m, n, k,
                        T::one(),
                        &g, n as isize, 1,
                        &b, k as isize, 1,
                        T::one(),
                        pg, k as isize, 1,
                    );
                });
                // dB += G^T * A
                node.parents[1].with_grad_mut(|pg| {
                    T::gemm(
                        n, m, k,
                        T::one(),
                        &g, 1, n as isize,
                        &a, k as isize, 1,
                        T::one(),
                        pg, k as isize, 1,
                    );
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions
// ---------------------------------------------------------------------------

/// Softmax axis selector for [`Tensor::softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize across each row (over columns).
    Rows,
    /// Normalize across each column (over rows).
    Cols,
}

impl<T: Real> Tensor<T> {
    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&self) -> Tensor<T> {
        let (n, d) = self.shape();
        assert!(d > 0, "softmax over an empty slice");
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let mut v = Vec::with_capacity(n * d);
            for r in 0..n {
                let row = &a[r * d..(r + 1) * d];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
                let sum: T = exps.iter().cloned().sum();
                v.extend(exps.iter().map(|&e| e / sum));
            }
            v
        };
        Tensor::op(
            n,
            d,
            out,
            "softmax_rows",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let y = node.data_snapshot();
                node.parents[0].with_grad_mut(|pg| {
                    for r in 0..n {
                        let off = r * d;
                        let mut dot = T::zero();
                        for c in 0..d {
                            dot = dot + g[off + c] * y[off + c];
                        }
                        for c in 0..d {
                            pg[off + c] = pg[off + c] + y[off + c] * (g[off + c] - dot);
                        }
                    }
                });
            }),
        )
    }

    /// Softmax along the requested axis.
    pub fn softmax(&self, axis: Axis) -> Tensor<T> {
        match axis {
            Axis::Rows => self.softmax_rows(),
            Axis::Cols => self.transpose().softmax_rows().transpose(),
        }
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c1 = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c2 = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            a.iter()
                .map(|&x| {
                    let u = c1 * (x + c2 * x * x * x);
                    half * x * (T::one() + u.tanh())
                })
                .collect()
        };
        Tensor::op(
            self.rows(),
            self.cols(),
            out,
            "gelu",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let x = node.parents[0].inner.data_snapshot();
                node.parents[0].with_grad_mut(|pg| {
                    let three = T::from_f64(3.0);
                    for i in 0..pg.len() {
                        let xi = x[i];
                        let u = c1 * (xi + c2 * xi * xi * xi);
                        let t = u.tanh();
                        let du = c1 * (T::one() + three * c2 * xi * xi);
                        let d = half * (T::one() + t) + half * xi * (T::one() - t * t) * du;
                        pg[i] = pg[i] + g[i] * d;
                    }
                });
            }),
        )
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Tensor<T> {
        let (n, d) = self.shape();
        assert_eq!(gamma.shape(), (1, d), "layer_norm gamma shape");
        assert_eq!(beta.shape(), (1, d), "layer_norm beta shape");
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let gm = gamma.inner.data.borrow();
            let bt = beta.inner.data.borrow();
            let dn = T::from_f64(d as f64);
            let mut v = Vec::with_capacity(n * d);
            for r in 0..n {
                let row = &a[r * d..(r + 1) * d];
                let mean = row.iter().cloned().sum::<T>() / dn;
                let var = row
                    .iter()
                    .map(|&x| (x - mean) * (x - mean))
                    .sum::<T>()
                    / dn;
                let denom = (var + eps).sqrt();
                for c in 0..d {
                    let xh = (row[c] - mean) / denom;
                    v.push(gm[c] * xh + bt[c]);
                }
            }
            v
        };
        Tensor::op(
            n,
            d,
            out,
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let x = node.parents[0].inner.data_snapshot();
                let gm = node.parents[1].inner.data_snapshot();
                let dn = T::from_f64(d as f64);
                // Recompute per-row statistics.
                let mut xhat = vec![T::zero(); n * d];
                let mut denom = vec![T::zero(); n];
                for r in 0..n {
                    let row = &x[r * d..(r + 1) * d];
                    let mean = row.iter().cloned().sum::<T>() / dn;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        / dn;
                    denom[r] = (var + eps).sqrt();
                    for c in 0..d {
                        xhat[r * d + c] = (row[c] - mean) / denom[r];
                    }
                }
                node.parents[0].with_grad_mut(|pg| {
                    for r in 0..n {
                        let off = r * d;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dxh = g[off + c] * gm[c];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat[off + c];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for c in 0..d {
                            let dxh = g[off + c] * gm[c];
                            pg[off + c] =
                                pg[off + c] + (dxh - m1 - xhat[off + c] * m2) / denom[r];
                        }
                    }
                });
                node.parents[1].with_grad_mut(|pg| {
                    for r in 0..n {
                        for c in 0..d {
                            pg[c] = pg[c] + g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                node.parents[2].with_grad_mut(|pg| {
                    for r in 0..n {
                        for c in 0..d {
                            pg[c] = pg[c] + g[r * d + c];
                        }
                    }
                });
            }),
        )
    }

    /// Select rows by index (a row may repeat); backward scatter-adds.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor<T> {
        let (n, d) = self.shape();
        for &i in ids {
            assert!(i < n, "gather_rows index {i} out of bounds ({n} rows)");
        }
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let mut v = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                v.extend_from_slice(&a[i * d..(i + 1) * d]);
            }
            v
        };
        let ids_owned: Vec<usize> = ids.to_vec();
        Tensor::op(
            ids.len(),
            d,
            out,
            "gather_rows",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for (r, &i) in ids_owned.iter().enumerate() {
                        for c in 0..d {
                            pg[i * d + c] = pg[i * d + c] + g[r * d + c];
                        }
                    }
                });
            }),
        )
    }

    /// Column slice `[lo, hi)`.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor<T> {
        let (n, d) = self.shape();
        assert!(lo < hi && hi <= d, "slice_cols range out of bounds");
        let w = hi - lo;
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let mut v = Vec::with_capacity(n * w);
            for r in 0..n {
                v.extend_from_slice(&a[r * d + lo..r * d + hi]);
            }
            v
        };
        Tensor::op(
            n,
            w,
            out,
            "slice_cols",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for r in 0..n {
                        for c in 0..w {
                            pg[r * d + lo + c] = pg[r * d + lo + c] + g[r * w + c];
                        }
                    }
                });
            }),
        )
    }

    /// Vertical stack of blocks with identical widths.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let d = parts[0].cols();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.cols(), d, "concat_rows width mismatch");
            total += p.rows();
        }
        let mut out = Vec::with_capacity(total * d);
        for p in parts {
            out.extend_from_slice(&p.inner.data.borrow());
        }
        let row_counts: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        Tensor::op(
            total,
            d,
            out,
            "concat_rows",
            parts.to_vec(),
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let mut off = 0usize;
                for (idx, &rc) in row_counts.iter().enumerate() {
                    node.parents[idx].with_grad_mut(|pg| {
                        for i in 0..rc * d {
                            pg[i] = pg[i] + g[off + i];
                        }
                    });
                    off += rc * d;
                }
            }),
        )
    }

    /// Horizontal stack of blocks with identical row counts.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let n = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        for p in parts {
            assert_eq!(p.rows(), n, "concat_cols row mismatch");
        }
        let d: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * d];
        {
            let mut col_off = 0usize;
            for (p, &w) in parts.iter().zip(widths.iter()) {
                let pd = p.inner.data.borrow();
                for r in 0..n {
                    out[r * d + col_off..r * d + col_off + w]
                        .copy_from_slice(&pd[r * w..(r + 1) * w]);
                }
                col_off += w;
            }
        }
        let widths_owned = widths.clone();
        Tensor::op(
            n,
            d,
            out,
            "concat_cols",
            parts.to_vec(),
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                let mut col_off = 0usize;
                for (idx, &w) in widths_owned.iter().enumerate() {
                    node.parents[idx].with_grad_mut(|pg| {
                        for r in 0..n {
                            for c in 0..w {
                                pg[r * w + c] = pg[r * w + c] + g[r * d + col_off + c];
                            }
                        }
                    });
                    col_off += w;
                }
            }),
        )
    }

    /// Mean over rows: `[n,d] -> [1,d]`.
    pub fn mean_rows(&self) -> Tensor<T> {
        let (n, d) = self.shape();
        assert!(n > 0, "mean_rows over zero rows");
        let inv = T::one() / T::from_f64(n as f64);
        let out: Vec<T> = {
            let a = self.inner.data.borrow();
            let mut v = vec![T::zero(); d];
            for r in 0..n {
                for c in 0..d {
                    v[c] = v[c] + a[r * d + c];
                }
            }
            for c in v.iter_mut() {
                *c = *c * inv;
            }
            v
        };
        Tensor::op(
            1,
            d,
            out,
            "mean_rows",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap();
                node.parents[0].with_grad_mut(|pg| {
                    for r in 0..n {
                        for c in 0..d {
                            pg[r * d + c] = pg[r * d + c] + g[c] * inv;
                        }
                    }
                });
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.inner.data.borrow().iter().cloned().sum();
        Tensor::op(
            1,
            1,
            vec![s],
            "sum_all",
            vec![self.clone()],
            Box::new(|node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap()[0];
                node.parents[0].with_grad_mut(|pg| {
                    for p in pg.iter_mut() {
                        *p = *p + g;
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        assert!(n > 0, "mean_all over empty tensor");
        let inv = T::one() / T::from_f64(n as f64);
        let s: T = self.inner.data.borrow().iter().cloned().sum::<T>() * inv;
        Tensor::op(
            1,
            1,
            vec![s],
            "mean_all",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                let g = node.grad_snapshot().unwrap()[0] * inv;
                node.parents[0].with_grad_mut(|pg| {
                    for p in pg.iter_mut() {
                        *p = *p + g;
                    }
                });
            }),
        )
    }

    /// Mean token negative log-likelihood of `targets` under row-wise
    /// softmax of the logits. Rows whose target equals `ignore_target`
    /// (padding) contribute nothing.
    pub fn cross_entropy_rows(&self, targets: &[usize], ignore_target: Option<usize>) -> Tensor<T> {
        let (n, v) = self.shape();
        assert_eq!(targets.len(), n, "cross_entropy target count mismatch");
        let live: Vec<bool> = targets
            .iter()
            .map(|&t| {
                assert!(t < v, "cross_entropy target {t} out of vocab {v}");
                Some(t) != ignore_target
            })
            .collect();
        let n_eff = live.iter().filter(|&&b| b).count();
        let loss = {
            let a = self.inner.data.borrow();
            if n_eff == 0 {
                T::zero()
            } else {
                let mut total = T::zero();
                for r in 0..n {
                    if !live[r] {
                        continue;
                    }
                    let row = &a[r * v..(r + 1) * v];
                    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let lse = max
                        + row
                            .iter()
                            .map(|&x| (x - max).exp())
                            .sum::<T>()
                            .ln();
                    total = total + lse - row[targets[r]];
                }
                total / T::from_f64(n_eff as f64)
            }
        };
        let targets_owned: Vec<usize> = targets.to_vec();
        Tensor::op(
            1,
            1,
            vec![loss],
            "cross_entropy",
            vec![self.clone()],
            Box::new(move |node: &Inner<T>| {
                if n_eff == 0 {
                    return;
                }
                let g = node.grad_snapshot().unwrap()[0];
                let x = node.parents[0].inner.data_snapshot();
                let inv = T::one() / T::from_f64(n_eff as f64);
                node.parents[0].with_grad_mut(|pg| {
                    for r in 0..n {
                        if !live[r] {
                            continue;
                        }
                        let row = &x[r * v..(r + 1) * v];
                        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                        let exps: Vec<T> = row.iter().map(|&xv| (xv - max).exp()).collect();
                        let sum: T = exps.iter().cloned().sum();
                        for c in 0..v {
                            let p = exps[c] / sum;
                            let ind = if c == targets_owned[r] { T::one() } else { T::zero() };
                            pg[r * v + c] = pg[r * v + c] + g * inv * (p - ind);
                        }
                    }
                });
            }),
        )
    }
}

/// `softmax(Q K^T / sqrt(d)) V` where `d` is the query width.
///
/// Panics on an empty key set; callers that can see zero keys must skip
/// the attention step instead (see the evidence attention layer).
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    assert!(k.rows() > 0, "scaled_dot_attention with zero keys");
    assert_eq!(q.cols(), k.cols(), "query/key width mismatch");
    assert_eq!(k.rows(), v.rows(), "key/value count mismatch");
    let scale = T::one() / T::from_f64((q.cols() as f64).sqrt());
    q.matmul_nt(k).scale(scale).softmax_rows().matmul(v)
}
