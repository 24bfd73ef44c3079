//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Storage is contiguous row-major. Every op produces a fresh tensor that
//! records its producing operation, so calling [`Tensor::backward`] on a
//! scalar loss sweeps the graph once in reverse topological order and
//! accumulates gradients into each `requires_grad` leaf. Gradients add up
//! across calls; the caller zeroes them between steps.
//!
//! The element type is generic so the same kernels run in `f32` for
//! training/inference and in `f64` inside [`grad_check`].

mod conv;
mod gradcheck;
mod window;

pub use gradcheck::{compare_gradients, dot, grad_check, GradCheckReport};
pub use window::window_attention;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Scalar element of a tensor.
pub trait Elem:
    num_traits::Float + num_traits::FromPrimitive + std::iter::Sum + fmt::Debug + fmt::Display + Default + 'static
{
    /// `c += a · b` for an `m x k` by `k x n` product with explicit row and
    /// column strides per operand, so transposed views need no copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_elem_gemm {
    ($ty:ty, $gemm:path) => {
        impl Elem for $ty {
            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                debug_assert!((m - 1) as isize * rsa + (k - 1) as isize * csa < a.len() as isize);
                debug_assert!((k - 1) as isize * rsb + (n - 1) as isize * csb < b.len() as isize);
                debug_assert!((m - 1) as isize * rsc + (n - 1) as isize * csc < c.len() as isize);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        1.0,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_elem_gemm!(f32, matrixmultiply::sgemm);
impl_elem_gemm!(f64, matrixmultiply::dgemm);

/// Converts an `f64` constant into the element type.
#[inline]
pub fn el<E: Elem>(v: f64) -> E {
    E::from_f64(v).expect("constant not representable")
}

pub(crate) enum OpKind<E: Elem> {
    Add,
    Sub,
    Mul,
    Scale(E),
    Abs,
    Matmul,
    Conv2d {
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose2d {
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose1d {
        stride: usize,
    },
    BatchNorm {
        training: bool,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    LeakyRelu {
        slope: E,
    },
    Sigmoid,
    Softmax {
        axis: usize,
    },
    /// Windowed attention with relative positional tables; `weights` holds the
    /// softmax output per (batch, position, window slot) for the backward pass.
    WindowAttention {
        span: usize,
        value_sign: E,
        inv_scale: E,
        weights: Vec<E>,
    },
    Reshape,
    Permute {
        perm: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    SumAll,
    MeanAll,
}

impl<E: Elem> OpKind<E> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Abs => "abs",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::ConvTranspose2d { .. } => "conv_transpose2d",
            OpKind::ConvTranspose1d { .. } => "conv_transpose1d",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax { .. } => "softmax",
            OpKind::WindowAttention { .. } => "window_attention",
            OpKind::Reshape => "reshape",
            OpKind::Permute { .. } => "permute",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::SumAll => "sum",
            OpKind::MeanAll => "mean",
        }
    }
}

pub(crate) struct Node<E: Elem> {
    kind: OpKind<E>,
    inputs: Vec<Tensor<E>>,
}

struct Inner<E: Elem> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    node: Option<Node<E>>,
}

/// Cheaply clonable handle to a tensor value and its graph linkage.
pub struct Tensor<E: Elem = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{{shape: {:?}, op: {}}}",
            self.inner.shape,
            self.inner.node.as_ref().map_or("leaf", |n| n.kind.name())
        )
    }
}

impl<E: Elem> Tensor<E> {
    /// Leaf tensor from row-major data.
    pub fn new(data: Vec<E>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "tensor: zero extent in shape {:?}", shape);
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                node: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![E::zero(); numel], shape)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![v; numel], shape)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![v], &[1])
    }

    /// Trainable leaf with this tensor's values. Copies the storage when the
    /// handle is shared, so the returned leaf is always independent.
    pub fn with_grad(self) -> Self {
        assert!(self.inner.node.is_none(), "with_grad: only leaves can be marked trainable");
        let inner = match Rc::try_unwrap(self.inner) {
            Ok(inner) => inner,
            Err(shared) => Inner {
                shape: shared.shape.clone(),
                data: RefCell::new(shared.data.borrow().clone()),
                grad: RefCell::new(None),
                requires_grad: false,
                node: None,
            },
        };
        Tensor {
            inner: Rc::new(Inner {
                requires_grad: true,
                ..inner
            }),
        }
    }

    pub(crate) fn from_op(data: Vec<E>, shape: Vec<usize>, kind: OpKind<E>, inputs: Vec<Tensor<E>>) -> Self {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(data.len(), numel);
        let requires_grad = inputs.iter().any(|t| t.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node: Some(Node { kind, inputs }),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutable access to a leaf's values (optimizer updates, finite differencing).
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, delta: &[E]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, &d) in g.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse topological sweep from a scalar loss, accumulating gradients
    /// into every reachable `requires_grad` leaf. Leaf gradients add up
    /// across calls; intermediate gradients are transient per sweep.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape()
        );
        let order = topo_order(self);
        self.accumulate_seed();
        for t in order.iter().rev() {
            let Some(node) = t.inner.node.as_ref() else { continue };
            if !t.inner.requires_grad {
                continue;
            }
            let grad = t.inner.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            let out_data = t.inner.data.borrow();
            backward_op(node, &t.inner.shape, &out_data, &grad);
        }
    }

    fn accumulate_seed(&self) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g[0] = g[0] + E::one(),
            None => *slot = Some(vec![E::one()]),
        }
    }

    /// Walks the graph in forward (topological) order and returns a
    /// description of the first tensor containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        for t in topo_order(self) {
            if !t.is_finite() {
                let name = t.inner.node.as_ref().map_or("leaf", |n| n.kind.name());
                return Some(format!("{} (shape {:?})", name, t.shape()));
            }
        }
        None
    }
}

/// Post-order over the graph: inputs appear before their consumers.
fn topo_order<E: Elem>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Inner<E>> = HashSet::new();
    // (tensor, children_expanded)
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        let key = Rc::as_ptr(&t.inner);
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(key) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.inner.node.as_ref() {
            for input in &node.inputs {
                if !visited.contains(&Rc::as_ptr(&input.inner)) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Elementwise ops with singleton-axis broadcasting
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "{op}: rank mismatch between shapes {a:?} and {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            assert!(
                da == db || da == 1 || db == 1,
                "{op}: shape mismatch between {a:?} and {b:?}"
            );
            da.max(db)
        })
        .collect()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `shape` as seen under `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let natural = strides_of(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(natural)
        .map(|((&d, &od), s)| if d == od { s } else { 0 })
        .collect()
}

fn map_broadcast<E: Elem>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    out_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    let ad = a.data();
    let bd = b.data();
    let numel: usize = out_shape.iter().product();
    if a.shape() == out_shape && b.shape() == out_shape {
        return ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        out.push(f(ad[ia], bd[ib]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sums `grad` (shaped `from`) down to `to` over broadcast (extent-1) axes.
fn reduce_to_shape<E: Elem>(grad: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return grad.to_vec();
    }
    let numel_to: usize = to.iter().product();
    let mut out = vec![E::zero(); numel_to];
    let st = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut it = 0usize;
    for &g in grad {
        out[it] = out[it] + g;
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            it += st[ax];
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
            it -= st[ax] * from[ax];
        }
    }
    out
}

impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        let shape = broadcast_shape(self.shape(), other.shape(), "add");
        let data = map_broadcast(self, other, &shape, |a, b| a + b);
        Tensor::from_op(data, shape, OpKind::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        let shape = broadcast_shape(self.shape(), other.shape(), "sub");
        let data = map_broadcast(self, other, &shape, |a, b| a - b);
        Tensor::from_op(data, shape, OpKind::Sub, vec![self.clone(), other.clone()])
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        let shape = broadcast_shape(self.shape(), other.shape(), "mul");
        let data = map_broadcast(self, other, &shape, |a, b| a * b);
        Tensor::from_op(data, shape, OpKind::Mul, vec![self.clone(), other.clone()])
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), OpKind::Scale(c), vec![self.clone()])
    }

    pub fn abs(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        Tensor::from_op(data, self.shape().to_vec(), OpKind::Abs, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        assert!(
            slope > E::zero() && slope < E::one(),
            "leaky_relu: slope must be in (0,1), got {slope}"
        );
        let data = self
            .data()
            .iter()
            .map(|&x| if x >= E::zero() { x } else { x * slope })
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            OpKind::LeakyRelu { slope },
            vec![self.clone()],
        )
    }

    /// Logistic function with a stable branch for large `|x|`.
    pub fn sigmoid(&self) -> Tensor<E> {
        let data = self
            .data()
            .iter()
            .map(|&x| {
                if x >= E::zero() {
                    E::one() / (E::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (E::one() + e)
                }
            })
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), OpKind::Sigmoid, vec![self.clone()])
    }

    /// Max-subtracted exponential normalization along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor<E> {
        assert!(axis < self.rank(), "softmax: axis {axis} out of range for shape {:?}", self.shape());
        let shape = self.shape().to_vec();
        let alen = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut out = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut max = E::neg_infinity();
                for a in 0..alen {
                    max = max.max(src[base + a * inner]);
                }
                let mut sum = E::zero();
                for a in 0..alen {
                    let e = (src[base + a * inner] - max).exp();
                    out[base + a * inner] = e;
                    sum = sum + e;
                }
                for a in 0..alen {
                    out[base + a * inner] = out[base + a * inner] / sum;
                }
            }
        }
        drop(src);
        Tensor::from_op(out, shape, OpKind::Softmax { axis }, vec![self.clone()])
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![1], OpKind::SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = el::<E>(self.numel() as f64);
        let s: E = self.data().iter().copied().sum();
        Tensor::from_op(vec![s / n], vec![1], OpKind::MeanAll, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape: cannot view {:?} as {:?}",
            self.shape(),
            shape
        );
        let data = self.to_vec();
        Tensor::from_op(data, shape.to_vec(), OpKind::Reshape, vec![self.clone()])
    }

    /// Copy-permute of the axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<E> {
        assert_eq!(perm.len(), self.rank(), "permute: {perm:?} does not match rank {}", self.rank());
        let in_shape = self.shape();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(&self.data(), in_shape, perm);
        Tensor::from_op(
            data,
            out_shape,
            OpKind::Permute { perm: perm.to_vec() },
            vec![self.clone()],
        )
    }

    pub fn transpose2d(&self) -> Tensor<E> {
        assert_eq!(self.rank(), 2, "transpose2d: expected rank 2, got {:?}", self.shape());
        self.permute(&[1, 0])
    }

    /// Concatenation along `axis`; all other extents must match.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat: no inputs");
        let rank = parts[0].rank();
        assert!(axis < rank, "concat: axis {axis} out of range");
        let mut shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            assert_eq!(p.rank(), rank, "concat: rank mismatch");
            for (ax, (&d, &d0)) in p.shape().iter().zip(parts[0].shape()).enumerate() {
                assert!(
                    ax == axis || d == d0,
                    "concat: shape mismatch {:?} vs {:?} outside axis {axis}",
                    p.shape(),
                    parts[0].shape()
                );
            }
        }
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        for o in 0..outer {
            for p in parts {
                let ext = p.shape()[axis];
                let d = p.data();
                let base = o * ext * inner;
                out.extend_from_slice(&d[base..base + ext * inner]);
            }
        }
        let inputs = parts.iter().map(|&p| p.clone()).collect();
        Tensor::from_op(out, shape, OpKind::Concat { axis }, inputs)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        assert!(axis < self.rank(), "slice: axis {axis} out of range");
        let in_shape = self.shape();
        assert!(
            start + len <= in_shape[axis],
            "slice: range {start}..{} exceeds extent {} of shape {:?}",
            start + len,
            in_shape[axis],
            in_shape
        );
        let mut shape = in_shape.to_vec();
        shape[axis] = len;
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        Tensor::from_op(out, shape, OpKind::Slice { axis, start }, vec![self.clone()])
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// The right operand may be rank 2, in which case it is shared across the
    /// left operand's leading batch axes.
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        let (m, k, n, batch, out_shape) = matmul_dims(self.shape(), other.shape());
        let a = self.data();
        let b = other.data();
        let shared_rhs = other.rank() == 2 && self.rank() > 2;
        let mut out = vec![E::zero(); batch * m * n];
        for bi in 0..batch {
            let ab = &a[bi * m * k..(bi + 1) * m * k];
            let bb = if shared_rhs { &b[..] } else { &b[bi * k * n..(bi + 1) * k * n] };
            mm_acc(ab, bb, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        drop(a);
        drop(b);
        Tensor::from_op(out, out_shape, OpKind::Matmul, vec![self.clone(), other.clone()])
    }

    /// Per-channel normalization over all non-channel axes of an `[N,C,..]`
    /// tensor. In training mode the batch statistics are used and
    /// `running_mean`/`running_var` are updated in place by `momentum`;
    /// otherwise the running statistics normalize the input.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        running_mean: &mut [E],
        running_var: &mut [E],
        training: bool,
        eps: E,
        momentum: E,
    ) -> Tensor<E> {
        assert!(self.rank() >= 2, "batch_norm: input must be [N,C,..], got {:?}", self.shape());
        let channels = self.shape()[1];
        assert!(
            gamma.numel() == channels && beta.numel() == channels && running_mean.len() == channels,
            "batch_norm: channel mismatch: input has {channels} channels, gamma {}, beta {}",
            gamma.numel(),
            beta.numel()
        );
        let (mean, var) = if training {
            let (m, v) = channel_stats(&self.data(), self.shape());
            for c in 0..channels {
                running_mean[c] = (E::one() - momentum) * running_mean[c] + momentum * m[c];
                running_var[c] = (E::one() - momentum) * running_var[c] + momentum * v[c];
            }
            (m, v)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let src = self.data();
        let g = gamma.data();
        let b = beta.data();
        let inner: usize = self.shape()[2..].iter().product();
        let batch = self.shape()[0];
        let mut out = vec![E::zero(); src.len()];
        for ni in 0..batch {
            for c in 0..channels {
                let base = (ni * channels + c) * inner;
                let scale = g[c] * inv_std[c];
                let shift = b[c] - mean[c] * scale;
                for i in 0..inner {
                    out[base + i] = src[base + i] * scale + shift;
                }
            }
        }
        drop(src);
        drop(g);
        drop(b);
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            OpKind::BatchNorm {
                training,
                mean,
                inv_std,
            },
            vec![self.clone(), gamma.clone(), beta.clone()],
        )
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize, Vec<usize>) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul: operands must be rank >= 2, got {a:?} and {b:?}");
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    assert_eq!(k, kb, "matmul: inner dimension mismatch between {a:?} and {b:?}");
    if b.len() == 2 {
        let batch: usize = a[..a.len() - 2].iter().product();
        let mut out = a[..a.len() - 2].to_vec();
        out.push(m);
        out.push(n);
        (m, k, n, batch, out)
    } else {
        assert_eq!(
            &a[..a.len() - 2],
            &b[..b.len() - 2],
            "matmul: batch extents mismatch between {a:?} and {b:?}"
        );
        let batch: usize = a[..a.len() - 2].iter().product();
        let mut out = a[..a.len() - 2].to_vec();
        out.push(m);
        out.push(n);
        (m, k, n, batch, out)
    }
}

/// `out += a · b` for contiguous row-major `a: m x k`, `b: k x n`.
pub(crate) fn mm_acc<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    E::gemm_acc(
        m, k, n, a, k as isize, 1, b, n as isize, 1, out, n as isize, 1,
    );
}

fn permute_data<E: Elem>(src: &[E], in_shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = in_shape.iter().product();
    let mut out = vec![E::zero(); numel];
    // Hoist the innermost output axis; the outer axes advance by odometer.
    let inner_ext = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    let mut written = 0usize;
    while written < numel {
        let dst = &mut out[written..written + inner_ext];
        if inner_step == 1 {
            dst.copy_from_slice(&src[base..base + inner_ext]);
        } else {
            let mut is = base;
            for d in dst.iter_mut() {
                *d = src[is];
                is += inner_step;
            }
        }
        written += inner_ext;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            base -= step[ax] * out_shape[ax];
        }
    }
    out
}

fn channel_stats<E: Elem>(data: &[E], shape: &[usize]) -> (Vec<E>, Vec<E>) {
    let batch = shape[0];
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    let count = el::<E>((batch * inner) as f64);
    let mut mean = vec![E::zero(); channels];
    let mut var = vec![E::zero(); channels];
    for c in 0..channels {
        let mut s = E::zero();
        for ni in 0..batch {
            let base = (ni * channels + c) * inner;
            for i in 0..inner {
                s = s + data[base + i];
            }
        }
        mean[c] = s / count;
        let mut v = E::zero();
        for ni in 0..batch {
            let base = (ni * channels + c) * inner;
            for i in 0..inner {
                let d = data[base + i] - mean[c];
                v = v + d * d;
            }
        }
        var[c] = v / count;
    }
    (mean, var)
}

// ---------------------------------------------------------------------------
// Backward dispatch
// ---------------------------------------------------------------------------

fn backward_op<E: Elem>(node: &Node<E>, out_shape: &[usize], out_data: &[E], grad: &[E]) {
    match &node.kind {
        OpKind::Add => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            a.accumulate_grad(&reduce_to_shape(grad, out_shape, a.shape()));
            b.accumulate_grad(&reduce_to_shape(grad, out_shape, b.shape()));
        }
        OpKind::Sub => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            a.accumulate_grad(&reduce_to_shape(grad, out_shape, a.shape()));
            let neg: Vec<E> = grad.iter().map(|&g| -g).collect();
            b.accumulate_grad(&reduce_to_shape(&neg, out_shape, b.shape()));
        }
        OpKind::Mul => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            if a.requires_grad() {
                let ga = {
                    let bd = b.data();
                    if b.shape() == out_shape {
                        grad.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect::<Vec<E>>()
                    } else {
                        let sb = broadcast_strides(b.shape(), out_shape);
                        mul_broadcast_grad(grad, &bd, out_shape, &sb)
                    }
                };
                a.accumulate_grad(&reduce_to_shape(&ga, out_shape, a.shape()));
            }
            if b.requires_grad() {
                let gb = {
                    let ad = a.data();
                    if a.shape() == out_shape {
                        grad.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect::<Vec<E>>()
                    } else {
                        let sa = broadcast_strides(a.shape(), out_shape);
                        mul_broadcast_grad(grad, &ad, out_shape, &sa)
                    }
                };
                b.accumulate_grad(&reduce_to_shape(&gb, out_shape, b.shape()));
            }
        }
        OpKind::Scale(c) => {
            let dg: Vec<E> = grad.iter().map(|&g| g * *c).collect();
            node.inputs[0].accumulate_grad(&dg);
        }
        OpKind::Abs => {
            let x = node.inputs[0].data();
            let dg: Vec<E> = grad
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| {
                    if v > E::zero() {
                        g
                    } else if v < E::zero() {
                        -g
                    } else {
                        E::zero()
                    }
                })
                .collect();
            drop(x);
            node.inputs[0].accumulate_grad(&dg);
        }
        OpKind::Matmul => backward_matmul(node, grad),
        OpKind::Conv2d { stride, pad } => conv::backward_conv2d(node, grad, *stride, *pad),
        OpKind::ConvTranspose2d { stride, pad } => {
            conv::backward_conv_transpose2d(node, grad, *stride, *pad)
        }
        OpKind::ConvTranspose1d { stride } => conv::backward_conv_transpose1d(node, grad, *stride),
        OpKind::BatchNorm {
            training,
            mean,
            inv_std,
        } => backward_batch_norm(node, grad, *training, mean, inv_std),
        OpKind::LeakyRelu { slope } => {
            let x = node.inputs[0].data();
            let dg: Vec<E> = grad
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > E::zero() { g } else { g * *slope })
                .collect();
            drop(x);
            node.inputs[0].accumulate_grad(&dg);
        }
        OpKind::Sigmoid => {
            let dg: Vec<E> = grad
                .iter()
                .zip(out_data)
                .map(|(&g, &y)| g * y * (E::one() - y))
                .collect();
            node.inputs[0].accumulate_grad(&dg);
        }
        OpKind::Softmax { axis } => {
            let alen = out_shape[*axis];
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let mut dg = vec![E::zero(); out_data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * alen * inner + i;
                    let mut dot = E::zero();
                    for a in 0..alen {
                        let p = base + a * inner;
                        dot = dot + grad[p] * out_data[p];
                    }
                    for a in 0..alen {
                        let p = base + a * inner;
                        dg[p] = out_data[p] * (grad[p] - dot);
                    }
                }
            }
            node.inputs[0].accumulate_grad(&dg);
        }
        OpKind::WindowAttention {
            span,
            value_sign,
            inv_scale,
            weights,
        } => window::backward_window_attention(node, grad, *span, *value_sign, *inv_scale, weights),
        OpKind::Reshape => {
            node.inputs[0].accumulate_grad(grad);
        }
        OpKind::Permute { perm } => {
            let mut inverse = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let dg = permute_data(grad, out_shape, &inverse);
            node.inputs[0].accumulate_grad(&dg);
        }
        OpKind::Concat { axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total_ext = out_shape[*axis];
            let mut offset = 0usize;
            for input in &node.inputs {
                let ext = input.shape()[*axis];
                if input.requires_grad() {
                    let mut dg = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total_ext + offset) * inner;
                        dg.extend_from_slice(&grad[base..base + ext * inner]);
                    }
                    input.accumulate_grad(&dg);
                }
                offset += ext;
            }
        }
        OpKind::Slice { axis, start } => {
            let input = &node.inputs[0];
            let in_shape = input.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let len = out_shape[*axis];
            let mut dg = vec![E::zero(); input.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * in_shape[*axis] + start) * inner;
                dg[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
            }
            input.accumulate_grad(&dg);
        }
        OpKind::SumAll => {
            let g = grad[0];
            let dg = vec![g; node.inputs[0].numel()];
            node.inputs[0].accumulate_grad(&dg);
        }
        OpKind::MeanAll => {
            let n = el::<E>(node.inputs[0].numel() as f64);
            let g = grad[0] / n;
            let dg = vec![g; node.inputs[0].numel()];
            node.inputs[0].accumulate_grad(&dg);
        }
    }
}

fn mul_broadcast_grad<E: Elem>(
    grad: &[E],
    other: &[E],
    out_shape: &[usize],
    other_strides: &[usize],
) -> Vec<E> {
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut io = 0usize;
    for &g in grad.iter().take(numel) {
        out.push(g * other[io]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            io += other_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            io -= other_strides[ax] * out_shape[ax];
        }
    }
    out
}

fn backward_matmul<E: Elem>(node: &Node<E>, grad: &[E]) {
    let a = &node.inputs[0];
    let b = &node.inputs[1];
    let (m, k, n, batch, _) = matmul_dims(a.shape(), b.shape());
    let shared_rhs = b.rank() == 2 && a.rank() > 2;
    if a.requires_grad() {
        // dA = dC · B^T, the transpose expressed through strides.
        let bd = b.data();
        let mut da = vec![E::zero(); a.numel()];
        for bi in 0..batch {
            let bb = if shared_rhs { &bd[..] } else { &bd[bi * k * n..(bi + 1) * k * n] };
            E::gemm_acc(
                m,
                n,
                k,
                &grad[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
                bb,
                1,
                n as isize,
                &mut da[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
            );
        }
        drop(bd);
        a.accumulate_grad(&da);
    }
    if b.requires_grad() {
        // dB = A^T · dC, accumulated over the batch when B is shared.
        let ad = a.data();
        let mut db = vec![E::zero(); b.numel()];
        for bi in 0..batch {
            let dst = if shared_rhs { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
            E::gemm_acc(
                k,
                m,
                n,
                &ad[bi * m * k..(bi + 1) * m * k],
                1,
                k as isize,
                &grad[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
                dst,
                n as isize,
                1,
            );
        }
        drop(ad);
        b.accumulate_grad(&db);
    }
}

fn backward_batch_norm<E: Elem>(
    node: &Node<E>,
    grad: &[E],
    training: bool,
    mean: &[E],
    inv_std: &[E],
) {
    let x = &node.inputs[0];
    let gamma = &node.inputs[1];
    let beta = &node.inputs[2];
    let shape = x.shape();
    let batch = shape[0];
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    let count = el::<E>((batch * inner) as f64);
    let xd = x.data();
    let gd = gamma.data();

    let mut dgamma = vec![E::zero(); channels];
    let mut dbeta = vec![E::zero(); channels];
    let mut dx = vec![E::zero(); xd.len()];

    for c in 0..channels {
        let mut sum_g = E::zero();
        let mut sum_gx = E::zero();
        for ni in 0..batch {
            let base = (ni * channels + c) * inner;
            for i in 0..inner {
                let g = grad[base + i];
                let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * xhat;
            }
        }
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        if x.requires_grad() {
            let gc = gd[c];
            for ni in 0..batch {
                let base = (ni * channels + c) * inner;
                for i in 0..inner {
                    let g = grad[base + i] * gc;
                    if training {
                        let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                        dx[base + i] = inv_std[c] / count
                            * (count * g - sum_g * gc - xhat * sum_gx * gc);
                    } else {
                        dx[base + i] = g * inv_std[c];
                    }
                }
            }
        }
    }
    drop(xd);
    drop(gd);
    if x.requires_grad() {
        x.accumulate_grad(&dx);
    }
    gamma.accumulate_grad(&dgamma);
    beta.accumulate_grad(&dbeta);
}
