use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Maps the upstream gradient of an op's output to per-parent gradients.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

static NEXT_LEAF_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_leaf_id() -> u64 {
    NEXT_LEAF_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether new operations record backward closures on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables tape recording until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

struct Node {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    leaf_id: Option<u64>,
    requires_grad: bool,
}

/// Dense row-major `f64` tensor with an optional autodiff history.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "buffer length does not match shape {shape:?}"
        );
        Self::constant(Rc::new(data), shape.to_vec())
    }

    pub(crate) fn constant(data: Rc<Vec<f64>>, shape: Vec<usize>) -> Self {
        Tensor(Rc::new(Node {
            data,
            shape,
            parents: Vec::new(),
            backward: None,
            leaf_id: None,
            requires_grad: false,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(vec![value], &[])
    }

    /// A leaf whose gradient is tracked; retrieve it with [`Gradients::get`].
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Self {
        let t = Self::from_vec(data, shape);
        Self::leaf(t.0.data.clone(), shape.to_vec(), fresh_leaf_id())
    }

    pub(crate) fn leaf(data: Rc<Vec<f64>>, shape: Vec<usize>, id: u64) -> Self {
        let requires_grad = grad_enabled();
        Tensor(Rc::new(Node {
            data,
            shape,
            parents: Vec::new(),
            backward: None,
            leaf_id: Some(id),
            requires_grad,
        }))
    }

    /// Builds the output of a custom differentiable operation.
    ///
    /// When recording is disabled or no parent requires a gradient the
    /// closure is dropped and the result is a constant.
    pub fn from_op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "op output does not match shape {shape:?}");
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::constant(Rc::new(data), shape);
        }
        Tensor(Rc::new(Node {
            data: Rc::new(data),
            shape,
            parents,
            backward: Some(backward),
            leaf_id: None,
            requires_grad: true,
        }))
    }

    /// Same data, new shape, gradient passed straight through.
    pub(crate) fn with_shared_data(&self, shape: Vec<usize>) -> Self {
        let track = grad_enabled() && self.requires_grad();
        if !track {
            return Self::constant(self.0.data.clone(), shape);
        }
        Tensor(Rc::new(Node {
            data: self.0.data.clone(),
            shape,
            parents: vec![self.clone()],
            backward: Some(Box::new(|g: &[f64]| vec![Some(g.to_vec())])),
            leaf_id: None,
            requires_grad: true,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Tensor {
        Self::constant(self.0.data.clone(), self.0.shape.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar, got shape {:?}", self.shape());
        let order = self.topological_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(Rc::as_ptr(&self.0), vec![1.0]);
        let mut leaves = BTreeMap::new();
        for t in order.iter().rev() {
            let key = Rc::as_ptr(&t.0);
            let Some(grad) = pending.remove(&key) else {
                continue;
            };
            if let Some(id) = t.0.leaf_id {
                accumulate(leaves.entry(id).or_insert_with(|| vec![0.0; grad.len()]), &grad);
                continue;
            }
            let Some(backward) = &t.0.backward else {
                continue;
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), t.0.parents.len());
            for (parent, pg) in t.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match pending.get_mut(&Rc::as_ptr(&parent.0)) {
                    Some(acc) => accumulate(acc, &pg),
                    None => {
                        pending.insert(Rc::as_ptr(&parent.0), pg);
                    }
                }
            }
        }
        Gradients { by_leaf: leaves }
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.parents.iter() {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    pub(crate) fn leaf_id(&self) -> Option<u64> {
        self.0.leaf_id
    }
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Gradients of a scalar with respect to every tracked leaf it depends on.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    /// Ordered by leaf id so that reductions over all gradients are reproducible.
    by_leaf: BTreeMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.leaf_id().and_then(|id| self.by_leaf.get(&id)).map(|v| v.as_slice())
    }

    pub(crate) fn get_id(&self, id: u64) -> Option<&[f64]> {
        self.by_leaf.get(&id).map(|v| v.as_slice())
    }

    pub fn global_norm(&self) -> f64 {
        self.by_leaf.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales every gradient so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.by_leaf.values_mut() {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.by_leaf.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
