use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{fresh_leaf_id, Gradients, Tensor};

/// A trainable array. Each call to [`Param::tensor`] yields a leaf sharing the
/// current buffer; updates copy-on-write so live graphs keep their values.
pub struct Param {
    id: u64,
    shape: Vec<usize>,
    value: RefCell<Rc<Vec<f64>>>,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param").field("id", &self.id).field("shape", &self.shape).finish()
    }
}

impl Param {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param data does not match {shape:?}");
        Param { id: fresh_leaf_id(), shape: shape.to_vec(), value: RefCell::new(Rc::new(data)) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::leaf(self.value.borrow().clone(), self.shape.clone(), self.id)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value.borrow().as_ref().clone()
    }

    pub fn set(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "param size mismatch");
        *self.value.borrow_mut() = Rc::new(data);
    }

    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        let mut slot = self.value.borrow_mut();
        f(Rc::make_mut(&mut slot).as_mut_slice());
    }

    pub fn grad<'g>(&self, grads: &'g Gradients) -> Option<&'g [f64]> {
        grads.get_id(self.id)
    }
}

/// Ordered `(name, param)` pairs of a module tree.
pub type NamedParams<'a> = Vec<(String, &'a Param)>;

/// Anything that owns parameters.
pub trait Module {
    /// Visits every parameter with a dotted, stable name.
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));

    fn named_params(&self) -> NamedParams<'_> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name, p)));
        out
    }

    fn params(&self) -> Vec<&Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Joins a prefix and a field name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
