use std::rc::Rc;

use ndarray::ArrayD;

use super::Elem;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorRef(pub(crate) usize);

type BackOp<F> = Box<dyn FnOnce(&ArrayD<F>, &mut GradSink<F>)>;

/// Reverse-mode autodiff tape. Operations append nodes; [`Tape::backward`]
/// walks the nodes in reverse creation order, so any forward program yields
/// correct gradients without explicit graph bookkeeping.
pub struct Tape<F: Elem> {
    values: Vec<Rc<ArrayD<F>>>,
    needs_grad: Vec<bool>,
    backops: Vec<Option<BackOp<F>>>,
    grad_enabled: bool,
}

/// Gradient accumulator indexed by node id, passed to backward closures.
pub struct GradSink<F: Elem> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Elem> GradSink<F> {
    /// Accumulate `g` into the gradient of node `idx`. Shapes must match the
    /// node value; callers (op backward closures) guarantee that. Incoming
    /// grads are normalized to standard layout so downstream `as_slice`
    /// consumers always succeed.
    pub fn add(&mut self, idx: usize, g: ArrayD<F>) {
        let g = if g.is_standard_layout() {
            g
        } else {
            g.as_standard_layout().into_owned()
        };
        match &mut self.grads[idx] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<F: Elem> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Elem> Gradients<F> {
    pub fn get(&self, t: TensorRef) -> Option<&ArrayD<F>> {
        self.grads[t.0].as_ref()
    }

    pub fn take(&mut self, t: TensorRef) -> Option<ArrayD<F>> {
        self.grads[t.0].take()
    }
}

impl<F: Elem> Tape<F> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            values: Vec::new(),
            needs_grad: Vec::new(),
            backops: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, t: TensorRef) -> &ArrayD<F> {
        &self.values[t.0]
    }

    pub fn rc(&self, t: TensorRef) -> Rc<ArrayD<F>> {
        Rc::clone(&self.values[t.0])
    }

    pub fn wants_grad(&self, t: TensorRef) -> bool {
        self.needs_grad[t.0]
    }

    /// Register a leaf holding `value`. `needs_grad` only takes effect while
    /// gradients are enabled on this tape.
    pub fn leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> TensorRef {
        self.leaf_shared(Rc::new(value), needs_grad)
    }

    pub fn leaf_shared(&mut self, value: Rc<ArrayD<F>>, needs_grad: bool) -> TensorRef {
        let flag = needs_grad && self.grad_enabled;
        self.push(value, flag, None)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> TensorRef {
        self.leaf(value, false)
    }

    /// Register an op result. The backward closure is only stored when some
    /// parent wants a gradient and gradients are enabled.
    pub(crate) fn push_op<B>(&mut self, value: ArrayD<F>, parents_want: bool, back: B) -> TensorRef
    where
        B: FnOnce(&ArrayD<F>, &mut GradSink<F>) + 'static,
    {
        if self.grad_enabled && parents_want {
            self.push(Rc::new(value), true, Some(Box::new(back)))
        } else {
            self.push(Rc::new(value), false, None)
        }
    }

    fn push(&mut self, value: Rc<ArrayD<F>>, flag: bool, op: Option<BackOp<F>>) -> TensorRef {
        self.values.push(value);
        self.needs_grad.push(flag);
        self.backops.push(op);
        TensorRef(self.values.len() - 1)
    }

    /// Run reverse-mode accumulation from the scalar node `root`. Consumes
    /// the stored backward closures; a tape supports one backward pass.
    pub fn backward(&mut self, root: TensorRef) -> Gradients<F> {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar node"
        );
        let mut sink = GradSink {
            grads: vec![None; self.values.len()],
        };
        sink.grads[root.0] = Some(ArrayD::ones(self.values[root.0].raw_dim()));
        for idx in (0..=root.0).rev() {
            if sink.grads[idx].is_none() {
                continue;
            }
            if let Some(op) = self.backops[idx].take() {
                // Intermediate grads are dropped after use; leaf grads
                // (params, inputs) have no backop and stay for the caller.
                let g = sink.grads[idx].take().expect("grad present");
                op(&g, &mut sink);
            }
        }
        Gradients { grads: sink.grads }
    }
}
