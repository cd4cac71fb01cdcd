use super::Matrix;

/// A named tensor with its gradient buffer and a frozen flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix, frozen: bool) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
            frozen,
        }
    }

    pub fn trainable(name: impl Into<String>, value: Matrix) -> Self {
        Self::new(name, value, false)
    }

    pub fn frozen(name: impl Into<String>, value: Matrix) -> Self {
        Self::new(name, value, true)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that owns an ordered collection of parameters.
///
/// The visiting order must be stable: optimizers, gradient buffers and
/// checkpoints all rely on it.
pub trait ParameterSet {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    /// Shapes of the non-frozen parameters in visiting order.
    fn trainable_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            if !p.frozen {
                out.push(p.value.shape());
            }
        });
        out
    }

    /// Adds a flat gradient list (one matrix per trainable parameter, in
    /// visiting order) into the parameters' `grad` buffers.
    fn accumulate_grads(&mut self, grads: &[Matrix]) {
        let mut i = 0;
        self.visit_mut(&mut |p| {
            if !p.frozen {
                p.grad.add_assign(&grads[i]);
                i += 1;
            }
        });
        debug_assert_eq!(i, grads.len());
    }
}

impl ParameterSet for Vec<Parameter> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.iter().for_each(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.iter_mut().for_each(f)
    }
}
