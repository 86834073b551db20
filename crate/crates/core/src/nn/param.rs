use super::Real;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param value does not match shape");
        Self { name: name.into(), shape, grad: vec![T::zero(); n], value }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let n: usize = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn grad_is_zero(&self) -> bool {
        self.grad.iter().all(|g| *g == T::zero())
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
