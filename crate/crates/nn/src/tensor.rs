use crate::real::Real;

/// Dense row-major tensor. Image batches use NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match {} elements", data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Shape as `(n, c, h, w)`; panics unless rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            s => panic!("expected rank-4 tensor, got shape {s:?}"),
        }
    }

    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            &[a, b] => (a, b),
            s => panic!("expected rank-2 tensor, got shape {s:?}"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|x| U::from_f64(x.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero)).collect())
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty());
        let (_, c, h, w) = items[0].dims4();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4();
            assert_eq!((tc, th, tw), (c, h, w), "batch items differ in shape");
            data.extend_from_slice(&t.data);
            n += tn;
        }
        Self::from_vec(&[n, c, h, w], data)
    }
}
