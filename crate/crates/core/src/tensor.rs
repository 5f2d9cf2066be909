//! Dense row-major tensors.

use crate::scalar::Scalar;

/// Dense tensor with a row-major layout. Activations are `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Panics if `data.len()` disagrees with the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack: shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self { shape, data }
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Self {
        let (n, _, h, w) = parts[0].dims4();
        let total_c: usize = parts.iter().map(|p| p.dims4().1).sum();
        let plane = h * w;
        let mut out = Self::zeros(&[n, total_c, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for p in parts {
                let (pn, pc, ph, pw) = p.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat: spatial mismatch");
                let src = &p.data[b * pc * plane..(b + 1) * pc * plane];
                let dst_start = (b * total_c + offset) * plane;
                out.data[dst_start..dst_start + pc * plane].copy_from_slice(src);
                offset += pc;
            }
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor<T>> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(sizes.iter().sum::<usize>(), c, "split sizes do not cover channels");
        let plane = h * w;
        let mut out: Vec<Tensor<T>> = sizes.iter().map(|&s| Self::zeros(&[n, s, h, w])).collect();
        for b in 0..n {
            let mut offset = 0;
            for (part, &s) in out.iter_mut().zip(sizes) {
                let src_start = (b * c + offset) * plane;
                part.data[b * s * plane..(b + 1) * s * plane]
                    .copy_from_slice(&self.data[src_start..src_start + s * plane]);
                offset += s;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::from_vec(&[2, 2, 1, 2], (0..8).map(|v| v as f64 * 10.0).collect());
        let c = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 0.0, 10.0, 20.0, 30.0]);
        let parts = c.split_channels(&[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]);
    }
}
