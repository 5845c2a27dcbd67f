//! Dense row-major tensor storage and the `TSR1` on-disk format.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major. `data.len()` always equals the
/// product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TensorBase<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be positive");
        let len = shape.iter().product();
        TensorBase { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-sized dimension".into()));
        }
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                len
            )));
        }
        Ok(TensorBase { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: S) -> Self {
        TensorBase { shape: vec![1], data: vec![value] }
    }

    /// Uniform init in `±limit`, consuming the rng deterministically.
    pub fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| S::of(rng.gen_range(-limit..=limit)))
            .collect();
        TensorBase { shape: shape.to_vec(), data }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Reinterprets the buffer under a new shape of identical volume.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn write_tsr<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"TSR1")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_tsr<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"TSR1" {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "bad tensor magic (expected TSR1)",
            ));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let rank = u32::from_le_bytes(buf4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf8 = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf8)?;
            data.push(S::of(f64::from_le_bytes(buf8)));
        }
        TensorBase::from_vec(&shape, data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }
}

/// A value tensor paired with a gradient accumulator of identical shape.
#[derive(Debug, Clone)]
pub struct DualTensorBase<S = f64> {
    pub value: TensorBase<S>,
    pub grad: TensorBase<S>,
}

impl<S: Scalar> DualTensorBase<S> {
    pub fn new(value: TensorBase<S>) -> Self {
        let grad = TensorBase::zeros(value.shape());
        DualTensorBase { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Tensor = TensorBase<f64>;

    #[test]
    fn from_vec_rejects_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn tsr_round_trip() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TSR1");
        let back = Tensor::read_tsr(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tsr_rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(Tensor::read_tsr(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn dual_zero_grad() {
        let mut d = DualTensorBase::new(Tensor::filled(&[4], 2.0));
        d.grad.data_mut()[1] = 5.0;
        d.zero_grad();
        assert!(d.grad.iter().all(|&v| v == 0.0));
    }
}
