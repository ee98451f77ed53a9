use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense n-dimensional array of `f64` values in row-major order.
///
/// The universal carrier for activations, weights and gradients. The data
/// length always equals the product of the shape extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Extent of axis `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise add of mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn squared_frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rejects tensors carrying NaN or infinity; used at trust boundaries
    /// (checkpoint and dataset ingestion).
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!(
                "{context}: tensor contains non-finite values"
            )))
        }
    }

    /// Flat offset of `[b, c, y, x]` in a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx4(b, c, y, x)]
    }

    #[inline]
    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.idx4(b, c, y, x);
        self.data[i] = value;
    }

    /// Borrows the contiguous `h*w` plane of image `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 4);
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Copies one image `[c, h, w]` out of a batch tensor `[n, c, h, w]`.
    pub fn image(&self, b: usize) -> Tensor {
        debug_assert_eq!(self.shape.len(), 4);
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: vec![1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[b * chw..(b + 1) * chw].to_vec(),
        }
    }

    /// Stacks images `[1, c, h, w]` into a batch `[n, c, h, w]`.
    pub fn stack(images: &[Tensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("cannot stack an empty list of tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * images.len());
        for img in images {
            if img.shape != first.shape {
                return Err(Error::Dimension(format!(
                    "cannot stack tensors of shapes {:?} and {:?}",
                    first.shape, img.shape
                )));
            }
            data.extend_from_slice(&img.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = images.len() * first.shape[0];
        Ok(Tensor { shape, data })
    }
}

/// Per-layer boolean keep mask over the output channels of a convolutional
/// layer. `true` keeps the channel, `false` zeroes it (bias included) so the
/// channel carries no information downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layer_index: usize,
    pub bits: Vec<bool>,
}

impl ChannelMask {
    pub fn all_true(layer_index: usize, channels: usize) -> Self {
        ChannelMask {
            layer_index,
            bits: vec![true; channels],
        }
    }

    /// Mask keeping every channel except those in `pruned`.
    pub fn dropping(layer_index: usize, channels: usize, pruned: &[usize]) -> Result<Self> {
        let mut bits = vec![true; channels];
        for &p in pruned {
            if p >= channels {
                return Err(Error::Input(format!(
                    "channel {p} out of range for layer {layer_index} with {channels} channels"
                )));
            }
            bits[p] = false;
        }
        Ok(ChannelMask { layer_index, bits })
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.bits.len() - self.kept_count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (!b).then_some(i))
            .collect()
    }

    pub fn is_all_true(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn idx4_is_row_major() {
        let mut t = Tensor::zeros(&[2, 3, 4, 5]);
        t.set4(1, 2, 3, 4, 7.0);
        assert_eq!(t.data()[t.len() - 1], 7.0);
        assert_eq!(t.at4(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn stack_and_image_roundtrip() {
        let a = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1, 2]);
        assert_eq!(s.image(0), a);
        assert_eq!(s.image(1), b);
    }

    #[test]
    fn mask_accounting() {
        let m = ChannelMask::dropping(3, 5, &[1, 4]).unwrap();
        assert_eq!(m.kept_count(), 3);
        assert_eq!(m.pruned_count(), 2);
        assert_eq!(m.kept_indices(), vec![0, 2, 3]);
        assert_eq!(m.pruned_indices(), vec![1, 4]);
        assert!(ChannelMask::dropping(0, 2, &[2]).is_err());
    }
}
