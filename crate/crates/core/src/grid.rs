//! Row-major `H x W` grids: grayscale images, probability maps and masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Grayscale intensities, nominally in `[0, 1]`.
pub type Image = Grid<f64>;
/// Per-pixel foreground probabilities in `[0, 1]`.
pub type SoftSegMap = Grid<f64>;
/// Binary segmentation mask.
pub type SegMap = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "grid",
                format!("{height}x{width} grid needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
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

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn check_same_dims<U>(&self, other: &Grid<U>, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }
}

impl Grid<f64> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// `[1, H, W]` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("grid dims are consistent")
    }

    /// Accepts `[H, W]` or `[1, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] | [1, h, w] => Self::from_vec(*h, *w, t.data().to_vec()),
            other => Err(Error::shape("grid", format!("cannot view tensor {other:?} as an image"))),
        }
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> Grid<f64> {
        self.map(|&b| if b { 1.0 } else { 0.0 })
    }
}

/// Hardens a probability map: a pixel is foreground iff `p >= threshold`.
pub fn binarize(soft: &SoftSegMap, threshold: f64) -> SegMap {
    soft.map(|&p| p >= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_rules() {
        let hi = Grid::filled(3, 3, 0.9);
        assert!(binarize(&hi, 0.5).data().iter().all(|&b| b));
        let lo = Grid::filled(3, 3, 0.1);
        assert!(binarize(&lo, 0.5).data().iter().all(|&b| !b));
        let mut tie = Grid::filled(2, 2, 0.2);
        tie.set(1, 0, 0.5);
        let m = binarize(&tie, 0.5);
        assert_eq!(m.count(), 1);
        assert!(*m.get(1, 0));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Grid::from_fn(2, 3, |r, c| (r * 3 + c) as f64 / 10.0);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(Grid::from_tensor(&t).unwrap(), img);
        assert!(Grid::<f64>::from_tensor(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
