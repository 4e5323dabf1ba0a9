use std::sync::Arc;

use crate::error::{Error, Result};

use super::nifti::RawHeader;

/// A 3-D field stored `(slice, row, col)` with the column index fastest.
///
/// `spacing` and `origin` use the same axis order, in millimetres. Equality
/// compares geometry and values; the carried container header is ignored.
#[derive(Debug, Clone)]
pub struct Grid<T> {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<T>,
    /// Container header carried through untouched operations so that
    /// orientation metadata survives a load/save round trip.
    pub(crate) header: Option<Arc<RawHeader>>,
}

/// Scalar image volume.
pub type VolumeGrid = Grid<f32>;

/// Integer label volume.
pub type LabelMap = Grid<u8>;

/// Label values of the challenge convention: background, LV pool, LV myocardium, RV.
pub const CHALLENGE_LABELS: [u8; 4] = [0, 1, 2, 3];
/// Label values used internally: background, merged LV, RV.
pub const INTERNAL_LABELS: [u8; 3] = [0, 1, 2];
/// Internal label of the right ventricle.
pub const RV_LABEL: u8 = 2;
/// Internal label of the merged left ventricle.
pub const LV_LABEL: u8 = 1;

impl<T: PartialEq> PartialEq for Grid<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.spacing == other.spacing && self.origin == other.origin && self.data == other.data
    }
}

impl<T: Copy> Grid<T> {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        Self::with_origin(shape, spacing, [0.0; 3], data)
    }

    pub fn with_origin(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::validation(format!("grid dimensions must be >= 1, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(format!("spacing must be positive, got {spacing:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::validation(format!(
                "grid {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            spacing,
            origin,
            data,
            header: None,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
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

    pub fn slices(&self) -> usize {
        self.shape[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[1]
    }

    pub fn cols(&self) -> usize {
        self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, s: usize, r: usize, c: usize) -> usize {
        (s * self.shape[1] + r) * self.shape[2] + c
    }

    #[inline]
    pub fn get(&self, s: usize, r: usize, c: usize) -> T {
        self.data[self.index(s, r, c)]
    }

    /// One in-plane slice, row-major.
    pub fn slice(&self, s: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2];
        &self.data[s * n..(s + 1) * n]
    }

    /// Same shape, spacing and origin.
    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        self.shape == other.shape && self.spacing == other.spacing && self.origin == other.origin
    }

    /// A new grid on this one's geometry (header included).
    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            spacing: self.spacing,
            origin: self.origin,
            data: self.data.iter().map(|&v| f(v)).collect(),
            header: self.header.clone(),
        }
    }

    /// Replaces the data, keeping geometry and header.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Grid<U>> {
        if data.len() != self.data.len() {
            return Err(Error::validation("replacement data has the wrong length"));
        }
        Ok(Grid {
            shape: self.shape,
            spacing: self.spacing,
            origin: self.origin,
            data,
            header: self.header.clone(),
        })
    }

    /// Copies the container header of `other` (used when writing results in
    /// another grid's geometry).
    pub fn inherit_header<U>(&mut self, other: &Grid<U>) {
        self.header = other.header.clone();
    }

    pub fn set_spacing(&mut self, spacing: [f64; 3]) -> Result<()> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(format!("spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(())
    }

    pub fn set_origin(&mut self, origin: [f64; 3]) {
        self.origin = origin;
    }
}

impl LabelMap {
    /// Fails unless every value belongs to `allowed`.
    pub fn check_labels(&self, allowed: &[u8]) -> Result<()> {
        match self.data.iter().find(|v| !allowed.contains(v)) {
            Some(v) => Err(Error::validation(format!(
                "label value {v} outside the allowed set {allowed:?}"
            ))),
            None => Ok(()),
        }
    }

    /// Voxel count per label value.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0usize; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}
