//! Dense 2-D fields over the pixel grid.
//!
//! All fields are row-major with `ny` rows and `nx` columns. Index `(i, j)`
//! means row `i` (the y direction) and column `j` (the x direction), and the
//! first component of vector and matrix quantities is always the y one.

use rustfft::num_complex::Complex;

/// Real scalar field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<f64>,
}

impl Field2D {
    pub fn zeros(ny: usize, nx: usize) -> Self {
        assert!(ny > 0 && nx > 0, "field dimensions must be positive");
        Field2D { ny, nx, data: vec![0.0; ny * nx] }
    }

    pub fn from_fn(ny: usize, nx: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Field2D::zeros(ny, nx);
        for i in 0..ny {
            for j in 0..nx {
                out.data[i * nx + j] = f(i, j);
            }
        }
        out
    }

    pub fn from_vec(ny: usize, nx: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), ny * nx, "data length {} does not match {}x{}", data.len(), ny, nx);
        Field2D { ny, nx, data }
    }

    pub fn constant(ny: usize, nx: usize, c: f64) -> Self {
        Field2D { ny, nx, data: vec![c; ny * nx] }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.nx + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.nx + j]
    }

    pub fn same_shape(&self, other: &Field2D) -> bool {
        self.ny == other.ny && self.nx == other.nx
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dot(&self, other: &Field2D) -> f64 {
        assert!(self.same_shape(other), "dot: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Field2D {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// self += s * other, in place.
    pub fn add_scaled(&mut self, other: &Field2D, s: f64) {
        assert!(self.same_shape(other), "add_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Field2D) -> Field2D {
        assert!(self.same_shape(other), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Field2D { ny: self.ny, nx: self.nx, data }
    }

    pub fn add(&self, other: &Field2D) -> Field2D {
        assert!(self.same_shape(other), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Field2D { ny: self.ny, nx: self.nx, data }
    }

    pub fn mul(&self, other: &Field2D) -> Field2D {
        assert!(self.same_shape(other), "mul: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Field2D { ny: self.ny, nx: self.nx, data }
    }
}

/// Complex scalar field, row-major. Used for k-space data and transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField2D {
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<Complex<f64>>,
}

impl ComplexField2D {
    pub fn zeros(ny: usize, nx: usize) -> Self {
        assert!(ny > 0 && nx > 0, "field dimensions must be positive");
        ComplexField2D { ny, nx, data: vec![Complex::new(0.0, 0.0); ny * nx] }
    }

    pub fn from_real(f: &Field2D) -> Self {
        let data = f.data.iter().map(|&r| Complex::new(r, 0.0)).collect();
        ComplexField2D { ny: f.ny, nx: f.nx, data }
    }

    /// Real part, discarding the imaginary component.
    pub fn re(&self) -> Field2D {
        let data = self.data.iter().map(|c| c.re).collect();
        Field2D { ny: self.ny, nx: self.nx, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Complex<f64> {
        self.data[i * self.nx + j]
    }

    pub fn same_shape(&self, other: &ComplexField2D) -> bool {
        self.ny == other.ny && self.nx == other.nx
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn sub(&self, other: &ComplexField2D) -> ComplexField2D {
        assert!(self.same_shape(other), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        ComplexField2D { ny: self.ny, nx: self.nx, data }
    }

    /// Hermitian inner product, conjugating self.
    pub fn dot(&self, other: &ComplexField2D) -> Complex<f64> {
        assert!(self.same_shape(other), "dot: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }
}

/// Vector field with a y plane and an x plane.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2D {
    pub y: Field2D,
    pub x: Field2D,
}

impl VectorField2D {
    pub fn zeros(ny: usize, nx: usize) -> Self {
        VectorField2D { y: Field2D::zeros(ny, nx), x: Field2D::zeros(ny, nx) }
    }

    pub fn new(y: Field2D, x: Field2D) -> Self {
        assert!(y.same_shape(&x), "vector planes must share a shape");
        VectorField2D { y, x }
    }

    pub fn ny(&self) -> usize {
        self.y.ny
    }

    pub fn nx(&self) -> usize {
        self.y.nx
    }

    pub fn norm_sq(&self) -> f64 {
        self.y.norm_sq() + self.x.norm_sq()
    }

    pub fn dot(&self, other: &VectorField2D) -> f64 {
        self.y.dot(&other.y) + self.x.dot(&other.x)
    }

    pub fn sub(&self, other: &VectorField2D) -> VectorField2D {
        VectorField2D { y: self.y.sub(&other.y), x: self.x.sub(&other.x) }
    }

    pub fn add_scaled(&mut self, other: &VectorField2D, s: f64) {
        self.y.add_scaled(&other.y, s);
        self.x.add_scaled(&other.x, s);
    }

    /// Largest pointwise Euclidean length.
    pub fn max_len(&self) -> f64 {
        self.y
            .data
            .iter()
            .zip(&self.x.data)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }
}

/// 2x2 matrix field stored as four planes.
///
/// Component order is m11 = d(comp y)/dy, m12 = d(comp y)/dx,
/// m21 = d(comp x)/dy, m22 = d(comp x)/dx when holding a Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField2D {
    pub m11: Field2D,
    pub m12: Field2D,
    pub m21: Field2D,
    pub m22: Field2D,
}

impl MatrixField2D {
    pub fn zeros(ny: usize, nx: usize) -> Self {
        MatrixField2D {
            m11: Field2D::zeros(ny, nx),
            m12: Field2D::zeros(ny, nx),
            m21: Field2D::zeros(ny, nx),
            m22: Field2D::zeros(ny, nx),
        }
    }

    /// Identity matrix at every pixel.
    pub fn identity(ny: usize, nx: usize) -> Self {
        MatrixField2D {
            m11: Field2D::constant(ny, nx, 1.0),
            m12: Field2D::zeros(ny, nx),
            m21: Field2D::zeros(ny, nx),
            m22: Field2D::constant(ny, nx, 1.0),
        }
    }

    pub fn ny(&self) -> usize {
        self.m11.ny
    }

    pub fn nx(&self) -> usize {
        self.m11.nx
    }

    pub fn norm_sq(&self) -> f64 {
        self.m11.norm_sq() + self.m12.norm_sq() + self.m21.norm_sq() + self.m22.norm_sq()
    }

    pub fn dot(&self, other: &MatrixField2D) -> f64 {
        self.m11.dot(&other.m11)
            + self.m12.dot(&other.m12)
            + self.m21.dot(&other.m21)
            + self.m22.dot(&other.m22)
    }

    pub fn sub(&self, other: &MatrixField2D) -> MatrixField2D {
        MatrixField2D {
            m11: self.m11.sub(&other.m11),
            m12: self.m12.sub(&other.m12),
            m21: self.m21.sub(&other.m21),
            m22: self.m22.sub(&other.m22),
        }
    }
}

/// Pointwise determinant of a matrix field.
pub fn determinant(m: &MatrixField2D) -> Field2D {
    let n = m.m11.len();
    let mut data = Vec::with_capacity(n);
    for k in 0..n {
        data.push(m.m11.data[k] * m.m22.data[k] - m.m12.data[k] * m.m21.data[k]);
    }
    Field2D { ny: m.ny(), nx: m.nx(), data }
}
