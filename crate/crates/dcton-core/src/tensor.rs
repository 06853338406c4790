//! Dense row-major tensors over `f32`/`f64` with copy-on-write storage.

use std::sync::Arc;

/// Element types the engine runs on. `f32` is the training dtype; `f64` is
/// used for geometry solves and finite-difference gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Dtype tag written into tensor files.
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn to_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_bytes(bytes: &[u8]) -> Self;
    /// Bytes per element in the file encoding.
    const BYTE_WIDTH: usize;

    /// `C = alpha * A * B + beta * C` with explicit strides (row/col stride
    /// per matrix), dispatching to the sgemm/dgemm kernels.
    ///
    /// # Safety
    /// `a`, `b` and `c` must stay in bounds for every index reachable via
    /// the given dimensions and strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Element type tags for the tensor file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $width:expr, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;
            const BYTE_WIDTH: usize = $width;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }

            fn to_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_bits().to_le_bytes());
            }
            fn from_le_bytes(bytes: &[u8]) -> Self {
                let mut raw = [0u8; $width];
                raw.copy_from_slice(bytes);
                <$t>::from_le_bytes(raw)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4, matrixmultiply::sgemm);
impl_scalar!(f64, Dtype::F64, 8, matrixmultiply::dgemm);

/// Row-major dense tensor. Cloning is cheap (shared storage); mutation
/// copies only when the buffer is shared.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; len]) }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match buffer of {} elements",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        assert_eq!(self.len(), shape.iter().product::<usize>());
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combine with an equally-shaped tensor.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_vec(&self.shape, data)
    }

    /// `self += other` in place.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    /// Convert elementwise into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Bitwise equality of shape and payload (exact, not approximate).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

/// Safe wrapper around the strided GEMM kernels; callers guarantee the
/// stride patterns address only valid elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= 1 + ((m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa) as usize);
    debug_assert!(b.len() >= 1 + ((k.max(1) - 1) as isize * rsb + (n - 1) as isize * csb) as usize);
    debug_assert!(c.len() >= 1 + ((m - 1) as isize * rsc + (n - 1) as isize * csc) as usize);
    unsafe {
        T::gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
    }
}
