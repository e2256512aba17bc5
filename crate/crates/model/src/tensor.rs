//! Flat row-major f64 tensors and GEMM helpers.

use matrixmultiply::dgemm;

/// Dense row-major tensor. Shape is advisory; ops read data flat with
//  explicit dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows when the tensor is viewed as 2D with `cols` trailing columns.
    pub fn rows_for(&self, cols: usize) -> usize {
        debug_assert_eq!(self.data.len() % cols, 0);
        self.data.len() / cols
    }
}

/// `C = alpha * A' * B' + beta * C` where `A'` is `a` viewed as logical
/// `(m, k)` after optional transposition of its stored row-major layout,
/// and likewise `B'` as `(k, n)`. `c` is always stored row-major `(m, n)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k, "a too short: {} < {}", a.len(), m * k);
    debug_assert!(b.len() >= k * n, "b too short: {} < {}", b.len(), k * n);
    debug_assert!(c.len() >= m * n, "c too short: {} < {}", c.len(), m * n);
    // Stored layouts: if not transposed, A is (m, k) with strides (k, 1);
    // if transposed, A is stored (k, m) and the logical (i, j) element sits
    // at j * m + i, i.e. strides (1, m).
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
