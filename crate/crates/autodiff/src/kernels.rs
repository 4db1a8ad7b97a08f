//! Dense kernels shared by the tape and the tape-free forward path.

use crate::network::Activation;

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`. Strides describe
/// how `a` (`m x k`) and `b` (`k x n`) are laid out, so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let max_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(max_a < a.len() && max_b < b.len());
    // SAFETY: the bounds asserted above cover every element the kernel reads
    // and `c` holds at least `m * n` elements written with row stride `n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x (rows x in) * w (in x out) + bias`.
pub(crate) fn linear(x: &[f64], rows: usize, inp: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, inp, out, x, (inp, 1), w, (out, 1), 1.0, &mut y);
    y
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn activate(kind: Activation, x: &[f64]) -> Vec<f64> {
    match kind {
        Activation::Identity => x.to_vec(),
        Activation::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
        Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Tanh => x.iter().map(|v| v.tanh()).collect(),
    }
}

/// Accumulates `dx += dy * f'(x)` given pre-activation `x` and output `y`.
pub(crate) fn activate_backward(kind: Activation, x: &[f64], y: &[f64], dy: &[f64], dx: &mut [f64]) {
    match kind {
        Activation::Identity => dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g),
        Activation::Silu => {
            for i in 0..dx.len() {
                let s = sigmoid(x[i]);
                dx[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
            }
        }
        Activation::Sigmoid => {
            for i in 0..dx.len() {
                dx[i] += dy[i] * y[i] * (1.0 - y[i]);
            }
        }
        Activation::Tanh => {
            for i in 0..dx.len() {
                dx[i] += dy[i] * (1.0 - y[i] * y[i]);
            }
        }
    }
}
