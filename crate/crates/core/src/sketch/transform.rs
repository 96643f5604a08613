//! Orthonormal transforms used by the ROS sketch.
//!
//! Both transforms are applied as `v -> H v` where `H` is orthonormal:
//! the Walsh-Hadamard matrix `H_jl = (-1)^popcount(j & l) / sqrt(n)` for
//! power-of-two lengths and the type-II DCT
//! `H_jl = c_j cos(pi (2l + 1) j / (2n))` otherwise.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoTransform {
    Hadamard,
    Dct2,
}

impl OrthoTransform {
    /// Hadamard when `n` is a power of two, DCT-II otherwise.
    pub fn for_len(n: usize) -> Self {
        if n.is_power_of_two() {
            OrthoTransform::Hadamard
        } else {
            OrthoTransform::Dct2
        }
    }

    /// Entry `H[j, l]` of the `n x n` transform matrix.
    pub fn entry(self, n: usize, j: usize, l: usize) -> f64 {
        let nf = n as f64;
        match self {
            OrthoTransform::Hadamard => {
                let sign = if (j & l).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                sign / nf.sqrt()
            }
            OrthoTransform::Dct2 => {
                let c = if j == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
                c * (PI * (2 * l + 1) as f64 * j as f64 / (2.0 * nf)).cos()
            }
        }
    }
}

/// In-place unnormalized fast Walsh-Hadamard transform; `data.len()` must be a power of two.
pub fn fwht(data: &mut [f64]) {
    let n = data.len();
    assert!(n.is_power_of_two(), "fwht needs a power-of-two length");
    let mut h = 1;
    while h < n {
        for block in data.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// Reusable plan applying an [`OrthoTransform`] of a fixed length.
pub struct TransformPlan {
    kind: OrthoTransform,
    n: usize,
    fft: Option<Arc<dyn Fft<f64>>>,
    twiddles: Vec<Complex<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl TransformPlan {
    pub fn new(kind: OrthoTransform, n: usize) -> Self {
        match kind {
            OrthoTransform::Hadamard => {
                assert!(n.is_power_of_two(), "Hadamard transform needs a power-of-two length");
                TransformPlan {
                    kind,
                    n,
                    fft: None,
                    twiddles: Vec::new(),
                    buf: Vec::new(),
                    scratch: Vec::new(),
                }
            }
            OrthoTransform::Dct2 => {
                let fft = FftPlanner::new().plan_fft_forward(2 * n);
                let nf = n as f64;
                let twiddles = (0..n)
                    .map(|j| {
                        let c = if j == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
                        Complex::from_polar(0.5 * c, -PI * j as f64 / (2.0 * nf))
                    })
                    .collect();
                let scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
                TransformPlan {
                    kind,
                    n,
                    fft: Some(fft),
                    twiddles,
                    buf: vec![Complex::new(0.0, 0.0); 2 * n],
                    scratch,
                }
            }
        }
    }

    /// Overwrites `data` with `H data`.
    pub fn apply(&mut self, data: &mut [f64]) {
        assert_eq!(data.len(), self.n);
        match self.kind {
            OrthoTransform::Hadamard => {
                fwht(data);
                let s = 1.0 / (self.n as f64).sqrt();
                data.iter_mut().for_each(|v| *v *= s);
            }
            OrthoTransform::Dct2 => {
                // DCT-II through the FFT of the even extension [x, reverse(x)].
                let n = self.n;
                for (l, &v) in data.iter().enumerate() {
                    self.buf[l] = Complex::new(v, 0.0);
                    self.buf[2 * n - 1 - l] = Complex::new(v, 0.0);
                }
                let fft = self.fft.as_ref().expect("dct plan");
                fft.process_with_scratch(&mut self.buf, &mut self.scratch);
                for (j, out) in data.iter_mut().enumerate() {
                    *out = (self.buf[j] * self.twiddles[j]).re;
                }
            }
        }
    }
}
