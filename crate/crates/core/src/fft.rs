//! In-place iterative radix-2 FFT for the reconstruction filters.

use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
}

/// Precomputed twiddles and bit reversal for one power-of-two length.
#[derive(Debug, Clone)]
pub(crate) struct Fft {
    n: usize,
    twiddles: Vec<Complex>,
    rev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT length must be a power of two");
        let bits = n.trailing_zeros();
        let rev = (0..n).map(|i| if n == 1 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) }).collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                Complex::new(a.cos(), a.sin())
            })
            .collect();
        Self { n, twiddles, rev }
    }

    /// Forward transform, `X_k = Σ x_j e^{-2πi jk/n}`.
    pub fn forward(&self, buf: &mut [Complex]) {
        self.run(buf, false);
    }

    /// Inverse transform including the 1/n factor.
    pub fn inverse(&self, buf: &mut [Complex]) {
        self.run(buf, true);
        let s = 1.0 / self.n as f64;
        for c in buf.iter_mut() {
            c.re *= s;
            c.im *= s;
        }
    }

    fn run(&self, buf: &mut [Complex], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w.im = -w.im;
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half].mul(w);
                    buf[start + k] = Complex::new(a.re + b.re, a.im + b.im);
                    buf[start + k + half] = Complex::new(a.re - b.re, a.im - b.im);
                }
            }
            len <<= 1;
        }
    }
}
