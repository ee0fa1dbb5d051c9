//! Forward-only 2-D DFT magnitude with its subgradient.
//!
//! Convention: unnormalized forward DFT. The gradient of |F(x)| at zero
//! magnitude bins is defined as 0.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Tensor;
use crate::error::{CeaError, Result};

/// Unnormalized forward 2-D DFT of one H x W plane.
fn dft2(plane: &mut [Complex64], h: usize, w: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    for r in 0..h {
        row_fft.process(&mut plane[r * w..(r + 1) * w]);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = plane[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            plane[r * w + c] = col[r];
        }
    }
}

impl Tensor {
    /// Per-channel 2-D DFT magnitude of an [H, W, C] map: output [H, W, C].
    pub fn fft2_magnitude(&self) -> Result<Tensor> {
        let [h, w, c] = *self.shape() else {
            return Err(CeaError::Shape(format!(
                "fft2_magnitude: expected [H, W, C], got {:?}",
                self.shape()
            )));
        };
        let x = self.to_vec();
        let mut mags = vec![0.0; h * w * c];
        // Spectra are kept for the backward rule.
        let mut spectra: Vec<Vec<Complex64>> = Vec::with_capacity(c);
        for ch in 0..c {
            let mut plane: Vec<Complex64> = (0..h * w)
                .map(|i| Complex64::new(x[i * c + ch], 0.0))
                .collect();
            dft2(&mut plane, h, w);
            for (i, v) in plane.iter().enumerate() {
                mags[i * c + ch] = v.norm();
            }
            spectra.push(plane);
        }
        Ok(Tensor::from_op(
            vec![h, w, c],
            mags,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c];
                for (ch, spec) in spectra.iter().enumerate() {
                    let mut u: Vec<Complex64> = spec
                        .iter()
                        .enumerate()
                        .map(|(i, f)| {
                            let m = f.norm();
                            if m > 0.0 {
                                f.conj() / m * g[i * c + ch]
                            } else {
                                Complex64::default()
                            }
                        })
                        .collect();
                    // d|F|/dx routes back through the same unnormalized forward DFT.
                    dft2(&mut u, h, w);
                    for i in 0..h * w {
                        gx[i * c + ch] = u[i].re;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
