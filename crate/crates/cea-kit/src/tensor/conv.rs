//! 2-D convolution and resampling primitives over [H, W, C] feature maps.

use super::{flops, Tensor};
use crate::error::{CeaError, Result};

fn dims3(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(CeaError::Shape(format!(
            "{op}: expected [H, W, C] tensor, got {s:?}"
        ))),
    }
}

impl Tensor {
    /// Depthwise 3x3 convolution, zero padding 1, configurable stride.
    /// Output spatial size is ceil(in/stride); channels preserved.
    pub fn depthwise_conv3x3(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        let (h, w, c) = dims3(self, "depthwise_conv3x3")?;
        if kernel.shape() != [3, 3, c] {
            return Err(CeaError::Shape(format!(
                "depthwise_conv3x3: kernel shape {:?}, expected [3, 3, {c}]",
                kernel.shape()
            )));
        }
        if stride == 0 {
            return Err(CeaError::Config("depthwise_conv3x3: stride must be >= 1".into()));
        }
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        flops::add_macs((oh * ow * 9 * c) as u64);
        let x = self.to_vec();
        let k = kernel.to_vec();
        let mut out = vec![0.0; oh * ow * c];
        for yo in 0..oh {
            for xo in 0..ow {
                for dh in 0..3 {
                    let yi = (yo * stride + dh) as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for dw in 0..3 {
                        let xi = (xo * stride + dw) as isize - 1;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let xb = ((yi as usize) * w + xi as usize) * c;
                        let kb = (dh * 3 + dw) * c;
                        let ob = (yo * ow + xo) * c;
                        for ch in 0..c {
                            out[ob + ch] += x[xb + ch] * k[kb + ch];
                        }
                    }
                }
            }
        }
        let (xv, kv) = (x, k);
        Ok(Tensor::from_op(
            vec![oh, ow, c],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c];
                let mut gk = vec![0.0; 9 * c];
                for yo in 0..oh {
                    for xo in 0..ow {
                        let ob = (yo * ow + xo) * c;
                        for dh in 0..3 {
                            let yi = (yo * stride + dh) as isize - 1;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for dw in 0..3 {
                                let xi = (xo * stride + dw) as isize - 1;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                let xb = ((yi as usize) * w + xi as usize) * c;
                                let kb = (dh * 3 + dw) * c;
                                for ch in 0..c {
                                    gx[xb + ch] += g[ob + ch] * kv[kb + ch];
                                    gk[kb + ch] += g[ob + ch] * xv[xb + ch];
                                }
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gk)]
            }),
        ))
    }

    /// 1x1 (pointwise) convolution: per-position channel mixing, no bias.
    pub fn pointwise_conv(&self, weight: &Tensor) -> Result<Tensor> {
        let (h, w, c) = dims3(self, "pointwise_conv")?;
        let [ci, co] = *weight.shape() else {
            return Err(CeaError::Shape("pointwise_conv: weight must be 2-D".into()));
        };
        if ci != c {
            return Err(CeaError::Shape(format!(
                "pointwise_conv: input channels {c} vs weight rows {ci}"
            )));
        }
        self.reshape(&[h * w, c])?
            .matmul(weight)?
            .reshape(&[h, w, co])
    }

    /// Keep every stride-th position starting at (0, 0). Output ceil(in/stride).
    pub fn subsample2d(&self, stride: usize) -> Result<Tensor> {
        let (h, w, c) = dims3(self, "subsample2d")?;
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let x = self.to_vec();
        let mut out = vec![0.0; oh * ow * c];
        for yo in 0..oh {
            for xo in 0..ow {
                let src = (yo * stride * w + xo * stride) * c;
                let dst = (yo * ow + xo) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
        Ok(Tensor::from_op(
            vec![oh, ow, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c];
                for yo in 0..oh {
                    for xo in 0..ow {
                        let src = (yo * stride * w + xo * stride) * c;
                        let dst = (yo * ow + xo) * c;
                        gx[src..src + c].copy_from_slice(&g[dst..dst + c]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        let (h, w, c) = dims3(self, "upsample_nearest2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.to_vec();
        let mut out = vec![0.0; oh * ow * c];
        for yo in 0..oh {
            for xo in 0..ow {
                let src = ((yo / 2) * w + xo / 2) * c;
                let dst = (yo * ow + xo) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
        Ok(Tensor::from_op(
            vec![oh, ow, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c];
                for yo in 0..oh {
                    for xo in 0..ow {
                        let src = ((yo / 2) * w + xo / 2) * c;
                        let dst = (yo * ow + xo) * c;
                        for ch in 0..c {
                            gx[src + ch] += g[dst + ch];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::grad_check;
    use super::super::ops::randn;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ceil_output_sizes() {
        let x = Tensor::zeros(&[7, 7, 2]);
        let k = Tensor::zeros(&[3, 3, 2]);
        let y = x.depthwise_conv3x3(&k, 2).unwrap();
        assert_eq!(y.shape(), &[4, 4, 2]);
        let y = Tensor::zeros(&[8, 8, 1])
            .depthwise_conv3x3(&Tensor::zeros(&[3, 3, 1]), 2)
            .unwrap();
        assert_eq!(y.shape(), &[4, 4, 1]);
    }

    #[test]
    fn centered_delta_kernel_is_identity_at_stride1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[5, 6, 3], &mut rng);
        let mut k = vec![0.0; 9 * 3];
        for c in 0..3 {
            k[(1 * 3 + 1) * 3 + c] = 1.0; // center tap
        }
        let y = x.depthwise_conv3x3(&Tensor::from_vec(&[3, 3, 3], k), 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_and_resampling_gradients() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&[5, 4, 2], &mut rng).into_param();
            let k = randn(&[3, 3, 2], &mut rng).into_param();
            let w = randn(&[2, 3], &mut rng).into_param();
            let params = vec![
                ("x".to_string(), x.clone()),
                ("k".to_string(), k.clone()),
                ("w".to_string(), w.clone()),
            ];
            let f = || {
                let c = x.depthwise_conv3x3(&k, 2).unwrap();
                let p = c.pointwise_conv(&w).unwrap();
                let u = x.subsample2d(2).unwrap().upsample_nearest2().unwrap();
                p.mul(&p).unwrap().sum_all().add(&u.mul(&u).unwrap().sum_all()).unwrap()
            };
            let report = grad_check(f, &params, 1e-5, 1e-6).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
