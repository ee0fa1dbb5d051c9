//! Differentiable primitives. Every op validates shapes up front and records
//! a backward rule producing dense per-parent gradients.

use rand::Rng;

use super::flops;
use super::{same_shape, Tensor};
use crate::error::{CeaError, Result};

/// Standard normal samples, seeded by the caller's RNG stream.
pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    // Box-Muller; two uniforms per pair of normals, deterministic per stream.
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        data.push(r * th.cos());
        if data.len() < n {
            data.push(r * th.sin());
        }
    }
    Tensor::from_vec(shape, data)
}

/// Centered uniform samples on [-scale, scale].
pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::from_vec(shape, data)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    flops::add_macs((m * k * n) as u64);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(CeaError::Shape(format!("{op}: expected 2-D tensor, got {s:?}"))),
    }
}

impl Tensor {
    /// Re-tag this tensor as a learnable leaf (fresh node, same data).
    pub fn into_param(&self) -> Tensor {
        Tensor::param(self.shape(), self.to_vec())
    }

    /// Detached copy: same values, no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.shape(), self.to_vec())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "add")?;
        let data = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "sub")?;
        let data = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "mul")?;
        let data = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        let (av, bv) = (self.to_vec(), rhs.to_vec());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(&bv).map(|(g, b)| g * b).collect()),
                    Some(g.iter().zip(&av).map(|(g, a)| g * a).collect()),
                ]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x * c).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x + c).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self) -> Tensor {
        let vals = self.to_vec();
        let data = vals.iter().map(|x| x.abs()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g
                    .iter()
                    .zip(&vals)
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(gp)]
            }),
        )
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(CeaError::Shape(format!(
                "matmul: inner dimensions disagree ({m}x{k} vs {k2}x{n})"
            )));
        }
        let data = self.with_data(|a| rhs.with_data(|b| matmul_raw(a, b, m, k, n)));
        let (av, bv) = (self.to_vec(), rhs.to_vec());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                // dA = G B^T, dB = A^T G
                let bt = transpose_raw(&bv, k, n);
                let at = transpose_raw(&av, m, k);
                vec![
                    Some(matmul_raw(g, &bt, m, n, k)),
                    Some(matmul_raw(&at, g, k, m, n)),
                ]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose")?;
        let data = self.with_data(|a| transpose_raw(a, r, c));
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(CeaError::Shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "slice_cols")?;
        if start + len > c {
            return Err(CeaError::Shape(format!(
                "slice_cols: [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let data = self.with_data(|a| {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&a[i * c + start..i * c + start + len]);
            }
            out
        });
        Ok(Tensor::from_op(
            vec![r, len],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                for i in 0..r {
                    gp[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gp)]
            }),
        ))
    }

    /// Rows [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "slice_rows")?;
        if start + len > r {
            return Err(CeaError::Shape(format!(
                "slice_rows: [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let data = self.with_data(|a| a[start * c..(start + len) * c].to_vec());
        Ok(Tensor::from_op(
            vec![len, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                gp[start * c..(start + len) * c].copy_from_slice(g);
                vec![Some(gp)]
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.with_data(|a| a.iter().sum());
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Column means of a 2-D tensor: [N, C] -> [1, C].
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "mean_rows")?;
        let data = self.with_data(|a| {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += a[i * c + j];
                }
            }
            for v in &mut out {
                *v /= r as f64;
            }
            out
        });
        Ok(Tensor::from_op(
            vec![1, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gp[i * c + j] = g[j] / r as f64;
                    }
                }
                vec![Some(gp)]
            }),
        ))
    }

    /// Per-row L2 norms of a 2-D tensor: [N, C] -> [N, 1].
    pub fn l2_norm_rows(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "l2_norm_rows")?;
        let vals = self.to_vec();
        let norms: Vec<f64> = (0..r)
            .map(|i| vals[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let norms_b = norms.clone();
        Ok(Tensor::from_op(
            vec![r, 1],
            norms,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                for i in 0..r {
                    if norms_b[i] > 0.0 {
                        for j in 0..c {
                            gp[i * c + j] = g[i] * vals[i * c + j] / norms_b[i];
                        }
                    }
                }
                vec![Some(gp)]
            }),
        ))
    }

    /// Each row v -> v / (||v|| + eps). Rank-wise normalization primitive.
    pub fn normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (r, c) = dims2(self, "normalize_rows")?;
        let vals = self.to_vec();
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vals[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / (n + eps);
            }
        }
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                for i in 0..r {
                    let n = norms[i];
                    let d = n + eps;
                    let row = &vals[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    if n > 0.0 {
                        let dot: f64 = grow.iter().zip(row).map(|(g, v)| g * v).sum();
                        for j in 0..c {
                            gp[i * c + j] = grow[j] / d - row[j] * dot / (n * d * d);
                        }
                    } else {
                        for j in 0..c {
                            gp[i * c + j] = grow[j] / d;
                        }
                    }
                }
                vec![Some(gp)]
            }),
        ))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "softmax_rows")?;
        let mut out = vec![0.0; r * c];
        self.with_data(|a| {
            for i in 0..r {
                let row = &a[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    out[i * c + j] /= z;
                }
            }
        });
        let s = out.clone();
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                for i in 0..r {
                    let srow = &s[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for j in 0..c {
                        gp[i * c + j] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(gp)]
            }),
        ))
    }

    /// Pre-activation layer normalization over the last axis of [N, C], with
    /// learnable gain and bias.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = dims2(self, "layer_norm_rows")?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(CeaError::Shape(format!(
                "layer_norm_rows: gain/bias length {} does not match {c} channels",
                gamma.numel()
            )));
        }
        let x = self.to_vec();
        let gv = gamma.to_vec();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let bv = beta.to_vec();
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        let gv_b = gv.clone();
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let hrow = &xhat[i * c..(i + 1) * c];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for j in 0..c {
                        let gh = grow[j] * gv_b[j];
                        sum_gh += gh;
                        sum_ghh += gh * hrow[j];
                        ggamma[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                    }
                    let cn = c as f64;
                    for j in 0..c {
                        let gh = grow[j] * gv_b[j];
                        gx[i * c + j] = inv_std[i] * (gh - sum_gh / cn - hrow[j] * sum_ghh / cn);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let x = self.to_vec();
        let data = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (K * (v + C3 * v * v * v)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gp = g
                    .iter()
                    .zip(&x)
                    .map(|(g, &v)| {
                        let t = (K * (v + C3 * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * K * (1.0 + 3.0 * C3 * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                vec![Some(gp)]
            }),
        )
    }

    /// Multiply row i of [N, C] by scale[i] ([N, 1]).
    pub fn scale_rows(&self, scales: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2(self, "scale_rows")?;
        if scales.shape() != [r, 1] {
            return Err(CeaError::Shape(format!(
                "scale_rows: scales shape {:?}, expected [{r}, 1]",
                scales.shape()
            )));
        }
        let x = self.to_vec();
        let s = scales.to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = x[i * c + j] * s[i];
            }
        }
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), scales.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                let mut gs = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[i * c + j] * s[i];
                        gs[i] += g[i * c + j] * x[i * c + j];
                    }
                }
                vec![Some(gx), Some(gs)]
            }),
        ))
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CeaError::Shape("concat_cols: empty input".into()));
        }
        let (r, _) = dims2(&parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = dims2(p, "concat_cols")?;
            if pr != r {
                return Err(CeaError::Shape(format!(
                    "concat_cols: row counts differ ({r} vs {pr})"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            p.with_data(|a| {
                for i in 0..r {
                    data[i * total + off..i * total + off + w]
                        .copy_from_slice(&a[i * w..(i + 1) * w]);
                }
            });
            off += w;
        }
        let widths_b = widths.clone();
        Ok(Tensor::from_op(
            vec![r, total],
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths_b.len());
                let mut off = 0;
                for &w in &widths_b {
                    let mut gp = vec![0.0; r * w];
                    for i in 0..r {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    grads.push(Some(gp));
                    off += w;
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(i2.matmul(&m).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let z = Tensor::zeros(&[3, 4]);
        let m = Tensor::from_vec(&[4, 2], (0..8).map(|v| v as f64).collect());
        assert_eq!(z.matmul(&m).unwrap().to_vec(), vec![0.0; 6]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&[8, 4], &mut rng);
        let b = randn(&[4, 16], &mut rng);
        let c = randn(&[16, 5], &mut rng);
        let ab_c = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let a_bc = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let max = ab_c
            .to_vec()
            .iter()
            .zip(a_bc.to_vec())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max);
        assert!(max < 1e-10, "associativity violation {max}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let t = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert_close(&t.softmax_rows().unwrap().to_vec(), &[0.5, 0.5], 1e-15);

        let big = Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]);
        let s = big.softmax_rows().unwrap().to_vec();
        assert!(s[0] > 1.0 - 1e-12 && s.iter().all(|v| v.is_finite()));

        let ln2 = Tensor::from_vec(&[1, 2], vec![2.0_f64.ln(), 0.0]);
        assert_close(&ln2.softmax_rows().unwrap().to_vec(), &[2.0 / 3.0, 1.0 / 3.0], 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = randn(&[5, 7], &mut rng);
        let s = t.softmax_rows().unwrap().to_vec();
        for i in 0..5 {
            let sum: f64 = s[i * 7..(i + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s[i * 7..(i + 1) * 7].iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn normalize_rows_345() {
        let t = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]);
        assert_close(&t.normalize_rows(0.0).unwrap().to_vec(), &[0.6, 0.8], 1e-12);
    }

    #[test]
    fn normalize_rows_zero_row_stays_finite() {
        let t = Tensor::zeros(&[1, 3]);
        let n = t.normalize_rows(1e-6).unwrap();
        assert_eq!(n.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn primitive_gradients_pass_fd_check() {
        // Every differentiable primitive on random small shapes, 20 seeds.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = randn(&[3, 4], &mut rng).into_param();
            let b = randn(&[3, 4], &mut rng).into_param();
            let w = randn(&[4, 5], &mut rng).into_param();
            let gamma = randn(&[1, 4], &mut rng).into_param();
            let beta = randn(&[1, 4], &mut rng).into_param();
            let params = vec![
                ("a".to_string(), a.clone()),
                ("b".to_string(), b.clone()),
                ("w".to_string(), w.clone()),
                ("gamma".to_string(), gamma.clone()),
                ("beta".to_string(), beta.clone()),
            ];
            // Fixed weighting keeps the softmax branch non-degenerate: a plain
            // row sum of softmax outputs is constant 1 with zero gradient.
            let wgt = Tensor::from_vec(&[3, 5], (0..15).map(|i| 0.1 * i as f64).collect());
            let f = || {
                let x = a.add(&b).unwrap().mul(&a.sub(&b).unwrap()).unwrap();
                let y = x.matmul(&w).unwrap();
                let y = y.softmax_rows().unwrap().mul(&wgt).unwrap();
                let z = a
                    .layer_norm_rows(&gamma, &beta, 1e-5)
                    .unwrap()
                    .gelu()
                    .normalize_rows(1e-3)
                    .unwrap();
                let t = a.transpose().unwrap().matmul(&b).unwrap();
                y.sum_all()
                    .add(&z.abs().mean_all())
                    .unwrap()
                    .add(&t.mean_rows().unwrap().sum_all())
                    .unwrap()
                    .add(&a.l2_norm_rows().unwrap().sum_all())
                    .unwrap()
                    .add(&b.scale_rows(&a.l2_norm_rows().unwrap()).unwrap().mean_all())
                    .unwrap()
                    .add(&a.slice_cols(1, 2).unwrap().slice_rows(0, 2).unwrap().sum_all())
                    .unwrap()
                    .add(
                        &Tensor::concat_cols(&[a.clone(), b.clone()])
                            .unwrap()
                            .mul(&Tensor::concat_cols(&[b.clone(), a.clone()]).unwrap())
                            .unwrap()
                            .mean_all(),
                    )
                    .unwrap()
            };
            let report = grad_check(f, &params, 1e-5, 1e-5).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let params = vec![("p".to_string(), p.clone())];
        let f = || p.scale(0.0).sum_all().add_scalar(7.0);
        let report = grad_check(f, &params, 1e-5, 1e-6).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err == 0.0);
    }

    #[test]
    fn sum_sq_closed_form_gradient() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]);
        let loss = p.mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        assert_close(&p.grad().unwrap(), &[2.0, 4.0], 1e-12);
        let params = vec![("p".to_string(), p.clone())];
        let f = || p.mul(&p).unwrap().sum_all();
        let report = grad_check(f, &params, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
