//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and, when an input is tracked,
//! records a closure implementing its gradient rule. Closures capture input
//! tensors by handle (cheap `Rc` clones) and read their buffers at backward
//! time; ops whose rule needs the *output* copy just that.
//!
//! There is no general broadcasting: shapes must match exactly, and the few
//! broadcast-like patterns the models need are explicit ops
//! ([`Tensor::repeat_rows`], [`Tensor::mean_rows`]).

use super::{Real, Tensor, TensorError};

fn check_same<F: Real>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `out[m×n] = a[m×k] · b[k×n]`, naive loops in a cache-friendly order.
fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×k] = g[m×n] · bᵀ` where b is k×n.
fn mm_nt<F: Real>(g: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// `out[k×n] = aᵀ · g` where a is m×k and g is m×n.
fn mm_tn<F: Real>(a: &[F], g: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose_buf<F: Real>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

impl<F: Real> Tensor<F> {
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = mm(&self.data(), &rhs.data(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            "matmul",
            vec![self.clone(), rhs.clone()],
            move |_| {
                Box::new(move |g| {
                    let da = mm_nt(g, &b.data(), m, n, k);
                    let db = mm_tn(&a.data(), g, m, k, n);
                    vec![Some(da), Some(db)]
                })
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<F>, TensorError> {
        let (r, c) = self.dims2("transpose")?;
        let data = transpose_buf(&self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            "transpose",
            vec![self.clone()],
            move |_| Box::new(move |g| vec![Some(transpose_buf(g, c, r))]),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<F>, TensorError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || n != self.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                len: self.len(),
            });
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            |_| Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        check_same("add", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), rhs.clone()],
            |_| Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        check_same("sub", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), rhs.clone()],
            |_| {
                Box::new(|g| {
                    vec![
                        Some(g.to_vec()),
                        Some(g.iter().map(|&v| -v).collect()),
                    ]
                })
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        check_same("mul", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), rhs.clone()],
            move |_| {
                Box::new(move |g| {
                    let da = g.iter().zip(b.data().iter()).map(|(&g, &b)| g * b).collect();
                    let db = g.iter().zip(a.data().iter()).map(|(&g, &a)| g * a).collect();
                    vec![Some(da), Some(db)]
                })
            },
        ))
    }

    /// Multiply by a compile-time-known constant (not differentiated through).
    pub fn scale(&self, k: F) -> Tensor<F> {
        let data = self.data().iter().map(|&v| v * k).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "scale",
            vec![self.clone()],
            move |_| Box::new(move |g| vec![Some(g.iter().map(|&v| v * k).collect())]),
        )
    }

    pub fn add_scalar(&self, k: F) -> Tensor<F> {
        let data = self.data().iter().map(|&v| v + k).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add_scalar",
            vec![self.clone()],
            |_| Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    pub fn tanh(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "tanh",
            vec![self.clone()],
            |y| {
                let y = y.to_vec();
                Box::new(move |g| {
                    let dx = g
                        .iter()
                        .zip(&y)
                        .map(|(&g, &y)| g * (F::one() - y * y))
                        .collect();
                    vec![Some(dx)]
                })
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sigmoid",
            vec![self.clone()],
            |y| {
                let y = y.to_vec();
                Box::new(move |g| {
                    let dx = g
                        .iter()
                        .zip(&y)
                        .map(|(&g, &y)| g * y * (F::one() - y))
                        .collect();
                    vec![Some(dx)]
                })
            },
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "exp",
            vec![self.clone()],
            |y| {
                let y = y.to_vec();
                Box::new(move |g| {
                    vec![Some(g.iter().zip(&y).map(|(&g, &y)| g * y).collect())]
                })
            },
        )
    }

    pub fn log(&self) -> Result<Tensor<F>, TensorError> {
        if self.data().iter().any(|&v| v <= F::zero()) {
            return Err(TensorError::Domain { op: "log" });
        }
        let data: Vec<F> = self.data().iter().map(|v| v.ln()).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "log",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let dx = g.iter().zip(x.data().iter()).map(|(&g, &x)| g / x).collect();
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::from_f64(0.797_884_560_802_865_4); // √(2/π)
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let input = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "gelu",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let three = F::from_f64(3.0);
                    let dx = g
                        .iter()
                        .zip(input.data().iter())
                        .map(|(&g, &x)| {
                            let u = c * (x + k * x * x * x);
                            let t = u.tanh();
                            let du = c * (F::one() + three * k * x * x);
                            g * (half * (F::one() + t)
                                + half * x * (F::one() - t * t) * du)
                        })
                        .collect();
                    vec![Some(dx)]
                })
            },
        )
    }

    /// Softmax along `axis`; every slice sums to 1. Computed with
    /// max-subtraction so large logits cannot overflow.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>, TensorError> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank,
            });
        }
        let dims = self.shape().to_vec();
        let axis_len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut mx = x[at(0)];
                for j in 1..axis_len {
                    mx = mx.max(x[at(j)]);
                }
                let mut z = F::zero();
                for j in 0..axis_len {
                    let e = (x[at(j)] - mx).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..axis_len {
                    y[at(j)] /= z;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            dims,
            y,
            "softmax",
            vec![self.clone()],
            move |y| {
                let y = y.to_vec();
                Box::new(move |g| {
                    // Per slice: dx_j = y_j · (g_j − Σ_k g_k·y_k).
                    let mut dx = vec![F::zero(); g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * axis_len + j) * inner + i;
                            let mut dot = F::zero();
                            for j in 0..axis_len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..axis_len {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        for p in &parts[1..] {
            let compatible = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut dims = first.shape().to_vec();
        dims[axis] = total;
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();

        let mut data = vec![F::zero(); outer * total * inner];
        let mut offset = 0;
        for (p, &alen) in parts.iter().zip(&sizes) {
            let pd = p.data();
            for o in 0..outer {
                for j in 0..alen {
                    let src = (o * alen + j) * inner;
                    let dst = (o * total + offset + j) * inner;
                    data[dst..dst + inner].copy_from_slice(&pd[src..src + inner]);
                }
            }
            offset += alen;
        }
        Ok(Tensor::from_op(
            dims,
            data,
            "concat",
            parts.to_vec(),
            move |_| {
                Box::new(move |g| {
                    let mut grads = Vec::with_capacity(sizes.len());
                    let mut offset = 0;
                    for &alen in &sizes {
                        let mut gp = vec![F::zero(); outer * alen * inner];
                        for o in 0..outer {
                            for j in 0..alen {
                                let dst = (o * alen + j) * inner;
                                let src = (o * total + offset + j) * inner;
                                gp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        grads.push(Some(gp));
                        offset += alen;
                    }
                    grads
                })
            },
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<F>, TensorError> {
        let (r, c) = self.dims2("slice_rows")?;
        if start >= end {
            return Err(TensorError::Empty { op: "slice_rows" });
        }
        if end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                extent: r,
            });
        }
        let data = self.data()[start * c..end * c].to_vec();
        Ok(Tensor::from_op(
            vec![end - start, c],
            data,
            "slice_rows",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let mut dx = vec![F::zero(); r * c];
                    dx[start * c..end * c].copy_from_slice(g);
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<F>, TensorError> {
        let (r, c) = self.dims2("slice_cols")?;
        if start >= end {
            return Err(TensorError::Empty { op: "slice_cols" });
        }
        if end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let w = end - start;
        let x = self.data();
        let mut data = vec![F::zero(); r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&x[i * c + start..i * c + end]);
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![r, w],
            data,
            "slice_cols",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let mut dx = vec![F::zero(); r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// `out[i] = self[indices[i]]` over matrix rows. Duplicate indices are
    /// allowed; their gradients accumulate into the same source row. This one
    /// primitive covers embedding lookup and, driven by precomputed index
    /// maps, every spatial rearrangement in the encoder.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<F>, TensorError> {
        let (r, c) = self.dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                extent: r,
            });
        }
        let x = self.data();
        let mut data = vec![F::zero(); indices.len() * c];
        for (i, &src) in indices.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
        }
        drop(x);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), c],
            data,
            "gather_rows",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let mut dx = vec![F::zero(); r * c];
                    for (i, &dst) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[dst * c + j] += g[i * c + j];
                        }
                    }
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// Tile a single row `n` times: `[1×C] -> [n×C]`.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor<F>, TensorError> {
        let (r, c) = self.dims2("repeat_rows")?;
        if r != 1 {
            return Err(TensorError::RankMismatch {
                op: "repeat_rows",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        if n == 0 {
            return Err(TensorError::Empty { op: "repeat_rows" });
        }
        let x = self.data();
        let mut data = vec![F::zero(); n * c];
        for i in 0..n {
            data[i * c..(i + 1) * c].copy_from_slice(&x);
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![n, c],
            data,
            "repeat_rows",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let mut dx = vec![F::zero(); c];
                    for i in 0..n {
                        for j in 0..c {
                            dx[j] += g[i * c + j];
                        }
                    }
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// Column-wise mean over rows: `[R×C] -> [1×C]`.
    pub fn mean_rows(&self) -> Result<Tensor<F>, TensorError> {
        let (r, c) = self.dims2("mean_rows")?;
        let x = self.data();
        let inv = F::one() / F::from_f64(r as f64);
        let mut data = vec![F::zero(); c];
        for i in 0..r {
            for j in 0..c {
                data[j] += x[i * c + j];
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![1, c],
            data,
            "mean_rows",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let mut dx = vec![F::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j] * inv;
                        }
                    }
                    vec![Some(dx)]
                })
            },
        ))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&self) -> Tensor<F> {
        let s: F = self.data().iter().copied().sum();
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![s],
            "sum_all",
            vec![self.clone()],
            move |_| Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Row-wise layer normalization with learned gain and bias:
    /// each row of `self` is standardized (population variance, `eps` inside
    /// the square root), then scaled by `gamma` and shifted by `beta`
    /// (both `[1×C]`).
    pub fn layer_norm(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: f64,
    ) -> Result<Tensor<F>, TensorError> {
        let (r, c) = self.dims2("layer_norm")?;
        for p in [gamma, beta] {
            if p.shape() != [1, c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![1, c],
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let eps = F::from_f64(eps);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![F::zero(); r * c];
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let inv_c = F::one() / F::from_f64(c as f64);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                * inv_c;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * gm[j] + bt[j];
            }
        }
        drop(x);
        let gm: Vec<F> = gm.to_vec();
        drop(bt);
        Ok(Tensor::from_op(
            vec![r, c],
            data,
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |_| {
                Box::new(move |g| {
                    let mut dx = vec![F::zero(); r * c];
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        // ĝ = g⊙γ; dx = istd·(ĝ − mean(ĝ) − x̂·mean(ĝ⊙x̂)).
                        let mut mean_gh = F::zero();
                        let mut mean_ghx = F::zero();
                        for j in 0..c {
                            let gh = grow[j] * gm[j];
                            mean_gh += gh;
                            mean_ghx += gh * xrow[j];
                            dgamma[j] += grow[j] * xrow[j];
                            dbeta[j] += grow[j];
                        }
                        mean_gh *= inv_c;
                        mean_ghx *= inv_c;
                        for j in 0..c {
                            let gh = grow[j] * gm[j];
                            dx[i * c + j] =
                                inv_std[i] * (gh - mean_gh - xrow[j] * mean_ghx);
                        }
                    }
                    vec![Some(dx), Some(dgamma), Some(dbeta)]
                })
            },
        ))
    }

    /// Mean over non-pad positions of `−log softmax(logits)[target]`;
    /// `self` is a `[T×N]` logit matrix, one row per position.
    pub fn cross_entropy(&self, targets: &[u32], pad_id: u32) -> Result<Tensor<F>, TensorError> {
        let (t_len, n) = self.dims2("cross_entropy")?;
        if targets.len() != t_len {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t_len, n],
                rhs: vec![targets.len()],
            });
        }
        let active: Vec<usize> = (0..t_len).filter(|&t| targets[t] != pad_id).collect();
        if active.is_empty() {
            return Err(TensorError::AllPadded);
        }
        for &t in &active {
            if targets[t] as usize >= n {
                return Err(TensorError::TargetOutOfRange {
                    target: targets[t],
                    classes: n,
                });
            }
        }
        let x = self.data();
        let count = F::from_f64(active.len() as f64);
        // Probabilities saved for backward; pad rows stay zero.
        let mut probs = vec![F::zero(); t_len * n];
        let mut loss = F::zero();
        for &t in &active {
            let row = &x[t * n..(t + 1) * n];
            let mx = row.iter().copied().fold(row[0], F::max);
            let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[targets[t] as usize];
            for j in 0..n {
                probs[t * n + j] = (row[j] - lse).exp();
            }
        }
        loss /= count;
        drop(x);
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            "cross_entropy",
            vec![self.clone()],
            move |_| {
                Box::new(move |g| {
                    let scale = g[0] / count;
                    let mut dx = vec![F::zero(); t_len * n];
                    for &t in &active {
                        for j in 0..n {
                            let indicator = if j == targets[t] as usize {
                                F::one()
                            } else {
                                F::zero()
                            };
                            dx[t * n + j] = (probs[t * n + j] - indicator) * scale;
                        }
                    }
                    vec![Some(dx)]
                })
            },
        ))
    }
}
