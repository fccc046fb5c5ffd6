//! Fused multi-head self-attention kernels.
//!
//! Input rows are `[q | k | v]` concatenations (`3 * dim` columns) for
//! `batch * seq` tokens; every sequence in a batch has the same length.

/// Strided single-precision matrix view used to address one head inside the
/// packed qkv layout without copying.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    row_stride: usize,
    col_stride: usize,
}

impl View {
    fn row_major(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride,
            col_stride: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            offset: self.offset,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c(m x n) = a(m x k) * b(k x n) * alpha + beta * c` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    av: View,
    b: &[f32],
    bv: View,
    beta: f32,
    c: &mut [f32],
    cv: View,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(av.last_index(m, k) < a.len());
    assert!(bv.last_index(k, n) < b.len());
    assert!(cv.last_index(m, n) < c.len());
    // SAFETY: the asserts above bound every element the strided views touch.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale(&self) -> f32 {
        1.0 / (self.head_dim() as f32).sqrt()
    }

    fn probs_len(&self) -> usize {
        self.batch * self.heads * self.seq * self.seq
    }
}

/// Returns `(output, probabilities)`; the probabilities are kept for the
/// backward pass.
pub fn forward(qkv: &[f32], shape: AttentionShape) -> (Vec<f32>, Vec<f32>) {
    let AttentionShape {
        batch,
        seq,
        dim,
        heads,
        causal,
    } = shape;
    let dh = shape.head_dim();
    let stride = 3 * dim;
    assert_eq!(qkv.len(), batch * seq * stride);
    let mut out = vec![0.0f32; batch * seq * dim];
    let mut probs = vec![0.0f32; shape.probs_len()];
    let scale = shape.scale();
    for b in 0..batch {
        let base = b * seq * stride;
        for h in 0..heads {
            let p_off = (b * heads + h) * seq * seq;
            let q = View::row_major(base + h * dh, stride);
            let k = View::row_major(base + dim + h * dh, stride);
            let s = View::row_major(p_off, seq);
            gemm_view(seq, dh, seq, scale, qkv, q, qkv, k.t(), 0.0, &mut probs, s);
            for i in 0..seq {
                let row = &mut probs[p_off + i * seq..p_off + (i + 1) * seq];
                let valid = if causal { i + 1 } else { seq };
                let max = row[..valid]
                    .iter()
                    .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for v in &mut row[..valid] {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = 1.0 / sum;
                for v in &mut row[..valid] {
                    *v *= inv;
                }
                row[valid..].fill(0.0);
            }
            let v = View::row_major(base + 2 * dim + h * dh, stride);
            let o = View::row_major(b * seq * dim + h * dh, dim);
            gemm_view(seq, seq, dh, 1.0, &probs, s, qkv, v, 0.0, &mut out, o);
        }
    }
    (out, probs)
}

/// Gradient with respect to the packed qkv input.
pub fn backward(qkv: &[f32], probs: &[f32], grad_out: &[f32], shape: AttentionShape) -> Vec<f32> {
    let AttentionShape {
        batch,
        seq,
        dim,
        heads,
        ..
    } = shape;
    let dh = shape.head_dim();
    let stride = 3 * dim;
    let scale = shape.scale();
    let mut dqkv = vec![0.0f32; qkv.len()];
    let mut dp = vec![0.0f32; seq * seq];
    let full = View::row_major(0, seq);
    for b in 0..batch {
        let base = b * seq * stride;
        for h in 0..heads {
            let p = View::row_major((b * heads + h) * seq * seq, seq);
            let go = View::row_major(b * seq * dim + h * dh, dim);
            let q = View::row_major(base + h * dh, stride);
            let k = View::row_major(base + dim + h * dh, stride);
            let v = View::row_major(base + 2 * dim + h * dh, stride);
            // dV = P^T dO
            gemm_view(seq, seq, dh, 1.0, probs, p.t(), grad_out, go, 0.0, &mut dqkv, v);
            // dP = dO V^T
            gemm_view(seq, dh, seq, 1.0, grad_out, go, qkv, v.t(), 0.0, &mut dp, full);
            // dS = P * (dP - rowsum(dP * P))
            for i in 0..seq {
                let prow = &probs[p.offset + i * seq..p.offset + (i + 1) * seq];
                let drow = &mut dp[i * seq..(i + 1) * seq];
                let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ = dS K * scale ; dK = dS^T Q * scale
            gemm_view(seq, seq, dh, scale, &dp, full, qkv, k, 0.0, &mut dqkv, q);
            gemm_view(seq, seq, dh, scale, &dp, full.t(), qkv, q, 0.0, &mut dqkv, k);
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(qkv: &[f32], shape: AttentionShape) -> Vec<f32> {
        let AttentionShape {
            batch,
            seq,
            dim,
            heads,
            causal,
        } = shape;
        let dh = dim / heads;
        let stride = 3 * dim;
        let mut out = vec![0.0; batch * seq * dim];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &qkv[(b * seq + i) * stride + h * dh..][..dh];
                    let n = if causal { i + 1 } else { seq };
                    let scores: Vec<f32> = (0..n)
                        .map(|j| {
                            let kj = &qkv[(b * seq + j) * stride + dim + h * dh..][..dh];
                            qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f32>()
                                / (dh as f32).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f32::MIN, f32::max);
                    let e: Vec<f32> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f32 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        let vj = &qkv[(b * seq + j) * stride + 2 * dim + h * dh..][..dh];
                        for d in 0..dh {
                            out[(b * seq + i) * dim + h * dh + d] += ej / z * vj[d];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_reference_loops() {
        for causal in [false, true] {
            let shape = AttentionShape {
                batch: 2,
                seq: 5,
                dim: 8,
                heads: 2,
                causal,
            };
            let qkv: Vec<f32> = (0..2 * 5 * 24).map(|i| (i as f32 * 0.173).sin()).collect();
            let (out, _) = forward(&qkv, shape);
            let want = reference(&qkv, shape);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for causal in [false, true] {
            let shape = AttentionShape {
                batch: 2,
                seq: 4,
                dim: 6,
                heads: 3,
                causal,
            };
            let qkv: Vec<f32> = (0..2 * 4 * 18).map(|i| (i as f32 * 0.291).cos()).collect();
            let weights: Vec<f32> = (0..2 * 4 * 6).map(|i| (i as f32 * 0.57).sin()).collect();
            let objective = |x: &[f32]| -> f64 {
                let (o, _) = forward(x, shape);
                o.iter().zip(&weights).map(|(a, w)| f64::from(a * w)).sum()
            };
            let (_, probs) = forward(&qkv, shape);
            let grad = backward(&qkv, &probs, &weights, shape);
            let eps = 1e-2f32;
            for i in 0..qkv.len() {
                let mut plus = qkv.clone();
                plus[i] += eps;
                let mut minus = qkv.clone();
                minus[i] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * f64::from(eps));
                assert!(
                    (fd - f64::from(grad[i])).abs() < 2e-3,
                    "index {i}: fd {fd} analytic {}",
                    grad[i]
                );
            }
        }
    }
}
