//! Tensor operations recorded on the tape.
//!
//! Every operation validates shapes, checks its output for NaN/Inf, and
//! registers a backward rule. Shape violations are programming errors and
//! panic with the offending shapes in the message.

use super::scalar::Scalar;
use super::tape::Var;
use super::tensor::Tensor;

// Raw matmul kernels over row-major slices.

/// out[p,r] = a[p,q] @ b[q,r]
fn mm_nn<F: Scalar>(a: &[F], b: &[F], p: usize, q: usize, r: usize, out: &mut [F]) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for j in 0..r {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[p,r] = a[p,q] @ b[r,q]^T
fn mm_nt<F: Scalar>(a: &[F], b: &[F], p: usize, q: usize, r: usize, out: &mut [F]) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut acc = F::zero();
            for k in 0..q {
                acc += arow[k] * brow[k];
            }
            out[i * r + j] += acc;
        }
    }
}

/// out[p,r] = a[q,p]^T @ b[q,r]
fn mm_tn<F: Scalar>(a: &[F], b: &[F], p: usize, q: usize, r: usize, out: &mut [F]) {
    for k in 0..q {
        let arow = &a[k * p..(k + 1) * p];
        let brow = &b[k * r..(k + 1) * r];
        for i in 0..p {
            let av = arow[i];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Splits `[batch.., p, q]` into (batch_shape, p, q).
fn split_batch(shape: &[usize]) -> (&[usize], usize, usize) {
    let n = shape.len();
    assert!(n >= 2, "matmul operand must have rank >= 2, got {shape:?}");
    (&shape[..n - 2], shape[n - 2], shape[n - 1])
}

/// Batched matrix product. Batch dimensions must match exactly, or one side
/// may omit them entirely (rank 2) and is then broadcast over the other's
/// batches.
fn matmul_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ba, p, qa) = split_batch(a.shape());
    let (bb, qb, r) = split_batch(b.shape());
    assert_eq!(
        qa, qb,
        "matmul inner dimensions disagree: {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let batch: &[usize] = if ba == bb {
        ba
    } else if ba.is_empty() {
        bb
    } else if bb.is_empty() {
        ba
    } else {
        panic!("matmul batch dimensions incompatible: {:?} x {:?}", a.shape(), b.shape());
    };
    let nb: usize = batch.iter().product();
    let mut out = vec![F::zero(); nb * p * r];
    for i in 0..nb {
        let asl = if ba.is_empty() { a.data() } else { &a.data()[i * p * qa..(i + 1) * p * qa] };
        let bsl = if bb.is_empty() { b.data() } else { &b.data()[i * qa * r..(i + 1) * qa * r] };
        mm_nn(asl, bsl, p, qa, r, &mut out[i * p * r..(i + 1) * p * r]);
    }
    let mut shape = batch.to_vec();
    shape.push(p);
    shape.push(r);
    Tensor::new(shape, out)
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Elementwise sum; shapes must match.
    pub fn add(self, rhs: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        self.tape.push(
            "add",
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        self.tape.push(
            "sub",
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| vec![g.clone(), g.map(|x| -x)])),
        )
    }

    /// Elementwise product; shapes must match.
    pub fn mul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        self.tape.push(
            "mul",
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                let da = g.data().iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                vec![
                    Tensor::new(g.shape().to_vec(), da),
                    Tensor::new(g.shape().to_vec(), db),
                ]
            })),
        )
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(self, c: f64) -> Var<'t, F> {
        let cf = F::of(c);
        let out = self.value().map(|x| x * cf);
        self.tape.push(
            "scale",
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![g.map(|x| x * cf)])),
        )
    }

    /// Elementwise product with a constant tensor (masking, dropout). The
    /// constant receives no gradient.
    pub fn mul_const(self, c: &Tensor<F>) -> Var<'t, F> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "mul_const shape mismatch");
        let data = a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        let c = c.clone();
        self.tape.push(
            "mul_const",
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let d = g.data().iter().zip(c.data()).map(|(&gv, &cv)| gv * cv).collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    /// Adds a row vector `[d]` to every row of a `[m, d]` matrix.
    pub fn add_row(self, bias: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = bias.value();
        assert_eq!(a.rank(), 2, "add_row lhs must be rank 2");
        assert_eq!(b.shape(), [a.dim(1)], "add_row bias shape mismatch");
        let (m, d) = (a.dim(0), a.dim(1));
        let mut data = a.data().to_vec();
        for i in 0..m {
            for j in 0..d {
                data[i * d + j] += b.data()[j];
            }
        }
        let out = Tensor::new(vec![m, d], data);
        self.tape.push(
            "add_row",
            out,
            vec![self.id, bias.id],
            Some(Box::new(move |g| {
                let mut db = vec![F::zero(); d];
                for i in 0..m {
                    for j in 0..d {
                        db[j] += g.data()[i * d + j];
                    }
                }
                vec![g.clone(), Tensor::new(vec![d], db)]
            })),
        )
    }

    /// Multiplies every row of a `[m, d]` matrix by a row vector `[d]`.
    pub fn mul_row(self, gain: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = gain.value();
        assert_eq!(a.rank(), 2, "mul_row lhs must be rank 2");
        assert_eq!(b.shape(), [a.dim(1)], "mul_row gain shape mismatch");
        let (m, d) = (a.dim(0), a.dim(1));
        let mut data = a.data().to_vec();
        for i in 0..m {
            for j in 0..d {
                data[i * d + j] = data[i * d + j] * b.data()[j];
            }
        }
        let out = Tensor::new(vec![m, d], data);
        let av = a;
        self.tape.push(
            "mul_row",
            out,
            vec![self.id, gain.id],
            Some(Box::new(move |g| {
                let mut da = vec![F::zero(); m * d];
                let mut db = vec![F::zero(); d];
                for i in 0..m {
                    for j in 0..d {
                        let gv = g.data()[i * d + j];
                        da[i * d + j] = gv * b.data()[j];
                        db[j] += gv * av.data()[i * d + j];
                    }
                }
                vec![Tensor::new(vec![m, d], da), Tensor::new(vec![d], db)]
            })),
        )
    }

    /// Matrix product with gradients for both operands. Supports batched
    /// operands with matching batch dimensions; a rank-2 operand broadcasts.
    pub fn matmul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        let out = matmul_forward(&a, &b);
        let (ba, p, q) = {
            let (ba, p, q) = split_batch(a.shape());
            (ba.to_vec(), p, q)
        };
        let (bb, _, r) = {
            let (bb, qb, r) = split_batch(b.shape());
            (bb.to_vec(), qb, r)
        };
        let nb: usize = out.shape()[..out.rank() - 2].iter().product();
        self.tape.push(
            "matmul",
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                let mut da = vec![F::zero(); a.numel()];
                let mut db = vec![F::zero(); b.numel()];
                for i in 0..nb {
                    let gs = &g.data()[i * p * r..(i + 1) * p * r];
                    let asl =
                        if ba.is_empty() { a.data() } else { &a.data()[i * p * q..(i + 1) * p * q] };
                    let bsl =
                        if bb.is_empty() { b.data() } else { &b.data()[i * q * r..(i + 1) * q * r] };
                    // dA = G @ B^T accumulates over broadcast batches.
                    let dasl = if ba.is_empty() {
                        &mut da[..]
                    } else {
                        &mut da[i * p * q..(i + 1) * p * q]
                    };
                    mm_nt(gs, bsl, p, r, q, dasl);
                    let dbsl = if bb.is_empty() {
                        &mut db[..]
                    } else {
                        &mut db[i * q * r..(i + 1) * q * r]
                    };
                    mm_tn(asl, gs, q, p, r, dbsl);
                }
                vec![
                    Tensor::new(a.shape().to_vec(), da),
                    Tensor::new(b.shape().to_vec(), db),
                ]
            })),
        )
    }

    /// Constant matrix times variable: `m @ self`. Used by the gating
    /// function, where the sorting mask is data, not a parameter.
    pub fn premul_const(self, m: &Tensor<F>) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(m.rank(), 2, "premul_const mask must be rank 2");
        assert_eq!(x.rank(), 2, "premul_const input must be rank 2");
        assert_eq!(m.dim(1), x.dim(0), "premul_const inner dimension mismatch");
        let (p, q, r) = (m.dim(0), m.dim(1), x.dim(1));
        let mut out = vec![F::zero(); p * r];
        mm_nn(m.data(), x.data(), p, q, r, &mut out);
        let m = m.clone();
        self.tape.push(
            "premul_const",
            Tensor::new(vec![p, r], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dx = vec![F::zero(); q * r];
                mm_tn(m.data(), g.data(), q, p, r, &mut dx);
                vec![Tensor::new(vec![q, r], dx)]
            })),
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Var<'t, F> {
        let a = self.value();
        let out = a.transposed();
        self.tape.push(
            "transpose",
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![g.transposed()])),
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t, F> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = a.reshaped(shape);
        self.tape.push(
            "reshape",
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![g.reshaped(old.clone())])),
        )
    }

    /// Rows `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t, F> {
        let a = self.value();
        assert_eq!(a.rank(), 2, "slice_rows requires rank 2");
        let (m, d) = (a.dim(0), a.dim(1));
        assert!(start + len <= m, "slice_rows {start}+{len} out of {m}");
        let data = a.data()[start * d..(start + len) * d].to_vec();
        self.tape.push(
            "slice_rows",
            Tensor::new(vec![len, d], data),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dx = vec![F::zero(); m * d];
                dx[start * d..(start + len) * d].copy_from_slice(g.data());
                vec![Tensor::new(vec![m, d], dx)]
            })),
        )
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t, F> {
        let a = self.value();
        assert_eq!(a.rank(), 2, "slice_cols requires rank 2");
        let (m, d) = (a.dim(0), a.dim(1));
        assert!(start + len <= d, "slice_cols {start}+{len} out of {d}");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&a.data()[i * d + start..i * d + start + len]);
        }
        self.tape.push(
            "slice_cols",
            Tensor::new(vec![m, len], data),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dx = vec![F::zero(); m * d];
                for i in 0..m {
                    dx[i * d + start..i * d + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![Tensor::new(vec![m, d], dx)]
            })),
        )
    }

    /// Softmax along the last dimension restricted to positions where `mask`
    /// is nonzero. Masked positions are exactly zero in the output. Panics on
    /// a fully-masked row.
    pub fn masked_softmax(self, mask: &Tensor<F>) -> Var<'t, F> {
        let a = self.value();
        assert_eq!(a.shape(), mask.shape(), "masked_softmax mask shape mismatch");
        let k = *a.shape().last().expect("masked_softmax requires rank >= 1");
        let rows = a.numel() / k;
        let mut out = vec![F::zero(); a.numel()];
        for r in 0..rows {
            let xs = &a.data()[r * k..(r + 1) * k];
            let ms = &mask.data()[r * k..(r + 1) * k];
            let mut mx = F::neg_infinity();
            for j in 0..k {
                if ms[j] != F::zero() && xs[j] > mx {
                    mx = xs[j];
                }
            }
            assert!(mx > F::neg_infinity(), "masked_softmax: fully masked row {r}");
            let mut sum = F::zero();
            for j in 0..k {
                if ms[j] != F::zero() {
                    let e = (xs[j] - mx).exp();
                    out[r * k + j] = e;
                    sum += e;
                }
            }
            for j in 0..k {
                out[r * k + j] = out[r * k + j] / sum;
            }
        }
        let probs = Tensor::new(a.shape().to_vec(), out);
        let saved = probs.clone();
        self.tape.push(
            "masked_softmax",
            probs,
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dx = vec![F::zero(); saved.numel()];
                let k = *saved.shape().last().unwrap();
                let rows = saved.numel() / k;
                for r in 0..rows {
                    let ps = &saved.data()[r * k..(r + 1) * k];
                    let gs = &g.data()[r * k..(r + 1) * k];
                    let mut dot = F::zero();
                    for j in 0..k {
                        dot += ps[j] * gs[j];
                    }
                    for j in 0..k {
                        dx[r * k + j] = ps[j] * (gs[j] - dot);
                    }
                }
                vec![Tensor::new(saved.shape().to_vec(), dx)]
            })),
        )
    }

    /// Normalizes each row of the last dimension to zero mean and unit
    /// variance (the pre-affine part of layer normalization).
    pub fn layer_norm_core(self, eps: f64) -> Var<'t, F> {
        let a = self.value();
        let d = *a.shape().last().expect("layer_norm_core requires rank >= 1");
        let rows = a.numel() / d;
        let epsf = F::of(eps);
        let nf = F::of(d as f64);
        let mut out = vec![F::zero(); a.numel()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let xs = &a.data()[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<F>() / nf;
            let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / nf;
            let is = (var + epsf).sqrt().recip();
            inv_std[r] = is;
            for j in 0..d {
                out[r * d + j] = (xs[j] - mean) * is;
            }
        }
        let norm = Tensor::new(a.shape().to_vec(), out);
        let saved = norm.clone();
        self.tape.push(
            "layer_norm",
            norm,
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dx = vec![F::zero(); saved.numel()];
                for r in 0..rows {
                    let xh = &saved.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let mean_g = gs.iter().copied().sum::<F>() / nf;
                    let mut mean_gx = F::zero();
                    for j in 0..d {
                        mean_gx += gs[j] * xh[j];
                    }
                    mean_gx = mean_gx / nf;
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (gs[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                vec![Tensor::new(saved.shape().to_vec(), dx)]
            })),
        )
    }

    pub fn relu(self) -> Var<'t, F> {
        let a = self.value();
        let out = a.map(|x| if x > F::zero() { x } else { F::zero() });
        self.tape.push(
            "relu",
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&gv, &av)| if av > F::zero() { gv } else { F::zero() })
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    /// Gathers rows of an embedding table (`self`, shape `[vocab, d]`) by id.
    /// The gradient scatters back into the table.
    pub fn embedding(self, ids: &[usize]) -> Var<'t, F> {
        let table = self.value();
        assert_eq!(table.rank(), 2, "embedding table must be rank 2");
        let (v, d) = (table.dim(0), table.dim(1));
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding_lookup: id {id} out of vocabulary range {v}");
            data.extend_from_slice(table.row(id));
        }
        let ids = ids.to_vec();
        let n = ids.len();
        self.tape.push(
            "embedding_lookup",
            Tensor::new(vec![n, d], data),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dt = vec![F::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[i * d + j];
                    }
                }
                vec![Tensor::new(vec![v, d], dt)]
            })),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t, F> {
        let a = self.value();
        let s = a.data().iter().copied().sum::<F>();
        let shape = a.shape().to_vec();
        self.tape.push(
            "sum_all",
            Tensor::scalar(s),
            vec![self.id],
            Some(Box::new(move |g| vec![Tensor::filled(&shape, g.item())])),
        )
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(self) -> Var<'t, F> {
        let a = self.value();
        let n = F::of(a.numel() as f64);
        let s = a.data().iter().copied().sum::<F>() / n;
        let shape = a.shape().to_vec();
        self.tape.push(
            "mean_all",
            Tensor::scalar(s),
            vec![self.id],
            Some(Box::new(move |g| vec![Tensor::filled(&shape, g.item() / n)])),
        )
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(self, target: &Tensor<F>) -> Var<'t, F> {
        let a = self.value();
        assert_eq!(a.shape(), target.shape(), "mse shape mismatch");
        assert!(a.numel() > 0, "mse over empty tensor");
        let n = F::of(a.numel() as f64);
        let mut s = F::zero();
        for (&x, &t) in a.data().iter().zip(target.data()) {
            s += (x - t) * (x - t);
        }
        let target = target.clone();
        self.tape.push(
            "mse",
            Tensor::scalar(s / n),
            vec![self.id],
            Some(Box::new(move |g| {
                let gv = g.item();
                let two = F::of(2.0);
                let d = a
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| two * (x - t) / n * gv)
                    .collect();
                vec![Tensor::new(a.shape().to_vec(), d)]
            })),
        )
    }

    /// Mean token cross-entropy of `[t, vocab]` logits against target ids,
    /// restricted to positions where `keep` is true. Panics when every
    /// position is dropped.
    pub fn cross_entropy_mean(self, targets: &[usize], keep: &[bool]) -> Var<'t, F> {
        let logits = self.value();
        assert_eq!(logits.rank(), 2, "cross_entropy_mean requires [t, vocab] logits");
        let (t, v) = (logits.dim(0), logits.dim(1));
        assert_eq!(targets.len(), t, "cross_entropy_mean target length mismatch");
        assert_eq!(keep.len(), t, "cross_entropy_mean mask length mismatch");
        let kept = keep.iter().filter(|&&k| k).count();
        assert!(kept > 0, "cross_entropy_mean: all-pad target");
        let kf = F::of(kept as f64);

        let mut probs = vec![F::zero(); t * v];
        let mut loss = F::zero();
        for i in 0..t {
            let row = &logits.data()[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / sum;
            }
            if keep[i] {
                assert!(targets[i] < v, "cross_entropy_mean: target id out of range");
                loss += sum.ln() + mx - row[targets[i]];
            }
        }
        let targets = targets.to_vec();
        let keep = keep.to_vec();
        self.tape.push(
            "cross_entropy",
            Tensor::scalar(loss / kf),
            vec![self.id],
            Some(Box::new(move |g| {
                let gv = g.item() / kf;
                let mut dx = vec![F::zero(); t * v];
                for i in 0..t {
                    if !keep[i] {
                        continue;
                    }
                    for j in 0..v {
                        dx[i * v + j] = probs[i * v + j] * gv;
                    }
                    dx[i * v + targets[i]] -= gv;
                }
                vec![Tensor::new(vec![t, v], dx)]
            })),
        )
    }
}

/// Concatenates along the first axis. Rank-1 inputs concatenate into a
/// longer vector; rank-2 inputs must share their column count.
pub fn concat_rows<'t, F: Scalar>(parts: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!parts.is_empty(), "concat_rows of zero tensors");
    let tape = parts[0].tape();
    let values: Vec<Tensor<F>> = parts.iter().map(Var::value).collect();
    let rank = values[0].rank();
    assert!(rank == 1 || rank == 2, "concat_rows requires rank 1 or 2");
    let cols = if rank == 2 { values[0].dim(1) } else { 1 };
    let mut rows = 0;
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(values.len());
    for v in &values {
        assert_eq!(v.rank(), rank, "concat_rows rank mismatch");
        if rank == 2 {
            assert_eq!(v.dim(1), cols, "concat_rows column mismatch");
        }
        spans.push(v.dim(0));
        rows += v.dim(0);
        data.extend_from_slice(v.data());
    }
    let shape = if rank == 2 { vec![rows, cols] } else { vec![rows] };
    let ids = parts.iter().map(|p| p.id()).collect();
    tape.push(
        "concat_rows",
        Tensor::new(shape, data),
        ids,
        Some(Box::new(move |g| {
            let width = if rank == 2 { cols } else { 1 };
            let mut out = Vec::with_capacity(spans.len());
            let mut off = 0;
            for &n in &spans {
                let chunk = g.data()[off * width..(off + n) * width].to_vec();
                let shape = if rank == 2 { vec![n, cols] } else { vec![n] };
                out.push(Tensor::new(shape, chunk));
                off += n;
            }
            out
        })),
    )
}

/// Concatenates rank-2 tensors along columns; all must share the row count.
pub fn concat_cols<'t, F: Scalar>(parts: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!parts.is_empty(), "concat_cols of zero tensors");
    let tape = parts[0].tape();
    let values: Vec<Tensor<F>> = parts.iter().map(Var::value).collect();
    let m = values[0].dim(0);
    let widths: Vec<usize> = values
        .iter()
        .map(|v| {
            assert_eq!(v.dim(0), m, "concat_cols row mismatch");
            v.dim(1)
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for v in &values {
            data.extend_from_slice(v.row(i));
        }
    }
    let ids = parts.iter().map(|p| p.id()).collect();
    tape.push(
        "concat_cols",
        Tensor::new(vec![m, total], data),
        ids,
        Some(Box::new(move |g| {
            let mut out: Vec<Vec<F>> = widths.iter().map(|&w| Vec::with_capacity(m * w)).collect();
            for i in 0..m {
                let mut off = 0;
                for (k, &w) in widths.iter().enumerate() {
                    out[k].extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                    off += w;
                }
            }
            out.into_iter()
                .zip(&widths)
                .map(|(d, &w)| Tensor::new(vec![m, w], d))
                .collect()
        })),
    )
}

impl<'t, F: Scalar> std::ops::Add for Var<'t, F> {
    type Output = Var<'t, F>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, F: Scalar> std::ops::Sub for Var<'t, F> {
    type Output = Var<'t, F>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t, F: Scalar> std::ops::Mul for Var<'t, F> {
    type Output = Var<'t, F>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape::Tape;
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[&[1., 0.], &[0., 1.]]));
        let b = tape.leaf(t2(&[&[3., 4.], &[5., 6.]]));
        assert_eq!(a.matmul(b).value(), t2(&[&[3., 4.], &[5., 6.]]));
    }

    #[test]
    fn matmul_one_by_one() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[&[2.]]));
        let b = tape.leaf(t2(&[&[3.]]));
        assert_eq!(a.matmul(b).value().item(), 6.0);
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch_panics() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        let _ = a.matmul(b);
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.25).collect()));
        let b = tape.leaf(Tensor::new(vec![2, 3, 2], (0..12).map(|i| 1.0 - i as f64 * 0.1).collect()));
        let out = a.matmul(b).value();
        assert_eq!(out.shape(), &[2, 2, 2]);
        let a0 = tape.leaf(Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.25).collect()));
        let b0 = tape.leaf(Tensor::new(vec![3, 2], (0..6).map(|i| 1.0 - i as f64 * 0.1).collect()));
        let o0 = a0.matmul(b0).value();
        assert_eq!(&out.data()[..4], o0.data());
    }

    #[test]
    fn masked_softmax_symmetry_and_single() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]));
        let p = x.masked_softmax(&Tensor::new(vec![2], vec![1.0, 1.0]));
        assert_eq!(p.value().data(), &[0.5, 0.5]);

        let y = tape.leaf(Tensor::new(vec![2], vec![5.0, 100.0]));
        let q = y.masked_softmax(&Tensor::new(vec![2], vec![1.0, 0.0]));
        assert_eq!(q.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_matches_scalar_math() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let p = x.masked_softmax(&Tensor::filled(&[3], 1.0));
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in p.value().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = p.value().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "fully masked row")]
    fn fully_masked_row_panics() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let _ = x.masked_softmax(&Tensor::zeros(&[2]));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[1, 4], 3.25));
        let out = x.layer_norm_core(1e-6).value();
        for v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn embedding_is_deterministic_and_checks_range() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf(t2(&[&[1., 2.], &[3., 4.], &[5., 6.]]));
        let a = table.embedding(&[0, 2, 0]);
        assert_eq!(a.value().row(0), a.value().row(2));
        assert_eq!(a.value().row(1), &[5., 6.]);
    }

    #[test]
    #[should_panic(expected = "out of vocabulary range")]
    fn embedding_out_of_range_panics() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::zeros(&[3, 2]));
        let _ = table.embedding(&[3]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        let loss = logits.cross_entropy_mean(&[1, 3], &[true, true]);
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "all-pad target")]
    fn cross_entropy_all_pad_panics() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        let _ = logits.cross_entropy_mean(&[0, 0], &[false, false]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[&[1., 2.]]));
        let b = tape.leaf(t2(&[&[3., 4.], &[5., 6.]]));
        let cat = concat_rows(&[a, b]);
        assert_eq!(cat.value().shape(), &[3, 2]);
        assert_eq!(cat.slice_rows(1, 2).value(), b.value());
        assert_eq!(cat.slice_cols(1, 1).value().data(), &[2., 4., 6.]);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_forward_value_panics() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![1e308]));
        let y = tape.leaf(Tensor::new(vec![1], vec![1e308]));
        // Overflows to +inf, which the tape rejects.
        let _ = x.mul(y);
    }
}
