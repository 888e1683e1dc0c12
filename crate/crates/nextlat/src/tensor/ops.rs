//! Differentiable operations. Each op computes its forward value eagerly and
//! records a backward rule on the joint tape of its tracked inputs; ops over
//! untracked inputs record nothing and produce detached outputs.

use super::kernels;
use super::{make_output, numel_of, Element, Tensor};
use crate::error::Error;
use rand::Rng;
use std::rc::Rc;

/// A rectangular batch of token ids, row-major `[batch, time]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub time: usize,
}

impl TokenBatch {
    pub fn new(batch: usize, time: usize, ids: Vec<u32>) -> Self {
        assert_eq!(ids.len(), batch * time, "token count does not match batch shape");
        TokenBatch { ids, batch, time }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let batch = rows.len();
        let time = rows.first().map_or(0, Vec::len);
        let mut ids = Vec::with_capacity(batch * time);
        for r in rows {
            assert_eq!(r.len(), time, "ragged rows in token batch");
            ids.extend_from_slice(r);
        }
        TokenBatch { ids, batch, time }
    }

    pub fn get(&self, b: usize, t: usize) -> u32 {
        self.ids[b * self.time + t]
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.time..(b + 1) * self.time]
    }
}

fn leading_product(shape: &[usize], trailing: usize) -> usize {
    assert!(trailing <= shape.len());
    shape[..shape.len() - trailing].iter().product()
}

impl<E: Element> Tensor<E> {
    /// Elementwise sum. `other` may have a shape that is a trailing suffix of
    /// `self`'s (broadcast over the leading axes) — exactly the cases the
    /// transformer needs (bias rows, positional tables).
    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        let bn = other.numel();
        assert!(
            self.shape().ends_with(other.shape()) && bn > 0,
            "add: shape {:?} is not a trailing suffix of {:?}",
            other.shape(),
            self.shape()
        );
        let reps = self.numel() / bn;
        let mut out = self.data().to_vec();
        for r in 0..reps {
            for (o, &b) in out[r * bn..(r + 1) * bn].iter_mut().zip(other.data().iter()) {
                *o += b;
            }
        }
        make_output(
            &[self, other],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for (gv, &go) in g.iter_mut().zip(gout.iter()) {
                        *gv += go;
                    }
                });
                sink.accum(1, |g| {
                    for r in 0..reps {
                        for (gv, &go) in g.iter_mut().zip(gout[r * bn..(r + 1) * bn].iter()) {
                            *gv += go;
                        }
                    }
                });
            }),
        )
    }

    /// Elementwise difference, same shapes.
    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "sub: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        make_output(
            &[self, other],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for (gv, &go) in g.iter_mut().zip(gout.iter()) {
                        *gv += go;
                    }
                });
                sink.accum(1, |g| {
                    for (gv, &go) in g.iter_mut().zip(gout.iter()) {
                        *gv -= go;
                    }
                });
            }),
        )
    }

    /// Elementwise product, same shapes.
    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "mul: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&other.data);
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        make_output(
            &[self, other],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * b[i];
                    }
                });
                sink.accum(1, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * a[i];
                    }
                });
            }),
        )
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(&self, c: E) -> Tensor<E> {
        let out = self.data().iter().map(|&x| x * c).collect();
        make_output(
            &[self],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for (gv, &go) in g.iter_mut().zip(gout.iter()) {
                        *gv += go * c;
                    }
                });
            }),
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2 && self.shape()[1] == other.shape()[0],
            "matmul: incompatible shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&other.data);
        let mut out = vec![E::ZERO; m * n];
        kernels::matmul_acc(&a, &b, m, k, n, &mut out);
        make_output(
            &[self, other],
            vec![m, n],
            out,
            Box::new(move |gout, sink| {
                if sink.wants(0) {
                    sink.accum(0, |g| kernels::matmul_nt_acc(gout, &b, m, n, k, g));
                }
                if sink.wants(1) {
                    sink.accum(1, |g| kernels::matmul_tn_acc(&a, gout, m, k, n, g));
                }
            }),
        )
    }

    /// Affine map over the last axis: `[.., in] x [in, out] (+ bias[out])`.
    pub fn linear(&self, weight: &Tensor<E>, bias: Option<&Tensor<E>>) -> Tensor<E> {
        let din = *self.shape().last().expect("linear on scalar");
        assert!(
            weight.shape().len() == 2 && weight.shape()[0] == din,
            "linear: input {:?} vs weight {:?}",
            self.shape(),
            weight.shape()
        );
        let dout = weight.shape()[1];
        if let Some(b) = bias {
            assert_eq!(b.shape(), [dout], "linear: bias {:?} vs out dim {}", b.shape(), dout);
        }
        let rows = leading_product(self.shape(), 1);
        let x = Rc::clone(&self.data);
        let w = Rc::clone(&weight.data);
        let mut out = vec![E::ZERO; rows * dout];
        kernels::matmul_acc(&x, &w, rows, din, dout, &mut out);
        if let Some(b) = bias {
            for r in 0..rows {
                for (o, &bv) in out[r * dout..(r + 1) * dout].iter_mut().zip(b.data().iter()) {
                    *o += bv;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<&Tensor<E>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let has_bias = bias.is_some();
        make_output(
            &inputs,
            shape,
            out,
            Box::new(move |gout, sink| {
                if sink.wants(0) {
                    sink.accum(0, |g| kernels::matmul_nt_acc(gout, &w, rows, dout, din, g));
                }
                if sink.wants(1) {
                    sink.accum(1, |g| kernels::matmul_tn_acc(&x, gout, rows, din, dout, g));
                }
                if has_bias {
                    sink.accum(2, |g| {
                        for r in 0..rows {
                            for (gv, &go) in g.iter_mut().zip(gout[r * dout..(r + 1) * dout].iter()) {
                                *gv += go;
                            }
                        }
                    });
                }
            }),
        )
    }

    /// Projection through the transposed rows of `w[V, D]`:
    /// `[.., D] -> [.., V]` (tied output heads project through the
    /// embedding table).
    pub fn linear_nt(&self, weight: &Tensor<E>) -> Tensor<E> {
        let din = *self.shape().last().expect("linear_nt on scalar");
        assert!(
            weight.shape().len() == 2 && weight.shape()[1] == din,
            "linear_nt: input {:?} vs weight rows {:?}",
            self.shape(),
            weight.shape()
        );
        let v = weight.shape()[0];
        let rows = leading_product(self.shape(), 1);
        let x = Rc::clone(&self.data);
        let w = Rc::clone(&weight.data);
        let mut out = vec![E::ZERO; rows * v];
        kernels::matmul_nt_acc(&x, &w, rows, din, v, &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = v;
        make_output(
            &[self, weight],
            shape,
            out,
            Box::new(move |gout, sink| {
                if sink.wants(0) {
                    sink.accum(0, |g| kernels::matmul_acc(gout, &w, rows, v, din, g));
                }
                if sink.wants(1) {
                    sink.accum(1, |g| kernels::matmul_tn_acc(gout, &x, rows, v, din, g));
                }
            }),
        )
    }

    /// Grouped matrix product `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn bmm(&self, other: &Tensor<E>) -> Tensor<E> {
        assert!(
            self.shape().len() == 3
                && other.shape().len() == 3
                && self.shape()[0] == other.shape()[0]
                && self.shape()[2] == other.shape()[1],
            "bmm: incompatible shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (g, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = other.shape()[2];
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&other.data);
        let mut out = vec![E::ZERO; g * m * n];
        for gi in 0..g {
            kernels::matmul_acc(
                &a[gi * m * k..(gi + 1) * m * k],
                &b[gi * k * n..(gi + 1) * k * n],
                m,
                k,
                n,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        make_output(
            &[self, other],
            vec![g, m, n],
            out,
            Box::new(move |gout, sink| {
                if sink.wants(0) {
                    sink.accum(0, |ga| {
                        for gi in 0..g {
                            kernels::matmul_nt_acc(
                                &gout[gi * m * n..(gi + 1) * m * n],
                                &b[gi * k * n..(gi + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut ga[gi * m * k..(gi + 1) * m * k],
                            );
                        }
                    });
                }
                if sink.wants(1) {
                    sink.accum(1, |gb| {
                        for gi in 0..g {
                            kernels::matmul_tn_acc(
                                &a[gi * m * k..(gi + 1) * m * k],
                                &gout[gi * m * n..(gi + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut gb[gi * k * n..(gi + 1) * k * n],
                            );
                        }
                    });
                }
            }),
        )
    }

    /// Grouped product against transposed right factor:
    /// `[g,m,k] x [g,p,k]ᵀ -> [g,m,p]` (attention scores).
    pub fn bmm_nt(&self, other: &Tensor<E>) -> Tensor<E> {
        assert!(
            self.shape().len() == 3
                && other.shape().len() == 3
                && self.shape()[0] == other.shape()[0]
                && self.shape()[2] == other.shape()[2],
            "bmm_nt: incompatible shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (g, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let p = other.shape()[1];
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&other.data);
        let mut out = vec![E::ZERO; g * m * p];
        for gi in 0..g {
            kernels::matmul_nt_acc(
                &a[gi * m * k..(gi + 1) * m * k],
                &b[gi * p * k..(gi + 1) * p * k],
                m,
                k,
                p,
                &mut out[gi * m * p..(gi + 1) * m * p],
            );
        }
        make_output(
            &[self, other],
            vec![g, m, p],
            out,
            Box::new(move |gout, sink| {
                if sink.wants(0) {
                    // dA = g · B
                    sink.accum(0, |ga| {
                        for gi in 0..g {
                            kernels::matmul_acc(
                                &gout[gi * m * p..(gi + 1) * m * p],
                                &b[gi * p * k..(gi + 1) * p * k],
                                m,
                                p,
                                k,
                                &mut ga[gi * m * k..(gi + 1) * m * k],
                            );
                        }
                    });
                }
                if sink.wants(1) {
                    // dB = gᵀ · A
                    sink.accum(1, |gb| {
                        for gi in 0..g {
                            kernels::matmul_tn_acc(
                                &gout[gi * m * p..(gi + 1) * m * p],
                                &a[gi * m * k..(gi + 1) * m * k],
                                m,
                                p,
                                k,
                                &mut gb[gi * p * k..(gi + 1) * p * k],
                            );
                        }
                    });
                }
            }),
        )
    }

    /// Axis swap `[a,b,c,d] -> [a,c,b,d]` (head split/merge). Involution, so
    /// the backward pass is the same permutation of the gradient.
    pub fn permute_0213(&self) -> Tensor<E> {
        assert_eq!(self.shape().len(), 4, "permute_0213 on {:?}", self.shape());
        let (d0, d1, d2, d3) =
            (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        fn permute<E: Element>(src: &[E], dst: &mut [E], d0: usize, d1: usize, d2: usize, d3: usize) {
            for a in 0..d0 {
                for b in 0..d1 {
                    for c in 0..d2 {
                        let s = ((a * d1 + b) * d2 + c) * d3;
                        let t = ((a * d2 + c) * d1 + b) * d3;
                        dst[t..t + d3].copy_from_slice(&src[s..s + d3]);
                    }
                }
            }
        }
        let mut out = vec![E::ZERO; self.numel()];
        permute(self.data(), &mut out, d0, d1, d2, d3);
        make_output(
            &[self],
            vec![d0, d2, d1, d3],
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    let mut tmp = vec![E::ZERO; gout.len()];
                    permute(gout, &mut tmp, d0, d2, d1, d3);
                    for (gv, &t) in g.iter_mut().zip(tmp.iter()) {
                        *gv += t;
                    }
                });
            }),
        )
    }

    /// Row-stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<E> {
        let v = *self.shape().last().expect("softmax on scalar");
        let rows = leading_product(self.shape(), 1);
        let mut out = self.data().to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * v..(r + 1) * v]);
        }
        let out_rc = Rc::new(out);
        let probs = Rc::clone(&out_rc);
        let shape = self.shape().to_vec();
        make_output_shared(
            &[self],
            shape,
            out_rc,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for r in 0..rows {
                        let p = &probs[r * v..(r + 1) * v];
                        let go = &gout[r * v..(r + 1) * v];
                        let s = kernels::dot(go, p);
                        for c in 0..v {
                            g[r * v + c] += p[c] * (go[c] - s);
                        }
                    }
                });
            }),
        )
    }

    /// Softmax over the last axis of `[g,t,t]` score blocks with a causal
    /// mask: row `r` distributes only over columns `0..=r`.
    pub fn causal_softmax(&self) -> Tensor<E> {
        assert!(
            self.shape().len() == 3 && self.shape()[1] == self.shape()[2],
            "causal_softmax wants [g,t,t], got {:?}",
            self.shape()
        );
        let (g, t) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![E::ZERO; self.numel()];
        let x = self.data();
        for gi in 0..g {
            for r in 0..t {
                let base = (gi * t + r) * t;
                let row = &x[base..base + r + 1];
                let dst = &mut out[base..base + r + 1];
                dst.copy_from_slice(row);
                softmax_row(dst);
            }
        }
        let out_rc = Rc::new(out);
        let probs = Rc::clone(&out_rc);
        make_output_shared(
            &[self],
            self.shape().to_vec(),
            out_rc,
            Box::new(move |gout, sink| {
                sink.accum(0, |gx| {
                    for gi in 0..g {
                        for r in 0..t {
                            let base = (gi * t + r) * t;
                            let p = &probs[base..base + r + 1];
                            let go = &gout[base..base + r + 1];
                            let s = kernels::dot(go, p);
                            for c in 0..=r {
                                gx[base + c] += p[c] * (go[c] - s);
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Per-row normalization over the last axis followed by a learned affine.
    /// `eps` sits inside the variance square root.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: E) -> Tensor<E> {
        let d = *self.shape().last().expect("layer_norm on scalar");
        assert!(d >= 1);
        assert_eq!(gain.shape(), [d], "layer_norm: gain {:?} vs D={}", gain.shape(), d);
        assert_eq!(bias.shape(), [d], "layer_norm: bias {:?} vs D={}", bias.shape(), d);
        let rows = leading_product(self.shape(), 1);
        let x = Rc::clone(&self.data);
        let gdata = Rc::clone(&gain.data);
        let inv_d = E::ONE / E::from_usize(d);
        let mut out = vec![E::ZERO; self.numel()];
        let mut stats = Vec::with_capacity(rows * 2); // (mean, inv_std) per row
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = E::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv_std = E::ONE / (var + eps).sqrt();
            stats.push(mean);
            stats.push(inv_std);
            let dst = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                dst[i] = (row[i] - mean) * inv_std * gdata[i] + bias.data()[i];
            }
        }
        make_output(
            &[self, gain, bias],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                // Shared per-row terms, computed once.
                if sink.wants(0) {
                    sink.accum(0, |gx| {
                        for r in 0..rows {
                            let (mean, inv_std) = (stats[2 * r], stats[2 * r + 1]);
                            let row = &x[r * d..(r + 1) * d];
                            let go = &gout[r * d..(r + 1) * d];
                            let mut sum_gy = E::ZERO;
                            let mut sum_gy_xhat = E::ZERO;
                            for i in 0..d {
                                let xhat = (row[i] - mean) * inv_std;
                                let gyg = go[i] * gdata[i];
                                sum_gy += gyg;
                                sum_gy_xhat += gyg * xhat;
                            }
                            sum_gy *= inv_d;
                            sum_gy_xhat *= inv_d;
                            let dst = &mut gx[r * d..(r + 1) * d];
                            for i in 0..d {
                                let xhat = (row[i] - mean) * inv_std;
                                dst[i] += (go[i] * gdata[i] - sum_gy - xhat * sum_gy_xhat) * inv_std;
                            }
                        }
                    });
                }
                if sink.wants(1) {
                    sink.accum(1, |gg| {
                        for r in 0..rows {
                            let (mean, inv_std) = (stats[2 * r], stats[2 * r + 1]);
                            let row = &x[r * d..(r + 1) * d];
                            let go = &gout[r * d..(r + 1) * d];
                            for i in 0..d {
                                gg[i] += go[i] * (row[i] - mean) * inv_std;
                            }
                        }
                    });
                }
                sink.accum(2, |gb| {
                    for r in 0..rows {
                        let go = &gout[r * d..(r + 1) * d];
                        for i in 0..d {
                            gb[i] += go[i];
                        }
                    }
                });
            }),
        )
    }

    /// Gaussian-error linear unit, tanh approximation (the build-time choice
    /// recorded in run manifests).
    pub fn gelu(&self) -> Tensor<E> {
        let x = Rc::clone(&self.data);
        let out = x.iter().map(|&v| gelu_scalar(v)).collect();
        make_output(
            &[self],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_grad_scalar(x[i]);
                    }
                });
            }),
        )
    }

    /// Row gather from an embedding table `[V, D]`; backward scatter-adds
    /// into the table rows.
    pub fn embedding_lookup(&self, ids: &TokenBatch) -> Result<Tensor<E>, Error> {
        assert_eq!(self.shape().len(), 2, "embedding table must be [V, D], got {:?}", self.shape());
        let (v, d) = (self.shape()[0], self.shape()[1]);
        for (pos, &id) in ids.ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::Vocab { position: pos, id, vocab: v });
            }
        }
        let mut out = vec![E::ZERO; ids.ids.len() * d];
        for (pos, &id) in ids.ids.iter().enumerate() {
            out[pos * d..(pos + 1) * d]
                .copy_from_slice(&self.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let idv = ids.ids.clone();
        Ok(make_output(
            &[self],
            vec![ids.batch, ids.time, d],
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for (pos, &id) in idv.iter().enumerate() {
                        kernels::axpy(
                            E::ONE,
                            &gout[pos * d..(pos + 1) * d],
                            &mut g[id as usize * d..(id as usize + 1) * d],
                        );
                    }
                });
            }),
        ))
    }

    /// Mean negative log-softmax probability of `targets` over unmasked
    /// positions. `self` is `[.., V]`, flattened to one row per position.
    pub fn cross_entropy(&self, targets: &[u32], mask: &[bool]) -> Result<Tensor<E>, Error> {
        let v = *self.shape().last().expect("cross_entropy on scalar");
        let rows = leading_product(self.shape(), 1);
        assert_eq!(targets.len(), rows, "cross_entropy: {} targets for {} rows", targets.len(), rows);
        assert_eq!(mask.len(), rows, "cross_entropy: {} mask entries for {} rows", mask.len(), rows);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let x = self.data();
        let mut probs = vec![E::ZERO; rows * v];
        let mut total = E::ZERO;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &x[r * v..(r + 1) * v];
            let tgt = targets[r] as usize;
            assert!(tgt < v, "cross_entropy: target id {} >= vocab {}", tgt, v);
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            let lse = softmax_row(p);
            total += lse - row[tgt];
        }
        let inv = E::ONE / E::from_usize(count);
        let probs = Rc::new(probs);
        let tgts: Vec<u32> = targets.to_vec();
        let msk: Vec<bool> = mask.to_vec();
        Ok(make_output(
            &[self],
            vec![],
            vec![total * inv],
            Box::new(move |gout, sink| {
                let scale = gout[0] * inv;
                sink.accum(0, |g| {
                    for r in 0..rows {
                        if !msk[r] {
                            continue;
                        }
                        let p = &probs[r * v..(r + 1) * v];
                        let dst = &mut g[r * v..(r + 1) * v];
                        for c in 0..v {
                            dst[c] += p[c] * scale;
                        }
                        dst[tgts[r] as usize] -= scale;
                    }
                });
            }),
        ))
    }

    /// Huber-style loss, quadratic below `beta` and linear above, mean over
    /// all elements. The target must be detached (it is the stop-gradient
    /// branch by contract).
    pub fn smooth_l1(&self, target: &Tensor<E>, beta: E) -> Tensor<E> {
        assert_eq!(
            self.shape(),
            target.shape(),
            "smooth_l1: shape {:?} vs {:?}",
            self.shape(),
            target.shape()
        );
        assert!(
            !target.requires_grad(),
            "smooth_l1 target must be detached (stop-gradient contract)"
        );
        assert!(beta > E::ZERO, "smooth_l1: beta must be positive");
        let n = self.numel();
        let inv = E::ONE / E::from_usize(n);
        let half = E::from_f64(0.5);
        let pred = Rc::clone(&self.data);
        let tgt = Rc::clone(&target.data);
        let mut total = E::ZERO;
        for i in 0..n {
            let d = pred[i] - tgt[i];
            let a = d.abs();
            total += if a < beta { half * d * d / beta } else { a - half * beta };
        }
        make_output(
            &[self],
            vec![],
            vec![total * inv],
            Box::new(move |gout, sink| {
                let scale = gout[0] * inv;
                sink.accum(0, |g| {
                    for i in 0..g.len() {
                        let d = pred[i] - tgt[i];
                        let slope = (d / beta).max(-E::ONE).min(E::ONE);
                        g[i] += slope * scale;
                    }
                });
            }),
        )
    }

    /// Sum of all elements.
    pub fn sum(&self) -> Tensor<E> {
        let mut total = E::ZERO;
        for &v in self.data().iter() {
            total += v;
        }
        make_output(
            &[self],
            vec![],
            vec![total],
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for gv in g.iter_mut() {
                        *gv += gout[0];
                    }
                });
            }),
        )
    }

    /// Mean of all elements.
    pub fn mean(&self) -> Tensor<E> {
        let inv = E::ONE / E::from_usize(self.numel());
        self.sum().scale(inv)
    }

    /// Shift one step along the time axis of `[B,T,C]`, filling position 0
    /// with zeros (the dummy initial latent of the rollout loop).
    pub fn shift_right_time(&self) -> Tensor<E> {
        assert_eq!(self.shape().len(), 3, "shift_right_time wants [B,T,C], got {:?}", self.shape());
        let (b, t, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let mut out = vec![E::ZERO; self.numel()];
        for bi in 0..b {
            for ti in 1..t {
                let src = (bi * t + ti - 1) * c;
                let dst = (bi * t + ti) * c;
                out[dst..dst + c].copy_from_slice(&self.data()[src..src + c]);
            }
        }
        make_output(
            &[self],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for bi in 0..b {
                        for ti in 1..t {
                            let src = (bi * t + ti) * c;
                            let dst = (bi * t + ti - 1) * c;
                            kernels::axpy(E::ONE, &gout[src..src + c], &mut g[dst..dst + c]);
                        }
                    }
                });
            }),
        )
    }

    /// Concatenate along the last axis; leading shapes must match.
    pub fn concat_last(&self, other: &Tensor<E>) -> Tensor<E> {
        let (la, lb) = (self.shape().len(), other.shape().len());
        assert!(
            la == lb && self.shape()[..la - 1] == other.shape()[..lb - 1],
            "concat_last: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let ca = self.shape()[la - 1];
        let cb = other.shape()[lb - 1];
        let rows = leading_product(self.shape(), 1);
        let c = ca + cb;
        let mut out = vec![E::ZERO; rows * c];
        for r in 0..rows {
            out[r * c..r * c + ca].copy_from_slice(&self.data()[r * ca..(r + 1) * ca]);
            out[r * c + ca..(r + 1) * c].copy_from_slice(&other.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        make_output(
            &[self, other],
            shape,
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for r in 0..rows {
                        kernels::axpy(
                            E::ONE,
                            &gout[r * c..r * c + ca],
                            &mut g[r * ca..(r + 1) * ca],
                        );
                    }
                });
                sink.accum(1, |g| {
                    for r in 0..rows {
                        kernels::axpy(
                            E::ONE,
                            &gout[r * c + ca..(r + 1) * c],
                            &mut g[r * cb..(r + 1) * cb],
                        );
                    }
                });
            }),
        )
    }

    /// Contiguous slice along the time axis of `[B,T,C]`.
    pub fn slice_time(&self, start: usize, len: usize) -> Tensor<E> {
        assert_eq!(self.shape().len(), 3, "slice_time wants [B,T,C], got {:?}", self.shape());
        let (b, t, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert!(start + len <= t, "slice_time: [{start}, {start}+{len}) out of T={t}");
        let mut out = vec![E::ZERO; b * len * c];
        for bi in 0..b {
            let src = (bi * t + start) * c;
            out[bi * len * c..(bi + 1) * len * c].copy_from_slice(&self.data()[src..src + len * c]);
        }
        make_output(
            &[self],
            vec![b, len, c],
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for bi in 0..b {
                        let dst = (bi * t + start) * c;
                        kernels::axpy(
                            E::ONE,
                            &gout[bi * len * c..(bi + 1) * len * c],
                            &mut g[dst..dst + len * c],
                        );
                    }
                });
            }),
        )
    }

    /// Contiguous slice along the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Tensor<E> {
        let c = *self.shape().last().expect("slice_last on scalar");
        assert!(start + len <= c, "slice_last: [{start}, {start}+{len}) out of C={c}");
        let rows = leading_product(self.shape(), 1);
        let mut out = vec![E::ZERO; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&self.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        make_output(
            &[self],
            shape,
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for r in 0..rows {
                        kernels::axpy(
                            E::ONE,
                            &gout[r * len..(r + 1) * len],
                            &mut g[r * c + start..r * c + start + len],
                        );
                    }
                });
            }),
        )
    }

    /// Gather rows of a `[M, C]` tensor; backward scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2, "gather_rows wants [M,C], got {:?}", self.shape());
        let (m, c) = (self.shape()[0], self.shape()[1]);
        for &i in idx {
            assert!(i < m, "gather_rows: row {i} out of {m}");
        }
        let mut out = vec![E::ZERO; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        make_output(
            &[self],
            vec![idx.len(), c],
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(E::ONE, &gout[r * c..(r + 1) * c], &mut g[i * c..(i + 1) * c]);
                    }
                });
            }),
        )
    }

    /// Inverted dropout with a caller-supplied RNG; identity at `p = 0`.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Tensor<E> {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0,1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { E::ZERO } else { keep })
            .collect();
        let mask = Rc::new(mask);
        let m2 = Rc::clone(&mask);
        let out = self.data().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        make_output(
            &[self],
            self.shape().to_vec(),
            out,
            Box::new(move |gout, sink| {
                sink.accum(0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * m2[i];
                    }
                });
            }),
        )
    }
}

/// Mean over rows of `KL(softmax(p) || softmax(q))`. The `p` side must be
/// detached; gradients flow only through `q`.
pub fn kl_div<E: Element>(p_logits: &Tensor<E>, q_logits: &Tensor<E>) -> Tensor<E> {
    assert_eq!(
        p_logits.shape(),
        q_logits.shape(),
        "kl_div: shape {:?} vs {:?}",
        p_logits.shape(),
        q_logits.shape()
    );
    assert!(
        !p_logits.requires_grad(),
        "kl_div: p side must be detached (stop-gradient contract)"
    );
    let v = *p_logits.shape().last().expect("kl_div on scalar");
    let rows = numel_of(p_logits.shape()) / v;
    let inv = E::ONE / E::from_usize(rows);
    let mut p_probs = p_logits.data().to_vec();
    let mut q_probs = q_logits.data().to_vec();
    let mut total = E::ZERO;
    for r in 0..rows {
        let p = &mut p_probs[r * v..(r + 1) * v];
        let q = &mut q_probs[r * v..(r + 1) * v];
        let p_lse = softmax_row(p);
        let q_lse = softmax_row(q);
        // KL = sum p * (ln p − ln q) with both log terms computed as
        // logit − lse, so bitwise-identical inputs give exactly zero.
        for c in 0..v {
            let lp = p_logits.data()[r * v + c] - p_lse;
            let lq = q_logits.data()[r * v + c] - q_lse;
            total += p[c] * (lp - lq);
        }
    }
    let p_probs = Rc::new(p_probs);
    let q_probs = Rc::new(q_probs);
    make_output(
        &[q_logits],
        vec![],
        vec![total * inv],
        Box::new(move |gout, sink| {
            let scale = gout[0] * inv;
            sink.accum(0, |g| {
                for i in 0..g.len() {
                    g[i] += (q_probs[i] - p_probs[i]) * scale;
                }
            });
        }),
    )
}

/// In-place stable softmax of one row; returns the log-sum-exp.
fn softmax_row<E: Element>(row: &mut [E]) -> E {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut z = E::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    let inv = E::ONE / z;
    for v in row.iter_mut() {
        *v *= inv;
    }
    m + z.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}

/// Variant of `make_output` for ops that keep their (shared) output buffer
/// for the backward pass.
fn make_output_shared<E: Element>(
    inputs: &[&Tensor<E>],
    shape: Vec<usize>,
    data: Rc<Vec<E>>,
    backward: super::BackwardFn<E>,
) -> Tensor<E> {
    // Reuses make_output by temporarily unwrapping: the Rc is cloned by the
    // closure already, so we can hand over a second clone as the value.
    super::make_output_rc(inputs, shape, data, backward)
}
