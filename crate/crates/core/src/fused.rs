//! Fused neighbourhood kernels with hand-written backward passes.
//!
//! Each kernel computes the same arithmetic, in the same order, as the
//! equivalent composition of graph primitives, but without materialising the
//! `N·k×D` intermediates of the composition.

use crate::error::{Error, Result};
use crate::geom::Neighbors;
use crate::tensor::kernels::{matmul, transpose};
use crate::tensor::{CustomOp, Tensor, Var};

fn dims(v: &Var<'_>, op: &'static str, rank_two: bool) -> Result<(usize, usize)> {
    let s = v.shape();
    if rank_two && s.len() != 2 {
        return Err(Error::shape(op, &s, &[0, 0]));
    }
    Ok((s[0], s[1]))
}

/// `out[c,d] = max_l relu((rel·W)[c·k+l, d] + feat[nbr(c,l), d] + b[d])`.
///
/// `rel` holds one row per (centre, neighbour) pair, `feat` one row per
/// neighbour candidate. Ties in the max go to the lowest `l`.
pub fn group_max_linear<'g>(
    rel: &Var<'g>,
    feat: &Var<'g>,
    weight: &Var<'g>,
    bias: &Var<'g>,
    nbr: &Neighbors,
) -> Result<Var<'g>> {
    const OP: &str = "group_max_linear";
    let (rows, e) = dims(rel, OP, true)?;
    let (cand, d) = dims(feat, OP, true)?;
    let k = nbr.k();
    if weight.shape() != [e, d] || bias.shape() != [1, d] || rows != nbr.flat().len() {
        return Err(Error::shape(OP, &rel.shape(), &weight.shape()));
    }
    if let Some(&bad) = nbr.flat().iter().find(|&&i| i >= cand) {
        return Err(Error::Index {
            op: OP,
            index: bad,
            len: cand,
        });
    }
    let centres = rows / k;
    let (rv, fv, wv, bv) = (rel.value(), feat.value(), weight.value(), bias.value());
    let rw = matmul(rv.data(), wv.data(), rows, e, d);
    let mut out = vec![0.0; centres * d];
    let mut argmax = vec![0u32; centres * d];
    let mut pre = vec![0.0; d];
    for c in 0..centres {
        let best = &mut out[c * d..(c + 1) * d];
        let arg = &mut argmax[c * d..(c + 1) * d];
        for l in 0..k {
            let r = c * k + l;
            let src = nbr.flat()[r];
            let row = &rw[r * d..(r + 1) * d];
            let f = &fv.data()[src * d..(src + 1) * d];
            for (((p, x), y), b) in pre.iter_mut().zip(row).zip(f).zip(bv.data()) {
                let h = x + y + b;
                *p = if h > 0.0 { h } else { 0.0 };
            }
            if l == 0 {
                best.copy_from_slice(&pre);
            } else {
                for ((m, a), p) in best.iter_mut().zip(arg.iter_mut()).zip(&pre) {
                    if *p > *m {
                        *m = *p;
                        *a = l as u32;
                    }
                }
            }
        }
    }
    let output = Tensor::new([centres, d], out)?;
    let op = GroupMax {
        nbr: nbr.flat().to_vec(),
        k,
        argmax,
    };
    rel.graph()
        .custom(&[*rel, *feat, *weight, *bias], output, Box::new(op))
}

struct GroupMax {
    nbr: Vec<usize>,
    k: usize,
    argmax: Vec<u32>,
}

impl CustomOp for GroupMax {
    fn backward(
        &self,
        grad: &[f64],
        inputs: &[&Tensor],
        output: &Tensor,
        need: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (rel, feat, weight) = (inputs[0], inputs[1], inputs[2]);
        let (e, d) = (weight.shape()[0], weight.shape()[1]);
        let mut drel = need[0].then(|| vec![0.0; rel.numel()]);
        let mut dfeat = need[1].then(|| vec![0.0; feat.numel()]);
        let mut dw = need[2].then(|| vec![0.0; weight.numel()]);
        let mut db = need[3].then(|| vec![0.0; d]);
        let w = weight.data();
        let rv = rel.data();
        for (slot, (&g, &y)) in grad.iter().zip(output.data()).enumerate() {
            // a zero output means every candidate was clipped by the relu
            if y <= 0.0 || g == 0.0 {
                continue;
            }
            let (c, ch) = (slot / d, slot % d);
            let r = c * self.k + self.argmax[slot] as usize;
            if let Some(dr) = drel.as_mut() {
                for i in 0..e {
                    dr[r * e + i] += g * w[i * d + ch];
                }
            }
            if let Some(dw) = dw.as_mut() {
                for i in 0..e {
                    dw[i * d + ch] += g * rv[r * e + i];
                }
            }
            if let Some(df) = dfeat.as_mut() {
                df[self.nbr[r] * d + ch] += g;
            }
            if let Some(db) = db.as_mut() {
                db[ch] += g;
            }
        }
        vec![drel, dfeat, dw, db]
    }
}

/// Vector attention over neighbour sets.
///
/// With `r[j,l] = relu(q[j] − key[nbr(j,l)])`, the weights are the per-channel
/// softmax over `l` of `r[j,l]·W`, and the result is
/// `out[j] = Σ_l a[j,l] ⊙ values[nbr(j,l)]`. Also returns the `(N, k, D)`
/// weights.
pub fn relation_attention<'g>(
    query: &Var<'g>,
    key: &Var<'g>,
    weight: &Var<'g>,
    values: &Var<'g>,
    nbr: &Neighbors,
) -> Result<(Var<'g>, Tensor)> {
    const OP: &str = "relation_attention";
    let (n, h) = dims(query, OP, true)?;
    let (m, hk) = dims(key, OP, true)?;
    let (mv, d) = dims(values, OP, true)?;
    let k = nbr.k();
    if hk != h || mv != m || weight.shape() != [h, d] || nbr.flat().len() != n * k {
        return Err(Error::shape(OP, &query.shape(), &key.shape()));
    }
    if let Some(&bad) = nbr.flat().iter().find(|&&i| i >= m) {
        return Err(Error::Index {
            op: OP,
            index: bad,
            len: m,
        });
    }
    let (qv, kv, wv, vv) = (query.value(), key.value(), weight.value(), values.value());
    let rows = n * k;
    let mut rel = Vec::with_capacity(rows * h);
    for j in 0..n {
        let q = &qv.data()[j * h..(j + 1) * h];
        for &src in nbr.row(j) {
            let kr = &kv.data()[src * h..(src + 1) * h];
            rel.extend(q.iter().zip(kr).map(|(a, b)| {
                let x = a - b;
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }));
        }
    }
    let mut att = matmul(&rel, wv.data(), rows, h, d);
    let mut max = vec![0.0; d];
    let mut sum = vec![0.0; d];
    for block in att.chunks_exact_mut(k * d) {
        max.fill(f64::NEG_INFINITY);
        for lane in block.chunks_exact(d) {
            for (mx, v) in max.iter_mut().zip(lane) {
                *mx = mx.max(*v);
            }
        }
        sum.fill(0.0);
        for lane in block.chunks_exact_mut(d) {
            for ((v, mx), s) in lane.iter_mut().zip(&max).zip(sum.iter_mut()) {
                *v = (*v - mx).exp();
                *s += *v;
            }
        }
        for lane in block.chunks_exact_mut(d) {
            for (v, s) in lane.iter_mut().zip(&sum) {
                *v /= s;
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for j in 0..n {
        let o = &mut out[j * d..(j + 1) * d];
        for (l, &src) in nbr.row(j).iter().enumerate() {
            let a = &att[(j * k + l) * d..(j * k + l + 1) * d];
            let v = &vv.data()[src * d..(src + 1) * d];
            for ((o, a), v) in o.iter_mut().zip(a).zip(v) {
                *o += a * v;
            }
        }
    }
    let weights = Tensor::new([n, k, d], att.clone())?;
    let op = RelationAttention {
        nbr: nbr.flat().to_vec(),
        k,
        rel,
        att,
    };
    let output = Tensor::new([n, d], out)?;
    let var = query
        .graph()
        .custom(&[*query, *key, *weight, *values], output, Box::new(op))?;
    Ok((var, weights))
}

struct RelationAttention {
    nbr: Vec<usize>,
    k: usize,
    rel: Vec<f64>,
    att: Vec<f64>,
}

impl CustomOp for RelationAttention {
    fn backward(
        &self,
        grad: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
        need: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (query, key, weight, values) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (h, d) = (weight.shape()[0], weight.shape()[1]);
        let n = query.shape()[0];
        let k = self.k;
        let rows = n * k;
        let vv = values.data();

        let mut dvalues = need[3].then(|| vec![0.0; values.numel()]);
        let mut dlogit = vec![0.0; rows * d];
        let mut dot = vec![0.0; d];
        for j in 0..n {
            let g = &grad[j * d..(j + 1) * d];
            dot.fill(0.0);
            for l in 0..k {
                let r = j * k + l;
                let src = self.nbr[r];
                let a = &self.att[r * d..(r + 1) * d];
                let v = &vv[src * d..(src + 1) * d];
                let da = &mut dlogit[r * d..(r + 1) * d];
                for ((((x, gv), vv), av), s) in
                    da.iter_mut().zip(g).zip(v).zip(a).zip(dot.iter_mut())
                {
                    *x = gv * vv;
                    *s += av * *x;
                }
                if let Some(dv) = dvalues.as_mut() {
                    for ((t, av), gv) in dv[src * d..(src + 1) * d].iter_mut().zip(a).zip(g) {
                        *t += av * gv;
                    }
                }
            }
            for l in 0..k {
                let r = j * k + l;
                let a = &self.att[r * d..(r + 1) * d];
                for ((x, av), s) in dlogit[r * d..(r + 1) * d].iter_mut().zip(a).zip(&dot) {
                    *x = av * (*x - s);
                }
            }
        }

        let dweight = need[2].then(|| matmul(&transpose(&self.rel, rows, h), &dlogit, h, rows, d));
        let (mut dquery, mut dkey) = (None, None);
        if need[0] || need[1] {
            let mut drel = matmul(&dlogit, &transpose(weight.data(), h, d), rows, d, h);
            for (x, r) in drel.iter_mut().zip(&self.rel) {
                if *r <= 0.0 {
                    *x = 0.0;
                }
            }
            if need[0] {
                let mut dq = vec![0.0; query.numel()];
                for (r, row) in drel.chunks_exact(h).enumerate() {
                    let j = r / k;
                    for (t, x) in dq[j * h..(j + 1) * h].iter_mut().zip(row) {
                        *t += x;
                    }
                }
                dquery = Some(dq);
            }
            if need[1] {
                let mut dk = vec![0.0; key.numel()];
                for (r, row) in drel.chunks_exact(h).enumerate() {
                    let src = self.nbr[r];
                    for (t, x) in dk[src * h..(src + 1) * h].iter_mut().zip(row) {
                        *t -= x;
                    }
                }
                dkey = Some(dk);
            }
        }
        vec![dquery, dkey, dweight, dvalues]
    }
}
