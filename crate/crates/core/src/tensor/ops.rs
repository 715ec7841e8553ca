//! Differentiable primitives over [`Var`].
//!
//! Each op computes its value eagerly, validates finiteness, and registers
//! an analytic backward rule when any input is tracked. Attention kernels
//! register their own ops in [`crate::attention::grad`].

use super::rope::rope_rotate_rows;
use super::{Tensor, Var};
use crate::error::{Error, Result};

pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let value = a.value().matmul(b.value())?;
    Var::from_op("matmul", value, vec![a.clone(), b.clone()], |g, inputs, _| {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = g.matmul(&b.transpose()?)?;
        let gb = a.transpose()?.matmul(g)?;
        Ok(vec![Some(ga), Some(gb)])
    })
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    let value = a.value().add(b.value())?;
    Var::from_op("add", value, vec![a.clone(), b.clone()], |g, _, _| Ok(vec![Some(g.clone()), Some(g.clone())]))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    let value = a.value().sub(b.value())?;
    Var::from_op("sub", value, vec![a.clone(), b.clone()], |g, _, _| Ok(vec![Some(g.clone()), Some(g.scale(-1.0))]))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    let value = a.value().mul(b.value())?;
    Var::from_op("mul", value, vec![a.clone(), b.clone()], |g, inputs, _| {
        Ok(vec![Some(g.mul(inputs[1])?), Some(g.mul(inputs[0])?)])
    })
}

pub fn scale(a: &Var, s: f64) -> Result<Var> {
    Var::from_op("scale", a.value().scale(s), vec![a.clone()], move |g, _, _| Ok(vec![Some(g.scale(s))]))
}

pub fn sum(a: &Var) -> Result<Var> {
    let value = Tensor::scalar(a.value().sum());
    Var::from_op("sum", value, vec![a.clone()], |g, inputs, _| Ok(vec![Some(Tensor::full(inputs[0].shape(), g.item()))]))
}

pub fn mean(a: &Var) -> Result<Var> {
    let n = a.value().numel() as f64;
    let value = Tensor::scalar(a.value().sum() / n);
    Var::from_op("mean", value, vec![a.clone()], move |g, inputs, _| {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g.item() / n))])
    })
}

pub fn sigmoid(a: &Var) -> Result<Var> {
    let value = a.value().map(sigmoid_f64);
    Var::from_op("sigmoid", value, vec![a.clone()], |g, _, out| {
        let local = out.map(|s| s * (1.0 - s));
        Ok(vec![Some(g.mul(&local)?)])
    })
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · sigmoid(x)`.
pub fn silu(a: &Var) -> Result<Var> {
    let value = a.value().map(|x| x * sigmoid_f64(x));
    Var::from_op("silu", value, vec![a.clone()], |g, inputs, _| {
        let local = inputs[0].map(|x| {
            let s = sigmoid_f64(x);
            s * (1.0 + x * (1.0 - s))
        });
        Ok(vec![Some(g.mul(&local)?)])
    })
}

/// Root-mean-square normalisation of each row, then a per-channel gain.
pub fn rmsnorm(x: &Var, gain: &Var, eps: f64) -> Result<Var> {
    let n = x.value().row_len();
    if gain.shape() != [n] {
        return Err(Error::shape("rmsnorm", format!("gain {:?} for rows of {n}", gain.shape())));
    }
    let g = gain.value().data();
    let mut out = x.value().clone();
    for row in out.data_mut().chunks_mut(n) {
        let inv = inv_rms(row, eps);
        for (v, gi) in row.iter_mut().zip(g) {
            *v *= inv * gi;
        }
    }
    Var::from_op("rmsnorm", out, vec![x.clone(), gain.clone()], move |dy, inputs, _| {
        let (x, gain) = (inputs[0], inputs[1].data());
        let mut dx = Tensor::zeros(x.shape());
        let mut dgain = vec![0.0; n];
        for ((xr, dyr), dxr) in x.rows().zip(dy.rows()).zip(dx.data_mut().chunks_mut(n)) {
            let inv = inv_rms(xr, eps);
            let mut dot = 0.0;
            for j in 0..n {
                let xhat = xr[j] * inv;
                dgain[j] += dyr[j] * xhat;
                dot += dyr[j] * gain[j] * xhat;
            }
            let mean_dot = dot / n as f64;
            for j in 0..n {
                let xhat = xr[j] * inv;
                dxr[j] = inv * (dyr[j] * gain[j] - xhat * mean_dot);
            }
        }
        Ok(vec![Some(dx), Some(Tensor::new(&[n], dgain)?)])
    })
}

fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Row lookup into a `[vocab × hidden]` table.
pub fn embedding(table: &Var, ids: &[usize]) -> Result<Var> {
    let [vocab, hidden] = match table.shape()[..] {
        [v, h] => [v, h],
        _ => return Err(Error::shape("embedding", format!("table {:?}", table.shape()))),
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::invalid("embedding", format!("token {bad} outside vocabulary of {vocab}")));
    }
    let src = table.value().data();
    let mut data = Vec::with_capacity(ids.len() * hidden);
    for &i in ids {
        data.extend_from_slice(&src[i * hidden..(i + 1) * hidden]);
    }
    let ids = ids.to_vec();
    Var::from_op("embedding", Tensor::new(&[ids.len(), hidden], data)?, vec![table.clone()], move |g, inputs, _| {
        let mut dt = Tensor::zeros(inputs[0].shape());
        let dst = dt.data_mut();
        for (row, &i) in g.rows().zip(&ids) {
            for (d, v) in dst[i * hidden..(i + 1) * hidden].iter_mut().zip(row) {
                *d += v;
            }
        }
        Ok(vec![Some(dt)])
    })
}

pub fn reshape(a: &Var, shape: &[usize]) -> Result<Var> {
    let value = a.value().clone().reshape(shape)?;
    Var::from_op("reshape", value, vec![a.clone()], |g, inputs, _| {
        Ok(vec![Some(g.clone().reshape(inputs[0].shape())?)])
    })
}

/// Rotary embedding of a `[n × h × d]` tensor at the given row positions.
pub fn rope(x: &Var, positions: &[usize], base: f64) -> Result<Var> {
    let value = rope_rotate_rows(x.value(), positions, base, 1.0)?;
    let positions = positions.to_vec();
    Var::from_op("rope", value, vec![x.clone()], move |g, _, _| {
        Ok(vec![Some(rope_rotate_rows(g, &positions, base, -1.0)?)])
    })
}

/// Scales each head vector of `o: [n × h × d]` by the scalar `gate[n, h]`.
pub fn head_gate(o: &Var, gate: &Var) -> Result<Var> {
    let [n, h, d] = match o.shape()[..] {
        [n, h, d] => [n, h, d],
        _ => return Err(Error::shape("head_gate", format!("expected [n, h, d], got {:?}", o.shape()))),
    };
    if gate.shape() != [n, h] {
        return Err(Error::shape("head_gate", format!("gate {:?} for output {:?}", gate.shape(), o.shape())));
    }
    let mut value = o.value().clone();
    for (head, &s) in value.data_mut().chunks_mut(d).zip(gate.value().data()) {
        head.iter_mut().for_each(|v| *v *= s);
    }
    Var::from_op("head_gate", value, vec![o.clone(), gate.clone()], move |g, inputs, _| {
        let (o, gate) = (inputs[0], inputs[1]);
        let mut d_o = g.clone();
        for (head, &s) in d_o.data_mut().chunks_mut(d).zip(gate.data()) {
            head.iter_mut().for_each(|v| *v *= s);
        }
        let d_gate: Vec<f64> = g.data().chunks(d).zip(o.data().chunks(d)).map(|(gh, oh)| dot(gh, oh)).collect();
        Ok(vec![Some(d_o), Some(Tensor::new(&[n, h], d_gate)?)])
    })
}

/// Adds `bias[m]` to every row of `x[n × m]`.
pub fn add_row_bias(x: &Var, bias: &Var) -> Result<Var> {
    let m = x.value().row_len();
    if bias.shape() != [m] {
        return Err(Error::shape("add_row_bias", format!("bias {:?} for rows of {m}", bias.shape())));
    }
    let mut value = x.value().clone();
    for row in value.data_mut().chunks_mut(m) {
        for (v, b) in row.iter_mut().zip(bias.value().data()) {
            *v += b;
        }
    }
    Var::from_op("add_row_bias", value, vec![x.clone(), bias.clone()], move |g, _, _| {
        let mut db = vec![0.0; m];
        for row in g.rows() {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        Ok(vec![Some(g.clone()), Some(Tensor::new(&[m], db)?)])
    })
}

/// Per sequence `b`, stacks the constant rows `prefix[b]` in front of that
/// sequence's `rows_per_seq` rows of `new`. Gradients flow to `new` only.
///
/// All prefixes must hold the same number of rows.
pub fn prepend_rows(prefix: &[Tensor], new: &Var, rows_per_seq: usize) -> Result<Var> {
    let batch = prefix.len();
    let inner: Vec<usize> = new.shape()[1..].to_vec();
    let width: usize = inner.iter().product();
    if new.shape()[0] != batch * rows_per_seq {
        return Err(Error::shape("prepend_rows", format!("{:?} for batch {batch} × {rows_per_seq}", new.shape())));
    }
    let past_rows = prefix.first().map_or(0, |p| p.numel() / width.max(1));
    if prefix.iter().any(|p| p.numel() != past_rows * width) {
        return Err(Error::shape("prepend_rows", "prefixes differ in length"));
    }
    if past_rows == 0 {
        return Ok(new.clone());
    }
    let total = past_rows + rows_per_seq;
    let src = new.value().data();
    let mut data = Vec::with_capacity(batch * total * width);
    for (b, p) in prefix.iter().enumerate() {
        data.extend_from_slice(p.data());
        data.extend_from_slice(&src[b * rows_per_seq * width..(b + 1) * rows_per_seq * width]);
    }
    let mut shape = vec![batch * total];
    shape.extend_from_slice(&inner);
    Var::from_op("prepend_rows", Tensor::new(&shape, data)?, vec![new.clone()], move |g, inputs, _| {
        let mut out = Vec::with_capacity(inputs[0].numel());
        for b in 0..batch {
            let start = (b * total + past_rows) * width;
            out.extend_from_slice(&g.data()[start..start + rows_per_seq * width]);
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), out)?)])
    })
}

/// Mean next-token cross-entropy over rows whose target is `Some`.
pub fn cross_entropy(logits: &Var, targets: &[Option<usize>]) -> Result<Var> {
    let [n, vocab] = match logits.shape()[..] {
        [n, v] => [n, v],
        _ => return Err(Error::shape("cross_entropy", format!("logits {:?}", logits.shape()))),
    };
    if targets.len() != n {
        return Err(Error::shape("cross_entropy", format!("{} targets for {n} rows", targets.len())));
    }
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::invalid("cross_entropy", "no target rows"));
    }
    if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::invalid("cross_entropy", format!("target {bad} outside vocabulary of {vocab}")));
    }
    let probs = logits.value().softmax_rows(None)?;
    let mut loss = 0.0;
    for (row, t) in logits.value().rows().zip(targets) {
        if let Some(t) = *t {
            loss += log_sum_exp(row) - row[t];
        }
    }
    let targets = targets.to_vec();
    let scale = 1.0 / count as f64;
    Var::from_op("cross_entropy", Tensor::scalar(loss * scale), vec![logits.clone()], move |g, _, _| {
        let mut d = probs.clone();
        let gs = g.item() * scale;
        for (row, t) in d.data_mut().chunks_mut(vocab).zip(&targets) {
            match *t {
                Some(t) => {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gs);
                }
                None => row.fill(0.0),
            }
        }
        Ok(vec![Some(d)])
    })
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn rmsnorm_unit_rows() {
        let x = Var::constant(Tensor::from_rows(&[&[1.0, 1.0, 1.0]]));
        let g = Var::constant(Tensor::ones(&[3]));
        assert_eq!(rmsnorm(&x, &g, 0.0).unwrap().value().data(), &[1.0, 1.0, 1.0]);

        let mut rng = Rng::new(5);
        let x = Var::constant(Tensor::randn(&[4, 16], 3.0, &mut rng));
        let g = Var::constant(Tensor::ones(&[16]));
        let y = rmsnorm(&x, &g, 1e-24).unwrap();
        for row in y.value().rows() {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Var::constant(Tensor::zeros(&[2, 4]));
        let l = cross_entropy(&logits, &[Some(1), None]).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&logits, &[None, None]).is_err());
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let t = Var::param(Tensor::zeros(&[3, 2]));
        assert!(embedding(&t, &[3]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = Var::constant(Tensor::from_rows(&[&[f64::MAX]]));
        assert!(matches!(scale(&a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn prepend_rows_layout() {
        let new = Var::param(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let prefix = vec![Tensor::new(&[1, 1], vec![10.0]).unwrap(), Tensor::new(&[1, 1], vec![20.0]).unwrap()];
        let out = prepend_rows(&prefix, &new, 2).unwrap();
        assert_eq!(out.value().data(), &[10.0, 1.0, 2.0, 20.0, 3.0, 4.0]);
    }
}
