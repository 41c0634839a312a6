//! Scaled dot-product attention, batched over a leading axis.
//!
//! Shapes: `q [B, Lq, D]`, `k [B, Lk, D]`, `v [B, Lk, Dv]` → `[B, Lq, Dv]`.
//! Rank-2 inputs are treated as `B = 1`.

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Dims {
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
}

fn split(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [l, d] => Ok((1, *l, *d)),
        [b, l, d] => Ok((*b, *l, *d)),
        s => Err(Error::shape("attention", format!("expected rank 2 or 3, got {s:?}"))),
    }
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Dims> {
    let (bq, lq, d) = split(q)?;
    let (bk, lk, dk) = split(k)?;
    let (bv, lv, dv) = split(v)?;
    if dk != d {
        return Err(Error::shape("attention", format!("query dim D={d} but key dim D={dk}")));
    }
    if bq != bk || bk != bv {
        return Err(Error::shape("attention", format!("batch sizes {bq}/{bk}/{bv} differ")));
    }
    if lv != lk {
        return Err(Error::shape("attention", format!("{lk} keys but {lv} values")));
    }
    Ok(Dims { b: bq, lq, lk, d, dv })
}

fn out_shape(q: &Tensor, dv: usize) -> Vec<usize> {
    let mut s = q.shape().to_vec();
    *s.last_mut().unwrap() = dv;
    s
}

fn softmax_rows(scores: &mut [f32], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Returns the attention output and the softmax probabilities `[B, Lq, Lk]`.
pub fn attention_with_probs(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let dm = dims(q, k, v)?;
    let scale = 1.0 / (dm.d as f32).sqrt();
    let mut probs = vec![0.0f32; dm.b * dm.lq * dm.lk];
    let mut out = vec![0.0f32; dm.b * dm.lq * dm.dv];
    for b in 0..dm.b {
        let qb = &q.data()[b * dm.lq * dm.d..(b + 1) * dm.lq * dm.d];
        let kb = &k.data()[b * dm.lk * dm.d..(b + 1) * dm.lk * dm.d];
        let vb = &v.data()[b * dm.lk * dm.dv..(b + 1) * dm.lk * dm.dv];
        let pb = &mut probs[b * dm.lq * dm.lk..(b + 1) * dm.lq * dm.lk];
        gemm(dm.lq, dm.d, dm.lk, scale, qb, false, kb, true, 0.0, pb);
        softmax_rows(pb, dm.lk);
        let ob = &mut out[b * dm.lq * dm.dv..(b + 1) * dm.lq * dm.dv];
        gemm(dm.lq, dm.lk, dm.dv, 1.0, pb, false, vb, false, 0.0, ob);
    }
    Ok((Tensor::from_parts(out_shape(q, dm.dv), out), probs))
}

/// `softmax(q k^T / sqrt(D)) v`, row-wise softmax.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    attention_with_probs(q, k, v).map(|(o, _)| o)
}

pub struct AttentionGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f32],
    grad_out: &Tensor,
) -> Result<AttentionGrads> {
    let dm = dims(q, k, v)?;
    grad_out.expect_shape("attention_backward", &out_shape(q, dm.dv))?;
    let scale = 1.0 / (dm.d as f32).sqrt();
    let mut dq = vec![0.0f32; q.numel()];
    let mut dk = vec![0.0f32; k.numel()];
    let mut dv = vec![0.0f32; v.numel()];
    let mut dp = vec![0.0f32; dm.lq * dm.lk];
    for b in 0..dm.b {
        let qb = &q.data()[b * dm.lq * dm.d..(b + 1) * dm.lq * dm.d];
        let kb = &k.data()[b * dm.lk * dm.d..(b + 1) * dm.lk * dm.d];
        let vb = &v.data()[b * dm.lk * dm.dv..(b + 1) * dm.lk * dm.dv];
        let pb = &probs[b * dm.lq * dm.lk..(b + 1) * dm.lq * dm.lk];
        let gb = &grad_out.data()[b * dm.lq * dm.dv..(b + 1) * dm.lq * dm.dv];
        // dV = P^T dO
        gemm(
            dm.lk,
            dm.lq,
            dm.dv,
            1.0,
            pb,
            true,
            gb,
            false,
            0.0,
            &mut dv[b * dm.lk * dm.dv..(b + 1) * dm.lk * dm.dv],
        );
        // dP = dO V^T
        gemm(dm.lq, dm.dv, dm.lk, 1.0, gb, false, vb, true, 0.0, &mut dp);
        // dS = P * (dP - rowsum(P * dP))
        for (prow, drow) in pb.chunks(dm.lk).zip(dp.chunks_mut(dm.lk)) {
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(&p, &d)| (p * d) as f64).sum();
            let dot = dot as f32;
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - dot);
            }
        }
        gemm(
            dm.lq,
            dm.lk,
            dm.d,
            scale,
            &dp,
            false,
            kb,
            false,
            0.0,
            &mut dq[b * dm.lq * dm.d..(b + 1) * dm.lq * dm.d],
        );
        gemm(
            dm.lk,
            dm.lq,
            dm.d,
            scale,
            &dp,
            true,
            qb,
            false,
            0.0,
            &mut dk[b * dm.lk * dm.d..(b + 1) * dm.lk * dm.d],
        );
    }
    Ok(AttentionGrads {
        q: Tensor::from_parts(q.shape().to_vec(), dq),
        k: Tensor::from_parts(k.shape().to_vec(), dk),
        v: Tensor::from_parts(v.shape().to_vec(), dv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_broadcasts_value() {
        let q = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.3 - 1.0);
        let k = Tensor::new(&[1, 3], vec![0.5, -0.2, 0.1]).unwrap();
        let v = Tensor::new(&[1, 2], vec![7.0, -3.0]).unwrap();
        let o = attention(&q, &k, &v).unwrap();
        for row in o.data().chunks(2) {
            assert_eq!(row, &[7.0, -3.0]);
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(&[3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap();
        let v = Tensor::new(&[3, 1], vec![1.0, 2.0, 6.0]).unwrap();
        let o = attention(&q, &k, &v).unwrap();
        assert!((o.data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn dominant_key_selects_its_value() {
        // direct softmax evaluation of logits [100/sqrt2 * 1, 0, 0]
        let q = Tensor::new(&[1, 2], vec![100.0, 0.0]).unwrap();
        let k = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let v = Tensor::new(&[3, 1], vec![4.0, -1.0, 9.0]).unwrap();
        let o = attention(&q, &k, &v).unwrap();
        let l0 = 100.0f64 / 2f64.sqrt();
        let z = 1.0 + 2.0 * (-l0).exp();
        let want = (4.0 + (-1.0 + 9.0) * (-l0).exp()) / z;
        assert!((o.data()[0] as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn key_dim_mismatch_is_error() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[2, 4]);
        let v = Tensor::zeros(&[2, 4]);
        assert!(attention(&q, &k, &v).is_err());
    }
}
