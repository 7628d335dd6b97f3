//! Softmax-free attention over binary queries, keys and values.

use crate::error::{shape_err, Error, Result};
use crate::tensor::ops::{matmul, scale, transpose_last2};
use crate::tensor::{Scalar, Tape, Tensor, Var};

fn check_qkv(shapes: [&[usize]; 3]) -> Result<()> {
    let [q, k, v] = shapes;
    if q.len() != 5 || q != k || q != v {
        return shape_err(format!(
            "attention wants equal [T, B, heads, N, d] inputs, got {q:?} {k:?} {v:?}"
        ));
    }
    Ok(())
}

/// `q (k^T v) * scale` per timestep, batch and head. Inputs are
/// `[T, B, heads, N, d]`; with `checked` set, non-binary inputs are rejected.
pub fn spiking_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    attn_scale: f64,
    checked: bool,
) -> Result<Tensor<S>> {
    check_qkv([q.shape(), k.shape(), v.shape()])?;
    if checked {
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            if !t.is_binary() {
                return Err(Error::NotBinary(format!("attention input {name}")));
            }
        }
    }
    let kv = matmul(&transpose_last2(k)?, v)?;
    Ok(scale(&matmul(q, &kv)?, attn_scale))
}

/// Recorded version of [`spiking_attention`].
pub fn spiking_attention_op<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var, attn_scale: f64) -> Result<Var> {
    check_qkv([tape.shape(q), tape.shape(k), tape.shape(v)])?;
    let kt = tape.transpose_last2(k)?;
    let kv = tape.matmul(kt, v)?;
    let out = tape.matmul(q, kv)?;
    Ok(tape.scale(out, attn_scale))
}

/// `[T, B, C, H, W]` to `[T, B, heads, H*W, C/heads]`.
pub fn to_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    transpose_last2(&x.reshape(&[s[0], s[1], heads, s[2] / heads, s[3] * s[4]])?)
}

/// Inverse of [`to_heads`].
pub fn from_heads<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    transpose_last2(x)?.reshape(&[s[0], s[1], s[2] * s[4], h, w])
}

pub fn to_heads_op<S: Scalar>(tape: &mut Tape<S>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads, s[3] * s[4]])?;
    tape.transpose_last2(r)
}

pub fn from_heads_op<S: Scalar>(tape: &mut Tape<S>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.transpose_last2(x)?;
    tape.reshape(t, &[s[0], s[1], s[2] * s[4], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_query_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = [2, 1, 2, 5, 3];
        let out = spiking_attention(
            &Tensor::zeros(&shape),
            &binary(&shape, &mut rng),
            &binary(&shape, &mut rng),
            0.125,
            true,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_case() {
        let one = Tensor::<f32>::ones(&[1, 1, 1, 1, 1]);
        let out = spiking_attention(&one, &one, &one, 1.0, true).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn product_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = [2, 2, 2, 6, 4];
        let (q, k, v) = (
            binary(&shape, &mut rng),
            binary(&shape, &mut rng),
            binary(&shape, &mut rng),
        );
        let right = spiking_attention(&q, &k, &v, 0.25, true).unwrap();
        // (q k^T) v computed independently with plain loops.
        let (n, d) = (6, 4);
        for bh in 0..8 {
            let base = bh * n * d;
            for i in 0..n {
                for m in 0..d {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        let qk: f64 = (0..d)
                            .map(|c| (q.data()[base + i * d + c] * k.data()[base + j * d + c]) as f64)
                            .sum();
                        acc += qk * v.data()[base + j * d + m] as f64;
                    }
                    let got = right.data()[base + i * d + m] as f64;
                    assert!((got - 0.25 * acc).abs() <= 1e-5 * (1.0 + acc.abs()));
                }
            }
        }
    }

    #[test]
    fn non_binary_rejected_when_checked() {
        let half = Tensor::<f32>::full(&[1, 1, 1, 2, 2], 0.5);
        let one = Tensor::<f32>::ones(&[1, 1, 1, 2, 2]);
        assert!(matches!(
            spiking_attention(&half, &one, &one, 1.0, true),
            Err(Error::NotBinary(_))
        ));
        assert!(spiking_attention(&half, &one, &one, 1.0, false).is_ok());
    }

    #[test]
    fn head_split_round_trips() {
        let x = Tensor::<f32>::from_fn(&[2, 1, 4, 2, 3], |i| i as f32);
        let h = to_heads(&x, 2).unwrap();
        assert_eq!(h.shape(), &[2, 1, 2, 6, 2]);
        // Channel 1 of head 0 at token 0 sits at [.., 0, 0, 1].
        assert_eq!(h.get(&[0, 0, 0, 0, 1]), x.get(&[0, 0, 1, 0, 0]));
        assert_eq!(from_heads(&h, 2, 3).unwrap(), x);
    }
}
