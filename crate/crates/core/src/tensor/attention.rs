use super::tape::{Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Projection weights of one multi-head self-attention block.
/// Each `w*` is `[D, D]` (input-major, as in [`Tape::linear`]), each `b*` is `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct MhsaWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Sinusoidal position table `[T, D]`:
/// `pe[t, 2i] = sin(t / 10000^(2i/D))`, `pe[t, 2i+1] = cos(t / 10000^(2i/D))`.
pub fn positional_encoding<F: Real>(len: usize, dim: usize) -> Result<Tensor<F>> {
    if len == 0 || dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs T >= 1 and even D >= 2, got T={len}, D={dim}"
        )));
    }
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = t as f64 * freq;
            data.push(F::lit(angle.sin()));
            data.push(F::lit(angle.cos()));
        }
    }
    Tensor::new(vec![len, dim], data)
}

impl<F: Real> Tape<F> {
    /// Multi-head scaled dot-product self-attention on `x[B, T, D]`.
    pub fn mhsa(&mut self, x: Var, heads: usize, w: &MhsaWeights) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("mhsa expects [B, T, D], got {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let q = self.linear(x, w.wq, Some(w.bq))?;
        let k = self.linear(x, w.wk, Some(w.bk))?;
        let v = self.linear(x, w.wv, Some(w.bv))?;
        let [q, k, v] = [q, k, v].map(|p| self.split_heads(p, b, t, heads, dh));
        let (q, k, v) = (q?, k?, v?);
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, F::lit(1.0 / (dh as f64).sqrt()));
        let attn = self.softmax(scores);
        let ctx = self.bmm(attn, v, false)?;
        let ctx = self.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[b, t, d])?;
        self.linear(ctx, w.wo, Some(w.bo))
    }

    fn split_heads(&mut self, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
        let x = self.reshape(x, &[b, t, heads, dh])?;
        let x = self.permute(x, &[0, 2, 1, 3])?;
        self.reshape(x, &[b * heads, t, dh])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let pe = positional_encoding::<f64>(5, 8).unwrap();
        assert_eq!(pe.shape(), &[5, 8]);
        assert_eq!(&pe.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(positional_encoding::<f32>(5, 7).is_err());
    }

    #[test]
    fn pair_dot_product_depends_only_on_offset() {
        // sin(a)sin(b) + cos(a)cos(b) = cos(a - b) per frequency pair
        let pe = positional_encoding::<f64>(64, 16).unwrap();
        let dot = |i: usize, j: usize| -> f64 { (0..16).map(|c| pe.at(&[i, c]) * pe.at(&[j, c])).sum() };
        for off in [1, 3, 10] {
            let base = dot(0, off);
            for s in [5, 17, 40] {
                assert!((dot(s, s + off) - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(Tensor::zeros(&[1, 2, 6]));
        let z = tape.constant(Tensor::zeros(&[6, 6]));
        let zb = tape.constant(Tensor::zeros(&[6]));
        let w = MhsaWeights {
            wq: z,
            bq: zb,
            wk: z,
            bk: zb,
            wv: z,
            bv: zb,
            wo: z,
            bo: zb,
        };
        assert!(matches!(tape.mhsa(x, 4, &w), Err(Error::Config(_))));
    }
}
