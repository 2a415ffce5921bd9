//! Token views of convolution blocks.
//!
//! A `(out, in, 3, 3)` tensor is a sequence of `out·in` tokens of width 9, token
//! `o·in + i` holding filter `[o][i]` row-major. The large block contributes
//! `C²` tokens per convolution (conv1 first); the small block `C²/2` per convolution.

use crate::error::{ensure, KtError, Result};
use crate::host::{ConvTensor4, LargeBlockParams, SmallBlockParams};
use crate::nn::Tensor;

pub const TOKEN_WIDTH: usize = 9;

/// `rows × 9` matrix of kernel tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    values: Vec<f32>,
}

impl TokenMatrix {
    pub fn new(rows: usize, values: Vec<f32>) -> Result<Self> {
        ensure!(
            values.len() == rows * TOKEN_WIDTH,
            KtError::shape("TokenMatrix", &[rows, TOKEN_WIDTH], &[values.len()])
        );
        ensure!(values.iter().all(|v| v.is_finite()), KtError::NonFinite("token values".into()));
        Ok(Self { rows, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        TOKEN_WIDTH
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * TOKEN_WIDTH..(t + 1) * TOKEN_WIDTH]
    }
}

/// `2C² × 9` tokens: conv1 filters, then conv2 filters.
pub fn tokens_from_large(p: &LargeBlockParams) -> TokenMatrix {
    let c = p.channels();
    TokenMatrix {
        rows: 2 * c * c,
        values: p.flat(),
    }
}

pub fn large_from_tokens(t: &TokenMatrix) -> Result<LargeBlockParams> {
    let c = (t.rows / 2).isqrt();
    ensure!(
        2 * c * c == t.rows,
        KtError::Invalid(format!("{} tokens is not 2·C² for any C", t.rows))
    );
    LargeBlockParams::from_flat(c, &t.values)
}

/// Inverse of [`tokens_from_small`]: the first `C²/2` rows are conv1 `(C/2, C, 3, 3)`,
/// the rest conv2 `(C, C/2, 3, 3)`.
pub fn small_from_tokens(t: &TokenMatrix) -> Result<SmallBlockParams> {
    let c = t.rows.isqrt();
    ensure!(
        c * c == t.rows,
        KtError::Invalid(format!("{} tokens is not C² for any C", t.rows))
    );
    ensure!(
        c % 2 == 0 && c >= 2,
        KtError::Invalid(format!("small block needs an even channel count, got C={c}"))
    );
    let half = t.rows / 2 * TOKEN_WIDTH;
    SmallBlockParams::new(
        ConvTensor4::new(Tensor::new(&[c / 2, c, 3, 3], t.values[..half].to_vec())?)?,
        ConvTensor4::new(Tensor::new(&[c, c / 2, 3, 3], t.values[half..].to_vec())?)?,
    )
}

pub fn tokens_from_small(p: &SmallBlockParams) -> TokenMatrix {
    let c = p.channels();
    let mut values = p.conv1.data().to_vec();
    values.extend_from_slice(p.conv2.data());
    TokenMatrix { rows: c * c, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::{TargetBlockParams, TargetVariant};
    use crate::rng::stream_rng;

    fn large(c: usize) -> LargeBlockParams {
        let flat: Vec<f32> = (0..18 * c * c).map(|i| i as f32 * 0.5 - 3.0).collect();
        LargeBlockParams::from_flat(c, &flat).unwrap()
    }

    #[test]
    fn large_tokens_have_2c2_rows_in_filter_order() {
        let p = large(6);
        let t = tokens_from_large(&p);
        assert_eq!((t.rows(), t.cols()), (72, 9));
        assert_eq!(t.row(0), &p.conv1.data()[..9]);
        // token 7 is conv1[1][1]
        assert_eq!(t.row(7), &p.conv1.data()[(6 + 1) * 9..(6 + 2) * 9]);
        // token 36 is conv2[0][0]
        assert_eq!(t.row(36), &p.conv2.data()[..9]);
        assert_eq!(large_from_tokens(&t).unwrap(), p);
    }

    #[test]
    fn small_tokens_round_trip() {
        let s = match TargetBlockParams::random_init(TargetVariant::SmallConv, 6, &mut stream_rng(0, &[])).unwrap() {
            TargetBlockParams::Small(s) => s,
            _ => unreachable!(),
        };
        let t = tokens_from_small(&s);
        assert_eq!(t.rows(), 36);
        let back = small_from_tokens(&t).unwrap();
        assert_eq!(back.conv1.tensor().shape(), &[3, 6, 3, 3]);
        assert_eq!(back.conv2.tensor().shape(), &[6, 3, 3, 3]);
        assert_eq!(back, s);
        assert_eq!(tokens_from_small(&back), t);
    }

    #[test]
    fn odd_or_non_square_token_counts_are_rejected() {
        assert!(small_from_tokens(&TokenMatrix::new(25, vec![0.0; 225]).unwrap()).is_err());
        assert!(small_from_tokens(&TokenMatrix::new(30, vec![0.0; 270]).unwrap()).is_err());
        assert!(TokenMatrix::new(2, vec![0.0; 17]).is_err());
    }
}
