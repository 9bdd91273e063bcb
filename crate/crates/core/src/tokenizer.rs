//! Frame feature maps to token sequences, plus 2D sinusoidal positions.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// A `c×h×w` feature map for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature(Tensor);

impl FrameFeature {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Contract(format!(
                "frame feature must be c×h×w, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Splits an `[N, c, h, w]` stack into frames.
    pub fn unstack(frames: &Tensor) -> Result<Vec<FrameFeature>> {
        if frames.rank() != 4 {
            return Err(Error::Contract(format!(
                "frame stack must be N×c×h×w, got {:?}",
                frames.shape()
            )));
        }
        let s = frames.shape();
        let per = s[1] * s[2] * s[3];
        frames
            .data()
            .chunks(per)
            .map(|c| FrameFeature::new(Tensor::new(&s[1..], c.to_vec())?))
            .collect()
    }

    pub fn stack(frames: &[FrameFeature]) -> Result<Tensor> {
        let first = frames.first().ok_or(Error::EmptyInput("stack"))?;
        let mut shape = vec![frames.len()];
        shape.extend_from_slice(first.0.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for f in frames {
            if f.0.shape() != first.0.shape() {
                return Err(Error::dim("stack", first.0.shape(), f.0.shape()));
            }
            data.extend_from_slice(f.0.data());
        }
        Tensor::new(&shape, data)
    }
}

/// Tokens of one frame together with their positional features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFrame {
    pub tokens: Tensor,
    pub positions: Tensor,
}

impl TokenFrame {
    pub fn new(tokens: Tensor, positions: Tensor) -> Result<Self> {
        if !tokens.is_matrix() || tokens.shape() != positions.shape() {
            return Err(Error::dim("TokenFrame", tokens.shape(), positions.shape()));
        }
        Ok(Self { tokens, positions })
    }

    pub fn from_frame(frame: &FrameFeature, proj: Option<&Tensor>) -> Result<Self> {
        let tokens = tokenize(frame, proj)?;
        let positions = positional_encoding(frame.height(), frame.width(), tokens.cols())?;
        Self::new(tokens, positions)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Token plus positional features, the input every aggregation stage sees.
    pub fn summed(&self) -> Tensor {
        self.tokens.add(&self.positions).expect("shapes checked on construction")
    }

    /// Applies the same row permutation to tokens and positions.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.tokens.permute_rows(perm)?,
            self.positions.permute_rows(perm)?,
        )
    }
}

/// Flattens a `c×h×w` map into `M = h·w` tokens, token `y·w + x` holding the
/// channel vector at `(y, x)`, optionally right-multiplied by `proj[c×D]`.
pub fn tokenize(frame: &FrameFeature, proj: Option<&Tensor>) -> Result<Tensor> {
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    let f = frame.tensor().data();
    let raw = Tensor::from_fn(&[h * w, c], |i| f[i[1] * h * w + i[0]]);
    match proj {
        None => Ok(raw),
        Some(p) => {
            if !p.is_matrix() || p.rows() != c {
                return Err(Error::dim("tokenize", &[h * w, c], p.shape()));
            }
            matmul(&raw, p)
        }
    }
}

/// Inverse of [`tokenize`] without projection.
pub fn detokenize(tokens: &Tensor, h: usize, w: usize) -> Result<FrameFeature> {
    if !tokens.is_matrix() || tokens.rows() != h * w {
        return Err(Error::dim("detokenize", tokens.shape(), &[h, w]));
    }
    let c = tokens.cols();
    FrameFeature::new(Tensor::from_fn(&[c, h, w], |i| {
        tokens.at(i[1] * w + i[2], i[0])
    }))
}

pub const POSITION_TEMPERATURE: f64 = 10000.0;

/// Sinusoidal 2D positions, `[h·w × D]`.
///
/// The first `D/2` columns encode the row index `y` and the last `D/2` the
/// column index `x`. Within each half, column `j` uses frequency
/// `T^(2⌊j/2⌋/(D/2))`, with `sin` at even `j` and `cos` at odd `j`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::config("d_model", format!("{d} is not divisible by 4")));
    }
    if h == 0 || w == 0 {
        return Err(Error::config("frame", "height and width must be positive"));
    }
    let half = d / 2;
    let enc = |pos: usize, j: usize| {
        let freq = POSITION_TEMPERATURE.powf((2 * (j / 2)) as f64 / half as f64);
        let a = pos as f64 / freq;
        if j.is_multiple_of(2) {
            a.sin()
        } else {
            a.cos()
        }
    };
    Ok(Tensor::from_fn(&[h * w, d], |i| {
        let (y, x) = (i[0] / w, i[0] % w);
        let j = i[1];
        if j < half {
            enc(y, j)
        } else {
            enc(x, j - half)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    #[test]
    fn tokenize_small_example() {
        let f = FrameFeature::new(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let t = tokenize(&f, None).unwrap();
        assert_eq!(t, Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap());
    }

    #[test]
    fn single_pixel_is_channel_vector() {
        let f = FrameFeature::new(Tensor::new(&[3, 1, 1], vec![7.0, 8.0, 9.0]).unwrap()).unwrap();
        assert_eq!(tokenize(&f, None).unwrap().data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn identity_projection_matches_reshape() {
        let f = FrameFeature::new(SeedStream::new(1).uniform("f", &[4, 3, 3], -1.0, 1.0)).unwrap();
        let eye = Tensor::eye(4);
        assert_eq!(tokenize(&f, Some(&eye)).unwrap(), tokenize(&f, None).unwrap());
        assert!(tokenize(&f, Some(&Tensor::eye(3))).is_err());
    }

    #[test]
    fn origin_row_is_sin_zero_cos_one() {
        let p = positional_encoding(3, 3, 8).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rejects_dimension_not_divisible_by_four() {
        assert!(matches!(positional_encoding(2, 2, 6), Err(Error::Config { .. })));
    }

    #[test]
    fn positions_are_distinct_on_grids_up_to_16() {
        for d in [8, 16] {
            for h in 1..=16 {
                for w in 1..=16 {
                    let p = positional_encoding(h, w, d).unwrap();
                    let m = h * w;
                    for a in 0..m {
                        for b in a + 1..m {
                            let dist: f64 = p
                                .row(a)
                                .iter()
                                .zip(p.row(b))
                                .map(|(x, y)| (x - y).abs())
                                .sum();
                            assert!(dist > 1e-9, "collision h={h} w={w} d={d} rows {a},{b}");
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let f = FrameFeature::new(SeedStream::new(seed).uniform("f", &[c, h, w], -1.0, 1.0)).unwrap();
            let back = detokenize(&tokenize(&f, None).unwrap(), h, w).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
