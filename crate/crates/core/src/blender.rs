//! Adaptive blending of global and local features.
//!
//! `Y = W_α · [G; L]` gives two logits per entry. A softmax across the pair
//! yields `α_GF`, `α_LF` with `α_GF + α_LF = 1`, and the blended feature is
//! `B = α_GF ⊙ G + α_LF ⊙ L`, evaluated as `L + α_GF ⊙ (G − L)`.

use crate::error::{Error, Result, StageExt};
use crate::params::{bind, join};
use crate::rng::SeedStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BlenderParams<P = Tensor> {
    /// `2D×2D`, no bias.
    pub w_alpha: P,
}

impl<P> BlenderParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> BlenderParams<U> {
        BlenderParams {
            w_alpha: f(&join(prefix, "w_alpha"), &self.w_alpha),
        }
    }
}

impl BlenderParams {
    pub fn init(seeds: &SeedStream, label: &str, d: usize) -> Self {
        Self {
            w_alpha: seeds.init(&join(label, "w_alpha"), &[2 * d, 2 * d], 2 * d),
        }
    }
}

pub mod traced {
    use super::*;

    /// `(α_GF, α_LF)` for `G`, `L` of shape `D×K`.
    pub fn blend_weights(
        tape: &mut Tape,
        g: Var,
        l: Var,
        p: &BlenderParams<Var>,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(g).to_vec();
        if shape.len() != 2 || tape.shape(l) != shape.as_slice() {
            return Err(Error::dim("blend", &shape, tape.shape(l)));
        }
        let (d, k) = (shape[0], shape[1]);
        if tape.shape(p.w_alpha) != [2 * d, 2 * d] {
            return Err(Error::dim("blend", tape.shape(p.w_alpha), &[2 * d, 2 * d]));
        }
        let c = tape.concat_rows(&[g, l])?;
        let y = tape.matmul(p.w_alpha, c)?;
        let top = tape.slice_rows(y, 0, d)?;
        let bot = tape.slice_rows(y, d, d)?;
        let top = tape.reshape(top, &[d * k, 1])?;
        let bot = tape.reshape(bot, &[d * k, 1])?;
        let pair = tape.concat_cols(&[top, bot])?;
        let w = tape.softmax_rows(pair)?;
        let agf = tape.slice_cols(w, 0, 1)?;
        let alf = tape.slice_cols(w, 1, 1)?;
        Ok((tape.reshape(agf, &[d, k])?, tape.reshape(alf, &[d, k])?))
    }

    pub fn blend(tape: &mut Tape, g: Var, l: Var, p: &BlenderParams<Var>) -> Result<Var> {
        let (agf, _) = blend_weights(tape, g, l, p)?;
        let diff = tape.sub(g, l)?;
        let mixed = tape.mul(agf, diff)?;
        tape.add(l, mixed)
    }
}

pub fn blend_weights(g: &Tensor, l: &Tensor, params: &BlenderParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = params.map("", &mut bind(&mut tape));
    let gv = tape.leaf(g.clone());
    let lv = tape.leaf(l.clone());
    let (a, b) = traced::blend_weights(&mut tape, gv, lv, &p)?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

/// Blended features `B[D×K]`.
pub fn blend(g: &Tensor, l: &Tensor, params: &BlenderParams) -> Result<Tensor> {
    crate::tape::evaluate(|t| {
        let p = params.map("", &mut bind(t));
        let gv = t.leaf(g.clone());
        let lv = t.leaf(l.clone());
        traced::blend(t, gv, lv, &p)
    })
    .stage("blender")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn rand(shape: &[usize], label: &str) -> Tensor {
        SeedStream::new(11).uniform(label, shape, -2.0, 2.0)
    }

    #[test]
    fn zero_weights_average_the_inputs() {
        let p = BlenderParams {
            w_alpha: Tensor::zeros(&[8, 8]),
        };
        let (g, l) = (rand(&[4, 5], "g"), rand(&[4, 5], "l"));
        let (agf, alf) = blend_weights(&g, &l, &p).unwrap();
        assert!(agf.data().iter().chain(alf.data()).all(|&v| v == 0.5));
        let want = g.add(&l).unwrap().scale(0.5);
        assert!(blend(&g, &l, &p).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn equal_inputs_pass_through_exactly() {
        let p = BlenderParams::init(&SeedStream::new(1), "b", 4);
        let g = rand(&[4, 6], "g");
        assert_eq!(blend(&g, &g, &p).unwrap(), g);
    }

    #[test]
    fn weights_are_complementary_and_output_is_bounded() {
        let p = BlenderParams::init(&SeedStream::new(2), "b", 4);
        let (g, l) = (rand(&[4, 6], "g"), rand(&[4, 6], "l"));
        let (agf, alf) = blend_weights(&g, &l, &p).unwrap();
        let b = blend(&g, &l, &p).unwrap();
        for i in 0..agf.numel() {
            assert!((agf.data()[i] + alf.data()[i] - 1.0).abs() < 1e-12);
            let (lo, hi) = (g.data()[i].min(l.data()[i]), g.data()[i].max(l.data()[i]));
            assert!(b.data()[i] >= lo - 1e-12 && b.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn swapping_inputs_with_mirrored_weights_is_symmetric() {
        let d = 3;
        let w = rand(&[2 * d, 2 * d], "w");
        // [[P, Q], [R, S]] → [[S, R], [Q, P]]
        let mirrored = Tensor::from_fn(&[2 * d, 2 * d], |i| {
            w.at((i[0] + d) % (2 * d), (i[1] + d) % (2 * d))
        });
        let (g, l) = (rand(&[d, 4], "g"), rand(&[d, 4], "l"));
        let p = BlenderParams { w_alpha: w };
        let q = BlenderParams { w_alpha: mirrored };
        let (agf, _) = blend_weights(&g, &l, &p).unwrap();
        let (_, alf) = blend_weights(&l, &g, &q).unwrap();
        assert!(agf.max_abs_diff(&alf) < 1e-14);
        assert!(blend(&g, &l, &p).unwrap().max_abs_diff(&blend(&l, &g, &q).unwrap()) < 1e-12);
    }

    #[test]
    fn matches_scalar_oracle() {
        let p = BlenderParams::init(&SeedStream::new(3), "b", 4);
        let (g, l) = (rand(&[4, 7], "g"), rand(&[4, 7], "l"));
        let got = blend(&g, &l, &p).unwrap();
        assert!(got.max_abs_diff(&oracle::blend(&g, &l, &p)) < 1e-12);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let p = BlenderParams::init(&SeedStream::new(3), "b", 4);
        assert!(blend(&rand(&[4, 3], "g"), &rand(&[4, 2], "l"), &p).is_err());
        assert!(blend(&rand(&[3, 3], "g"), &rand(&[3, 3], "l"), &p).is_err());
    }
}
