//! Spatial-temporal transformer: global aggregation by multi-head
//! self-attention, first within each frame and then across all frames.
//!
//! For one head `t` with projections `U_t, V_t, W'_t ∈ R^{Dv×D}` and
//! `W_t ∈ R^{D×Dv}`, query row `q` attends over key rows `x_k` with weights
//! `O_tqk ∝ exp(z_qᵀ U_tᵀ V_t x_k / √Dv)` normalized over all keys, and the
//! output is `Σ_t W_t Σ_k O_tqk W'_t x_k`. The temporal stage uses the same
//! form with the key set spanning every token of every frame.

use crate::error::{Error, Result, StageExt};
use crate::params::{bind, join};
use crate::rng::SeedStream;
use crate::tape::{evaluate, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenFrame;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projections of one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<P = Tensor> {
    /// `W_t`, `D×Dv`.
    pub w_out: P,
    /// `W'_t`, `Dv×D`.
    pub w_value: P,
    /// `U_t`, `Dv×D`.
    pub u_query: P,
    /// `V_t`, `Dv×D`.
    pub v_key: P,
}

impl<P> HeadWeights<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> HeadWeights<U> {
        HeadWeights {
            w_out: f(&join(prefix, "w_out"), &self.w_out),
            w_value: f(&join(prefix, "w_value"), &self.w_value),
            u_query: f(&join(prefix, "u_query"), &self.u_query),
            v_key: f(&join(prefix, "v_key"), &self.v_key),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P = Tensor> {
    pub heads: Vec<HeadWeights<P>>,
}

impl<P> AttentionParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> AttentionParams<U> {
        AttentionParams {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| h.map(&join(prefix, &format!("head{i}")), f))
                .collect(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

impl AttentionParams {
    pub fn init(seeds: &SeedStream, label: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("feature dimension {d} is not divisible by {heads} heads"),
            ));
        }
        let dv = d / heads;
        let heads = (0..heads)
            .map(|t| {
                let l = join(label, &format!("head{t}"));
                HeadWeights {
                    w_out: seeds.init(&join(&l, "w_out"), &[d, dv], dv),
                    w_value: seeds.init(&join(&l, "w_value"), &[dv, d], d),
                    u_query: seeds.init(&join(&l, "u_query"), &[dv, d], d),
                    v_key: seeds.init(&join(&l, "v_key"), &[dv, d], d),
                }
            })
            .collect();
        Ok(Self { heads })
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].u_query.rows()
    }
}

/// Feed-forward network plus the two layer-norm affine pairs of a sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<P = Tensor> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
}

impl<P> FfnParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> FfnParams<U> {
        FfnParams {
            w1: f(&join(prefix, "w1"), &self.w1),
            b1: f(&join(prefix, "b1"), &self.b1),
            w2: f(&join(prefix, "w2"), &self.w2),
            b2: f(&join(prefix, "b2"), &self.b2),
            norm1_gamma: f(&join(prefix, "norm1_gamma"), &self.norm1_gamma),
            norm1_beta: f(&join(prefix, "norm1_beta"), &self.norm1_beta),
            norm2_gamma: f(&join(prefix, "norm2_gamma"), &self.norm2_gamma),
            norm2_beta: f(&join(prefix, "norm2_beta"), &self.norm2_beta),
        }
    }
}

impl FfnParams {
    pub fn init(seeds: &SeedStream, label: &str, d: usize, d_ff: usize) -> Result<Self> {
        if d_ff < d {
            return Err(Error::config(
                "d_ff",
                format!("hidden width {d_ff} is smaller than d_model {d}"),
            ));
        }
        Ok(Self {
            w1: seeds.init(&join(label, "w1"), &[d, d_ff], d),
            b1: seeds.init(&join(label, "b1"), &[d_ff], d),
            w2: seeds.init(&join(label, "w2"), &[d_ff, d], d_ff),
            b2: seeds.init(&join(label, "b2"), &[d], d_ff),
            norm1_gamma: Tensor::full(&[d], 1.0),
            norm1_beta: Tensor::zeros(&[d]),
            norm2_gamma: Tensor::full(&[d], 1.0),
            norm2_beta: Tensor::zeros(&[d]),
        })
    }
}

/// One spatial block followed by one temporal block.
#[derive(Clone, Debug, PartialEq)]
pub struct SttmLayer<P = Tensor> {
    pub spatial: AttentionParams<P>,
    pub spatial_ffn: FfnParams<P>,
    pub temporal: AttentionParams<P>,
    pub temporal_ffn: FfnParams<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SttmParams<P = Tensor> {
    pub layers: Vec<SttmLayer<P>>,
}

impl<P> SttmParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> SttmParams<U> {
        SttmParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = join(prefix, &format!("layer{i}"));
                    SttmLayer {
                        spatial: l.spatial.map(&join(&p, "spatial"), f),
                        spatial_ffn: l.spatial_ffn.map(&join(&p, "spatial_ffn"), f),
                        temporal: l.temporal.map(&join(&p, "temporal"), f),
                        temporal_ffn: l.temporal_ffn.map(&join(&p, "temporal_ffn"), f),
                    }
                })
                .collect(),
        }
    }
}

impl SttmParams {
    pub fn init(
        seeds: &SeedStream,
        label: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("sttm.layers", "at least one layer is required"));
        }
        let layers = (0..layers)
            .map(|i| {
                let p = join(label, &format!("layer{i}"));
                Ok(SttmLayer {
                    spatial: AttentionParams::init(seeds, &join(&p, "spatial"), d, heads)?,
                    spatial_ffn: FfnParams::init(seeds, &join(&p, "spatial_ffn"), d, d_ff)?,
                    temporal: AttentionParams::init(seeds, &join(&p, "temporal"), d, heads)?,
                    temporal_ffn: FfnParams::init(seeds, &join(&p, "temporal_ffn"), d, d_ff)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Tape-level building blocks.
pub mod traced {
    use super::*;

    fn check_heads(tape: &Tape, d: usize, p: &AttentionParams<Var>) -> Result<usize> {
        let t = p.heads.len();
        if t == 0 || !d.is_multiple_of(t) {
            return Err(Error::config(
                "heads",
                format!("feature dimension {d} is not divisible by {t} heads"),
            ));
        }
        let dv = d / t;
        for h in &p.heads {
            for (w, shape) in [
                (h.u_query, [dv, d]),
                (h.v_key, [dv, d]),
                (h.w_value, [dv, d]),
                (h.w_out, [d, dv]),
            ] {
                if tape.shape(w) != shape {
                    return Err(Error::dim("attention head", tape.shape(w), &shape));
                }
            }
        }
        Ok(dv)
    }

    /// Per-head attention weights `O_t` (`Mq×K`) of `queries` over `keys`.
    pub fn attention_weights(
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        p: &AttentionParams<Var>,
    ) -> Result<Vec<Var>> {
        let d = tape.shape(queries)[1];
        if tape.shape(keys)[1] != d {
            return Err(Error::dim("attention", tape.shape(queries), tape.shape(keys)));
        }
        let dv = check_heads(tape, d, p)?;
        let scale = 1.0 / (dv as f64).sqrt();
        p.heads
            .iter()
            .map(|h| {
                let ut = tape.transpose(h.u_query)?;
                let q = tape.matmul(queries, ut)?;
                let vt = tape.transpose(h.v_key)?;
                let k = tape.matmul(keys, vt)?;
                let kt = tape.transpose(k)?;
                let logits = tape.matmul(q, kt)?;
                let logits = tape.scale(logits, scale);
                tape.softmax_rows(logits)
            })
            .collect()
    }

    /// Multi-head attention of `queries[Mq×D]` over `keys[K×D]`.
    pub fn attend(
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        p: &AttentionParams<Var>,
    ) -> Result<Var> {
        let weights = attention_weights(tape, queries, keys, p)?;
        let mut out = None;
        for (h, o) in p.heads.iter().zip(weights) {
            let wvt = tape.transpose(h.w_value)?;
            let values = tape.matmul(keys, wvt)?;
            let agg = tape.matmul(o, values)?;
            let wot = tape.transpose(h.w_out)?;
            let head = tape.matmul(agg, wot)?;
            out = Some(match out {
                None => head,
                Some(acc) => tape.add(acc, head)?,
            });
        }
        Ok(out.expect("at least one head"))
    }

    pub fn spat_mhsa(tape: &mut Tape, z: Var, p: &AttentionParams<Var>) -> Result<Var> {
        attend(tape, z, z, p)
    }

    pub fn temp_mhsa(
        tape: &mut Tape,
        z: Var,
        frames: &[Var],
        p: &AttentionParams<Var>,
    ) -> Result<Var> {
        let keys = tape.concat_rows(frames)?;
        attend(tape, z, keys, p)
    }

    /// `y = LN(x + sub_out)`, `out = LN(y + FFN(y))`.
    pub fn transformer_sublayer(
        tape: &mut Tape,
        x: Var,
        sub_out: Var,
        ffn: &FfnParams<Var>,
    ) -> Result<Var> {
        let r = tape.add(x, sub_out)?;
        let y = tape.layer_norm(r, ffn.norm1_gamma, ffn.norm1_beta, LAYER_NORM_EPS)?;
        let h = tape.linear(y, ffn.w1, ffn.b1)?;
        let h = tape.relu(h);
        let f = tape.linear(h, ffn.w2, ffn.b2)?;
        let r2 = tape.add(y, f)?;
        tape.layer_norm(r2, ffn.norm2_gamma, ffn.norm2_beta, LAYER_NORM_EPS)
    }

    /// Global aggregated features for all frames, `[(N·M)×D]` frame-major.
    ///
    /// `tokens` and `positions` hold one `M×D` node per frame. Every layer
    /// re-adds the positional features to its input before the spatial block.
    pub fn sttm_forward(
        tape: &mut Tape,
        tokens: &[Var],
        positions: &[Var],
        p: &SttmParams<Var>,
    ) -> Result<Var> {
        let first = *tokens.first().ok_or(Error::EmptyInput("sttm_forward"))?;
        let shape = tape.shape(first).to_vec();
        for &t in tokens.iter().chain(positions) {
            if tape.shape(t) != shape.as_slice() {
                return Err(Error::dim("sttm_forward", &shape, tape.shape(t)));
            }
        }
        let m = shape[0];
        let mut current: Vec<Var> = tokens.to_vec();
        let mut out = None;
        for layer in &p.layers {
            let mut inter = Vec::with_capacity(current.len());
            for (&x, &pos) in current.iter().zip(positions) {
                let z = tape.add(x, pos)?;
                let a = spat_mhsa(tape, z, &layer.spatial)?;
                inter.push(transformer_sublayer(tape, z, a, &layer.spatial_ffn)?);
            }
            // Queries from every frame at once; each still attends over all
            // N·M intermediate tokens.
            let all = tape.concat_rows(&inter)?;
            let a = attend(tape, all, all, &layer.temporal)?;
            let g = transformer_sublayer(tape, all, a, &layer.temporal_ffn)?;
            current = (0..inter.len())
                .map(|n| tape.slice_rows(g, n * m, m))
                .collect::<Result<_>>()?;
            out = Some(g);
        }
        out.ok_or_else(|| Error::config("sttm.layers", "at least one layer is required"))
    }
}

pub fn spat_mhsa(z: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    evaluate(|t| {
        let p = params.map("", &mut bind(t));
        let zv = t.leaf(z.clone());
        traced::spat_mhsa(t, zv, &p)
    })
}

pub fn temp_mhsa(z: &Tensor, frames: &[Tensor], params: &AttentionParams) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("temp_mhsa"));
    }
    for f in frames {
        if f.shape() != z.shape() {
            return Err(Error::dim("temp_mhsa", z.shape(), f.shape()));
        }
    }
    evaluate(|t| {
        let p = params.map("", &mut bind(t));
        let zv = t.leaf(z.clone());
        let fs: Vec<Var> = frames.iter().map(|f| t.leaf(f.clone())).collect();
        traced::temp_mhsa(t, zv, &fs, &p)
    })
}

/// Attention weights as a `[T, Mq, K]` tensor.
pub fn attention_weights(queries: &Tensor, keys: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.map("", &mut bind(&mut tape));
    let q = tape.leaf(queries.clone());
    let k = tape.leaf(keys.clone());
    let heads = traced::attention_weights(&mut tape, q, k, &p)?;
    let mut data = Vec::new();
    for h in &heads {
        data.extend_from_slice(tape.value(*h).data());
    }
    Tensor::new(&[heads.len(), queries.rows(), keys.rows()], data)
}

pub fn transformer_sublayer(x: &Tensor, sub_out: &Tensor, ffn: &FfnParams) -> Result<Tensor> {
    evaluate(|t| {
        let p = ffn.map("", &mut bind(t));
        let xv = t.leaf(x.clone());
        let sv = t.leaf(sub_out.clone());
        traced::transformer_sublayer(t, xv, sv, &p)
    })
}

pub fn sttm_forward(frames: &[TokenFrame], params: &SttmParams) -> Result<Tensor> {
    evaluate(|t| {
        let p = params.map("", &mut bind(t));
        let tokens: Vec<Var> = frames.iter().map(|f| t.leaf(f.tokens.clone())).collect();
        let positions: Vec<Var> = frames.iter().map(|f| t.leaf(f.positions.clone())).collect();
        traced::sttm_forward(t, &tokens, &positions, &p)
    })
    .stage("sttm")
}
