//! End-to-end driver: tokenize a window of `N` frames, run the transformer
//! and graph branches side by side, and blend their outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blender::{self, BlenderParams};
use crate::error::{Error, Result, StageExt};
use crate::params::join;
use crate::rng::SeedStream;
use crate::stgm::{self, PruneConfig, PrunedGraph, StgmConfig, StgmParams, TemporalGraph};
use crate::sttm::{self, SttmParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{positional_encoding, tokenize, FrameFeature, TokenFrame};
use crate::tzr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            channels: 24,
            height: 4,
            width: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Hidden width of the feed-forward blocks, `4·D` when unset.
    pub d_ff: Option<usize>,
    pub layers: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 6,
            d_ff: None,
            layers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub l_dgc: usize,
    pub gamma: Vec<f64>,
    pub lambda: f64,
    pub rho: f64,
    pub edge_hidden: usize,
    pub temporal_graph: TemporalGraph,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let prune = PruneConfig::default();
        Self {
            l_dgc: 2,
            gamma: prune.thresholds,
            lambda: prune.lambda,
            rho: 0.5,
            edge_hidden: 16,
            temporal_graph: TemporalGraph::PerLocation,
        }
    }
}

/// Synthetic window: a Gaussian blob drifting over a noisy background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Per-frame displacement `[dy, dx]` in tokens, wrapping at the borders.
    pub velocity: [i64; 2],
    pub sigma: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            velocity: [0, 1],
            sigma: 0.8,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub frame: FrameConfig,
    pub d_model: usize,
    pub sttm: AttentionConfig,
    pub stgm: GraphConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 25,
            seed: 0,
            frame: FrameConfig::default(),
            d_model: 24,
            sttm: AttentionConfig::default(),
            stgm: GraphConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    fn sized(n: usize, hw: (usize, usize), d: usize, heads: usize) -> Self {
        Self {
            n,
            frame: FrameConfig {
                channels: d,
                height: hw.0,
                width: hw.1,
            },
            d_model: d,
            sttm: AttentionConfig {
                heads,
                ..AttentionConfig::default()
            },
            ..Self::default()
        }
    }

    /// N=3, 8×8 tokens, D=32, T=2.
    pub fn desk() -> Self {
        Self::sized(3, (8, 8), 32, 2)
    }

    /// Largest instance used for oracle comparison: N=3, 3×3 tokens, D=8, T=2.
    pub fn oracle_preset() -> Self {
        Self::sized(3, (3, 3), 8, 2)
    }

    /// Largest instance used for gradient checking: N=2, 2×3 tokens, D=8, T=2.
    pub fn gradcheck_preset() -> Self {
        Self::sized(2, (2, 3), 8, 2)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.frame.height * self.frame.width
    }

    pub fn d_ff(&self) -> usize {
        self.sttm.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn stgm_config(&self) -> StgmConfig {
        StgmConfig {
            prune: PruneConfig {
                thresholds: self.stgm.gamma.clone(),
                lambda: self.stgm.lambda,
            },
            rho: self.stgm.rho,
            temporal_graph: self.stgm.temporal_graph,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("N", self.n),
            ("frame.channels", self.frame.channels),
            ("frame.height", self.frame.height),
            ("frame.width", self.frame.width),
            ("d_model", self.d_model),
            ("sttm.heads", self.sttm.heads),
            ("sttm.layers", self.sttm.layers),
            ("stgm.edge_hidden", self.stgm.edge_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::config("d_model", "must be divisible by 4"));
        }
        if !self.d_model.is_multiple_of(self.sttm.heads) {
            return Err(Error::config("sttm.heads", "must divide d_model"));
        }
        if self.d_ff() < self.d_model {
            return Err(Error::config("sttm.d_ff", "must be at least d_model"));
        }
        self.stgm_config().prune.validate()?;
        if !self.stgm.rho.is_finite() {
            return Err(Error::config("stgm.rho", "must be finite"));
        }
        if !(self.synth.sigma > 0.0 && self.synth.sigma.is_finite()) {
            return Err(Error::config("synth.sigma", "must be positive"));
        }
        if !(self.synth.noise >= 0.0 && self.synth.noise.is_finite()) {
            return Err(Error::config("synth.noise", "must be non-negative"));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig =
        serde_json::from_str(text).map_err(|e| Error::config("json", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    /// `c×D` token projection, present when the frame channels differ from D.
    pub proj: Option<P>,
    pub sttm: SttmParams<P>,
    pub stgm: StgmParams<P>,
    pub blender: BlenderParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> ModelParams<U> {
        ModelParams {
            proj: self.proj.as_ref().map(|p| f(&join(prefix, "tokenizer.proj"), p)),
            sttm: self.sttm.map(&join(prefix, "sttm"), f),
            stgm: self.stgm.map(&join(prefix, "stgm"), f),
            blender: self.blender.map(&join(prefix, "blender"), f),
        }
    }
}

impl ModelParams {
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedStream::new(cfg.seed);
        let (c, d) = (cfg.frame.channels, cfg.d_model);
        Ok(Self {
            proj: (c != d).then(|| seeds.init("tokenizer.proj", &[c, d], c)),
            sttm: SttmParams::init(&seeds, "sttm", d, cfg.sttm.heads, cfg.d_ff(), cfg.sttm.layers)?,
            stgm: StgmParams::init(
                &seeds,
                "stgm",
                d,
                cfg.stgm.l_dgc,
                cfg.stgm.edge_hidden,
                cfg.stgm.gamma.len(),
            ),
            blender: BlenderParams::init(&seeds, "blender", d),
        })
    }
}

/// Deterministic window of `N` frames with a blob moving by the configured
/// velocity. Frame `n` has its blob centred at `start + n·velocity`, wrapped
/// onto the grid.
pub fn synth_sequence(cfg: &PipelineConfig, seed: u64) -> Result<Vec<FrameFeature>> {
    cfg.validate()?;
    let seeds = SeedStream::new(seed);
    let FrameConfig {
        channels: c,
        height: h,
        width: w,
    } = cfg.frame;
    let mut rng = seeds.rng("synth.blob");
    let start = (rng.gen_range(0..h), rng.gen_range(0..w));
    let profile: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..=1.0)).collect();
    (0..cfg.n)
        .map(|n| {
            let (cy, cx) = blob_center(cfg, start, n);
            let noise = seeds.uniform(&format!("synth.noise{n}"), &[c, h, w], -1.0, 1.0);
            let s2 = 2.0 * cfg.synth.sigma * cfg.synth.sigma;
            FrameFeature::new(Tensor::from_fn(&[c, h, w], |i| {
                let dy = torus(i[1], cy, h) as f64;
                let dx = torus(i[2], cx, w) as f64;
                let bump = (-(dy * dy + dx * dx) / s2).exp();
                let k = (i[0] * h + i[1]) * w + i[2];
                profile[i[0]] * bump + cfg.synth.noise * noise.data()[k]
            }))
        })
        .collect()
}

fn blob_center(cfg: &PipelineConfig, start: (usize, usize), n: usize) -> (usize, usize) {
    let wrap = |s: usize, v: i64, len: usize| (s as i64 + v * n as i64).rem_euclid(len as i64) as usize;
    (
        wrap(start.0, cfg.synth.velocity[0], cfg.frame.height),
        wrap(start.1, cfg.synth.velocity[1], cfg.frame.width),
    )
}

fn torus(a: usize, b: usize, len: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(len - d)
}

pub fn tokenize_window(frames: &[FrameFeature], proj: Option<&Tensor>) -> Result<Vec<TokenFrame>> {
    let first = frames.first().ok_or(Error::EmptyInput("tokenize_window"))?;
    frames
        .iter()
        .map(|f| {
            if f.tensor().shape() != first.tensor().shape() {
                return Err(Error::dim("tokenize_window", first.tensor().shape(), f.tensor().shape()));
            }
            TokenFrame::from_frame(f, proj)
        })
        .collect::<Result<_>>()
        .stage("tokenizer")
}

/// Every stage output of one window.
#[derive(Clone, Debug)]
pub struct Stages {
    pub tokens: Vec<TokenFrame>,
    /// `D×(N·M)`.
    pub global: Tensor,
    /// `D×(N·M)`.
    pub local: Tensor,
    /// `D×(N·M)`.
    pub blended: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage_timings_ms: BTreeMap<String, f64>,
    pub invariants: BTreeMap<String, bool>,
    pub checksums: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
}

impl RunReport {
    pub fn all_invariants_hold(&self) -> bool {
        self.invariants.values().all(|&ok| ok)
    }
}

pub fn checksum(t: &Tensor) -> String {
    let digest = Sha256::digest(tzr::to_bytes(t));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64() * 1e3))
}

/// Runs one window through the whole model. The transformer and graph
/// branches run concurrently; the blender waits for both.
pub fn forward(
    frames: &[FrameFeature],
    cfg: &PipelineConfig,
    params: &ModelParams,
) -> Result<(Stages, BTreeMap<String, f64>)> {
    cfg.validate()?;
    let stgm_cfg = cfg.stgm_config();
    let mut timings = BTreeMap::new();
    let (tokens, ms) = timed(|| tokenize_window(frames, params.proj.as_ref()))?;
    timings.insert("tokenizer".to_string(), ms);
    if tokens[0].dim() != cfg.d_model {
        return Err(Error::config("d_model", "does not match the tokenizer output width"));
    }

    let (g, l) = rayon::join(
        || timed(|| sttm::sttm_forward(&tokens, &params.sttm)?.transpose()),
        || timed(|| stgm::stgm_forward(&tokens, &params.stgm, &stgm_cfg)?.transpose()),
    );
    let (global, ms) = g?;
    timings.insert("sttm".to_string(), ms);
    let (local, ms) = l?;
    timings.insert("stgm".to_string(), ms);

    let (blended, ms) = timed(|| blender::blend(&global, &local, &params.blender))?;
    timings.insert("blender".to_string(), ms);
    Ok((
        Stages {
            tokens,
            global,
            local,
            blended,
        },
        timings,
    ))
}

/// Blended features `B[D×(N·M)]` plus a report of timings, invariant checks
/// and checksums. `B` is the terminal output; a detection decoder would
/// consume it from here.
pub fn run_pipeline(
    frames: &[FrameFeature],
    cfg: &PipelineConfig,
    params: &ModelParams,
) -> Result<(Tensor, RunReport)> {
    let (stages, timings) = forward(frames, cfg, params)?;
    let start = Instant::now();
    let invariants = check_invariants(&stages, cfg, params)?;
    let mut stage_timings_ms = timings;
    stage_timings_ms.insert("invariants".to_string(), start.elapsed().as_secs_f64() * 1e3);

    let mut checksums = BTreeMap::new();
    checksums.insert("input".to_string(), checksum(&FrameFeature::stack(frames)?));
    let token_stack = Tensor::concat_rows(&stages.tokens.iter().map(|t| &t.tokens).collect::<Vec<_>>())?;
    checksums.insert("tokens".to_string(), checksum(&token_stack));
    checksums.insert("global".to_string(), checksum(&stages.global));
    checksums.insert("local".to_string(), checksum(&stages.local));
    checksums.insert("blended".to_string(), checksum(&stages.blended));

    Ok((
        stages.blended,
        RunReport {
            stage_timings_ms,
            invariants,
            checksums,
            outputs: BTreeMap::new(),
        },
    ))
}

fn check_invariants(
    stages: &Stages,
    cfg: &PipelineConfig,
    params: &ModelParams,
) -> Result<BTreeMap<String, bool>> {
    let nm = cfg.n * cfg.tokens_per_frame();
    let shape = [cfg.d_model, nm];
    let mut inv = BTreeMap::new();
    let mut put = |k: &str, v: bool| {
        inv.insert(k.to_string(), v);
    };
    put("tokens.finite", stages.tokens.iter().all(|t| t.tokens.is_finite()));
    put(
        "positions.distinct",
        distinct_rows(&positional_encoding(cfg.frame.height, cfg.frame.width, cfg.d_model)?),
    );
    put("sttm.finite", stages.global.is_finite());
    put("sttm.shape", stages.global.shape() == shape);
    put("stgm.finite", stages.local.is_finite());
    put("stgm.shape", stages.local.shape() == shape);

    let (agf, alf) = blender::blend_weights(&stages.global, &stages.local, &params.blender)?;
    put(
        "blender.weights_sum_to_one",
        agf.data().iter().zip(alf.data()).all(|(a, b)| (a + b - 1.0).abs() <= 1e-12),
    );
    put(
        "blender.convex_bound",
        (0..stages.blended.numel()).all(|i| {
            let (g, l, b) = (stages.global.data()[i], stages.local.data()[i], stages.blended.data()[i]);
            g.min(l) - 1e-12 <= b && b <= g.max(l) + 1e-12
        }),
    );
    put("blender.finite", stages.blended.is_finite());

    if cfg.stgm.l_dgc > 0 {
        let graph = PrunedGraph::build(
            &stages.tokens[0].summed(),
            &params.stgm.spatial.graph,
            &cfg.stgm_config().prune,
        )?;
        for (name, ok) in graph.invariants() {
            put(&format!("stgm.graph.{name}"), ok);
        }
    }
    Ok(inv)
}

fn distinct_rows(t: &Tensor) -> bool {
    let m = t.rows();
    (0..m).all(|a| (a + 1..m).all(|b| t.row(a) != t.row(b)))
}

pub mod traced {
    use super::*;

    /// `B` for a window whose raw tokens (`M×c`) and positions (`M×D`) are
    /// already on the tape.
    pub fn pipeline(
        tape: &mut Tape,
        raw_tokens: &[Var],
        positions: &[Var],
        p: &ModelParams<Var>,
        cfg: &StgmConfig,
    ) -> Result<Var> {
        let tokens = raw_tokens
            .iter()
            .map(|&t| match p.proj {
                Some(w) => tape.matmul(t, w),
                None => Ok(t),
            })
            .collect::<Result<Vec<_>>>()?;
        let g = sttm::traced::sttm_forward(tape, &tokens, positions, &p.sttm)?;
        let sums = tokens
            .iter()
            .zip(positions)
            .map(|(&t, &pos)| tape.add(t, pos))
            .collect::<Result<Vec<_>>>()?;
        let l = stgm::traced::stgm_forward(tape, &sums, &p.stgm, cfg)?;
        let g = tape.transpose(g)?;
        let l = tape.transpose(l)?;
        blender::traced::blend(tape, g, l, &p.blender)
    }
}

/// Raw (unprojected) tokens and positions of every frame.
pub fn raw_window(frames: &[FrameFeature], d: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let first = frames.first().ok_or(Error::EmptyInput("raw_window"))?;
    let pos = positional_encoding(first.height(), first.width(), d)?;
    let raw = frames.iter().map(|f| tokenize(f, None)).collect::<Result<Vec<_>>>()?;
    Ok((raw, vec![pos; frames.len()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::evaluate;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.n, 25);
        assert_eq!(cfg.sttm.heads, 6);
        assert_eq!(cfg.stgm.l_dgc, 2);
        assert_eq!(cfg.stgm.gamma, vec![0.1, 0.3, 1.0]);
        assert_eq!(cfg.stgm.lambda, 0.3);
        assert_eq!(cfg.stgm.rho, 0.5);
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = parse_config(r#"{"stgm":{"l_dgc":0}}"#).unwrap();
        assert_eq!(cfg.stgm.l_dgc, 0);
        assert_eq!(cfg.stgm.rho, 0.5);
        let p = ModelParams::init(&cfg).unwrap();
        assert!(p.stgm.spatial.weights.is_empty());
    }

    #[test]
    fn validation_names_the_field() {
        for (text, field) in [
            (r#"{"N":0}"#, "N"),
            (r#"{"d_model":30}"#, "d_model"),
            (r#"{"d_model":8,"frame":{"channels":8}}"#, "sttm.heads"),
            (r#"{"stgm":{"gamma":[0.3,0.1]}}"#, "stgm.thresholds"),
            (r#"{"bogus":1}"#, "json"),
            ("{", "json"),
        ] {
            match parse_config(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_tracks_velocity() {
        let mut cfg = PipelineConfig::default();
        cfg.n = 6;
        cfg.frame.height = 5;
        cfg.frame.width = 7;
        cfg.synth.velocity = [1, -2];
        let a = synth_sequence(&cfg, 9).unwrap();
        let b = synth_sequence(&cfg, 9).unwrap();
        assert_eq!(a, b);

        let peaks: Vec<(i64, i64)> = a
            .iter()
            .map(|f| {
                let (h, w) = (f.height(), f.width());
                let energy = |p: usize| {
                    (0..f.channels())
                        .map(|c| f.tensor().data()[c * h * w + p].powi(2))
                        .sum::<f64>()
                };
                let best = (0..h * w).max_by(|&x, &y| energy(x).total_cmp(&energy(y))).unwrap();
                ((best / w) as i64, (best % w) as i64)
            })
            .collect();
        for pair in peaks.windows(2) {
            assert_eq!((pair[1].0 - pair[0].0).rem_euclid(5), 1);
            assert_eq!((pair[1].1 - pair[0].1).rem_euclid(7), 5);
        }
    }

    #[test]
    fn single_frame_window() {
        let mut cfg = PipelineConfig::oracle_preset();
        cfg.n = 1;
        let frames = synth_sequence(&cfg, 0).unwrap();
        assert_eq!(frames.len(), 1);
        let (b, report) = run_pipeline(&frames, &cfg, &ModelParams::init(&cfg).unwrap()).unwrap();
        assert_eq!(b.shape(), &[8, 9]);
        assert!(report.all_invariants_hold(), "{:?}", report.invariants);
    }

    #[test]
    fn projection_used_when_channels_differ() {
        let mut cfg = PipelineConfig::oracle_preset();
        cfg.frame.channels = 5;
        let p = ModelParams::init(&cfg).unwrap();
        assert_eq!(p.proj.as_ref().unwrap().shape(), &[5, 8]);
        let frames = synth_sequence(&cfg, 1).unwrap();
        let (b, _) = run_pipeline(&frames, &cfg, &p).unwrap();
        assert_eq!(b.shape(), &[8, 27]);
    }

    #[test]
    fn traced_pipeline_matches_staged_forward() {
        let mut cfg = PipelineConfig::oracle_preset();
        cfg.frame.channels = 6;
        let p = ModelParams::init(&cfg).unwrap();
        let frames = synth_sequence(&cfg, 2).unwrap();
        let (stages, _) = forward(&frames, &cfg, &p).unwrap();
        let (raw, pos) = raw_window(&frames, cfg.d_model).unwrap();
        let b = evaluate(|t| {
            let pv = p.map("", &mut crate::params::bind(t));
            let rv: Vec<Var> = raw.iter().map(|x| t.leaf(x.clone())).collect();
            let ps: Vec<Var> = pos.iter().map(|x| t.leaf(x.clone())).collect();
            traced::pipeline(t, &rv, &ps, &pv, &cfg.stgm_config())
        })
        .unwrap();
        assert!(b.max_abs_diff(&stages.blended) < 1e-12);
    }

    #[test]
    fn zero_graph_layers_and_blender_average_the_branches() {
        let mut cfg = PipelineConfig::oracle_preset();
        cfg.stgm.l_dgc = 0;
        let mut p = ModelParams::init(&cfg).unwrap();
        p.blender.w_alpha = Tensor::zeros(&[16, 16]);
        let frames = synth_sequence(&cfg, 3).unwrap();
        let (stages, _) = forward(&frames, &cfg, &p).unwrap();
        let sums: Vec<Tensor> = stages.tokens.iter().map(|t| t.summed()).collect();
        let z = Tensor::concat_rows(&sums.iter().collect::<Vec<_>>())
            .unwrap()
            .transpose()
            .unwrap();
        // Spatial and temporal blocks each reduce to the 0.5 residual.
        assert!(stages.local.max_abs_diff(&z.scale(0.25)) < 1e-15);
        let want = stages.global.add(&stages.local).unwrap().scale(0.5);
        assert!(stages.blended.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn desk_run_emits_expected_shape() {
        let cfg = PipelineConfig::desk();
        let frames = synth_sequence(&cfg, 0).unwrap();
        let (b, report) = run_pipeline(&frames, &cfg, &ModelParams::init(&cfg).unwrap()).unwrap();
        assert_eq!(b.shape(), &[32, 192]);
        assert!(report.all_invariants_hold(), "{:?}", report.invariants);
        assert_eq!(report.checksums["blended"], checksum(&b));
    }

    #[test]
    fn rejects_mixed_frame_shapes() {
        let cfg = PipelineConfig::oracle_preset();
        let mut frames = synth_sequence(&cfg, 0).unwrap();
        frames[1] = FrameFeature::new(Tensor::zeros(&[8, 2, 2])).unwrap();
        let err = run_pipeline(&frames, &cfg, &ModelParams::init(&cfg).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "tokenizer", .. }));
    }
}
