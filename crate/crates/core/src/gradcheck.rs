//! Tape gradients against central finite differences.
//!
//! The checked loss is `Σ probe ⊙ output` for a seeded random probe; a plain
//! sum is also available. When a probe step flips a ReLU, mask or guard (seen
//! as a change of [`Tape::branch_signature`]) the step is shrunk, and as a
//! last resort a one-sided difference on the unchanged side is used.

use rayon::prelude::*;

use crate::blender;
use crate::error::{Error, Result};
use crate::pipeline::{self, synth_sequence, ModelParams, PipelineConfig};
use crate::rng::SeedStream;
use crate::stgm::{self, StgmConfig};
use crate::sttm;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, DEFAULT_FD_STEP};
use crate::verify::dense_prune;

pub const GRADCHECK_TOL: f64 = 1e-5;
/// Smallest norm below which a gradient block counts as zero.
pub const ZERO_GRADIENT_FLOOR: f64 = 1e-10;
const STEP_RANGE: (f64, f64) = (1e-8, 1e-2);
const SHRINK_ATTEMPTS: usize = 3;

/// Step actually used for a requested `h`, plus a warning when it was
/// replaced by the default.
pub fn effective_step(h: f64) -> (f64, Option<String>) {
    if h.is_finite() && (STEP_RANGE.0..=STEP_RANGE.1).contains(&h) {
        (h, None)
    } else {
        (
            DEFAULT_FD_STEP,
            Some(format!(
                "step {h:e} is outside [{:e}, {:e}] (cancellation or truncation would dominate); using {DEFAULT_FD_STEP:e}",
                STEP_RANGE.0, STEP_RANGE.1
            )),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    Probe(u64),
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub suite: String,
    pub block: String,
    pub numel: usize,
    pub rel_error: f64,
    /// Entries whose step had to be shrunk or made one-sided.
    pub kink_retries: usize,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < GRADCHECK_TOL
    }
}

/// Norm below which a block is indistinguishable from zero: the rounding
/// noise of a central difference of a loss of size `loss` at step `h`,
/// accumulated over `numel` entries with a safety factor of 100.
pub fn zero_floor(loss: f64, h: f64, numel: usize) -> f64 {
    let noise = f64::EPSILON * (loss.abs() + 1.0) / h;
    ZERO_GRADIENT_FLOOR.max(100.0 * noise * (numel as f64).sqrt())
}

/// Relative error between an analytic and a numeric gradient block, or the
/// absolute error when both norms are below `floor`.
pub fn block_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let diff = analytic.sub(numeric).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    let scale = analytic.norm().max(numeric.norm());
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

fn scalar_loss(tape: &mut Tape, out: Var, loss: Loss) -> Result<Var> {
    match loss {
        Loss::Sum => Ok(tape.sum(out)),
        Loss::Probe(seed) => {
            let probe = SeedStream::new(seed).uniform("probe", tape.shape(out), -1.0, 1.0);
            let p = tape.leaf(probe);
            let m = tape.mul(out, p)?;
            Ok(tape.sum(m))
        }
    }
}

/// Checks every named leaf block of `f`. The closure receives the leaves, in
/// order, already registered on the tape.
pub fn check_blocks<F>(
    suite: &str,
    leaves: Vec<(String, Tensor)>,
    loss: Loss,
    h: f64,
    f: F,
) -> Result<Vec<BlockCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let eval = |vals: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let l = scalar_loss(&mut tape, out, loss)?;
        Ok((tape.value(l).data()[0], tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let l = scalar_loss(&mut tape, out, loss)?;
    let base = (tape.value(l).data()[0], tape.branch_signature());
    let grads = tape.backward(l)?;

    let entries: Vec<(usize, usize)> = values
        .iter()
        .enumerate()
        .flat_map(|(b, t)| (0..t.numel()).map(move |i| (b, i)))
        .collect();
    let numeric: Vec<(f64, bool)> = entries
        .par_iter()
        .map(|&(b, i)| {
            let at = |delta: f64| {
                let mut vals = values.clone();
                vals[b].data_mut()[i] += delta;
                eval(&vals)
            };
            let mut step = h;
            let mut last = None;
            for attempt in 0..=SHRINK_ATTEMPTS {
                let (fp, sp) = at(step)?;
                let (fm, sm) = at(-step)?;
                if sp == base.1 && sm == base.1 {
                    return Ok(((fp - fm) / (2.0 * step), attempt > 0));
                }
                last = Some((step, fp, sp, fm, sm));
                step /= 10.0;
            }
            let (step, fp, sp, fm, sm) = last.expect("at least one attempt");
            let g = if sp == base.1 {
                (fp - base.0) / step
            } else if sm == base.1 {
                (base.0 - fm) / step
            } else {
                (fp - fm) / (2.0 * step)
            };
            Ok((g, true))
        })
        .collect::<Result<_>>()?;

    let mut offset = 0;
    Ok(leaves
        .iter()
        .zip(&vars)
        .map(|((name, t), &v)| {
            let slice = &numeric[offset..offset + t.numel()];
            offset += t.numel();
            let fd = Tensor::new(t.shape(), slice.iter().map(|x| x.0).collect())
                .expect("same shape as leaf");
            BlockCheck {
                suite: suite.to_string(),
                block: name.clone(),
                numel: t.numel(),
                rel_error: block_error(grads.wrt(v), &fd, zero_floor(base.0, h, t.numel())),
                kink_retries: slice.iter().filter(|x| x.1).count(),
            }
        })
        .collect())
}

/// Rejects instances larger than N=2, M=6, D=8, T=2.
pub fn check_size(cfg: &PipelineConfig) -> Result<()> {
    let limits = [
        ("N", cfg.n, 2),
        ("frame", cfg.tokens_per_frame(), 6),
        ("d_model", cfg.d_model, 8),
        ("sttm.heads", cfg.sttm.heads, 2),
    ];
    for (field, v, max) in limits {
        if v > max {
            return Err(Error::config(
                field,
                format!("{v} exceeds the gradient-check limit of {max}"),
            ));
        }
    }
    Ok(())
}

fn collect(out: &mut Vec<(String, Tensor)>) -> impl FnMut(&str, &Tensor) + '_ {
    move |name, t| out.push((name.to_string(), t.clone()))
}

fn take<'a>(vars: &'a [Var]) -> impl FnMut(&str, &Tensor) -> Var + 'a {
    let mut it = vars.iter().copied();
    move |_, _| it.next().expect("one var per leaf")
}

fn stgm_suite(
    name: &str,
    sums: &[Tensor],
    params: &stgm::StgmParams,
    cfg: &StgmConfig,
    loss: Loss,
    h: f64,
) -> Result<Vec<BlockCheck>> {
    let mut leaves: Vec<(String, Tensor)> = sums
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("input.frame{i}"), s.clone()))
        .collect();
    params.map("stgm", &mut collect(&mut leaves));
    let n = sums.len();
    check_blocks(name, leaves, loss, h, |tape, vars| {
        let (inputs, rest) = vars.split_at(n);
        let p = params.map("", &mut take(rest));
        stgm::traced::stgm_forward(tape, inputs, &p, cfg)
    })
}

fn pipeline_suite(
    name: &str,
    cfg: &PipelineConfig,
    loss: Loss,
    h: f64,
) -> Result<Vec<BlockCheck>> {
    let params = ModelParams::init(cfg)?;
    let frames = synth_sequence(cfg, cfg.seed)?;
    let (raw, pos) = pipeline::raw_window(&frames, cfg.d_model)?;
    let mut leaves = Vec::new();
    params.map("", &mut collect(&mut leaves));
    let stgm_cfg = cfg.stgm_config();
    check_blocks(name, leaves, loss, h, |tape, vars| {
        let p = params.map("", &mut take(vars));
        let rv: Vec<Var> = raw.iter().map(|x| tape.leaf(x.clone())).collect();
        let pv: Vec<Var> = pos.iter().map(|x| tape.leaf(x.clone())).collect();
        pipeline::traced::pipeline(tape, &rv, &pv, &p, &stgm_cfg)
    })
}

pub const SUITES: [&str; 7] = [
    "sttm",
    "stgm",
    "stgm.dense_prune",
    "blender",
    "pipeline",
    "pipeline.projected",
    "pipeline.sum",
];

/// Runs the named suites (all of [`SUITES`] when `only` is empty) on the
/// instance described by `cfg`.
pub fn run_suites(cfg: &PipelineConfig, h: f64, only: &[&str]) -> Result<Vec<BlockCheck>> {
    cfg.validate()?;
    check_size(cfg)?;
    for s in only {
        if !SUITES.contains(s) {
            return Err(Error::config("suite", format!("unknown suite {s}")));
        }
    }
    let wanted = |s: &str| only.is_empty() || only.contains(&s);
    let probe = Loss::Probe(cfg.seed ^ 0x9e37_79b9);
    let params = ModelParams::init(cfg)?;
    let frames = synth_sequence(cfg, cfg.seed)?;
    let tokens = pipeline::tokenize_window(&frames, params.proj.as_ref())?;
    let sums: Vec<Tensor> = tokens.iter().map(|t| t.summed()).collect();
    let mut out = Vec::new();

    if wanted("sttm") {
        let mut leaves: Vec<(String, Tensor)> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("input.frame{i}"), t.tokens.clone()))
            .collect();
        params.sttm.map("sttm", &mut collect(&mut leaves));
        let n = tokens.len();
        out.extend(check_blocks("sttm", leaves, probe, h, |tape, vars| {
            let (tok, rest) = vars.split_at(n);
            let p = params.sttm.map("", &mut take(rest));
            let pos: Vec<Var> = tokens.iter().map(|t| tape.leaf(t.positions.clone())).collect();
            sttm::traced::sttm_forward(tape, tok, &pos, &p)
        })?);
    }
    if wanted("stgm") {
        out.extend(stgm_suite("stgm", &sums, &params.stgm, &cfg.stgm_config(), probe, h)?);
    }
    if wanted("stgm.dense_prune") {
        let dense = StgmConfig {
            prune: dense_prune(),
            ..cfg.stgm_config()
        };
        let p = stgm::StgmParams::init(
            &SeedStream::new(cfg.seed),
            "stgm",
            cfg.d_model,
            cfg.stgm.l_dgc,
            cfg.stgm.edge_hidden,
            dense.prune.slices(),
        );
        let scaled: Vec<Tensor> = sums.iter().map(|s| s.scale(3.0)).collect();
        out.extend(stgm_suite("stgm.dense_prune", &scaled, &p, &dense, probe, h)?);
    }
    if wanted("blender") {
        let seeds = SeedStream::new(cfg.seed);
        let nm = cfg.n * cfg.tokens_per_frame();
        let d = cfg.d_model;
        let leaves = vec![
            ("input.global".to_string(), seeds.uniform("gc.global", &[d, nm], -1.0, 1.0)),
            ("input.local".to_string(), seeds.uniform("gc.local", &[d, nm], -1.0, 1.0)),
            ("blender.w_alpha".to_string(), seeds.uniform("gc.w_alpha", &[2 * d, 2 * d], -1.0, 1.0)),
        ];
        out.extend(check_blocks("blender", leaves, probe, h, |tape, v| {
            blender::traced::blend(tape, v[0], v[1], &blender::BlenderParams { w_alpha: v[2] })
        })?);
    }
    if wanted("pipeline") {
        out.extend(pipeline_suite("pipeline", cfg, probe, h)?);
    }
    if wanted("pipeline.projected") {
        let mut c = cfg.clone();
        c.frame.channels = (cfg.d_model / 2).max(1);
        out.extend(pipeline_suite("pipeline.projected", &c, probe, h)?);
    }
    if wanted("pipeline.sum") {
        out.extend(pipeline_suite("pipeline.sum", cfg, Loss::Sum, h)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_outside_range_falls_back_with_warning() {
        assert_eq!(effective_step(1e-6), (1e-6, None));
        let (h, warn) = effective_step(1e-12);
        assert_eq!(h, DEFAULT_FD_STEP);
        assert!(warn.unwrap().contains("cancellation"));
        assert!(effective_step(f64::NAN).1.is_some());
    }

    #[test]
    fn block_error_uses_absolute_scale_near_zero() {
        let a = Tensor::new(&[2], vec![1e-12, 0.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.0, 1e-12]).unwrap();
        assert!(block_error(&a, &b, ZERO_GRADIENT_FLOOR) < 1e-11);
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0, 2.0 + 1e-3]).unwrap();
        assert!((block_error(&a, &b, ZERO_GRADIENT_FLOOR) - 1e-3 / b.norm()).abs() < 1e-12);
        // FD noise of a loss near 50 at h=1e-5 is about 1e-9 per entry.
        let noise = Tensor::new(&[2], vec![8e-10, -5e-10]).unwrap();
        assert!(block_error(&Tensor::zeros(&[2]), &noise, zero_floor(50.0, 1e-5, 2)) < 1e-5);
    }

    #[test]
    fn quadratic_block_checks_out() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let checks = check_blocks("q", vec![("x".into(), x)], Loss::Sum, 1e-5, |t, v| {
            t.mul(v[0], v[0])
        })
        .unwrap();
        assert!(checks[0].passed(), "{checks:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // Computed off the tape, so the analytic gradient is zero.
        let x = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
        let checks = check_blocks("bad", vec![("x".into(), x)], Loss::Sum, 1e-5, |t, v| {
            let detached = t.value(v[0]).map(|a| a * a);
            Ok(t.leaf(detached))
        })
        .unwrap();
        assert!(!checks[0].passed());
    }

    #[test]
    fn relu_kink_is_stepped_around() {
        let x = Tensor::new(&[2], vec![3e-6, -1.0]).unwrap();
        let checks = check_blocks("k", vec![("x".into(), x)], Loss::Sum, 1e-5, |t, v| {
            Ok(t.relu(v[0]))
        })
        .unwrap();
        assert!(checks[0].passed(), "{checks:?}");
        assert_eq!(checks[0].kink_retries, 1);
    }

    #[test]
    fn oversized_instances_are_rejected() {
        let cfg = PipelineConfig::oracle_preset();
        assert!(matches!(run_suites(&cfg, 1e-5, &[]), Err(Error::Config { .. })));
    }

    #[test]
    fn blender_suite_passes() {
        let cfg = PipelineConfig::gradcheck_preset();
        let checks = run_suites(&cfg, 1e-5, &["blender"]).unwrap();
        assert_eq!(checks.len(), 3);
        assert!(checks.iter().all(BlockCheck::passed), "{checks:?}");
    }
}
