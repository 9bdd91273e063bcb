//! Vectorized kernels against their loop oracles on one seeded instance.

use crate::blender;
use crate::error::Result;
use crate::oracle;
use crate::pipeline::{self, synth_sequence, ModelParams, PipelineConfig};
use crate::rng::SeedStream;
use crate::stgm::{self, PruneConfig};
use crate::sttm;
use crate::tensor::Tensor;

/// Tolerance for single kernels.
pub const KERNEL_TOL: f64 = 1e-10;
/// Tolerance for composed modules.
pub const COMPOSED_TOL: f64 = 1e-9;
/// Tolerance for kernels without reductions across long chains.
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < self.tolerance
    }
}

/// Thresholds loose enough that edges survive pruning at random init.
pub fn dense_prune() -> PruneConfig {
    PruneConfig {
        thresholds: vec![0.05, 0.3, 1.0],
        lambda: 1.9,
    }
}

/// Runs every kernel on the window synthesized from `cfg.seed`. With
/// `inject_fault`, one attention weight is nudged by `1e-3` after the oracle
/// outputs are captured.
pub fn oracle_suite(cfg: &PipelineConfig, inject_fault: bool) -> Result<Vec<KernelCheck>> {
    let pristine = ModelParams::init(cfg)?;
    let frames = synth_sequence(cfg, cfg.seed)?;
    let tokens = pipeline::tokenize_window(&frames, pristine.proj.as_ref())?;
    let sums: Vec<Tensor> = tokens.iter().map(|t| t.summed()).collect();
    let stgm_cfg = cfg.stgm_config();
    let dense = dense_prune();
    let layer = &pristine.sttm.layers[0];
    let graph = &pristine.stgm.spatial.graph;
    let w = pristine
        .stgm
        .spatial
        .weights
        .first()
        .cloned()
        .unwrap_or_else(|| SeedStream::new(cfg.seed).init("verify.w", &[cfg.d_model; 2], cfg.d_model));
    let h = sums[0].transpose()?;
    let z1 = &sums[sums.len().min(2) - 1];

    let spat = oracle::mhsa(&sums[0], std::slice::from_ref(&sums[0]), &layer.spatial);
    let want = vec![
        spat.clone(),
        oracle::mhsa(z1, &sums, &layer.temporal),
        oracle::transformer_sublayer(&sums[0], &spat, &layer.spatial_ffn),
        oracle::sttm_forward(&tokens, &pristine.sttm),
        oracle::edge_scores(&sums[0], &graph.edge_mlp),
        oracle::adjacency_tensor(&oracle::adjacency(&oracle::edge_scores(&sums[0], &graph.edge_mlp)), &stgm_cfg.prune),
        oracle::pruned_adjacency(&sums[0], graph, &stgm_cfg.prune),
        oracle::pruned_adjacency(&sums[0], graph, &dense),
        oracle::dgcl(&h, &w, graph, &stgm_cfg.prune),
        oracle::stgm_forward(&tokens, &pristine.stgm, &stgm_cfg),
    ];
    let g = oracle::sttm_forward(&tokens, &pristine.sttm).transpose()?;
    let l = oracle::stgm_forward(&tokens, &pristine.stgm, &stgm_cfg).transpose()?;
    let blend_want = oracle::blend(&g, &l, &pristine.blender);

    let mut params = pristine.clone();
    if inject_fault {
        let u = &mut params.sttm.layers[0].spatial.heads[0].u_query;
        u.data_mut()[0] += 1e-3;
    }
    let layer = &params.sttm.layers[0];
    let graph = &params.stgm.spatial.graph;
    let got = [
        ("spat_mhsa", KERNEL_TOL, sttm::spat_mhsa(&sums[0], &layer.spatial)?),
        ("temp_mhsa", KERNEL_TOL, sttm::temp_mhsa(z1, &sums, &layer.temporal)?),
        (
            "transformer_sublayer",
            KERNEL_TOL,
            sttm::transformer_sublayer(&sums[0], &spat, &layer.spatial_ffn)?,
        ),
        ("sttm_forward", COMPOSED_TOL, sttm::sttm_forward(&tokens, &params.sttm)?),
        ("edge_scores", KERNEL_TOL, stgm::edge_scores(&sums[0], &graph.edge_mlp)?),
        (
            "adjacency_tensor",
            EXACT_TOL,
            stgm::adjacency_tensor(
                &stgm::adjacency(&stgm::edge_scores(&sums[0], &graph.edge_mlp)?)?,
                &stgm_cfg.prune,
            )?,
        ),
        ("pruned_adjacency", KERNEL_TOL, stgm::pruned_adjacency(&sums[0], graph, &stgm_cfg.prune)?),
        ("pruned_adjacency.dense", KERNEL_TOL, stgm::pruned_adjacency(&sums[0], graph, &dense)?),
        ("dgcl", KERNEL_TOL, stgm::dgcl(&h, &w, graph, &stgm_cfg.prune)?),
        ("stgm_forward", COMPOSED_TOL, stgm::stgm_forward(&tokens, &params.stgm, &stgm_cfg)?),
    ];
    let mut checks: Vec<KernelCheck> = got
        .iter()
        .zip(&want)
        .map(|((kernel, tolerance, out), want)| KernelCheck {
            kernel,
            max_abs_diff: out.max_abs_diff(want),
            tolerance: *tolerance,
        })
        .collect();

    checks.push(KernelCheck {
        kernel: "blend",
        max_abs_diff: blender::blend(&g, &l, &params.blender)?.max_abs_diff(&blend_want),
        tolerance: EXACT_TOL,
    });
    let (b, _) = pipeline::run_pipeline(&frames, cfg, &params)?;
    checks.push(KernelCheck {
        kernel: "pipeline",
        max_abs_diff: b.max_abs_diff(&blend_want),
        tolerance: COMPOSED_TOL,
    });
    Ok(checks)
}
