//! Reference implementations written as plain index loops.
//!
//! Nothing here touches the tape or the vectorized tensor kernels, so the
//! results serve as an independent check on the model code.

use crate::blender::BlenderParams;
use crate::stgm::{
    DgclParams, EdgeMlpParams, GraphParams, PruneConfig, StgmConfig, StgmParams, TemporalGraph,
    COSINE_NORM_FLOOR, STANDARDIZE_FLOOR,
};
use crate::sttm::{AttentionParams, FfnParams, SttmParams, LAYER_NORM_EPS};
use crate::tensor::Tensor;
use crate::tokenizer::TokenFrame;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.numel() / t.shape()[0]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).expect("rectangular")
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn mat_vec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Multi-head attention of every row of `queries` over all rows of `frames`.
pub fn mhsa(queries: &Tensor, frames: &[Tensor], p: &AttentionParams) -> Tensor {
    let q = to_mat(queries);
    let keys: Mat = frames.iter().flat_map(to_mat).collect();
    let d = q[0].len();
    let mut out = vec![vec![0.0; d]; q.len()];
    for head in &p.heads {
        let (u, v, wv, wo) = (
            to_mat(&head.u_query),
            to_mat(&head.v_key),
            to_mat(&head.w_value),
            to_mat(&head.w_out),
        );
        let dv = u.len();
        let kproj: Mat = keys.iter().map(|x| mat_vec(&v, x)).collect();
        let vals: Mat = keys.iter().map(|x| mat_vec(&wv, x)).collect();
        for (qi, z) in q.iter().enumerate() {
            let qz = mat_vec(&u, z);
            let logits: Vec<f64> = kproj
                .iter()
                .map(|k| {
                    let mut s = 0.0;
                    for a in 0..dv {
                        s += qz[a] * k[a];
                    }
                    s / (dv as f64).sqrt()
                })
                .collect();
            let o = softmax(&logits);
            let mut agg = vec![0.0; dv];
            for (w, val) in o.iter().zip(&vals) {
                for a in 0..dv {
                    agg[a] += w * val[a];
                }
            }
            let h = mat_vec(&wo, &agg);
            for c in 0..d {
                out[qi][c] += h[c];
            }
        }
    }
    from_mat(&out)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let rows: Mat = to_mat(x)
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| {
                    let z = if var < LAYER_NORM_EPS {
                        0.0
                    } else {
                        (v - mean) / var.sqrt()
                    };
                    z * gamma.data()[j] + beta.data()[j]
                })
                .collect()
        })
        .collect();
    from_mat(&rows)
}

fn ffn(y: &Tensor, p: &FfnParams) -> Tensor {
    let (w1, w2) = (to_mat(&p.w1), to_mat(&p.w2));
    let rows: Mat = to_mat(y)
        .iter()
        .map(|r| {
            let h: Vec<f64> = (0..w1[0].len())
                .map(|k| relu((0..r.len()).map(|i| r[i] * w1[i][k]).sum::<f64>() + p.b1.data()[k]))
                .collect();
            (0..w2[0].len())
                .map(|c| (0..h.len()).map(|k| h[k] * w2[k][c]).sum::<f64>() + p.b2.data()[c])
                .collect()
        })
        .collect();
    from_mat(&rows)
}

pub fn transformer_sublayer(x: &Tensor, sub_out: &Tensor, p: &FfnParams) -> Tensor {
    let y = layer_norm(&x.add(sub_out).unwrap(), &p.norm1_gamma, &p.norm1_beta);
    let r = y.add(&ffn(&y, p)).unwrap();
    layer_norm(&r, &p.norm2_gamma, &p.norm2_beta)
}

pub fn sttm_forward(frames: &[TokenFrame], p: &SttmParams) -> Tensor {
    let mut current: Vec<Tensor> = frames.iter().map(|f| f.tokens.clone()).collect();
    let mut out = Vec::new();
    for layer in &p.layers {
        let inter: Vec<Tensor> = current
            .iter()
            .zip(frames)
            .map(|(x, f)| {
                let z = x.add(&f.positions).unwrap();
                let a = mhsa(&z, std::slice::from_ref(&z), &layer.spatial);
                transformer_sublayer(&z, &a, &layer.spatial_ffn)
            })
            .collect();
        current = inter
            .iter()
            .map(|z| {
                let a = mhsa(z, &inter, &layer.temporal);
                transformer_sublayer(z, &a, &layer.temporal_ffn)
            })
            .collect();
        out = current.iter().flat_map(to_mat).collect();
    }
    from_mat(&out)
}

pub fn edge_scores(r: &Tensor, mlp: &EdgeMlpParams) -> Tensor {
    let x = to_mat(r);
    let (m, f) = (x.len(), x[0].len());
    let mut sd = vec![0.0; f];
    for k in 0..f {
        let mean = (0..m).map(|i| x[i][k]).sum::<f64>() / m as f64;
        let var = (0..m).map(|i| (x[i][k] - mean).powi(2)).sum::<f64>() / m as f64;
        sd[k] = (var + STANDARDIZE_FLOOR).sqrt();
    }
    let norm: Vec<f64> = x
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let (w1, w2) = (to_mat(&mlp.w1), to_mat(&mlp.w2));
    let mut e = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let mut euc = 0.0;
            let mut sec = 0.0;
            for k in 0..f {
                euc += ((x[i][k] - x[j][k]) / sd[k]).powi(2);
                sec += x[i][k] * x[j][k];
            }
            let cos = if norm[i] < COSINE_NORM_FLOOR || norm[j] < COSINE_NORM_FLOOR {
                0.0
            } else {
                sec / (norm[i] * norm[j])
            };
            let feat = [euc.sqrt(), cos, sec];
            let mut s = mlp.b2.data()[0];
            for h in 0..w1[0].len() {
                let a = (0..3).map(|c| feat[c] * w1[c][h]).sum::<f64>() + mlp.b1.data()[h];
                s += relu(a) * w2[h][0];
            }
            e[i][j] = s;
        }
    }
    from_mat(&e)
}

pub fn adjacency(e: &Tensor) -> Tensor {
    from_mat(&to_mat(e).iter().map(|r| softmax(r)).collect())
}

/// `[S, M, M]` adjacency tensor.
pub fn adjacency_tensor(a: &Tensor, cfg: &PruneConfig) -> Tensor {
    let a = to_mat(a);
    let m = a.len();
    let th = &cfg.thresholds;
    let mut data = Vec::with_capacity(th.len() * m * m);
    for s in 0..th.len() {
        for i in 0..m {
            let d = a[i].iter().sum::<f64>() + 1.0;
            for j in 0..m {
                let v = if s == 0 {
                    if i == j {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let p = cfg.lambda * a[i][j] / d;
                    if i != j && th[s - 1] <= p && p < th[s] {
                        a[i][j]
                    } else {
                        0.0
                    }
                };
                data.push(v);
            }
        }
    }
    Tensor::new(&[th.len(), m, m], data).unwrap()
}

pub fn soft_select(stack: &Tensor, logits: &Tensor) -> Tensor {
    let (s, m) = (stack.shape()[0], stack.shape()[1]);
    let w = softmax(logits.data());
    let mut out = vec![vec![0.0; m]; m];
    for (k, wk) in w.iter().enumerate().take(s) {
        for i in 0..m {
            for j in 0..m {
                out[i][j] += wk * stack.data()[k * m * m + i * m + j];
            }
        }
    }
    from_mat(&out)
}

pub fn laplacian_normalize(y: &Tensor) -> Tensor {
    let y = to_mat(y);
    let d: Vec<f64> = y.iter().map(|r| r.iter().sum()).collect();
    let m = y.len();
    from_mat(
        &(0..m)
            .map(|i| (0..m).map(|j| y[i][j] / (d[i].sqrt() * d[j].sqrt())).collect())
            .collect(),
    )
}

pub fn pruned_adjacency(r: &Tensor, g: &GraphParams, cfg: &PruneConfig) -> Tensor {
    let a = adjacency(&edge_scores(r, &g.edge_mlp));
    let stack = adjacency_tensor(&a, cfg);
    let q1 = to_mat(&soft_select(&stack, &g.select1));
    let q2 = to_mat(&soft_select(&stack, &g.select2));
    let mut y = mm(&q1, &q2);
    for (i, row) in y.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    laplacian_normalize(&from_mat(&y))
}

/// `ReLU(W·H·Ā(Hᵀ))` for `H[D×M]`.
pub fn dgcl(h: &Tensor, w: &Tensor, g: &GraphParams, cfg: &PruneConfig) -> Tensor {
    let hm = to_mat(h);
    let abar = to_mat(&pruned_adjacency(&from_mat(&tr(&hm)), g, cfg));
    let out = mm(&mm(&to_mat(w), &hm), &abar);
    from_mat(&out.iter().map(|r| r.iter().map(|&v| relu(v)).collect()).collect())
}

pub fn dgcb(h: &Tensor, p: &DgclParams, cfg: &StgmConfig) -> Tensor {
    let mut x = h.clone();
    for w in &p.weights {
        x = dgcl(&x, w, &p.graph, &cfg.prune);
    }
    let res = h.map(|v| v * cfg.rho);
    if p.weights.is_empty() {
        res
    } else {
        x.add(&res).unwrap()
    }
}

/// Local features `[(N·M)×D]`, frame-major.
pub fn stgm_forward(frames: &[TokenFrame], p: &StgmParams, cfg: &StgmConfig) -> Tensor {
    let (n, m) = (frames.len(), frames[0].len());
    // inter[f] is D×M
    let inter: Vec<Mat> = frames
        .iter()
        .map(|f| {
            let h = from_mat(&tr(&to_mat(&f.summed())));
            to_mat(&dgcb(&h, &p.spatial, cfg))
        })
        .collect();
    let d = inter[0].len();
    let mut out = vec![vec![0.0; d]; n * m];
    match cfg.temporal_graph {
        TemporalGraph::Full => {
            let all: Mat = (0..d)
                .map(|c| (0..n * m).map(|k| inter[k / m][c][k % m]).collect())
                .collect();
            let t = to_mat(&dgcb(&from_mat(&all), &p.temporal, cfg));
            for k in 0..n * m {
                for c in 0..d {
                    out[k][c] = t[c][k];
                }
            }
        }
        TemporalGraph::PerLocation => {
            for loc in 0..m {
                let h: Mat = (0..d).map(|c| (0..n).map(|f| inter[f][c][loc]).collect()).collect();
                let t = to_mat(&dgcb(&from_mat(&h), &p.temporal, cfg));
                for f in 0..n {
                    for c in 0..d {
                        out[f * m + loc][c] = t[c][f];
                    }
                }
            }
        }
    }
    from_mat(&out)
}

/// Two-logit softmax per entry; `g`, `l` are `D×K`.
pub fn blend_weights(g: &Tensor, l: &Tensor, p: &BlenderParams) -> (Tensor, Tensor) {
    let (gm, lm, w) = (to_mat(g), to_mat(l), to_mat(&p.w_alpha));
    let (d, k) = (gm.len(), gm[0].len());
    let mut agf = vec![vec![0.0; k]; d];
    let mut alf = vec![vec![0.0; k]; d];
    for i in 0..d {
        for c in 0..k {
            let (mut y1, mut y2) = (0.0, 0.0);
            for j in 0..2 * d {
                let x = if j < d { gm[j][c] } else { lm[j - d][c] };
                y1 += w[i][j] * x;
                y2 += w[i + d][j] * x;
            }
            let s = softmax(&[y1, y2]);
            agf[i][c] = s[0];
            alf[i][c] = s[1];
        }
    }
    (from_mat(&agf), from_mat(&alf))
}

pub fn blend(g: &Tensor, l: &Tensor, p: &BlenderParams) -> Tensor {
    let (agf, alf) = blend_weights(g, l, p);
    Tensor::from_fn(g.shape(), |i| {
        let (r, c) = (i[0], i[1]);
        agf.at(r, c) * g.at(r, c) + alf.at(r, c) * l.at(r, c)
    })
}
