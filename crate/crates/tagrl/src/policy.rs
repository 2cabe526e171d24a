//! Policy over feasible next hops: encoder states feed a one-hidden-layer
//! scoring head, softmaxed over the feasible set. Holds the full parameter
//! bundle, its gradient mirror, flattening for the optimizer, and the
//! hand-written backward pass through head, aggregation, and encoder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::{LogicalGraph, NodeId};
use crate::linalg::{self, Mat};
use crate::rng;
use crate::sase::{
    self, encode_states_traced, AttentionTrace, EncoderConfig, EncoderGrads, EncoderParams,
    EncoderTrace,
};

/// Hidden width of the scoring head.
pub const HEAD_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub encoder: EncoderConfig,
}

impl PolicyConfig {
    /// Head input: `[z_current ‖ s_current ‖ z_candidate ‖ ttl ‖ demand]`.
    pub fn head_input_width(&self) -> usize {
        3 * self.encoder.state_width() + 2
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub encoder: EncoderParams,
    pub head_w1: Mat,
    pub head_b1: Vec<f64>,
    pub head_w2: Vec<f64>,
    pub head_b2: f64,
}

impl PolicyParams {
    /// Seeded init. The head is always sampled at structure-aware width and
    /// sliced down for the plain variant, so ablation variants share every
    /// entry whose position exists in both (the extra positional rows are
    /// the freshly seeded remainder).
    pub fn init(seed: u64, config: &PolicyConfig) -> PolicyParams {
        let enc = &config.encoder;
        let full_w = enc.h + enc.k;
        let full_rows = 3 * full_w + 2;
        let bound = (6.0 / (full_rows + HEAD_HIDDEN) as f64).sqrt();
        let mut rand = rng::stream(seed, "init.head_w1", &[]);
        use rand::Rng;
        let full_head = Mat::from_fn(full_rows, HEAD_HIDDEN, |_, _| {
            rand.random_range(-bound..bound)
        });
        let head_w1 = if enc.structure_aware {
            full_head
        } else {
            // Keep the GCN block of each state slot plus the two scalars.
            let keep: Vec<usize> = (0..enc.h)
                .chain(full_w..full_w + enc.h)
                .chain(2 * full_w..2 * full_w + enc.h)
                .chain([3 * full_w, 3 * full_w + 1])
                .collect();
            Mat::from_fn(keep.len(), HEAD_HIDDEN, |i, j| full_head[(keep[i], j)])
        };
        let w2_bound = (6.0 / (HEAD_HIDDEN + 1) as f64).sqrt();
        let mut rand = rng::stream(seed, "init.head_w2", &[]);
        PolicyParams {
            encoder: EncoderParams::init(seed, enc),
            head_w1,
            head_b1: vec![0.0; HEAD_HIDDEN],
            head_w2: (0..HEAD_HIDDEN)
                .map(|_| rand.random_range(-w2_bound..w2_bound))
                .collect(),
            head_b2: 0.0,
        }
    }

    pub fn num_params(&self) -> usize {
        let e = &self.encoder;
        e.w_in.data().len()
            + e.w0.data().len()
            + e.w1.data().len()
            + e.att_w.as_ref().map_or(0, |m| m.data().len())
            + e.att_a.as_ref().map_or(0, Vec::len)
            + self.head_w1.data().len()
            + self.head_b1.len()
            + self.head_w2.len()
            + 1
    }

    /// Deterministic flattening order shared with [`ParamGrads::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        let e = &self.encoder;
        out.extend_from_slice(e.w_in.data());
        out.extend_from_slice(e.w0.data());
        out.extend_from_slice(e.w1.data());
        if let Some(m) = &e.att_w {
            out.extend_from_slice(m.data());
        }
        if let Some(a) = &e.att_a {
            out.extend_from_slice(a);
        }
        out.extend_from_slice(self.head_w1.data());
        out.extend_from_slice(&self.head_b1);
        out.extend_from_slice(&self.head_w2);
        out.push(self.head_b2);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut cursor = 0usize;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[cursor..cursor + dst.len()]);
            cursor += dst.len();
        };
        let e = &mut self.encoder;
        take(e.w_in.data_mut());
        take(e.w0.data_mut());
        take(e.w1.data_mut());
        if let Some(m) = &mut e.att_w {
            take(m.data_mut());
        }
        if let Some(a) = &mut e.att_a {
            take(a);
        }
        take(self.head_w1.data_mut());
        take(&mut self.head_b1);
        take(&mut self.head_w2);
        self.head_b2 = flat[cursor];
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Sum of squares over every parameter (the weight-decay term).
    pub fn squared_norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum()
    }
}

/// Gradient accumulator mirroring [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub encoder: EncoderGrads,
    pub head_w1: Mat,
    pub head_b1: Vec<f64>,
    pub head_w2: Vec<f64>,
    pub head_b2: f64,
}

impl ParamGrads {
    pub fn zeros_like(params: &PolicyParams) -> ParamGrads {
        ParamGrads {
            encoder: EncoderGrads::zeros_like(&params.encoder),
            head_w1: Mat::zeros(params.head_w1.rows(), params.head_w1.cols()),
            head_b1: vec![0.0; params.head_b1.len()],
            head_w2: vec![0.0; params.head_w2.len()],
            head_b2: 0.0,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let e = &self.encoder;
        out.extend_from_slice(e.w_in.data());
        out.extend_from_slice(e.w0.data());
        out.extend_from_slice(e.w1.data());
        if let Some(m) = &e.att_w {
            out.extend_from_slice(m.data());
        }
        if let Some(a) = &e.att_a {
            out.extend_from_slice(a);
        }
        out.extend_from_slice(self.head_w1.data());
        out.extend_from_slice(&self.head_b1);
        out.extend_from_slice(&self.head_w2);
        out.push(self.head_b2);
        out
    }
}

/// Everything needed to re-evaluate one routing decision: the feature
/// snapshot, the logical graph view at capture time, and the flow scalars.
/// Self-contained so snapshots can replay decisions after the live graph
/// has moved on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionContext {
    pub x_raw: Mat,
    pub ahat: Arc<Mat>,
    pub neighbors: Arc<Vec<Vec<NodeId>>>,
    pub current: NodeId,
    pub feasible: Vec<NodeId>,
    pub ttl_fraction: f64,
    pub demand_norm: f64,
}

/// Precomputed per-graph quantities shared by every decision in an epoch.
#[derive(Debug, Clone)]
pub struct GraphView {
    pub ahat: Arc<Mat>,
    pub neighbors: Arc<Vec<Vec<NodeId>>>,
}

impl GraphView {
    pub fn new(logical: &LogicalGraph) -> GraphView {
        GraphView {
            ahat: Arc::new(crate::graph::normalize_adjacency(&logical.adjacency())),
            neighbors: Arc::new(logical.neighbor_lists()),
        }
    }
}

/// Forward intermediates for one decision.
#[derive(Debug, Clone)]
pub struct DecisionTrace {
    pub enc: EncoderTrace,
    pub att: Option<AttentionTrace>,
    /// Aggregated states in plain mode (attention trace carries them
    /// otherwise).
    pub s_mean: Option<Mat>,
    /// Per-candidate hidden pre-activations.
    pub head_pre: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl DecisionTrace {
    pub fn aggregated(&self) -> &Mat {
        match &self.att {
            Some(att) => &att.s,
            None => self.s_mean.as_ref().expect("aggregation output"),
        }
    }
}

/// Score one candidate: `w2 · ReLU(v · W1 + b1) + b2` for the head input
/// `v = [z_c ‖ s_c ‖ z_u ‖ ttl ‖ demand]`.
fn head_score(
    params: &PolicyParams,
    z_c: &[f64],
    s_c: &[f64],
    z_u: &[f64],
    ttl_fraction: f64,
    demand_norm: f64,
) -> (Vec<f64>, f64) {
    let w1 = &params.head_w1;
    let hidden = params.head_b1.clone();
    let mut pre = hidden;
    let mut row = 0usize;
    for block in [z_c, s_c, z_u] {
        for &v in block {
            if v != 0.0 {
                linalg::axpy(&mut pre, w1.row(row), v);
            }
            row += 1;
        }
    }
    linalg::axpy(&mut pre, w1.row(row), ttl_fraction);
    linalg::axpy(&mut pre, w1.row(row + 1), demand_norm);
    let score = pre
        .iter()
        .zip(&params.head_w2)
        .map(|(&p, &w)| linalg::relu(p) * w)
        .sum::<f64>()
        + params.head_b2;
    (pre, score)
}

/// Action distribution over the feasible set, per the spec head: softmax of
/// per-candidate scores; infeasible actions carry probability exactly 0 by
/// never being scored.
pub fn policy_forward(
    z: &Mat,
    s: &Mat,
    current: NodeId,
    feasible: &[NodeId],
    ttl_fraction: f64,
    demand_norm: f64,
    params: &PolicyParams,
) -> (Vec<f64>, Vec<f64>) {
    assert!(!feasible.is_empty(), "policy_forward needs candidates");
    let scores: Vec<f64> = feasible
        .iter()
        .map(|u| {
            head_score(
                params,
                z.row(current.0),
                s.row(current.0),
                z.row(u.0),
                ttl_fraction,
                demand_norm,
            )
            .1
        })
        .collect();
    (linalg::softmax(&scores), linalg::log_softmax(&scores))
}

/// Full forward pass for one decision, keeping every intermediate for the
/// backward pass.
pub fn evaluate_decision(
    params: &PolicyParams,
    config: &PolicyConfig,
    positional: Option<&Mat>,
    ctx: &DecisionContext,
) -> DecisionTrace {
    assert!(!ctx.feasible.is_empty(), "decision requires candidates");
    let enc_cfg = &config.encoder;
    debug_assert_eq!(enc_cfg.structure_aware, positional.is_some());
    let enc = encode_states_traced(&ctx.x_raw, &ctx.ahat, positional, &params.encoder);
    let (att, s_mean) = if enc_cfg.structure_aware {
        let mut att_logical_trace = None;
        // The attention trace wants a LogicalGraph-shaped neighbor view.
        let att_trace = attention_over_lists(
            &enc.z,
            &ctx.neighbors,
            &params.encoder,
            enc_cfg.leaky_slope,
        );
        att_logical_trace.replace(att_trace);
        (att_logical_trace, None)
    } else {
        (None, Some(sase::mean_aggregate(&enc.z, &ctx.neighbors)))
    };

    let s = match &att {
        Some(att) => &att.s,
        None => s_mean.as_ref().unwrap(),
    };
    let mut head_pre = Vec::with_capacity(ctx.feasible.len());
    let mut scores = Vec::with_capacity(ctx.feasible.len());
    for u in &ctx.feasible {
        let (pre, score) = head_score(
            params,
            enc.z.row(ctx.current.0),
            s.row(ctx.current.0),
            enc.z.row(u.0),
            ctx.ttl_fraction,
            ctx.demand_norm,
        );
        head_pre.push(pre);
        scores.push(score);
    }
    let probs = linalg::softmax(&scores);
    let log_probs = linalg::log_softmax(&scores);
    DecisionTrace {
        enc,
        att,
        s_mean,
        head_pre,
        scores,
        probs,
        log_probs,
    }
}

/// Attention aggregation over precomputed neighbor lists (the hot-path
/// variant of [`sase::attention_aggregate_traced`]).
fn attention_over_lists(
    z: &Mat,
    neighbors: &Arc<Vec<Vec<NodeId>>>,
    params: &EncoderParams,
    leaky_slope: f64,
) -> AttentionTrace {
    // Rebuild a LogicalGraph-free trace by inlining the same math.
    let att_w = params.att_w.as_ref().expect("attention parameters");
    let att_a = params.att_a.as_ref().expect("attention parameters");
    let n = z.rows();
    let width = z.cols();
    let (a1, a2) = att_a.split_at(width);

    let mut t = Mat::zeros(n, width);
    let mut q = vec![0.0; n];
    let mut r = vec![0.0; n];
    for v in 0..n {
        let tv = att_w.matvec(z.row(v));
        q[v] = linalg::dot(a1, &tv);
        r[v] = linalg::dot(a2, &tv);
        t.row_mut(v).copy_from_slice(&tv);
    }
    let mut pre = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut s = Mat::zeros(n, width);
    for i in 0..n {
        let nbrs = &neighbors[i];
        if nbrs.is_empty() {
            pre.push(Vec::new());
            alpha.push(Vec::new());
            continue;
        }
        let logits: Vec<f64> = nbrs.iter().map(|j| q[i] + r[j.0]).collect();
        let acts: Vec<f64> = logits
            .iter()
            .map(|&x| linalg::leaky_relu(x, leaky_slope))
            .collect();
        let weights = linalg::softmax(&acts);
        let row = s.row_mut(i);
        for (j, &w) in nbrs.iter().zip(&weights) {
            linalg::axpy(row, z.row(j.0), w);
        }
        pre.push(logits);
        alpha.push(weights);
    }
    AttentionTrace {
        neighbors: neighbors.as_ref().clone(),
        t,
        q,
        r,
        pre,
        alpha,
        s,
    }
}

/// Backward for one decision given `dL/dscore` per candidate. Adds into
/// `grads`.
pub fn decision_backward(
    trace: &DecisionTrace,
    ctx: &DecisionContext,
    config: &PolicyConfig,
    params: &PolicyParams,
    g_scores: &[f64],
    grads: &mut ParamGrads,
) {
    let width = config.encoder.state_width();
    let n = trace.enc.z.rows();
    let s = trace.aggregated();
    let z = &trace.enc.z;
    let mut g_z = Mat::zeros(n, width);
    let mut g_s = Mat::zeros(n, width);

    for ((u, &g_score), pre) in ctx.feasible.iter().zip(g_scores).zip(&trace.head_pre) {
        if g_score == 0.0 {
            continue;
        }
        grads.head_b2 += g_score;
        // g_hidden = g_score · w2 ⊙ relu'(pre)
        let g_hidden: Vec<f64> = pre
            .iter()
            .zip(&params.head_w2)
            .map(|(&p, &w)| if p > 0.0 { g_score * w } else { 0.0 })
            .collect();
        for (gw2, &p) in grads.head_w2.iter_mut().zip(pre) {
            *gw2 += g_score * linalg::relu(p);
        }
        linalg::axpy(&mut grads.head_b1, &g_hidden, 1.0);

        // Head input layout: [z_c ‖ s_c ‖ z_u ‖ ttl ‖ demand].
        let z_c = z.row(ctx.current.0);
        let s_c = s.row(ctx.current.0);
        let z_u = z.row(u.0);
        let mut row = 0usize;
        for block in [z_c, s_c, z_u] {
            for &v in block {
                if v != 0.0 {
                    grads.head_w1.row_mut(row).iter_mut().zip(&g_hidden).for_each(
                        |(g, &gh)| *g += v * gh,
                    );
                }
                row += 1;
            }
        }
        grads
            .head_w1
            .row_mut(row)
            .iter_mut()
            .zip(&g_hidden)
            .for_each(|(g, &gh)| *g += ctx.ttl_fraction * gh);
        grads
            .head_w1
            .row_mut(row + 1)
            .iter_mut()
            .zip(&g_hidden)
            .for_each(|(g, &gh)| *g += ctx.demand_norm * gh);

        // g_v = W1 · g_hidden, split back onto z and s rows.
        let g_v = params.head_w1.matvec(&g_hidden);
        linalg::axpy(g_z.row_mut(ctx.current.0), &g_v[..width], 1.0);
        linalg::axpy(g_s.row_mut(ctx.current.0), &g_v[width..2 * width], 1.0);
        linalg::axpy(g_z.row_mut(u.0), &g_v[2 * width..3 * width], 1.0);
    }

    match &trace.att {
        Some(att) => sase::attention_backward(
            att,
            z,
            &params.encoder,
            config.encoder.leaky_slope,
            &g_s,
            &mut g_z,
            &mut grads.encoder,
        ),
        None => sase::mean_aggregate_backward(&ctx.neighbors, &g_s, &mut g_z),
    }
    sase::encoder_backward(
        &trace.enc,
        &ctx.x_raw,
        &ctx.ahat,
        &g_z,
        &params.encoder,
        &mut grads.encoder,
    );
}
