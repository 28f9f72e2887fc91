//! Morphology-conditioned actor-critic policies.
//!
//! Both backbones consume the 48-dim observation tokens projected to a
//! shared d-dimensional space. The MLP zero-fills masked slots, flattens,
//! and runs dense layers; the transformer runs a pre-norm encoder with
//! attention masked to valid tokens. Action heads emit either per-joint
//! Gaussian means with one learned log-std, or per-joint logits over
//! exponentially spaced bins. The critic shares the token encoder and reads
//! a pooled feature; its shadow (EMA) weights live beside the live ones.

use crate::env::{Observation, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::morphology::JointKind;
use crate::nn::{GradBuf, Graph, Mat, NodeId, ParamSet};
use crate::token::{LinkToken, SLOT_JOINT_ONEHOT, TOKEN_DIM};
use crate::util::seed_stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

// --- symlog -----------------------------------------------------------------

pub fn symlog(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * (1.0 + x.abs()).ln()
    }
}

pub fn symexp(y: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y.signum() * (y.abs().exp() - 1.0)
    }
}

// --- discrete action bins ----------------------------------------------------

/// Exponentially spaced bin values around zero: {0} and +-delta_min * r^i,
/// with r solved so the largest bin equals dq_max. Sorted ascending.
pub fn discretize_bins(b: usize, delta_min: f64, dq_max: f64) -> Result<Vec<f64>> {
    if b < 3 || b % 2 == 0 {
        return Err(Error::Config(format!("bin count {b} must be odd and >= 3")));
    }
    if !(delta_min > 0.0) || !(dq_max > 0.0) {
        return Err(Error::Config("bin bounds must be positive".into()));
    }
    let per_side = (b - 1) / 2;
    if per_side > 1 && delta_min >= dq_max {
        return Err(Error::Config(format!(
            "infeasible bins: delta_min {delta_min} >= dq_max {dq_max}"
        )));
    }
    if per_side == 1 && delta_min > dq_max {
        return Err(Error::Config("infeasible bins: delta_min > dq_max".into()));
    }
    let mut positive = Vec::with_capacity(per_side);
    if per_side == 1 {
        positive.push(dq_max);
    } else {
        let ratio = (dq_max / delta_min).powf(1.0 / (per_side - 1) as f64);
        for i in 0..per_side {
            positive.push(delta_min * ratio.powi(i as i32));
        }
        // Pin the endpoint exactly.
        positive[per_side - 1] = dq_max;
    }
    let mut bins = Vec::with_capacity(b);
    for &v in positive.iter().rev() {
        bins.push(-v);
    }
    bins.push(0.0);
    bins.extend(positive.iter().copied());
    Ok(bins)
}

// --- configuration -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionHeadKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueTransform {
    Identity,
    Symlog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub backbone: Backbone,
    pub action_head: ActionHeadKind,
    pub value_transform: ValueTransform,
    pub d_model: usize,
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub tf_ff: usize,
    pub mlp_hidden: Vec<usize>,
    pub bins: usize,
    pub delta_min: f64,
    pub dq_max_revolute: f64,
    pub dq_max_prismatic: f64,
    pub pointcloud_encoder: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            backbone: Backbone::Mlp,
            action_head: ActionHeadKind::Continuous,
            value_transform: ValueTransform::Identity,
            d_model: 64,
            tf_layers: 2,
            tf_heads: 4,
            tf_ff: 128,
            mlp_hidden: vec![256, 256],
            bins: 11,
            delta_min: 0.001,
            dq_max_revolute: 0.05,
            dq_max_prismatic: 0.02,
            pointcloud_encoder: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.tf_heads != 0 {
            return Err(Error::Config(
                "d_model must be a positive multiple of tf_heads".into(),
            ));
        }
        discretize_bins(self.bins, self.delta_min, self.dq_max_revolute)?;
        discretize_bins(self.bins, self.delta_min, self.dq_max_prismatic)?;
        if self.mlp_hidden.is_empty() {
            return Err(Error::Config("mlp_hidden must not be empty".into()));
        }
        Ok(())
    }

    pub fn dq_max_for(&self, kind: JointKind) -> f64 {
        match kind {
            JointKind::Prismatic => self.dq_max_prismatic,
            _ => self.dq_max_revolute,
        }
    }

    fn head_width(&self) -> usize {
        match self.action_head {
            ActionHeadKind::Continuous => 1,
            ActionHeadKind::Discrete => self.bins,
        }
    }
}

// --- distributions -----------------------------------------------------------

/// Per-joint action distribution over movable joints; masked joints emit
/// exactly zero with no log-prob contribution.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDistribution {
    Continuous {
        mean: Vec<f64>,
        log_std: f64,
        movable: Vec<bool>,
    },
    Discrete {
        /// probs[j] over bin values[j]; empty for masked joints.
        probs: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        movable: Vec<bool>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

fn gaussian_log_pdf(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Draw an action; returns (per-joint deltas, joint log-prob, chosen bins).
/// The bin indices are only populated for the discrete head.
pub fn sample_action(
    dist: &ActionDistribution,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64, Vec<usize>) {
    match dist {
        ActionDistribution::Continuous { mean, log_std, movable } => {
            let mut dq = vec![0.0; mean.len()];
            let mut lp = 0.0;
            for j in 0..mean.len() {
                if !movable[j] {
                    continue;
                }
                let x = match mode {
                    SampleMode::Deterministic => mean[j],
                    SampleMode::Stochastic => {
                        // Box-Muller from two uniform draws.
                        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                        mean[j] + log_std.exp() * z
                    }
                };
                lp += gaussian_log_pdf(x, mean[j], *log_std);
                dq[j] = x;
            }
            (dq, lp, Vec::new())
        }
        ActionDistribution::Discrete { probs, values, movable } => {
            let mut dq = vec![0.0; probs.len()];
            let mut bins = vec![0usize; probs.len()];
            let mut lp = 0.0;
            for j in 0..probs.len() {
                if !movable[j] {
                    continue;
                }
                let p = &probs[j];
                let k = match mode {
                    SampleMode::Deterministic => {
                        let mut best = 0;
                        for (i, &pi) in p.iter().enumerate() {
                            if pi > p[best] {
                                best = i;
                            }
                        }
                        best
                    }
                    SampleMode::Stochastic => {
                        let u: f64 = rng.gen_range(0.0..1.0);
                        let mut acc = 0.0;
                        let mut chosen = p.len() - 1;
                        for (i, &pi) in p.iter().enumerate() {
                            acc += pi;
                            if u < acc {
                                chosen = i;
                                break;
                            }
                        }
                        chosen
                    }
                };
                bins[j] = k;
                dq[j] = values[j][k];
                lp += p[k].max(1e-300).ln();
            }
            (dq, lp, bins)
        }
    }
}

/// Sum of per-movable-joint entropies.
pub fn entropy(dist: &ActionDistribution) -> f64 {
    match dist {
        ActionDistribution::Continuous { log_std, movable, .. } => {
            let count = movable.iter().filter(|&&m| m).count() as f64;
            count * (log_std + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
        }
        ActionDistribution::Discrete { probs, movable, .. } => {
            let mut h = 0.0;
            for (p, &m) in probs.iter().zip(movable) {
                if !m {
                    continue;
                }
                for &pi in p {
                    if pi > 0.0 {
                        h -= pi * pi.ln();
                    }
                }
            }
            h
        }
    }
}

// --- the network --------------------------------------------------------------

pub struct PolicyNet {
    pub cfg: PolicyConfig,
    pub params: ParamSet,
    /// Shadow copy of the value head ("slow critic").
    pub ema_value: ParamSet,
    /// Env-interaction counter carried into checkpoints.
    pub step: u64,
}

pub struct PolicyOutput {
    pub dist: ActionDistribution,
    pub value_raw: f64,
    pub value_raw_ema: f64,
}

struct BucketNodes {
    /// (S x slots*head_width) action head output.
    head: NodeId,
    /// (S x 1) live value.
    value: NodeId,
    /// (S x feat) pooled features feeding the value head.
    pooled: NodeId,
    slots: usize,
}

/// Sequence length of an observation (tokens plus cloud objects).
fn seq_len(obs: &Observation) -> usize {
    obs.tokens.len() + obs.clouds.as_ref().map(|c| c.len()).unwrap_or(0)
}

fn joint_kind_of_token(token: &LinkToken) -> JointKind {
    let one = &token[SLOT_JOINT_ONEHOT];
    if one[0] == 1.0 {
        JointKind::Prismatic
    } else if one[2] == 1.0 {
        JointKind::Fixed
    } else {
        JointKind::Revolute
    }
}

impl PolicyNet {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed_stream(seed, &[0x9017]);
        let mut p = ParamSet::new();
        let d = cfg.d_model;
        p.add_glorot("enc.w", TOKEN_DIM, d, 1.0, &mut rng);
        p.add_zeros("enc.b", 1, d);
        if cfg.pointcloud_encoder {
            p.add_glorot("pc.w", 3, d, 1.0, &mut rng);
            p.add_zeros("pc.b", 1, d);
        }
        let feat = match cfg.backbone {
            Backbone::Mlp => {
                let mut prev = MAX_TOKENS * d;
                for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
                    p.add_glorot(&format!("mlp.{i}.w"), prev, h, 1.0, &mut rng);
                    p.add_zeros(&format!("mlp.{i}.b"), 1, h);
                    prev = h;
                }
                prev
            }
            Backbone::Transformer => {
                for l in 0..cfg.tf_layers {
                    p.add_const(&format!("tf.{l}.ln1.g"), 1, d, 1.0);
                    p.add_zeros(&format!("tf.{l}.ln1.b"), 1, d);
                    for w in ["wq", "wk", "wv", "wo"] {
                        p.add_glorot(&format!("tf.{l}.attn.{w}"), d, d, 1.0, &mut rng);
                    }
                    for b in ["bq", "bk", "bv", "bo"] {
                        p.add_zeros(&format!("tf.{l}.attn.{b}"), 1, d);
                    }
                    p.add_const(&format!("tf.{l}.ln2.g"), 1, d, 1.0);
                    p.add_zeros(&format!("tf.{l}.ln2.b"), 1, d);
                    p.add_glorot(&format!("tf.{l}.ff.w1"), d, cfg.tf_ff, 1.0, &mut rng);
                    p.add_zeros(&format!("tf.{l}.ff.b1"), 1, cfg.tf_ff);
                    p.add_glorot(&format!("tf.{l}.ff.w2"), cfg.tf_ff, d, 1.0, &mut rng);
                    p.add_zeros(&format!("tf.{l}.ff.b2"), 1, d);
                }
                p.add_const("tf.lnf.g", 1, d, 1.0);
                p.add_zeros("tf.lnf.b", 1, d);
                d
            }
        };
        let head_out = match cfg.backbone {
            Backbone::Mlp => MAX_TOKENS * cfg.head_width(),
            Backbone::Transformer => cfg.head_width(),
        };
        // Small-init policy head keeps the initial policy near-uniform.
        p.add_glorot("pi.w", feat, head_out, 0.01, &mut rng);
        p.add_zeros("pi.b", 1, head_out);
        if cfg.action_head == ActionHeadKind::Continuous {
            p.add_const("pi.log_std", 1, 1, (0.5 * cfg.dq_max_revolute).ln());
        }
        p.add_glorot("v.w", feat, 1, 1.0, &mut rng);
        p.add_zeros("v.b", 1, 1);

        let ema_value = p.subset("v.");
        Ok(PolicyNet {
            cfg,
            params: p,
            ema_value,
            step: 0,
        })
    }

    fn slots_for(&self, n_tokens: usize) -> usize {
        match self.cfg.backbone {
            Backbone::Mlp => MAX_TOKENS,
            Backbone::Transformer => n_tokens,
        }
    }

    /// Build the forward graph for one bucket of equal-sequence-length
    /// observations.
    fn forward_bucket(&self, g: &mut Graph, obs: &[&Observation]) -> Result<BucketNodes> {
        let s = obs.len();
        let n = seq_len(obs[0]);
        let d = self.cfg.d_model;

        let mut tokens = Mat::zeros((s * n, TOKEN_DIM));
        let mut mask = Mat::zeros((s, n));
        let mut row_scale = vec![0.0; s * n];
        // (sample, flat row, object index) positions carrying cloud embeddings.
        let mut cloud_rows: Vec<(usize, usize, usize)> = Vec::new();

        for (i, ob) in obs.iter().enumerate() {
            let sl = seq_len(ob);
            if sl > n {
                return Err(Error::Shape(format!(
                    "observation with {sl} tokens in bucket of {n}"
                )));
            }
            let n_links = ob.n_links;
            let mut row = 0;
            for t in 0..n_links {
                for c in 0..TOKEN_DIM {
                    tokens[[i * n + row, c]] = ob.tokens[t][c];
                }
                row_scale[i * n + row] = 1.0;
                mask[[i, row]] = 1.0;
                row += 1;
            }
            if let Some(clouds) = &ob.clouds {
                if !self.cfg.pointcloud_encoder {
                    return Err(Error::Config(
                        "observation carries point clouds but the pointcloud encoder is disabled"
                            .into(),
                    ));
                }
                for (o, _) in clouds.iter().enumerate() {
                    cloud_rows.push((i, i * n + row, o));
                    mask[[i, row]] = 1.0;
                    row += 1;
                }
            }
            for t in n_links..ob.tokens.len() {
                for c in 0..TOKEN_DIM {
                    tokens[[i * n + row, c]] = ob.tokens[t][c];
                }
                row_scale[i * n + row] = 1.0;
                mask[[i, row]] = 1.0;
                row += 1;
            }
        }

        let tok_in = g.input(tokens);
        let enc_w = g.param_named("enc.w");
        let enc_b = g.param_named("enc.b");
        let proj0 = g.matmul(tok_in, enc_w);
        let proj1 = g.add_row_vec(proj0, enc_b);
        let mut x = g.scale_rows(proj1, row_scale);

        if !cloud_rows.is_empty() {
            // Per-point projection + max-pool per object, scattered into the
            // sequence rows reserved above.
            let pc_w = g.param_named("pc.w");
            let pc_b = g.param_named("pc.b");
            let zero_row = g.input(Mat::zeros((1, d)));
            let mut rows: Vec<NodeId> = vec![zero_row; s * n];
            for (i, row, o) in cloud_rows {
                let cloud = &obs[i].clouds.as_ref().unwrap()[o];
                let pts = Mat::from_shape_fn((cloud.len(), 3), |(r, c)| cloud[r][c]);
                let pts_in = g.input(pts);
                let h0 = g.matmul(pts_in, pc_w);
                let h1 = g.add_row_vec(h0, pc_b);
                let h2 = g.gelu(h1);
                rows[row] = g.col_max(h2);
            }
            let emb = g.concat_rows(&rows);
            x = g.add(x, emb);
        }

        let (head, value, pooled) = match self.cfg.backbone {
            Backbone::Mlp => {
                let flat = g.reshape(x, s, n * d);
                let mut h = flat;
                for i in 0..self.cfg.mlp_hidden.len() {
                    let w_full = g.param_named(&format!("mlp.{i}.w"));
                    // The flattened input is zero beyond the bucket's n*d
                    // prefix; slicing the weight rows is exact and skips the
                    // dead multiplies.
                    let w = if i == 0 && n < MAX_TOKENS {
                        g.slice_rows(w_full, 0, n * d)
                    } else {
                        w_full
                    };
                    let b = g.param_named(&format!("mlp.{i}.b"));
                    let lin = g.matmul(h, w);
                    let biased = g.add_row_vec(lin, b);
                    h = g.tanh(biased);
                }
                let pi_w = g.param_named("pi.w");
                let pi_b = g.param_named("pi.b");
                let head0 = g.matmul(h, pi_w);
                let head = g.add_row_vec(head0, pi_b);
                let v_w = g.param_named("v.w");
                let v_b = g.param_named("v.b");
                let v0 = g.matmul(h, v_w);
                let value = g.add_row_vec(v0, v_b);
                (head, value, h)
            }
            Backbone::Transformer => {
                let heads = self.cfg.tf_heads;
                let dh = d / heads;
                for l in 0..self.cfg.tf_layers {
                    let ln1g = g.param_named(&format!("tf.{l}.ln1.g"));
                    let ln1b = g.param_named(&format!("tf.{l}.ln1.b"));
                    let normed = g.layer_norm(x, ln1g, ln1b, 1e-5);
                    let wq = g.param_named(&format!("tf.{l}.attn.wq"));
                    let wk = g.param_named(&format!("tf.{l}.attn.wk"));
                    let wv = g.param_named(&format!("tf.{l}.attn.wv"));
                    let wo = g.param_named(&format!("tf.{l}.attn.wo"));
                    let bq = g.param_named(&format!("tf.{l}.attn.bq"));
                    let bk = g.param_named(&format!("tf.{l}.attn.bk"));
                    let bv = g.param_named(&format!("tf.{l}.attn.bv"));
                    let bo = g.param_named(&format!("tf.{l}.attn.bo"));
                    let q0 = g.matmul(normed, wq);
                    let q = g.add_row_vec(q0, bq);
                    let k0 = g.matmul(normed, wk);
                    let k = g.add_row_vec(k0, bk);
                    let v0 = g.matmul(normed, wv);
                    let v = g.add_row_vec(v0, bv);
                    let mut head_outs = Vec::with_capacity(heads);
                    for hidx in 0..heads {
                        let qs = g.slice_cols(q, hidx * dh, dh);
                        let ks = g.slice_cols(k, hidx * dh, dh);
                        let vs = g.slice_cols(v, hidx * dh, dh);
                        head_outs.push(g.attention(qs, ks, vs, n, mask.clone()));
                    }
                    let cat = g.concat_cols(&head_outs);
                    let proj = g.matmul(cat, wo);
                    let proj_b = g.add_row_vec(proj, bo);
                    x = g.add(x, proj_b);

                    let ln2g = g.param_named(&format!("tf.{l}.ln2.g"));
                    let ln2b = g.param_named(&format!("tf.{l}.ln2.b"));
                    let normed2 = g.layer_norm(x, ln2g, ln2b, 1e-5);
                    let w1 = g.param_named(&format!("tf.{l}.ff.w1"));
                    let b1 = g.param_named(&format!("tf.{l}.ff.b1"));
                    let w2 = g.param_named(&format!("tf.{l}.ff.w2"));
                    let b2 = g.param_named(&format!("tf.{l}.ff.b2"));
                    let f0 = g.matmul(normed2, w1);
                    let f1 = g.add_row_vec(f0, b1);
                    let f2 = g.gelu(f1);
                    let f3 = g.matmul(f2, w2);
                    let f4 = g.add_row_vec(f3, b2);
                    x = g.add(x, f4);
                }
                let lnfg = g.param_named("tf.lnf.g");
                let lnfb = g.param_named("tf.lnf.b");
                let feats = g.layer_norm(x, lnfg, lnfb, 1e-5);

                let pi_w = g.param_named("pi.w");
                let pi_b = g.param_named("pi.b");
                let tok_head0 = g.matmul(feats, pi_w);
                let tok_head = g.add_row_vec(tok_head0, pi_b);
                let head = g.reshape(tok_head, s, n * self.cfg.head_width());

                let pooled = g.masked_mean_pool(feats, n, mask.clone());
                let v_w = g.param_named("v.w");
                let v_b = g.param_named("v.b");
                let v0 = g.matmul(pooled, v_w);
                let value = g.add_row_vec(v0, v_b);
                (head, value, pooled)
            }
        };

        Ok(BucketNodes {
            head,
            value,
            pooled,
            slots: self.slots_for(n),
        })
    }

    /// Apply the EMA value head to pooled features.
    fn ema_value_of(&self, pooled: ndarray::ArrayView2<f64>) -> Vec<f64> {
        let w = self
            .ema_value
            .view(self.ema_value.id("v.w").unwrap())
            .to_owned();
        let b = self.ema_value.slice(self.ema_value.id("v.b").unwrap())[0];
        pooled
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(w.column(0)).map(|(x, wi)| x * wi).sum::<f64>() + b)
            .collect()
    }

    /// Group observation indices into equal-sequence-length buckets.
    fn buckets(&self, obs: &[&Observation]) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, ob) in obs.iter().enumerate() {
            map.entry(seq_len(ob)).or_default().push(i);
        }
        map
    }

    /// Batched forward pass in evaluation mode (no gradients).
    pub fn forward(&self, obs: &[&Observation]) -> Result<Vec<PolicyOutput>> {
        let mut out: Vec<Option<PolicyOutput>> = (0..obs.len()).map(|_| None).collect();
        for (_, idxs) in self.buckets(obs) {
            let bucket: Vec<&Observation> = idxs.iter().map(|&i| obs[i]).collect();
            let mut g = Graph::new(&self.params);
            let nodes = self.forward_bucket(&mut g, &bucket)?;
            let head = g.value(nodes.head).to_owned();
            let value = g.value(nodes.value).to_owned();
            let ema = self.ema_value_of(g.value(nodes.pooled));
            for (row, &i) in idxs.iter().enumerate() {
                let dist =
                    self.extract_dist(obs[i], head.row(row).to_slice().unwrap(), nodes.slots)?;
                out[i] = Some(PolicyOutput {
                    dist,
                    value_raw: value[[row, 0]],
                    value_raw_ema: ema[row],
                });
            }
        }
        Ok(out.into_iter().map(|o| o.unwrap()).collect())
    }

    /// Per-joint distribution from one sample's head row.
    fn extract_dist(
        &self,
        obs: &Observation,
        head_row: &[f64],
        slots: usize,
    ) -> Result<ActionDistribution> {
        let n_joints = obs.action_mask.len();
        let movable = obs.action_mask.clone();
        match self.cfg.action_head {
            ActionHeadKind::Continuous => {
                let log_std = self.params.slice(self.params.id("pi.log_std")?)[0];
                let mut mean = vec![0.0; n_joints];
                for (j, m) in mean.iter_mut().enumerate() {
                    let slot = j + 1;
                    if movable[j] {
                        debug_assert!(slot < slots);
                        *m = head_row[slot];
                    }
                }
                Ok(ActionDistribution::Continuous {
                    mean,
                    log_std,
                    movable,
                })
            }
            ActionHeadKind::Discrete => {
                let b = self.cfg.bins;
                let mut probs = vec![Vec::new(); n_joints];
                let mut values = vec![Vec::new(); n_joints];
                for j in 0..n_joints {
                    if !movable[j] {
                        continue;
                    }
                    let slot = j + 1;
                    debug_assert!(slot < slots);
                    let logits = &head_row[slot * b..slot * b + b];
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    probs[j] = exps.iter().map(|e| e / sum).collect();
                    let kind = joint_kind_of_token(&obs.tokens[slot]);
                    values[j] = discretize_bins(b, self.cfg.delta_min, self.cfg.dq_max_for(kind))?;
                }
                Ok(ActionDistribution::Discrete {
                    probs,
                    values,
                    movable,
                })
            }
        }
    }

    // --- PPO loss ---------------------------------------------------------------

    /// One minibatch of PPO loss; gradients accumulate into `grads`. Targets
    /// must already live in the critic's prediction space (symlog applied by
    /// the caller when enabled).
    pub fn ppo_loss_backward(
        &self,
        samples: &PpoBatch<'_>,
        hyper: &PpoHyper,
        grads: &mut GradBuf,
    ) -> Result<LossStats> {
        let n_total = samples.obs.len();
        if n_total == 0 {
            return Err(Error::Shape("empty PPO minibatch".into()));
        }
        let inv_batch = 1.0 / n_total as f64;
        let mut stats = LossStats::default();

        for (_, idxs) in self.buckets(&samples.obs) {
            let bucket_obs: Vec<&Observation> = idxs.iter().map(|&i| samples.obs[i]).collect();
            let sb = bucket_obs.len();
            let mut g = Graph::new(&self.params);
            let nodes = self.forward_bucket(&mut g, &bucket_obs)?;
            let slots = nodes.slots;

            let old_lp_neg = Mat::from_shape_fn((sb, 1), |(r, _)| -samples.old_log_probs[idxs[r]]);
            let adv = Mat::from_shape_fn((sb, 1), |(r, _)| samples.advantages[idxs[r]]);
            let w = Mat::from_shape_fn((sb, 1), |(r, _)| samples.weights[idxs[r]]);
            let target_neg =
                Mat::from_shape_fn((sb, 1), |(r, _)| -samples.value_targets_raw[idxs[r]]);

            let (lp_new, ent_col) = match self.cfg.action_head {
                ActionHeadKind::Discrete => {
                    let b = self.cfg.bins;
                    let mut onehot = Mat::zeros((sb, slots * b));
                    let mut group_mask = Mat::zeros((sb, slots * b));
                    for (r, &i) in idxs.iter().enumerate() {
                        let ob = samples.obs[i];
                        let bins_taken = samples.actions_disc.as_ref().expect("discrete actions")[i];
                        for (j, &m) in ob.action_mask.iter().enumerate() {
                            if !m {
                                continue;
                            }
                            let slot = j + 1;
                            onehot[[r, slot * b + bins_taken[j]]] = 1.0;
                            for c in 0..b {
                                group_mask[[r, slot * b + c]] = 1.0;
                            }
                        }
                    }
                    let lsm = g.log_softmax_groups(nodes.head, b);
                    let chosen = g.mul_const(lsm, onehot);
                    let lp = g.row_sum(chosen);

                    let p = g.softmax_groups(nodes.head, b);
                    let plogp = g.mul(p, lsm);
                    let masked = g.mul_const(plogp, group_mask);
                    let negsum = g.row_sum(masked);
                    let ent = g.scale(negsum, -1.0);
                    (lp, ent)
                }
                ActionHeadKind::Continuous => {
                    let mut act = Mat::zeros((sb, slots));
                    let mut mmask = Mat::zeros((sb, slots));
                    let mut count = Mat::zeros((sb, 1));
                    for (r, &i) in idxs.iter().enumerate() {
                        let ob = samples.obs[i];
                        let a = samples.actions_cont.as_ref().expect("continuous actions")[i];
                        for (j, &m) in ob.action_mask.iter().enumerate() {
                            if !m {
                                continue;
                            }
                            let slot = j + 1;
                            act[[r, slot]] = a[j];
                            mmask[[r, slot]] = 1.0;
                            count[[r, 0]] += 1.0;
                        }
                    }
                    let log_std = g.param_named("pi.log_std");
                    let neg_log_std = g.scale(log_std, -1.0);
                    let inv_sigma = g.exp(neg_log_std);

                    let neg_mean = g.scale(nodes.head, -1.0);
                    let diff = g.add_const(neg_mean, &act);
                    let masked_diff = g.mul_const(diff, mmask);
                    let z = g.mul_scalar(masked_diff, inv_sigma);
                    let z2 = g.square(z);
                    let z2sum = g.row_sum(z2);
                    let quad = g.scale(z2sum, -0.5);

                    let count_in = g.input(count.clone());
                    let cls = g.mul_scalar(count_in, log_std);
                    let neg_cls = g.scale(cls, -1.0);
                    let lp0 = g.add(quad, neg_cls);
                    let lp_const = count.mapv(|c| -0.5 * (2.0 * std::f64::consts::PI).ln() * c);
                    let lp = g.add_const(lp0, &lp_const);

                    let count_in2 = g.input(count.clone());
                    let ent0 = g.mul_scalar(count_in2, log_std);
                    let ent_const = count.mapv(|c| {
                        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() * c
                    });
                    let ent = g.add_const(ent0, &ent_const);
                    (lp, ent)
                }
            };

            // Clipped surrogate.
            let diff_lp = g.add_const(lp_new, &old_lp_neg);
            let ratio = g.exp(diff_lp);
            let s1 = g.mul_const(ratio, adv.clone());
            let rc = g.clamp(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip);
            let s2 = g.mul_const(rc, adv);
            let surr = g.min_elem(s1, s2);
            let surr_w = g.mul_const(surr, w.clone());
            let surr_sum = g.sum_all(surr_w);
            let policy_term = g.scale(surr_sum, -inv_batch);

            // Critic regression in the (possibly symlog) target space.
            let vdiff = g.add_const(nodes.value, &target_neg);
            let vsq = g.square(vdiff);
            let vw = g.mul_const(vsq, w.clone());
            let vsum = g.sum_all(vw);
            let value_term = g.scale(vsum, hyper.value_coef * inv_batch);

            let ent_w = g.mul_const(ent_col, w);
            let ent_sum = g.sum_all(ent_w);
            let ent_term = g.scale(ent_sum, -hyper.entropy_coef * inv_batch);

            let t0 = g.add(policy_term, value_term);
            let total = g.add(t0, ent_term);
            g.backward(total, 1.0, grads);

            stats.policy += g.value(policy_term)[[0, 0]];
            stats.value += g.value(value_term)[[0, 0]];
            stats.entropy += g.value(ent_term)[[0, 0]];
            stats.total += g.value(total)[[0, 0]];
        }

        if !stats.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                update: 0,
                detail: format!("{stats:?}"),
            });
        }
        Ok(stats)
    }

    /// ema <- tau * ema + (1 - tau) * live, over the value-head weights.
    pub fn ema_update(&mut self, tau: f64) {
        for e in self.ema_value.entries().to_vec() {
            let live_id = self.params.id(&e.name).unwrap();
            let live = self.params.slice(live_id).to_vec();
            let ema_id = self.ema_value.id(&e.name).unwrap();
            for (dst, src) in self.ema_value.slice_mut(ema_id).iter_mut().zip(live) {
                *dst = tau * *dst + (1.0 - tau) * src;
            }
        }
    }

    // --- checkpoints --------------------------------------------------------------

    pub fn save_checkpoint(&self, meta: Option<serde_json::Value>, path: &Path) -> Result<()> {
        let ck = CheckpointFile {
            version: 1,
            step: self.step,
            config: self.cfg.clone(),
            weights: blobs_of(&self.params),
            ema_value: blobs_of(&self.ema_value),
            meta,
        };
        let mut text = serde_json::to_string(&ck)?;
        text.push('\n');
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(PolicyNet, Option<serde_json::Value>)> {
        let text = std::fs::read_to_string(path)?;
        let ck: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut net = PolicyNet::new(ck.config.clone(), 0)?;
        restore_blobs(&mut net.params, &ck.weights)?;
        restore_blobs(&mut net.ema_value, &ck.ema_value)?;
        net.step = ck.step;
        Ok((net, ck.meta))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightBlob {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    step: u64,
    config: PolicyConfig,
    weights: Vec<WeightBlob>,
    ema_value: Vec<WeightBlob>,
    meta: Option<serde_json::Value>,
}

fn blobs_of(p: &ParamSet) -> Vec<WeightBlob> {
    p.entries()
        .iter()
        .map(|e| WeightBlob {
            name: e.name.clone(),
            rows: e.rows,
            cols: e.cols,
            values: p.data[e.offset..e.offset + e.rows * e.cols].to_vec(),
        })
        .collect()
}

fn restore_blobs(p: &mut ParamSet, blobs: &[WeightBlob]) -> Result<()> {
    if blobs.len() != p.entries().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} weight blobs, found {}",
            p.entries().len(),
            blobs.len()
        )));
    }
    for blob in blobs {
        let id = p
            .id(&blob.name)
            .map_err(|_| Error::Checkpoint(format!("unexpected weight `{}`", blob.name)))?;
        let e = p.entry(id).clone();
        if e.rows != blob.rows || e.cols != blob.cols || blob.values.len() != e.rows * e.cols {
            return Err(Error::Checkpoint(format!(
                "weight `{}` has shape {}x{}, expected {}x{}",
                blob.name, blob.rows, blob.cols, e.rows, e.cols
            )));
        }
        p.slice_mut(id).copy_from_slice(&blob.values);
    }
    Ok(())
}

/// References into rollout storage for one PPO minibatch.
pub struct PpoBatch<'a> {
    pub obs: Vec<&'a Observation>,
    pub actions_cont: Option<Vec<&'a [f64]>>,
    pub actions_disc: Option<Vec<&'a [usize]>>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Targets already mapped into the critic's prediction space.
    pub value_targets_raw: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoHyper {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvConfig, TaskKind};
    use crate::procgen::{gen_arm3, gen_primitive_category, GenParams, PrimitiveKind};

    #[test]
    fn symlog_basics() {
        assert_eq!(symlog(0.0), 0.0);
        assert!((symlog(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-12);
        // odd function
        assert!((symlog(-3.0) + symlog(3.0)).abs() < 1e-15);
    }

    #[test]
    fn symexp_inverts_symlog_over_wide_range() {
        let mut x = -1e6;
        while x <= 1e6 {
            let back = symexp(symlog(x));
            assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0), "x = {x}, back = {back}");
            x += 98_7654.321;
        }
    }

    #[test]
    fn symlog_is_monotone() {
        let mut rng = crate::util::seed_stream(5, &[0x51]);
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(-1e6..1e6);
            let b: f64 = rng.gen_range(-1e6..1e6);
            if a < b {
                assert!(symlog(a) < symlog(b));
            } else if a > b {
                assert!(symlog(a) > symlog(b));
            }
        }
    }

    #[test]
    fn bins_degenerate_three() {
        let bins = discretize_bins(3, 0.05, 0.05).unwrap();
        assert_eq!(bins, vec![-0.05, 0.0, 0.05]);
    }

    #[test]
    fn bins_symmetric() {
        let bins = discretize_bins(9, 0.002, 0.04).unwrap();
        let b = bins.len();
        for i in 0..b {
            assert!((bins[i] + bins[b - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn bins_eleven_frozen_oracle() {
        // Closed form: delta * (dq/delta)^(i/4), ratio = 50^(1/4).
        let bins = discretize_bins(11, 0.001, 0.05).unwrap();
        let expected_pos = [
            0.001,
            0.0026591479484724942,
            0.007071067811865475,
            0.018803015465431966,
            0.05,
        ];
        assert_eq!(bins.len(), 11);
        assert_eq!(bins[5], 0.0);
        for (i, &e) in expected_pos.iter().enumerate() {
            assert!((bins[6 + i] - e).abs() < 1e-12, "bin {i}: {} vs {e}", bins[6 + i]);
        }
        assert_eq!(bins[10], 0.05);
    }

    #[test]
    fn bins_infeasible_rejected() {
        assert!(discretize_bins(11, 0.05, 0.05).is_err());
        assert!(discretize_bins(11, 0.06, 0.05).is_err());
        assert!(discretize_bins(4, 0.001, 0.05).is_err());
    }

    fn obs_for(seed: u64) -> crate::env::Observation {
        let m = gen_arm3(&GenParams::with_seed(seed)).unwrap();
        let mut cfg = EnvConfig::default_for(TaskKind::Reach);
        cfg.n_goals = 3;
        let mut env = Env::new(m, cfg, seed).unwrap();
        env.reset().unwrap()
    }

    fn nlink_obs(seed: u64, dof: usize) -> crate::env::Observation {
        let mut p = GenParams::with_seed(seed);
        p.dof = dof;
        let m = gen_primitive_category(PrimitiveKind::NLink, &p).unwrap();
        let mut cfg = EnvConfig::default_for(TaskKind::Reach);
        cfg.n_goals = 3;
        let mut env = Env::new(m, cfg, seed).unwrap();
        env.reset().unwrap()
    }

    #[test]
    fn batched_forward_matches_single() {
        for backbone in [Backbone::Mlp, Backbone::Transformer] {
            let cfg = PolicyConfig {
                backbone,
                d_model: 16,
                tf_layers: 1,
                tf_heads: 2,
                tf_ff: 24,
                mlp_hidden: vec![32],
                ..Default::default()
            };
            let net = PolicyNet::new(cfg, 7).unwrap();
            let a = obs_for(1);
            let b = obs_for(2);
            let solo = net.forward(&[&a]).unwrap();
            let pair = net.forward(&[&a, &b]).unwrap();
            match (&solo[0].dist, &pair[0].dist) {
                (
                    ActionDistribution::Continuous { mean: m1, .. },
                    ActionDistribution::Continuous { mean: m2, .. },
                ) => {
                    for (x, y) in m1.iter().zip(m2) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
                _ => panic!("expected continuous"),
            }
            assert!((solo[0].value_raw - pair[0].value_raw).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_handles_variable_lengths_in_one_call() {
        let cfg = PolicyConfig {
            backbone: Backbone::Transformer,
            d_model: 16,
            tf_layers: 1,
            tf_heads: 2,
            tf_ff: 24,
            ..Default::default()
        };
        let net = PolicyNet::new(cfg, 3).unwrap();
        let short = obs_for(1); // arm3: 5 links + goal = 6 tokens
        let long = nlink_obs(2, 5); // 7 links + goal = 8 tokens
        assert_ne!(short.tokens.len(), long.tokens.len());
        let out = net.forward(&[&short, &long]).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert!(o.value_raw.is_finite());
        }
    }

    #[test]
    fn masked_joints_always_emit_zero() {
        // Whatever the weights, fixed joints get exactly 0 with no log-prob.
        for head in [ActionHeadKind::Continuous, ActionHeadKind::Discrete] {
            let cfg = PolicyConfig {
                action_head: head,
                d_model: 16,
                tf_layers: 1,
                tf_heads: 2,
                mlp_hidden: vec![24],
                ..Default::default()
            };
            let mut net = PolicyNet::new(cfg, 11).unwrap();
            for v in net.params.data.iter_mut() {
                *v *= 13.7; // scramble
            }
            let obs = obs_for(4);
            let out = net.forward(&[&obs]).unwrap();
            let mut rng = crate::util::seed_stream(0, &[1]);
            let (dq, _, _) = sample_action(&out[0].dist, SampleMode::Stochastic, &mut rng);
            // arm3 joint 3 (the EE mount) is fixed.
            assert_eq!(dq[3], 0.0);
        }
    }

    #[test]
    fn deterministic_discrete_peaked_on_zero_bin() {
        let values = discretize_bins(5, 0.01, 0.05).unwrap();
        let dist = ActionDistribution::Discrete {
            probs: vec![vec![0.01, 0.02, 0.9, 0.05, 0.02]],
            values: vec![values],
            movable: vec![true],
        };
        let mut rng = crate::util::seed_stream(0, &[2]);
        let (dq, _, bins) = sample_action(&dist, SampleMode::Deterministic, &mut rng);
        assert_eq!(bins[0], 2);
        assert_eq!(dq[0], 0.0);
    }

    #[test]
    fn deterministic_continuous_log_prob_is_density_at_mean() {
        let dist = ActionDistribution::Continuous {
            mean: vec![0.01, -0.02],
            log_std: -3.0,
            movable: vec![true, true],
        };
        let mut rng = crate::util::seed_stream(0, &[3]);
        let (_, lp, _) = sample_action(&dist, SampleMode::Deterministic, &mut rng);
        let expect = 2.0 * (-(-3.0f64) - 0.5 * (2.0 * std::f64::consts::PI).ln());
        assert!((lp - (expect - 2.0 * 3.0 - 2.0 * -3.0 - expect + expect)).abs() < 1e-9
            || (lp - expect).abs() < 1e-9);
        // density at mean: z = 0 per joint
        assert!((lp - 2.0 * (3.0 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-9);
    }

    #[test]
    fn empirical_bin_frequencies_match_probabilities() {
        let values = discretize_bins(5, 0.01, 0.05).unwrap();
        let probs = vec![0.1, 0.25, 0.3, 0.2, 0.15];
        let dist = ActionDistribution::Discrete {
            probs: vec![probs.clone()],
            values: vec![values],
            movable: vec![true],
        };
        let mut rng = crate::util::seed_stream(9, &[4]);
        let n = 100_000usize;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let (_, _, bins) = sample_action(&dist, SampleMode::Stochastic, &mut rng);
            counts[bins[0]] += 1;
        }
        for k in 0..5 {
            let p = probs[k];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = counts[k] as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "bin {k}: freq {freq} vs p {p} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn entropy_closed_forms() {
        let b = 7usize;
        let k = 3usize;
        let values = discretize_bins(b, 0.001, 0.05).unwrap();
        let uniform = vec![1.0 / b as f64; b];
        let dist = ActionDistribution::Discrete {
            probs: vec![uniform.clone(); k],
            values: vec![values.clone(); k],
            movable: vec![true; k],
        };
        assert!((entropy(&dist) - k as f64 * (b as f64).ln()).abs() < 1e-12);

        let mut onehot = vec![0.0; b];
        onehot[2] = 1.0;
        let dist0 = ActionDistribution::Discrete {
            probs: vec![onehot],
            values: vec![values],
            movable: vec![true],
        };
        assert_eq!(entropy(&dist0), 0.0);

        let g1 = ActionDistribution::Continuous {
            mean: vec![0.0],
            log_std: -2.0,
            movable: vec![true],
        };
        let g2 = ActionDistribution::Continuous {
            mean: vec![0.0],
            log_std: -1.0,
            movable: vec![true],
        };
        assert!(entropy(&g2) > entropy(&g1));
    }

    #[test]
    fn discrete_probs_normalized_and_entropy_bounded() {
        let cfg = PolicyConfig {
            action_head: ActionHeadKind::Discrete,
            d_model: 16,
            mlp_hidden: vec![24],
            ..Default::default()
        };
        let net = PolicyNet::new(cfg, 21).unwrap();
        let obs = obs_for(6);
        let out = net.forward(&[&obs]).unwrap();
        if let ActionDistribution::Discrete { probs, movable, .. } = &out[0].dist {
            for (p, &m) in probs.iter().zip(movable) {
                if !m {
                    continue;
                }
                let sum: f64 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
                assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
            }
        } else {
            panic!("expected discrete dist");
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let net = PolicyNet::new(
            PolicyConfig {
                d_model: 16,
                mlp_hidden: vec![24],
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let obs = obs_for(8);
        let out = net.forward(&[&obs]).unwrap();
        let mut r1 = crate::util::seed_stream(42, &[7]);
        let mut r2 = crate::util::seed_stream(42, &[7]);
        let a = sample_action(&out[0].dist, SampleMode::Stochastic, &mut r1);
        let b = sample_action(&out[0].dist, SampleMode::Stochastic, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut net = PolicyNet::new(
            PolicyConfig {
                backbone: Backbone::Transformer,
                action_head: ActionHeadKind::Discrete,
                value_transform: ValueTransform::Symlog,
                d_model: 16,
                tf_layers: 1,
                tf_heads: 2,
                tf_ff: 24,
                ..Default::default()
            },
            77,
        )
        .unwrap();
        net.step = 12345;
        net.ema_update(0.5);
        net.save_checkpoint(Some(serde_json::json!({"note": 1})), &path).unwrap();
        let (back, meta) = PolicyNet::load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 12345);
        assert_eq!(back.cfg, net.cfg);
        assert_eq!(back.params.data, net.params.data);
        assert_eq!(back.ema_value.data, net.ema_value.data);
        assert_eq!(meta.unwrap()["note"], 1);
    }

    #[test]
    fn ppo_gradient_matches_finite_differences_spot_check() {
        // Small MLP + continuous head; the acceptance suite covers all
        // backbone/head/transform combinations exhaustively.
        let cfg = PolicyConfig {
            backbone: Backbone::Mlp,
            action_head: ActionHeadKind::Continuous,
            d_model: 8,
            mlp_hidden: vec![12],
            ..Default::default()
        };
        let max_rel = ppo_fd_max_rel_error(cfg, 5, 3);
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    /// Shared helper: max relative error between analytic PPO-loss gradients
    /// and central finite differences on a small synthetic batch. Checks
    /// every `stride`-th parameter.
    pub fn ppo_fd_max_rel_error(cfg: PolicyConfig, seed: u64, stride: usize) -> f64 {
        let mut net = PolicyNet::new(cfg.clone(), seed).unwrap();
        let mut rng = crate::util::seed_stream(seed, &[0xFDFD]);

        // Batch of three observations with jittered actions/targets.
        let obs: Vec<crate::env::Observation> = vec![obs_for(1), obs_for(2), obs_for(3)];
        let obs_refs: Vec<&crate::env::Observation> = obs.iter().collect();
        let outs = net.forward(&obs_refs).unwrap();
        let mut actions_cont: Vec<Vec<f64>> = Vec::new();
        let mut actions_disc: Vec<Vec<usize>> = Vec::new();
        let mut old_lp = Vec::new();
        for out in &outs {
            let (dq, lp, bins) = sample_action(&out.dist, SampleMode::Stochastic, &mut rng);
            actions_cont.push(dq);
            actions_disc.push(bins);
            // Jitter so the surrogate ratio is never exactly at the min kink.
            old_lp.push(lp + rng.gen_range(-0.1..0.1));
        }
        let adv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let returns: Vec<f64> = (0..3).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let targets: Vec<f64> = returns
            .iter()
            .map(|&r| match cfg.value_transform {
                ValueTransform::Symlog => symlog(r),
                ValueTransform::Identity => r,
            })
            .collect();
        let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let hyper = PpoHyper {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        };
        let discrete = cfg.action_head == ActionHeadKind::Discrete;

        let loss_of = |net: &PolicyNet| -> f64 {
            let batch = PpoBatch {
                obs: obs.iter().collect(),
                actions_cont: if discrete {
                    None
                } else {
                    Some(actions_cont.iter().map(|a| a.as_slice()).collect())
                },
                actions_disc: if discrete {
                    Some(actions_disc.iter().map(|a| a.as_slice()).collect())
                } else {
                    None
                },
                old_log_probs: old_lp.clone(),
                advantages: adv.clone(),
                value_targets_raw: targets.clone(),
                weights: weights.clone(),
            };
            let mut scratch = net.params.zero_grad();
            net.ppo_loss_backward(&batch, &hyper, &mut scratch).unwrap().total
        };

        let batch = PpoBatch {
            obs: obs.iter().collect(),
            actions_cont: if discrete {
                None
            } else {
                Some(actions_cont.iter().map(|a| a.as_slice()).collect())
            },
            actions_disc: if discrete {
                Some(actions_disc.iter().map(|a| a.as_slice()).collect())
            } else {
                None
            },
            old_log_probs: old_lp.clone(),
            advantages: adv.clone(),
            value_targets_raw: targets.clone(),
            weights: weights.clone(),
        };
        let mut grads = net.params.zero_grad();
        net.ppo_loss_backward(&batch, &hyper, &mut grads).unwrap();

        let n = net.params.data.len();
        let h = 1e-6;
        let mut max_rel: f64 = 0.0;
        let mut i = 0;
        while i < n {
            let orig = net.params.data[i];
            net.params.data[i] = orig + h;
            let up = loss_of(&net);
            net.params.data[i] = orig - h;
            let down = loss_of(&net);
            net.params.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[i];
            let err = (a - fd).abs();
            let rel = if err <= 1e-8 {
                0.0
            } else {
                err / a.abs().max(fd.abs()).max(1e-4)
            };
            max_rel = max_rel.max(rel);
            i += stride;
        }
        max_rel
    }
}
