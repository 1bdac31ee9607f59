//! Primitive Reasoning Network: node embedding, one-step attention message
//! passing over the fully-connected proposal graph, and per-class readouts
//! with a background class.

use super::proposal::argmax;
use super::{FinalPrediction, ModelConfig, Proposal};
use crate::error::Result;
use crate::nn::{Activation, Dense, Init, Mlp, ParameterStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Node embedding, attention matrices and readout heads.
pub struct ReasoningNetwork {
    config: ModelConfig,
    embed_h: Dense,
    embed_s: Option<Dense>,
    embed_p: Dense,
    slot_dims: (usize, usize, usize),
    label_head: Dense,
    geom_heads: Vec<Mlp>,
}

/// Reasoning forward results, still on the tape.
pub struct ReasonOut {
    /// Refined node features y_i, one (1, D_z) row per proposal.
    pub node_rows: Vec<Var>,
    /// Class probabilities, (n, M_c + 1) with background at column 0.
    pub probs: Var,
    /// argmax labels per node.
    pub labels: Vec<u32>,
    /// Probability of the argmax class per node.
    pub confidences: Vec<f64>,
    /// Geometry head output of the argmax class per node (background
    /// outputs come from the class-0 head and are dropped downstream).
    pub geoms: Vec<Var>,
}

impl ReasoningNetwork {
    pub fn init(
        config: &ModelConfig,
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mc = config.class_count as usize;
        let dz = config.node_dim;
        let d1 = dz.div_ceil(3);
        let d2 = dz.div_ceil(3);
        let d3 = dz - d1 - d2;
        let embed_h = Dense::init(
            store,
            rng,
            "reasoning.embed_h",
            config.hidden_dim,
            d1,
            Activation::Relu,
        );
        let embed_s = if config.agnostic() {
            None
        } else {
            Some(Dense::init(
                store,
                rng,
                "reasoning.embed_s",
                mc,
                d2,
                Activation::Relu,
            ))
        };
        let embed_p = Dense::init(store, rng, "reasoning.embed_p", 9, d3, Activation::Relu);
        store.add("reasoning.attn.u", dz, dz, Init::UniformFanIn, rng);
        store.add("reasoning.attn.v", dz, dz, Init::UniformFanIn, rng);
        store.add("reasoning.attn.w", dz, dz, Init::UniformFanIn, rng);
        let label_head = Dense::init(
            store,
            rng,
            "reasoning.label",
            dz,
            mc + 1,
            Activation::Softmax,
        );
        let geom_heads = (0..=mc)
            .map(|c| {
                Mlp::init(
                    store,
                    rng,
                    &format!("reasoning.geom{c}"),
                    &[dz, config.hidden_dim, 9],
                    Activation::None,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed_h,
            embed_s,
            embed_p,
            slot_dims: (d1, d2, d3),
            label_head,
            geom_heads,
        })
    }

    /// Initial node embedding z_i = [g_h(h_i); g_s(s_i); g_p(p_i)], exactly
    /// D_z wide. In the agnostic setting the g_s slot is the constant 1.
    pub fn node_embed(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        proposal: &Proposal,
        trainable: bool,
    ) -> Result<Var> {
        let h = tape.constant(1, proposal.hidden.len(), proposal.hidden.clone());
        let p = tape.constant(1, 9, proposal.params.to_vec());
        let eh = self.embed_h.forward(tape, store, h, trainable)?;
        let es = match &self.embed_s {
            Some(layer) => {
                let s = tape.constant(1, proposal.label_probs.len(), proposal.label_probs.clone());
                layer.forward(tape, store, s, trainable)?
            }
            None => tape.constant(1, self.slot_dims.1, vec![1.0; self.slot_dims.1]),
        };
        let ep = self.embed_p.forward(tape, store, p, trainable)?;
        Ok(tape.concat_cols(&[eh, es, ep]))
    }

    /// One step of attention message passing over the fully-connected graph:
    /// `y_i = z_i + (1/(n-1)) * sum_{j != i} (U z_i . V z_j) W z_j`, with no
    /// softmax over the raw bilinear scores. A single node passes through
    /// unchanged.
    pub fn message_pass(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        z: Var,
        trainable: bool,
    ) -> Result<Var> {
        let (n, _) = tape.dims(z);
        tape.expect_dims(z, n, self.config.node_dim, "message_pass nodes")?;
        if n == 1 {
            return Ok(z);
        }
        let u = tape.param(store, "reasoning.attn.u", trainable);
        let v = tape.param(store, "reasoning.attn.v", trainable);
        let w = tape.param(store, "reasoning.attn.w", trainable);
        let ut = tape.transpose(u);
        let vt = tape.transpose(v);
        let wt = tape.transpose(w);
        let zu = tape.matmul(z, ut); // rows are U z_i
        let zv = tape.matmul(z, vt); // rows are V z_j
        let zvt = tape.transpose(zv);
        let alpha = tape.matmul(zu, zvt); // (n, n) raw bilinear scores
        let mut mask = vec![1.0; n * n];
        for i in 0..n {
            mask[i * n + i] = 0.0;
        }
        let maskv = tape.constant(n, n, mask);
        let alpha_off = tape.mul(alpha, maskv);
        let zw = tape.matmul(z, wt); // rows are W z_j
        let msg = tape.matmul(alpha_off, zw);
        let scaled = tape.scale(msg, 1.0 / (n as f64 - 1.0));
        Ok(tape.add(z, scaled))
    }

    /// Full reasoning pass over a proposal set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        proposals: &[Proposal],
        trainable: bool,
    ) -> Result<ReasonOut> {
        if proposals.is_empty() {
            return Err(crate::error::Error::EmptyInput(
                "reasoning needs a non-empty proposal set".into(),
            ));
        }
        let n = proposals.len();
        let dz = self.config.node_dim;
        let embedded: Vec<Var> = proposals
            .iter()
            .map(|p| self.node_embed(tape, store, p, trainable))
            .collect::<Result<_>>()?;
        let z = tape.concat_rows(&embedded);
        let y = self.message_pass(tape, store, z, trainable)?;
        let probs = self.label_head.forward(tape, store, y, trainable)?;

        let mut node_rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut confidences = Vec::with_capacity(n);
        let mut geoms = Vec::with_capacity(n);
        let prob_values = tape.value(probs).to_vec();
        let klass = self.config.class_count as usize + 1;
        for i in 0..n {
            let row = extract_row(tape, y, i, dz);
            let p_row = &prob_values[i * klass..(i + 1) * klass];
            let label = argmax(p_row);
            tape.note_branch(label as u64);
            labels.push(label as u32);
            confidences.push(p_row[label]);
            let geom = self.geom_heads[label].forward(tape, store, row, trainable)?;
            geoms.push(geom);
            node_rows.push(row);
        }
        Ok(ReasonOut {
            node_rows,
            probs,
            labels,
            confidences,
            geoms,
        })
    }

    /// Geometry head of an explicit class evaluated on node `i`'s refined
    /// feature (used by the reasoning loss, which trains the head of the
    /// matched ground-truth class).
    pub fn geometry_for(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        out: &ReasonOut,
        node: usize,
        class: u32,
        trainable: bool,
    ) -> Result<Var> {
        self.geom_heads[class as usize].forward(tape, store, out.node_rows[node], trainable)
    }
}

impl ReasonOut {
    /// Plain-value snapshot of the reasoned predictions.
    pub fn final_predictions(&self, tape: &Tape) -> Vec<FinalPrediction> {
        let (n, klass) = tape.dims(self.probs);
        let pv = tape.value(self.probs);
        (0..n)
            .map(|i| {
                let mut params = [0.0; 9];
                params.copy_from_slice(tape.value(self.geoms[i]));
                FinalPrediction {
                    params,
                    probs: pv[i * klass..(i + 1) * klass].to_vec(),
                    label: self.labels[i],
                    confidence: self.confidences[i],
                }
            })
            .collect()
    }
}

/// Differentiable extraction of row `i` from an (n, d) matrix.
fn extract_row(tape: &mut Tape, m: Var, i: usize, d: usize) -> Var {
    let map: Vec<i64> = (0..d).map(|j| (i * d + j) as i64).collect();
    tape.gather(m, 1, d, Arc::new(map))
}
