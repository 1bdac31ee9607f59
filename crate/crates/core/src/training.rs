//! Stage-wise optimization: normalization statistics, the proposal and
//! reasoning losses, canonical target sequences and the two training loops.
//!
//! Stage 1 jointly trains the encoder, the count regressor and both
//! teacher-forced generators. Stage 2 freezes every `proposal.*` parameter
//! and trains the reasoning network on free-running proposals, with targets
//! assigned by greedy matching against the doubled folded ground truth.

use crate::error::{Error, Result};
use crate::matching::{greedy_match, Params9};
use crate::model::{
    normalize, CheckpointMeta, Direction, GenStep, Model, ModelConfig, Proposal, ReasonOut,
    StepFeedback,
};
use crate::nn::{clip_global_norm, losses, Adam, ParameterStore, Tape, Var};
use crate::synthdata::{fold_indices, DatasetSample, TAU_SYM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-parameter normalization over the folded training primitives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 9],
    pub std: [f64; 9],
}

/// Population mean and standard deviation of the 9 box parameters over all
/// folded primitives of the split; the deviation is floored at 1e-6.
pub fn compute_stats(samples: &[DatasetSample]) -> Result<NormalizationStats> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("stats need a non-empty split".into()));
    }
    let mut sum = [0.0; 9];
    let mut sumsq = [0.0; 9];
    let mut count = 0.0;
    for s in samples {
        for &i in &fold_indices(&s.primitives, TAU_SYM) {
            let v = s.primitives[i].params();
            for k in 0..9 {
                sum[k] += v[k];
                sumsq[k] += v[k] * v[k];
            }
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::EmptyInput("split has no folded primitives".into()));
    }
    let mut mean = [0.0; 9];
    let mut std = [0.0; 9];
    for k in 0..9 {
        mean[k] = sum[k] / count;
        let var = (sumsq[k] / count - mean[k] * mean[k]).max(0.0);
        std[k] = var.sqrt().max(1e-6);
    }
    Ok(NormalizationStats { mean, std })
}

/// Optimization schedule; every field has a default and can be overridden
/// from a flat key=value config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_rp: f64,
    pub lambda_rb: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 20,
            stage2_epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            lambda_rp: 10.0,
            lambda_rb: 10.0,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Schedule plus optional model-structure overrides, as parsed from a
/// config file.
#[derive(Debug, Clone, Default)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub agnostic: bool,
    pub hidden_dim: Option<usize>,
    pub node_dim: Option<usize>,
    pub feature_channels: Option<usize>,
    pub roi_size: Option<usize>,
    pub n_max: Option<usize>,
}

impl TrainConfig {
    /// Parses a flat `key = value` file (one pair per line, `#` comments).
    /// Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: std::num::ParseFloatError| {
                Error::Config(format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            let bad_int = |e: std::num::ParseIntError| {
                Error::Config(format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            let s = &mut cfg.schedule;
            match key {
                "stage1_epochs" => s.stage1_epochs = value.parse().map_err(bad_int)?,
                "stage2_epochs" => s.stage2_epochs = value.parse().map_err(bad_int)?,
                "batch_size" => s.batch_size = value.parse().map_err(bad_int)?,
                "lr" => s.lr = value.parse().map_err(bad)?,
                "beta1" => s.beta1 = value.parse().map_err(bad)?,
                "beta2" => s.beta2 = value.parse().map_err(bad)?,
                "lambda_rp" => s.lambda_rp = value.parse().map_err(bad)?,
                "lambda_rb" => s.lambda_rb = value.parse().map_err(bad)?,
                "clip_norm" => s.clip_norm = value.parse().map_err(bad)?,
                "seed" => s.seed = value.parse().map_err(bad_int)?,
                "agnostic" => cfg.agnostic = value.parse::<u8>().map_err(bad_int)? != 0,
                "hidden_dim" => cfg.hidden_dim = Some(value.parse().map_err(bad_int)?),
                "node_dim" => cfg.node_dim = Some(value.parse().map_err(bad_int)?),
                "feature_channels" => cfg.feature_channels = Some(value.parse().map_err(bad_int)?),
                "roi_size" => cfg.roi_size = Some(value.parse().map_err(bad_int)?),
                "n_max" => cfg.n_max = Some(value.parse().map_err(bad_int)?),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown config key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if cfg.schedule.stage1_epochs == 0
            || cfg.schedule.stage2_epochs == 0
            || cfg.schedule.batch_size == 0
            || cfg.schedule.lr <= 0.0
        {
            return Err(Error::Config(
                "epochs, batch size and learning rate must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    /// Builds the model configuration for a category's class count,
    /// applying the overrides (and collapsing to one class when agnostic).
    pub fn model_config(&self, class_count: u32) -> ModelConfig {
        let mut mc = ModelConfig::desk(if self.agnostic { 1 } else { class_count });
        if let Some(v) = self.hidden_dim {
            mc.hidden_dim = v;
        }
        if let Some(v) = self.node_dim {
            mc.node_dim = v;
        }
        if let Some(v) = self.feature_channels {
            mc.feature_channels = v;
        }
        if let Some(v) = self.roi_size {
            mc.roi_size = v;
        }
        if let Some(v) = self.n_max {
            mc.n_max = v;
        }
        mc
    }
}

/// Ground-truth sequence for one generation direction: per-step labels,
/// normalized parameters and 2D boxes.
#[derive(Debug, Clone)]
pub struct StepTargets {
    pub labels: Vec<u32>,
    pub params: Vec<Params9>,
    pub boxes: Vec<[f64; 4]>,
}

/// Folds the sample's primitives, orders them by center height (ties by
/// t_x then t_y, ascending) and returns the bottom-up and top-down target
/// sequences in the normalized parameter frame. Labels collapse to 1 when
/// `agnostic` is set.
pub fn canonical_targets(
    sample: &DatasetSample,
    stats: &NormalizationStats,
    agnostic: bool,
) -> (StepTargets, StepTargets) {
    let mut keep = fold_indices(&sample.primitives, TAU_SYM);
    keep.sort_by(|&a, &b| {
        let ta = sample.primitives[a].translation();
        let tb = sample.primitives[b].translation();
        (ta[2], ta[0], ta[1])
            .partial_cmp(&(tb[2], tb[0], tb[1]))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let build = |order: &[usize]| -> StepTargets {
        StepTargets {
            labels: order
                .iter()
                .map(|&i| if agnostic { 1 } else { sample.labels[i] })
                .collect(),
            params: order
                .iter()
                .map(|&i| normalize(&sample.primitives[i], &stats.mean, &stats.std))
                .collect(),
            boxes: order.iter().map(|&i| sample.boxes[i]).collect(),
        }
    };
    let bottom_up = build(&keep);
    let reversed: Vec<usize> = keep.iter().rev().copied().collect();
    (bottom_up, build(&reversed))
}

/// Proposal-network loss over one teacher-forced direction:
/// `sum_i CE(s_i, s_i*) + lambda_rp sum_i L1(p_i, p_i*) + lambda_rb sum_i
/// SmoothL1(b_i, b_i*)`. The semantic term is dropped in the agnostic
/// setting.
pub fn loss_proposal_direction(
    tape: &mut Tape,
    steps: &[GenStep],
    targets: &StepTargets,
    lambda_rp: f64,
    lambda_rb: f64,
) -> Result<Var> {
    if steps.len() != targets.labels.len() {
        return Err(Error::shape(format!(
            "{} generated steps vs {} targets",
            steps.len(),
            targets.labels.len()
        )));
    }
    let mut total = tape.scalar(0.0);
    for (i, step) in steps.iter().enumerate() {
        if let Some(probs) = step.label_probs {
            let ce = losses::cross_entropy(tape, probs, (targets.labels[i].max(1) - 1) as usize);
            total = tape.add(total, ce);
        }
        let l1 = losses::l1(tape, step.geom, &targets.params[i]);
        let l1w = tape.scale(l1, lambda_rp);
        total = tape.add(total, l1w);
        let sm = losses::smooth_l1(tape, step.box_pred, &targets.boxes[i]);
        let smw = tape.scale(sm, lambda_rb);
        total = tape.add(total, smw);
    }
    Ok(total)
}

/// Reasoning-network loss: greedy matching of the 2 n_p final predictions
/// against the doubled folded ground truth, then cross entropy toward the
/// assigned class (background for unmatched predictions) plus the weighted
/// L1 geometry term on matched pairs, evaluated through the ground-truth
/// class head.
pub fn loss_reasoning(
    tape: &mut Tape,
    model: &Model,
    store: &ParameterStore,
    out: &ReasonOut,
    gt_labels: &[u32],
    gt_params: &[Params9],
    lambda_rp: f64,
    trainable: bool,
) -> Result<Var> {
    let n = out.node_rows.len();
    let mut doubled_params = Vec::with_capacity(gt_params.len() * 2);
    let mut doubled_labels = Vec::with_capacity(gt_labels.len() * 2);
    for (p, l) in gt_params.iter().zip(gt_labels) {
        doubled_params.push(*p);
        doubled_params.push(*p);
        doubled_labels.push(*l);
        doubled_labels.push(*l);
    }
    let pred_params: Vec<Params9> = (0..n)
        .map(|i| {
            let mut v = [0.0; 9];
            v.copy_from_slice(tape.value(out.geoms[i]));
            v
        })
        .collect();
    let assignment = greedy_match(&pred_params, &doubled_params);
    for &(i, j) in &assignment.pairs {
        tape.note_branch(((i as u64) << 32) | j as u64);
    }

    let mut target_class = vec![0u32; n];
    for &(i, j) in &assignment.pairs {
        target_class[i] = doubled_labels[j];
    }
    let mut total = tape.scalar(0.0);
    for i in 0..n {
        let prow = tape.row(out.probs, i);
        let ce = losses::cross_entropy(tape, prow, target_class[i] as usize);
        total = tape.add(total, ce);
    }
    for &(i, j) in &assignment.pairs {
        // the geometry target trains the head of the assigned class; when
        // the argmax already picked it, its output is reused
        let geom = if out.labels[i] == doubled_labels[j] {
            out.geoms[i]
        } else {
            model
                .reasoning
                .geometry_for(tape, store, out, i, doubled_labels[j], trainable)?
        };
        let l1 = losses::l1(tape, geom, &doubled_params[j]);
        let l1w = tape.scale(l1, lambda_rp);
        total = tape.add(total, l1w);
    }
    Ok(total)
}

/// Per-epoch mean sample losses of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_mean_losses: Vec<f64>,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Stage 1: joint training of the encoder, count regressor and both
/// teacher-forced generators. Returns the trained store, its checkpoint
/// metadata and the loss curve. Deterministic given the schedule seed.
pub fn train_stage1(
    samples: &[DatasetSample],
    model_config: ModelConfig,
    schedule: &TrainSchedule,
    category: &str,
) -> Result<(ParameterStore, CheckpointMeta, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("stage 1 needs training samples".into()));
    }
    let stats = compute_stats(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut store = ParameterStore::new();
    let model = Model::init(model_config.clone(), &mut store, &mut rng)?;
    let trainable = store.names_with_prefix("proposal.");
    let mut opt = Adam::new(
        &store,
        trainable.clone(),
        schedule.lr,
        (schedule.beta1, schedule.beta2),
    )?;

    let targets: Vec<(StepTargets, StepTargets)> = samples
        .iter()
        .map(|s| canonical_targets(s, &stats, model_config.agnostic()))
        .collect();
    let images: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| model.image_from_depth(&s.depth))
        .collect();

    let mut report = TrainReport {
        epoch_mean_losses: Vec::with_capacity(schedule.stage1_epochs),
    };
    for _epoch in 0..schedule.stage1_epochs {
        let order = shuffled_indices(samples.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            store.clear_grads();
            for &idx in batch {
                let sample = &samples[idx];
                let (bu, td) = &targets[idx];
                let mut tape = Tape::new();
                let (gamma, xg) = model
                    .proposal
                    .encode(&mut tape, &store, &images[idx], true)?;
                let (raw, _) = model.proposal.count(&mut tape, &store, xg, true)?;
                let count_loss = losses::l1(&mut tape, raw, &[sample.n_o as f64]);
                let mut loss = count_loss;
                for (direction, tgt) in [(Direction::BottomUp, bu), (Direction::TopDown, td)] {
                    let steps = model.proposal.generate_sequence(
                        &mut tape,
                        &store,
                        gamma,
                        xg,
                        tgt.labels.len(),
                        direction,
                        StepFeedback::Teacher {
                            labels: &tgt.labels,
                            params: &tgt.params,
                            boxes: &tgt.boxes,
                        },
                        true,
                    )?;
                    let dir_loss = loss_proposal_direction(
                        &mut tape,
                        &steps,
                        tgt,
                        schedule.lambda_rp,
                        schedule.lambda_rb,
                    )?;
                    loss = tape.add(loss, dir_loss);
                }
                epoch_loss += tape.scalar_value(loss);
                let scaled = tape.scale(loss, 1.0 / batch.len() as f64);
                tape.backward(scaled);
                tape.accumulate_param_grads(&mut store, 1.0)?;
            }
            store.ensure_grads(&trainable)?;
            clip_global_norm(&mut store, &trainable, schedule.clip_norm)?;
            opt.step(&mut store)?;
        }
        report
            .epoch_mean_losses
            .push(epoch_loss / samples.len() as f64);
    }

    let meta = CheckpointMeta {
        config: model_config,
        category: category.to_string(),
        norm_mean: stats.mean,
        norm_std: stats.std,
    };
    Ok((store, meta, report))
}

/// Stage 2: loads the stage-1 parameters, freezes them, and trains the
/// reasoning network on free-running proposals.
pub fn train_stage2(
    samples: &[DatasetSample],
    stage1: &ParameterStore,
    meta: &CheckpointMeta,
    schedule: &TrainSchedule,
) -> Result<(ParameterStore, CheckpointMeta, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("stage 2 needs training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut store = ParameterStore::new();
    let model = Model::init(meta.config.clone(), &mut store, &mut rng)?;
    // adopt the trained proposal parameters
    for name in store.names_with_prefix("proposal.") {
        let src = stage1
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("stage-1 checkpoint is missing {name:?}")))?;
        let dst = store.get_mut(&name).unwrap();
        if src.rows != dst.rows || src.cols != dst.cols {
            return Err(Error::Checkpoint(format!(
                "stage-1 parameter {name:?} has shape ({}, {}), expected ({}, {})",
                src.rows, src.cols, dst.rows, dst.cols
            )));
        }
        dst.values = src.values.clone();
    }
    let stats = NormalizationStats {
        mean: meta.norm_mean,
        std: meta.norm_std,
    };
    let trainable = store.names_with_prefix("reasoning.");
    let mut opt = Adam::new(
        &store,
        trainable.clone(),
        schedule.lr,
        (schedule.beta1, schedule.beta2),
    )?;

    // folded ground truth per sample, normalized
    let folded: Vec<(Vec<u32>, Vec<Params9>)> = samples
        .iter()
        .map(|s| {
            let keep = fold_indices(&s.primitives, TAU_SYM);
            let labels = keep
                .iter()
                .map(|&i| {
                    if meta.config.agnostic() {
                        1
                    } else {
                        s.labels[i]
                    }
                })
                .collect();
            let params = keep
                .iter()
                .map(|&i| normalize(&s.primitives[i], &stats.mean, &stats.std))
                .collect();
            (labels, params)
        })
        .collect();

    // proposals are recomputed per epoch pass; the proposal network is
    // frozen, so cache them once
    let proposals: Vec<Vec<Proposal>> = samples
        .iter()
        .map(|s| model.propose(&store, &model.image_from_depth(&s.depth)))
        .collect::<Result<_>>()?;

    let mut report = TrainReport {
        epoch_mean_losses: Vec::with_capacity(schedule.stage2_epochs),
    };
    for _epoch in 0..schedule.stage2_epochs {
        let order = shuffled_indices(samples.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            store.clear_grads();
            for &idx in batch {
                let (gt_labels, gt_params) = &folded[idx];
                let mut tape = Tape::new();
                let out = model
                    .reasoning
                    .forward(&mut tape, &store, &proposals[idx], true)?;
                let loss = loss_reasoning(
                    &mut tape,
                    &model,
                    &store,
                    &out,
                    gt_labels,
                    gt_params,
                    schedule.lambda_rp,
                    true,
                )?;
                epoch_loss += tape.scalar_value(loss);
                let scaled = tape.scale(loss, 1.0 / batch.len() as f64);
                tape.backward(scaled);
                tape.accumulate_param_grads(&mut store, 1.0)?;
            }
            store.ensure_grads(&trainable)?;
            clip_global_norm(&mut store, &trainable, schedule.clip_norm)?;
            opt.step(&mut store)?;
        }
        report
            .epoch_mean_losses
            .push(epoch_loss / samples.len() as f64);
    }
    Ok((store, meta.clone(), report))
}

/// Convenience wrapper for evaluation and prediction: rebuilds the model
/// around a loaded checkpoint.
pub fn model_from_checkpoint(store: &ParameterStore, meta: &CheckpointMeta) -> Result<Model> {
    // Model::init would re-register parameters; build into a scratch store
    // and verify the loaded one provides every needed parameter.
    let mut scratch = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::init(meta.config.clone(), &mut scratch, &mut rng)?;
    for e in scratch.entries() {
        let loaded = store.get(&e.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter {:?}", e.name))
        })?;
        if loaded.rows != e.rows || loaded.cols != e.cols {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has shape ({}, {}), expected ({}, {})",
                e.name, loaded.rows, loaded.cols, e.rows, e.cols
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Primitive;
    use crate::synthdata::{generate_dataset, Camera, ObjectTemplate};

    fn tiny_config(class_count: u32) -> ModelConfig {
        ModelConfig {
            class_count,
            hidden_dim: 16,
            node_dim: 18,
            n_max: 15,
            image_size: 16,
            feature_channels: 8,
            global_dim: 32,
            roi_size: 2,
            tau_sym: 0.02,
            depth_scale: 0.5,
        }
    }

    fn shrink_sample(s: &mut DatasetSample) {
        // re-render at 16x16 so tiny models train fast
        let cam = Camera {
            width: 16,
            height: 16,
            ..s.camera
        };
        s.camera = cam;
        s.depth = crate::synthdata::render_depth(&s.primitives, &cam);
        s.boxes = crate::synthdata::project_boxes(&s.primitives, &cam).unwrap();
    }

    fn tiny_dataset(count: usize, seed: u64) -> Vec<DatasetSample> {
        let tpl = ObjectTemplate::chair();
        let mut samples = generate_dataset(&tpl, count, seed).unwrap();
        for s in &mut samples {
            shrink_sample(s);
        }
        samples
    }

    #[test]
    fn stats_degenerate_split_floors_std() {
        let samples = tiny_dataset(1, 0);
        let one = vec![samples[0].clone()];
        let stats = compute_stats(&one).unwrap();
        assert!(stats.std.iter().all(|&s| s >= 1e-6));
        // a single repeated value normalizes to zero
        let keep = fold_indices(&one[0].primitives, TAU_SYM);
        let p = one[0].primitives[keep[0]];
        let two = {
            let mut s = one[0].clone();
            s.primitives = vec![p, p];
            s.labels = vec![1, 1];
            s.boxes = vec![s.boxes[keep[0]], s.boxes[keep[0]]];
            vec![s]
        };
        let st = compute_stats(&two).unwrap();
        let n = normalize(&p, &st.mean, &st.std);
        assert!(n.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn stats_two_point_population_convention() {
        let base = tiny_dataset(1, 1)[0].clone();
        let mut s = base.clone();
        let a = Primitive::new([1.0; 3], [-1.0, 0.0, 0.0], [0.0; 3]).unwrap();
        let b = Primitive::new([1.0; 3], [1.0, 0.0, 0.0], [0.0; 3]).unwrap();
        s.primitives = vec![a, b];
        s.labels = vec![1, 1];
        s.boxes = vec![[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]];
        let stats = compute_stats(&[s]).unwrap();
        // folding keeps only the t_x = -1 member plus nothing on the right,
        // so craft the check on the t_y parameter instead: use two on-plane
        // primitives differing in t_y.
        let mut s2 = base.clone();
        let c = Primitive::new([1.0; 3], [0.0, -1.0, 0.0], [0.0; 3]).unwrap();
        let d = Primitive::new([1.0; 3], [0.0, 1.0, 0.0], [0.0; 3]).unwrap();
        s2.primitives = vec![c, d];
        s2.labels = vec![1, 1];
        s2.boxes = vec![[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]];
        let stats2 = compute_stats(&[s2]).unwrap();
        assert!(stats2.mean[4].abs() < 1e-12);
        assert!((stats2.std[4] - 1.0).abs() < 1e-12); // population std
        let _ = stats;
    }

    #[test]
    fn stats_self_check_whole_split() {
        let samples = tiny_dataset(20, 2);
        let stats = compute_stats(&samples).unwrap();
        let mut sum = [0.0; 9];
        let mut sumsq = [0.0; 9];
        let mut count = 0.0;
        for s in &samples {
            for &i in &fold_indices(&s.primitives, TAU_SYM) {
                let n = normalize(&s.primitives[i], &stats.mean, &stats.std);
                for k in 0..9 {
                    sum[k] += n[k];
                    sumsq[k] += n[k] * n[k];
                }
                count += 1.0;
            }
        }
        for k in 0..6 {
            // length and translation parameters vary in the template
            let mean = sum[k] / count;
            let std = (sumsq[k] / count - mean * mean).sqrt();
            assert!(mean.abs() < 1e-9, "param {k} mean {mean}");
            assert!((std - 1.0).abs() < 1e-9, "param {k} std {std}");
        }
    }

    #[test]
    fn canonical_targets_fold_sort_and_ties() {
        let mut s = tiny_dataset(1, 3)[0].clone();
        // hand-built object: two leg pairs, a seat and a back
        let leg =
            |x: f64, y: f64| Primitive::new([0.05, 0.05, 0.4], [x, y, 0.2], [0.0; 3]).unwrap();
        let seat = Primitive::new([0.5, 0.5, 0.05], [0.0, 0.0, 0.425], [0.0; 3]).unwrap();
        let back = Primitive::new([0.5, 0.05, 0.4], [0.0, -0.22, 0.65], [0.0; 3]).unwrap();
        s.primitives = vec![
            leg(-0.2, -0.2),
            leg(-0.2, 0.2),
            leg(0.2, -0.2),
            leg(0.2, 0.2),
            seat,
            back,
        ];
        s.labels = vec![1, 1, 1, 1, 2, 3];
        s.boxes = vec![[0.1, 0.1, 0.9, 0.9]; 6];
        let stats = compute_stats(&[s.clone()]).unwrap();
        let (bu, td) = canonical_targets(&s, &stats, false);
        assert_eq!(bu.labels.len(), 4); // 2 legs + seat + back
                                        // bottom-up: legs (equal height, tie by t_x then t_y), seat, back
        assert_eq!(bu.labels, vec![1, 1, 2, 3]);
        assert_eq!(td.labels, vec![3, 2, 1, 1]);
        // the two legs tie in height and t_x; t_y orders them
        let p0 = &bu.params[0];
        let p1 = &bu.params[1];
        assert!(p0[4] < p1[4]);
        // agnostic collapses labels
        let (agn, _) = canonical_targets(&s, &stats, true);
        assert_eq!(agn.labels, vec![1, 1, 1, 1]);
    }

    #[test]
    fn train_config_parsing() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg.schedule, TrainSchedule::default());
        let cfg = TrainConfig::parse(
            "stage1_epochs = 3\nlr = 0.001\n# comment\nagnostic = 1\nhidden_dim = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule.stage1_epochs, 3);
        assert_eq!(cfg.schedule.lr, 0.001);
        assert!(cfg.agnostic);
        assert_eq!(cfg.hidden_dim, Some(32));
        assert!(TrainConfig::parse("nope = 1").is_err());
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("lr").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
    }

    #[test]
    fn proposal_loss_perfect_and_perturbed() {
        let samples = tiny_dataset(1, 4);
        let stats = compute_stats(&samples).unwrap();
        let (bu, _) = canonical_targets(&samples[0], &stats, false);
        let n = bu.labels.len();

        // fabricate "generated" steps that equal the targets exactly
        let mut tape = Tape::new();
        let mut steps = Vec::new();
        for i in 0..n {
            let mut onehot = vec![1e-9; 6];
            onehot[(bu.labels[i] - 1) as usize] = 1.0 - 5e-9 * 6.0;
            let probs = tape.constant(1, 6, onehot);
            let box_pred = tape.constant(1, 4, bu.boxes[i].to_vec());
            let geom = tape.constant(1, 9, bu.params[i].to_vec());
            steps.push(GenStep {
                label_probs: Some(probs),
                box_pred,
                geom,
                geom_class: (bu.labels[i] - 1) as usize,
                hidden: geom,
                roi_box: bu.boxes[i],
            });
        }
        let loss = loss_proposal_direction(&mut tape, &steps, &bu, 10.0, 10.0).unwrap();
        let perfect_value = tape.scalar_value(loss);
        assert!(perfect_value <= 1e-6);

        // one geometry parameter off by 0.1 adds exactly lambda_rp * 0.1
        let mut tape2 = Tape::new();
        let mut steps2 = Vec::new();
        for i in 0..n {
            let mut onehot = vec![1e-9; 6];
            onehot[(bu.labels[i] - 1) as usize] = 1.0 - 5e-9 * 6.0;
            let probs = tape2.constant(1, 6, onehot);
            let box_pred = tape2.constant(1, 4, bu.boxes[i].to_vec());
            let mut params = bu.params[i];
            if i == 0 {
                params[2] += 0.1;
            }
            let geom = tape2.constant(1, 9, params.to_vec());
            steps2.push(GenStep {
                label_probs: Some(probs),
                box_pred,
                geom,
                geom_class: (bu.labels[i] - 1) as usize,
                hidden: geom,
                roi_box: bu.boxes[i],
            });
        }
        let loss2 = loss_proposal_direction(&mut tape2, &steps2, &bu, 10.0, 10.0).unwrap();
        let delta = tape2.scalar_value(loss2) - perfect_value;
        assert!((delta - 1.0).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn proposal_loss_gradients_pass() {
        let samples = tiny_dataset(1, 5);
        let stats = compute_stats(&samples).unwrap();
        let cfg = tiny_config(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParameterStore::new();
        let model = Model::init(cfg.clone(), &mut store, &mut rng).unwrap();
        let (bu, td) = canonical_targets(&samples[0], &stats, false);
        let image = model.image_from_depth(&samples[0].depth);
        let names = store.names_with_prefix("proposal.");
        let report = crate::nn::grad_check(
            &mut store,
            &names,
            |tape, store| {
                let (gamma, xg) = model.proposal.encode(tape, store, &image, true).unwrap();
                let (raw, _) = model.proposal.count(tape, store, xg, true).unwrap();
                let mut loss = losses::l1(tape, raw, &[samples[0].n_o as f64]);
                for (direction, tgt) in [(Direction::BottomUp, &bu), (Direction::TopDown, &td)] {
                    let steps = model
                        .proposal
                        .generate_sequence(
                            tape,
                            store,
                            gamma,
                            xg,
                            tgt.labels.len(),
                            direction,
                            StepFeedback::Teacher {
                                labels: &tgt.labels,
                                params: &tgt.params,
                                boxes: &tgt.boxes,
                            },
                            true,
                        )
                        .unwrap();
                    let l = loss_proposal_direction(tape, &steps, tgt, 10.0, 10.0).unwrap();
                    loss = tape.add(loss, l);
                }
                loss
            },
            &mut rng,
            150,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "got {}", report.max_rel_error);
    }

    #[test]
    fn reasoning_loss_spurious_prediction_adds_background_ce() {
        let samples = tiny_dataset(1, 7);
        let stats = compute_stats(&samples).unwrap();
        let cfg = tiny_config(6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::new();
        let model = Model::init(cfg, &mut store, &mut rng).unwrap();
        let keep = fold_indices(&samples[0].primitives, TAU_SYM);
        let gt_labels: Vec<u32> = keep.iter().map(|&i| samples[0].labels[i]).collect();
        let gt_params: Vec<Params9> = keep
            .iter()
            .map(|&i| normalize(&samples[0].primitives[i], &stats.mean, &stats.std))
            .collect();

        // proposals that reason into *some* predictions; we only compare the
        // loss with and without one extra far-away prediction, so the exact
        // values do not matter.
        let image = model.image_from_depth(&samples[0].depth);
        let proposals = model.propose(&store, &image).unwrap();

        let mut tape = Tape::new();
        let out = model
            .reasoning
            .forward(&mut tape, &store, &proposals, false)
            .unwrap();
        let base = loss_reasoning(
            &mut tape, &model, &store, &out, &gt_labels, &gt_params, 10.0, false,
        )
        .unwrap();
        let base_v = tape.scalar_value(base);

        // doubling the ground truth list means every prediction can match;
        // with fewer ground truths, the leftovers must contribute exactly
        // their CE toward background. Compare against a manual recomputation.
        let n = proposals.len();
        let pred_params: Vec<Params9> = (0..n)
            .map(|i| {
                let mut v = [0.0; 9];
                v.copy_from_slice(tape.value(out.geoms[i]));
                v
            })
            .collect();
        let mut doubled_params = Vec::new();
        let mut doubled_labels = Vec::new();
        for (p, l) in gt_params.iter().zip(&gt_labels) {
            doubled_params.push(*p);
            doubled_params.push(*p);
            doubled_labels.push(*l);
            doubled_labels.push(*l);
        }
        let assignment = greedy_match(&pred_params, &doubled_params);
        let probs = tape.value(out.probs).to_vec();
        let klass = 7;
        let mut want = 0.0;
        let mut target = vec![0u32; n];
        for &(i, j) in &assignment.pairs {
            target[i] = doubled_labels[j];
        }
        for i in 0..n {
            let p: f64 = probs[i * klass + target[i] as usize].max(1e-12);
            want -= p.ln();
        }
        for &(i, j) in &assignment.pairs {
            let mut v = [0.0; 9];
            v.copy_from_slice(tape.value(out.geoms[i]));
            // matched geometry trains the assigned class head
            let g = if out.labels[i] == doubled_labels[j] {
                v
            } else {
                let mut t2 = Tape::new();
                let o2 = model
                    .reasoning
                    .forward(&mut t2, &store, &proposals, false)
                    .unwrap();
                let gv = model
                    .reasoning
                    .geometry_for(&mut t2, &store, &o2, i, doubled_labels[j], false)
                    .unwrap();
                let mut arr = [0.0; 9];
                arr.copy_from_slice(t2.value(gv));
                arr
            };
            let l1: f64 = g
                .iter()
                .zip(doubled_params[j].iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            want += 10.0 * l1;
        }
        assert!((base_v - want).abs() < 1e-9, "{base_v} vs {want}");
    }

    #[test]
    fn reasoning_loss_gradients_pass() {
        let samples = tiny_dataset(1, 9);
        let stats = compute_stats(&samples).unwrap();
        let cfg = tiny_config(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParameterStore::new();
        let model = Model::init(cfg, &mut store, &mut rng).unwrap();
        let image = model.image_from_depth(&samples[0].depth);
        let proposals = model.propose(&store, &image).unwrap();
        let keep = fold_indices(&samples[0].primitives, TAU_SYM);
        let gt_labels: Vec<u32> = keep.iter().map(|&i| samples[0].labels[i].min(3)).collect();
        let gt_params: Vec<Params9> = keep
            .iter()
            .map(|&i| normalize(&samples[0].primitives[i], &stats.mean, &stats.std))
            .collect();
        let names = store.names_with_prefix("reasoning.");
        let report = crate::nn::grad_check(
            &mut store,
            &names,
            |tape, store| {
                let out = model
                    .reasoning
                    .forward(tape, store, &proposals, true)
                    .unwrap();
                loss_reasoning(
                    tape, &model, store, &out, &gt_labels, &gt_params, 10.0, true,
                )
                .unwrap()
            },
            &mut rng,
            150,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "got {}", report.max_rel_error);
    }

    #[test]
    fn stage1_smoke_checkpoint_and_determinism() {
        let samples = tiny_dataset(8, 11);
        let schedule = TrainSchedule {
            stage1_epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            ..TrainSchedule::default()
        };
        let run = || train_stage1(&samples, tiny_config(6), &schedule, "chair").unwrap();
        let (store, meta, report) = run();
        assert_eq!(report.epoch_mean_losses.len(), 1);
        assert!(report.epoch_mean_losses[0].is_finite());

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("s1.ckpt");
        let p2 = dir.path().join("s1b.ckpt");
        store.save(&p1, Some("proposal.")).unwrap();
        meta.save(&p1).unwrap();
        let loaded = ParameterStore::load(&p1).unwrap();
        loaded.save(&p2, None).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let meta2 = CheckpointMeta::load(&p1).unwrap();
        assert_eq!(meta2.config, meta.config);
        assert_eq!(meta2.norm_mean, meta.norm_mean);

        // same seed -> identical loss curve and identical parameters
        let (store_b, _, report_b) = run();
        assert_eq!(report.epoch_mean_losses, report_b.epoch_mean_losses);
        for (a, b) in store.entries().iter().zip(store_b.entries()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn stage2_smoke_and_freeze() {
        let samples = tiny_dataset(6, 12);
        let schedule = TrainSchedule {
            stage1_epochs: 1,
            stage2_epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            ..TrainSchedule::default()
        };
        let (s1, meta, _) = train_stage1(&samples, tiny_config(6), &schedule, "chair").unwrap();
        let (s2, _, report) = train_stage2(&samples, &s1, &meta, &schedule).unwrap();
        assert_eq!(report.epoch_mean_losses.len(), 2);
        assert!(report.epoch_mean_losses.iter().all(|l| l.is_finite()));
        // frozen: every proposal.* parameter is bitwise identical
        for name in s1.names_with_prefix("proposal.") {
            assert_eq!(
                s1.get(&name).unwrap().values,
                s2.get(&name).unwrap().values,
                "{name} changed during stage 2"
            );
        }
        // reasoning parameters did change
        let changed = s2.names_with_prefix("reasoning.").iter().any(|n| {
            let fresh = {
                let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
                let mut st = ParameterStore::new();
                Model::init(meta.config.clone(), &mut st, &mut rng).unwrap();
                st.get(n).unwrap().values.clone()
            };
            s2.get(n).unwrap().values != fresh
        });
        assert!(changed);

        // determinism of stage 2
        let (s2b, _, report_b) = train_stage2(&samples, &s1, &meta, &schedule).unwrap();
        assert_eq!(report.epoch_mean_losses, report_b.epoch_mean_losses);
        for (a, b) in s2.entries().iter().zip(s2b.entries()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn stage2_requires_matching_shapes() {
        let samples = tiny_dataset(2, 13);
        let schedule = TrainSchedule {
            stage1_epochs: 1,
            stage2_epochs: 1,
            batch_size: 2,
            ..TrainSchedule::default()
        };
        let (s1, meta, _) = train_stage1(&samples, tiny_config(6), &schedule, "chair").unwrap();
        // a meta with different dims must be rejected against these params
        let mut wrong = meta.clone();
        wrong.config.hidden_dim = 24;
        assert!(train_stage2(&samples, &s1, &wrong, &schedule).is_err());
    }

    #[test]
    fn loss_reasoning_permutation_invariant() {
        let samples = tiny_dataset(1, 14);
        let stats = compute_stats(&samples).unwrap();
        let cfg = tiny_config(3);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParameterStore::new();
        let model = Model::init(cfg, &mut store, &mut rng).unwrap();
        let image = model.image_from_depth(&samples[0].depth);
        let proposals = model.propose(&store, &image).unwrap();
        let keep = fold_indices(&samples[0].primitives, TAU_SYM);
        let gt_labels: Vec<u32> = keep.iter().map(|&i| samples[0].labels[i].min(3)).collect();
        let gt_params: Vec<Params9> = keep
            .iter()
            .map(|&i| normalize(&samples[0].primitives[i], &stats.mean, &stats.std))
            .collect();
        let eval = |props: &[Proposal]| -> f64 {
            let mut tape = Tape::new();
            let out = model
                .reasoning
                .forward(&mut tape, &store, props, false)
                .unwrap();
            let loss = loss_reasoning(
                &mut tape, &model, &store, &out, &gt_labels, &gt_params, 10.0, false,
            )
            .unwrap();
            tape.scalar_value(loss)
        };
        let base = eval(&proposals);
        let mut perm = proposals.clone();
        perm.reverse();
        let flipped = eval(&perm);
        assert!((base - flipped).abs() < 1e-9, "{base} vs {flipped}");
    }

    #[test]
    fn reasoning_loss_perfect_predictions_near_zero() {
        // fabricate reasoned outputs that equal the doubled ground truth
        // with confident correct labels: the loss collapses to the CE floor
        let samples = tiny_dataset(1, 17);
        let stats = compute_stats(&samples).unwrap();
        let cfg = tiny_config(6);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut store = ParameterStore::new();
        let model = Model::init(cfg, &mut store, &mut rng).unwrap();
        let keep = fold_indices(&samples[0].primitives, TAU_SYM);
        let gt_labels: Vec<u32> = keep.iter().map(|&i| samples[0].labels[i]).collect();
        let gt_params: Vec<Params9> = keep
            .iter()
            .map(|&i| normalize(&samples[0].primitives[i], &stats.mean, &stats.std))
            .collect();

        let n = gt_params.len() * 2;
        let klass = 7;
        let mut tape = Tape::new();
        let mut node_rows = Vec::new();
        let mut labels = Vec::new();
        let mut confidences = Vec::new();
        let mut geoms = Vec::new();
        let mut prob_rows = Vec::new();
        for i in 0..n {
            let gt = i / 2;
            let mut row = vec![1e-9; klass];
            row[gt_labels[gt] as usize] = 1.0 - 1e-9 * (klass as f64 - 1.0);
            prob_rows.extend_from_slice(&row);
            labels.push(gt_labels[gt]);
            confidences.push(row[gt_labels[gt] as usize]);
            geoms.push(tape.constant(1, 9, gt_params[gt].to_vec()));
            node_rows.push(tape.constant(1, 18, vec![0.0; 18]));
        }
        let probs = tape.constant(n, klass, prob_rows);
        let out = ReasonOut {
            node_rows,
            probs,
            labels,
            confidences,
            geoms,
        };
        let loss = loss_reasoning(
            &mut tape, &model, &store, &out, &gt_labels, &gt_params, 10.0, false,
        )
        .unwrap();
        assert!(
            tape.scalar_value(loss) <= 1e-6,
            "{}",
            tape.scalar_value(loss)
        );
    }

    #[test]
    fn agnostic_mode_trains_end_to_end() {
        let samples = tiny_dataset(4, 16);
        let schedule = TrainSchedule {
            stage1_epochs: 1,
            stage2_epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            ..TrainSchedule::default()
        };
        let cfg = TrainConfig {
            agnostic: true,
            hidden_dim: Some(16),
            node_dim: Some(18),
            feature_channels: Some(8),
            roi_size: Some(2),
            ..TrainConfig::default()
        };
        let mut model_config = cfg.model_config(6);
        assert_eq!(model_config.class_count, 1);
        model_config.image_size = 16;
        let (s1, meta, r1) = train_stage1(&samples, model_config, &schedule, "chair").unwrap();
        assert!(r1.epoch_mean_losses[0].is_finite());
        let (full, meta, r2) = train_stage2(&samples, &s1, &meta, &schedule).unwrap();
        assert!(r2.epoch_mean_losses[0].is_finite());
        let model = model_from_checkpoint(&full, &meta).unwrap();
        let out = model
            .predict(&full, &samples[0].depth, &meta.norm_mean, &meta.norm_std)
            .unwrap();
        if let Some(labels) = out.shape.labels() {
            assert!(labels.iter().all(|&l| l == 1));
        }
    }
}
