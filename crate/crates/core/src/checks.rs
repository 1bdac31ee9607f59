//! The numerical verification suite behind the `gradcheck` CLI verb: central
//! finite-difference checks of every differentiable operation and of both
//! full loss graphs at desk dimensions (D_h = 64, D_z = 96, six proposals).

use crate::error::Result;
use crate::model::{Direction, Model, ModelConfig, StepFeedback};
use crate::nn::{
    grad_check, losses, roi_align, Activation, ConvEncoder, Dense, GradCheckReport, Init, LstmCell,
    ParameterStore, Tape,
};
use crate::synthdata::{generate_dataset, ObjectTemplate};
use crate::training::{canonical_targets, compute_stats, loss_proposal_direction, loss_reasoning};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One named check with its tolerance.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Suite selector, mirroring `gradcheck --module`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Nn,
    Model,
    Training,
}

/// Runs the finite-difference suite for the selected modules over
/// `seed_count` seeds. Returns every outcome (the caller decides how to
/// print them).
pub fn run_gradcheck(module: Option<CheckModule>, seed_count: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for seed in 0..seed_count {
        if module.is_none() || module == Some(CheckModule::Nn) {
            out.extend(op_checks(seed)?);
        }
        if module.is_none() || module == Some(CheckModule::Model) {
            out.push(reasoning_graph_check(seed)?);
        }
        if module.is_none() || module == Some(CheckModule::Training) {
            out.push(proposal_loss_check(seed)?);
            out.push(reasoning_loss_check(seed)?);
        }
    }
    Ok(out)
}

fn outcome(name: impl Into<String>, report: GradCheckReport, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        report,
        tolerance,
    }
}

/// Per-operation checks: quadratic sanity, dense+relu, the LSTM cell's
/// weight blocks, the conv encoder, ROI pooling and the loss terms.
pub fn op_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(seed));

    {
        let mut store = ParameterStore::new();
        store.add("x", 1, 8, Init::UniformFanIn, &mut rng);
        let names = vec!["x".to_string()];
        let report = grad_check(
            &mut store,
            &names,
            |t, s| {
                let x = t.param(s, "x", true);
                let sq = t.mul(x, x);
                t.sum_all(sq)
            },
            &mut rng,
            200,
        )?;
        results.push(outcome(format!("nn.quadratic[seed {seed}]"), report, 1e-9));
    }

    {
        let mut store = ParameterStore::new();
        let layer = Dense::init(&mut store, &mut rng, "d", 6, 5, Activation::Relu);
        store.add("x", 2, 6, Init::UniformFanIn, &mut rng);
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = grad_check(
            &mut store,
            &names,
            move |t, s| {
                let x = t.param(s, "x", true);
                let y = layer.forward(t, s, x, true).unwrap();
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &mut rng,
            200,
        )?;
        results.push(outcome(format!("nn.dense_relu[seed {seed}]"), report, 1e-6));
    }

    {
        let mut store = ParameterStore::new();
        let cell = LstmCell::init(&mut store, &mut rng, "lstm", 5, 4);
        store.add("x", 1, 5, Init::UniformFanIn, &mut rng);
        store.add("h", 1, 4, Init::UniformFanIn, &mut rng);
        store.add("c", 1, 4, Init::UniformFanIn, &mut rng);
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = grad_check(
            &mut store,
            &names,
            move |t, s| {
                let x = t.param(s, "x", true);
                let h = t.param(s, "h", true);
                let c = t.param(s, "c", true);
                let (h1, c1) = cell.forward(t, s, x, h, c, true).unwrap();
                let (h2, _) = cell.forward(t, s, x, h1, c1, true).unwrap();
                let sq = t.mul(h2, h2);
                t.sum_all(sq)
            },
            &mut rng,
            200,
        )?;
        results.push(outcome(format!("nn.lstm_cell[seed {seed}]"), report, 1e-6));
    }

    {
        let mut store = ParameterStore::new();
        let enc = ConvEncoder::init(&mut store, &mut rng, "enc", 16, 16, 8, 12)?;
        store.add("img", 1, 256, Init::UniformFanIn, &mut rng);
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = grad_check(
            &mut store,
            &names,
            move |t, s| {
                let img = t.param(s, "img", true);
                let (gamma, xg) = enc.forward(t, s, img, true).unwrap();
                let g2 = t.mul(gamma, gamma);
                let a = t.sum_all(g2);
                let x2 = t.mul(xg, xg);
                let b = t.sum_all(x2);
                t.add(a, b)
            },
            &mut rng,
            200,
        )?;
        results.push(outcome(
            format!("nn.conv_encoder[seed {seed}]"),
            report,
            1e-5,
        ));
    }

    {
        let mut store = ParameterStore::new();
        store.add("gamma", 3, 36, Init::UniformFanIn, &mut rng);
        let names = vec!["gamma".to_string()];
        let report = grad_check(
            &mut store,
            &names,
            |t, s| {
                let g = t.param(s, "gamma", true);
                let v = roi_align(t, g, 6, 6, [0.15, 0.2, 0.85, 0.75], 3).unwrap();
                let sq = t.mul(v, v);
                t.sum_all(sq)
            },
            &mut rng,
            200,
        )?;
        results.push(outcome(format!("nn.roi_align[seed {seed}]"), report, 1e-5));
    }

    {
        let mut store = ParameterStore::new();
        store.add("x", 1, 7, Init::UniformFanIn, &mut rng);
        let mut trng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let target: Vec<f64> = (0..7)
            .map(|_| rand::Rng::gen_range(&mut trng, -1.0..1.0))
            .collect();
        let names = vec!["x".to_string()];
        let report = grad_check(
            &mut store,
            &names,
            move |t, s| {
                let x = t.param(s, "x", true);
                let a = losses::l1(t, x, &target);
                let b = losses::smooth_l1(t, x, &target);
                let p = t.softmax_rows(x);
                let c = losses::cross_entropy(t, p, 3);
                let ab = t.add(a, b);
                t.add(ab, c)
            },
            &mut rng,
            200,
        )?;
        results.push(outcome(format!("nn.loss_terms[seed {seed}]"), report, 1e-6));
    }

    Ok(results)
}

fn desk_fixture(seed: u64) -> Result<(Model, ParameterStore, crate::synthdata::DatasetSample)> {
    let tpl = ObjectTemplate::chair();
    let samples = generate_dataset(&tpl, 1, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model = Model::init(ModelConfig::desk(tpl.class_count), &mut store, &mut rng)?;
    Ok((model, store, samples.into_iter().next().unwrap()))
}

/// Full reasoning forward graph at desk dimensions.
pub fn reasoning_graph_check(seed: u64) -> Result<CheckOutcome> {
    let (model, mut store, sample) = desk_fixture(seed)?;
    let image = model.image_from_depth(&sample.depth);
    let proposals = six_proposals(&model, &store, &image)?;
    let names = store.names_with_prefix("reasoning.");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
    let report = grad_check(
        &mut store,
        &names,
        |tape, store| {
            let out = model
                .reasoning
                .forward(tape, store, &proposals, true)
                .unwrap();
            let mut total = tape.scalar(0.0);
            for g in &out.geoms {
                let sq = tape.mul(*g, *g);
                let s = tape.sum_all(sq);
                total = tape.add(total, s);
            }
            let p2 = tape.mul(out.probs, out.probs);
            let sp = tape.sum_all(p2);
            tape.add(total, sp)
        },
        &mut rng,
        200,
    )?;
    Ok(outcome(
        format!("model.reasoning_graph[seed {seed}]"),
        report,
        1e-4,
    ))
}

/// Frozen proposal pass yielding exactly six proposals (three per
/// direction).
fn six_proposals(
    model: &Model,
    store: &ParameterStore,
    image: &[f64],
) -> Result<Vec<crate::model::Proposal>> {
    let mut tape = Tape::new();
    let (gamma, xg) = model.proposal.encode(&mut tape, store, image, false)?;
    let mut proposals = Vec::with_capacity(6);
    for direction in [Direction::BottomUp, Direction::TopDown] {
        let steps = model.proposal.generate_sequence(
            &mut tape,
            store,
            gamma,
            xg,
            3,
            direction,
            StepFeedback::FreeRun,
            false,
        )?;
        for s in &steps {
            proposals.push(model.proposal.step_to_proposal(&tape, s, direction));
        }
    }
    Ok(proposals)
}

/// The teacher-forced proposal loss (two directions of 3 steps each) at
/// desk dimensions, checked through encoder, count head and both generators.
pub fn proposal_loss_check(seed: u64) -> Result<CheckOutcome> {
    let (model, mut store, sample) = desk_fixture(seed)?;
    let stats = compute_stats(std::slice::from_ref(&sample))?;
    let (bu, td) = canonical_targets(&sample, &stats, false);
    // truncate both sequences to three steps (2 N_O = 6)
    let cut = |mut t: crate::training::StepTargets| {
        t.labels.truncate(3);
        t.params.truncate(3);
        t.boxes.truncate(3);
        t
    };
    let bu = cut(bu);
    let td = cut(td);
    let image = model.image_from_depth(&sample.depth);
    let names = store.names_with_prefix("proposal.");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 29);
    let n_o = 3.0;
    let report = grad_check(
        &mut store,
        &names,
        |tape, store| {
            let (gamma, xg) = model.proposal.encode(tape, store, &image, true).unwrap();
            let (raw, _) = model.proposal.count(tape, store, xg, true).unwrap();
            let mut loss = losses::l1(tape, raw, &[n_o]);
            for (direction, tgt) in [(Direction::BottomUp, &bu), (Direction::TopDown, &td)] {
                let steps = model
                    .proposal
                    .generate_sequence(
                        tape,
                        store,
                        gamma,
                        xg,
                        3,
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
        200,
    )?;
    Ok(outcome(
        format!("training.proposal_loss[seed {seed}]"),
        report,
        1e-4,
    ))
}

/// The reasoning loss (six predictions greedy-matched against the doubled
/// folded ground truth) at desk dimensions.
pub fn reasoning_loss_check(seed: u64) -> Result<CheckOutcome> {
    let (model, mut store, sample) = desk_fixture(seed)?;
    let stats = compute_stats(std::slice::from_ref(&sample))?;
    let image = model.image_from_depth(&sample.depth);
    let proposals = six_proposals(&model, &store, &image)?;
    let keep = crate::synthdata::fold_indices(&sample.primitives, crate::synthdata::TAU_SYM);
    let gt_labels: Vec<u32> = keep.iter().map(|&i| sample.labels[i]).collect();
    let gt_params: Vec<[f64; 9]> = keep
        .iter()
        .map(|&i| crate::model::normalize(&sample.primitives[i], &stats.mean, &stats.std))
        .collect();
    let names = store.names_with_prefix("reasoning.");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 31);
    let report = grad_check(
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
        200,
    )?;
    Ok(outcome(
        format!("training.reasoning_loss[seed {seed}]"),
        report,
        1e-4,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_suite_passes() {
        let outcomes = run_gradcheck(None, 1).unwrap();
        assert!(!outcomes.is_empty());
        for o in &outcomes {
            assert!(
                o.passed(),
                "{} failed: {} >= {} (checked {}, skipped {})",
                o.name,
                o.report.max_rel_error,
                o.tolerance,
                o.report.checked,
                o.report.skipped
            );
        }
    }
}
