//! Primitive Proposal Network: backbone encoder, count regressor and the
//! two opposite-direction recurrent generators.

use super::{ModelConfig, Proposal};
use crate::error::{Error, Result};
use crate::matching::Params9;
use crate::nn::{
    layers::sanitize_box, roi_align, Activation, ConvEncoder, Dense, LstmCell, Mlp, ParameterStore,
    Tape, Var,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generation order of a primitive sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    BottomUp,
    TopDown,
}

impl Direction {
    fn key(&self) -> &'static str {
        match self {
            Direction::BottomUp => "bu",
            Direction::TopDown => "td",
        }
    }
}

/// What the recurrence consumes at each step.
pub enum StepFeedback<'a> {
    /// Inference: feed the model's own label distribution, geometry and box.
    FreeRun,
    /// Training: feed the ground-truth label (as a one-hot), normalized
    /// parameters and 2D box of each step.
    Teacher {
        labels: &'a [u32],
        params: &'a [Params9],
        boxes: &'a [[f64; 4]],
    },
}

/// Per-step generator outputs, still on the tape.
pub struct GenStep {
    /// Label distribution over M_c classes; `None` in the agnostic setting
    /// where f_s is the constant 1.
    pub label_probs: Option<Var>,
    /// Sigmoid box prediction (1, 4).
    pub box_pred: Var,
    /// Geometry head output (1, 9) of `geom_class`.
    pub geom: Var,
    /// Class whose geometry head produced `geom` (0-based).
    pub geom_class: usize,
    /// Hidden state the readouts used (1, D_h).
    pub hidden: Var,
    /// Sanitized box actually used for ROI pooling at this step.
    pub roi_box: [f64; 4],
}

struct Generator {
    init_head: Mlp,
    lstm1: LstmCell,
    lstm2: LstmCell,
    label_head: Option<Dense>,
    box_head: Mlp,
    geom_heads: Vec<Mlp>,
}

/// Backbone + count regressor + both directional generators.
pub struct ProposalNetwork {
    config: ModelConfig,
    encoder: ConvEncoder,
    count_head: Mlp,
    bottom_up: Generator,
    top_down: Generator,
}

impl ProposalNetwork {
    pub fn init(
        config: &ModelConfig,
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = ConvEncoder::init(
            store,
            rng,
            "proposal.encoder",
            config.image_size,
            config.image_size,
            config.feature_channels,
            config.global_dim,
        )?;
        let count_head = Mlp::init(
            store,
            rng,
            "proposal.count",
            &[config.global_dim, config.hidden_dim, 1],
            Activation::None,
        );
        let bottom_up = Self::init_generator(config, store, rng, Direction::BottomUp);
        let top_down = Self::init_generator(config, store, rng, Direction::TopDown);
        Ok(Self {
            config: config.clone(),
            encoder,
            count_head,
            bottom_up,
            top_down,
        })
    }

    fn init_generator(
        config: &ModelConfig,
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        direction: Direction,
    ) -> Generator {
        let mc = config.class_count as usize;
        let dh = config.hidden_dim;
        let base = format!("proposal.gen_{}", direction.key());
        let input_dim = config.global_dim
            + config.feature_channels * config.roi_size * config.roi_size
            + 4
            + mc
            + 9;
        let init_head = Mlp::init(
            store,
            rng,
            &format!("{base}.init"),
            &[config.global_dim, dh, 2 * dh],
            Activation::None,
        );
        let lstm1 = LstmCell::init(store, rng, &format!("{base}.lstm1"), input_dim, dh);
        let lstm2 = LstmCell::init(store, rng, &format!("{base}.lstm2"), dh, dh);
        let label_head = if config.agnostic() {
            None
        } else {
            Some(Dense::init(
                store,
                rng,
                &format!("{base}.label"),
                dh,
                mc,
                Activation::Softmax,
            ))
        };
        let box_head = Mlp::init(
            store,
            rng,
            &format!("{base}.box"),
            &[dh, dh, 4],
            Activation::None,
        );
        let geom_heads = (0..mc)
            .map(|c| {
                Mlp::init(
                    store,
                    rng,
                    &format!("{base}.geom{c}"),
                    &[dh, dh, 9],
                    Activation::None,
                )
            })
            .collect();
        Generator {
            init_head,
            lstm1,
            lstm2,
            label_head,
            box_head,
            geom_heads,
        }
    }

    fn generator(&self, direction: Direction) -> &Generator {
        match direction {
            Direction::BottomUp => &self.bottom_up,
            Direction::TopDown => &self.top_down,
        }
    }

    /// Runs the backbone on a flat image (length image_size^2), returning
    /// the feature map Gamma and the global feature x^g.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        image: &[f64],
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let n = self.config.image_size * self.config.image_size;
        if image.len() != n {
            return Err(Error::shape(format!(
                "image has {} pixels, expected {n}",
                image.len()
            )));
        }
        let img = tape.constant(1, n, image.to_vec());
        self.encoder.forward(tape, store, img, trainable)
    }

    /// Count regressor: raw output plus the clamped, half-up-rounded count
    /// in [1, n_max].
    pub fn count(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        xg: Var,
        trainable: bool,
    ) -> Result<(Var, usize)> {
        let raw = self.count_head.forward(tape, store, xg, trainable)?;
        let value = tape.scalar_value(raw);
        let n_p = round_count(value, self.config.n_max);
        tape.note_branch(n_p as u64);
        Ok((raw, n_p))
    }

    /// Unrolls one directional generator for `n_steps` proposals.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_sequence(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        gamma: Var,
        xg: Var,
        n_steps: usize,
        direction: Direction,
        feedback: StepFeedback,
        trainable: bool,
    ) -> Result<Vec<GenStep>> {
        if n_steps < 1 {
            return Err(Error::invalid("generator needs at least one step"));
        }
        if let StepFeedback::Teacher {
            labels,
            params,
            boxes,
        } = &feedback
        {
            if labels.len() != n_steps || params.len() != n_steps || boxes.len() != n_steps {
                return Err(Error::shape(format!(
                    "teacher forcing needs {n_steps} targets, got {}/{}/{}",
                    labels.len(),
                    params.len(),
                    boxes.len()
                )));
            }
        }
        let g = self.generator(direction);
        let mc = self.config.class_count as usize;
        let dh = self.config.hidden_dim;
        let (hf, wf) = self.encoder.feature_size();

        let init = g.init_head.forward(tape, store, xg, trainable)?;
        let mut h1 = tape.slice_cols(init, 0, dh);
        let mut h2 = tape.slice_cols(init, dh, dh);
        let mut c1 = tape.constant(1, dh, vec![0.0; dh]);
        let mut c2 = tape.constant(1, dh, vec![0.0; dh]);

        let mut steps = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            // readouts from the current hidden state
            let label_probs = match &g.label_head {
                Some(head) => Some(head.forward(tape, store, h2, trainable)?),
                None => None,
            };
            let geom_class = match (&feedback, &label_probs) {
                (StepFeedback::Teacher { labels, .. }, _) => (labels[i].max(1) - 1) as usize,
                (StepFeedback::FreeRun, Some(p)) => argmax(tape.value(*p)),
                (StepFeedback::FreeRun, None) => 0,
            };
            tape.note_branch(geom_class as u64);
            let box_raw = g.box_head.forward(tape, store, h2, trainable)?;
            let box_pred = tape.sigmoid(box_raw);
            let geom = g.geom_heads[geom_class].forward(tape, store, h2, trainable)?;

            let roi_box = match &feedback {
                StepFeedback::Teacher { boxes, .. } => sanitize_box(boxes[i])?,
                StepFeedback::FreeRun => {
                    let v = tape.value(box_pred);
                    sanitize_box([v[0], v[1], v[2], v[3]])?
                }
            };
            steps.push(GenStep {
                label_probs,
                box_pred,
                geom,
                geom_class,
                hidden: h2,
                roi_box,
            });

            if i + 1 == n_steps {
                break;
            }
            // recurrence inputs: x^g, v_i, b_i, s_i, p_i
            let v = roi_align(tape, gamma, hf, wf, roi_box, self.config.roi_size)?;
            let (b_in, s_in, p_in) = match &feedback {
                StepFeedback::Teacher {
                    labels,
                    params,
                    boxes,
                } => {
                    let b = tape.constant(1, 4, boxes[i].to_vec());
                    let mut onehot = vec![0.0; mc];
                    onehot[(labels[i].max(1) - 1) as usize] = 1.0;
                    let s = tape.constant(1, mc, onehot);
                    let p = tape.constant(1, 9, params[i].to_vec());
                    (b, s, p)
                }
                StepFeedback::FreeRun => {
                    let s = match steps[i].label_probs {
                        Some(p) => p,
                        None => tape.constant(1, 1, vec![1.0]),
                    };
                    (steps[i].box_pred, s, steps[i].geom)
                }
            };
            let x = tape.concat_cols(&[xg, v, b_in, s_in, p_in]);
            let (h1n, c1n) = g.lstm1.forward(tape, store, x, h1, c1, trainable)?;
            let (h2n, c2n) = g.lstm2.forward(tape, store, h1n, h2, c2, trainable)?;
            h1 = h1n;
            c1 = c1n;
            h2 = h2n;
            c2 = c2n;
        }
        Ok(steps)
    }

    /// Extracts the plain-value proposal from a generated step.
    pub fn step_to_proposal(&self, tape: &Tape, step: &GenStep, direction: Direction) -> Proposal {
        let mc = self.config.class_count as usize;
        let label_probs = match step.label_probs {
            Some(v) => tape.value(v).to_vec(),
            None => vec![1.0; mc],
        };
        let mut params = [0.0; 9];
        params.copy_from_slice(tape.value(step.geom));
        Proposal {
            params,
            label_probs,
            hidden: tape.value(step.hidden).to_vec(),
            image_box: step.roi_box,
            direction,
        }
    }
}

/// Half-up rounding clamped to [1, n_max].
pub fn round_count(raw: f64, n_max: usize) -> usize {
    let r = (raw + 0.5).floor();
    if !r.is_finite() || r < 1.0 {
        1
    } else if r > n_max as f64 {
        n_max
    } else {
        r as usize
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
