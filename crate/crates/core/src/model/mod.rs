//! The two-stage network: a Primitive Proposal Network (backbone, count
//! regressor, two opposite-direction recurrent generators) and a Primitive
//! Reasoning Network (node embedding, one-step attention message passing,
//! readout with a background class), plus full-image inference.
//!
//! Parameter names are namespaced `proposal.*` and `reasoning.*` so the two
//! stages load and freeze independently.

pub mod proposal;
pub mod reasoning;

use crate::error::{Error, Result};
use crate::geometry::Primitive;
use crate::matching::{pairing_nms, Params9};
use crate::metrics::ShapeSet;
use crate::nn::{ParameterStore, Tape};
use crate::synthdata::mirror_expand;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use proposal::{Direction, GenStep, ProposalNetwork, StepFeedback};
pub use reasoning::{ReasonOut, ReasoningNetwork};

/// Structural hyperparameters of the two-stage model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Semantic class count M_c (1 in the semantic-agnostic setting).
    pub class_count: u32,
    /// LSTM hidden size D_h.
    pub hidden_dim: usize,
    /// Graph node size D_z.
    pub node_dim: usize,
    /// Maximum folded sequence length.
    pub n_max: usize,
    /// Square input image side; must be divisible by 8.
    pub image_size: usize,
    /// Channels of the backbone feature map.
    pub feature_channels: usize,
    /// Global image feature size.
    pub global_dim: usize,
    /// ROI-align grid side k.
    pub roi_size: usize,
    /// |t_x| band treated as on-plane for symmetry expansion.
    pub tau_sym: f64,
    /// Depth values are multiplied by this before entering the encoder.
    pub depth_scale: f64,
}

impl ModelConfig {
    /// Desk-scale preset: trains in minutes on one CPU.
    pub fn desk(class_count: u32) -> Self {
        Self {
            class_count,
            hidden_dim: 64,
            node_dim: 96,
            n_max: 15,
            image_size: 64,
            feature_channels: 32,
            global_dim: 256,
            roi_size: 4,
            tau_sym: crate::synthdata::TAU_SYM,
            depth_scale: 1.0 / crate::synthdata::CAMERA_RADIUS,
        }
    }

    /// Dimensions used for the full-scale model (D_h = 800, D_z = 1024).
    pub fn paper(class_count: u32) -> Self {
        Self {
            hidden_dim: 800,
            node_dim: 1024,
            ..Self::desk(class_count)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 1 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.node_dim == 0 || self.n_max == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return Err(Error::Config("image_size must be divisible by 8".into()));
        }
        if self.roi_size == 0 {
            return Err(Error::Config("roi_size must be positive".into()));
        }
        Ok(())
    }

    /// True in the semantic-agnostic setting (M_c = 1).
    pub fn agnostic(&self) -> bool {
        self.class_count == 1
    }
}

/// Sidecar metadata stored next to a checkpoint: the model structure plus
/// the parameter-normalization statistics of its training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub category: String,
    pub norm_mean: [f64; 9],
    pub norm_std: [f64; 9],
}

impl CheckpointMeta {
    pub fn meta_path(ckpt: &std::path::Path) -> std::path::PathBuf {
        let mut os = ckpt.as_os_str().to_os_string();
        os.push(".meta.json");
        std::path::PathBuf::from(os)
    }

    pub fn save(&self, ckpt: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("cannot serialize checkpoint meta: {e}")))?;
        std::fs::write(Self::meta_path(ckpt), text)?;
        Ok(())
    }

    pub fn load(ckpt: &std::path::Path) -> Result<Self> {
        let path = Self::meta_path(ckpt);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Checkpoint(format!(
                "cannot read checkpoint meta {}: {e}",
                path.display()
            ))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("bad checkpoint meta {}: {e}", path.display())))
    }
}

/// A primitive hypothesis emitted by the proposal network. Geometry lives in
/// the normalized parameter frame.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub params: Params9,
    /// Semantic label distribution over M_c classes (sums to 1).
    pub label_probs: Vec<f64>,
    /// Hidden feature of size D_h at the emitting step.
    pub hidden: Vec<f64>,
    /// Sanitized 2D image box (x0, y0, x1, y1) in [0,1]^2.
    pub image_box: [f64; 4],
    pub direction: Direction,
}

/// A reasoned primitive with its class distribution over M_c + 1 classes
/// (index 0 is background).
#[derive(Debug, Clone)]
pub struct FinalPrediction {
    pub params: Params9,
    pub probs: Vec<f64>,
    /// argmax over all classes; 0 means background.
    pub label: u32,
    /// Probability of the argmax class.
    pub confidence: f64,
}

/// Result of full-image inference.
#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub shape: ShapeSet,
    /// Set when every reasoned primitive was classified background.
    pub empty_warning: bool,
}

/// The assembled two-stage model.
pub struct Model {
    pub config: ModelConfig,
    pub proposal: ProposalNetwork,
    pub reasoning: ReasoningNetwork,
}

impl Model {
    /// Registers all parameters into `store` and returns the wiring.
    pub fn init(
        config: ModelConfig,
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let proposal = ProposalNetwork::init(&config, store, rng)?;
        let reasoning = ReasoningNetwork::init(&config, store, rng)?;
        Ok(Self {
            config,
            proposal,
            reasoning,
        })
    }

    /// Scales a raw depth raster into the encoder's input range.
    pub fn image_from_depth(&self, depth: &[f32]) -> Vec<f64> {
        depth
            .iter()
            .map(|&v| v as f64 * self.config.depth_scale)
            .collect()
    }

    /// Runs the full proposal network on an image (frozen weights): encoder,
    /// count regressor, both directional generators. Returns the unordered
    /// union of the two sequences, 2 n_p proposals.
    pub fn propose(&self, store: &ParameterStore, image: &[f64]) -> Result<Vec<Proposal>> {
        let mut tape = Tape::new();
        let (gamma, xg) = self.proposal.encode(&mut tape, store, image, false)?;
        let (_, n_p) = self.proposal.count(&mut tape, store, xg, false)?;
        let mut out = Vec::with_capacity(2 * n_p);
        for direction in [Direction::BottomUp, Direction::TopDown] {
            let steps = self.proposal.generate_sequence(
                &mut tape,
                store,
                gamma,
                xg,
                n_p,
                direction,
                StepFeedback::FreeRun,
                false,
            )?;
            for s in steps {
                out.push(self.proposal.step_to_proposal(&tape, &s, direction));
            }
        }
        Ok(out)
    }

    /// Runs the reasoning network on a proposal set (frozen weights).
    pub fn reason(
        &self,
        store: &ParameterStore,
        proposals: &[Proposal],
    ) -> Result<Vec<FinalPrediction>> {
        let mut tape = Tape::new();
        let out = self.reasoning.forward(&mut tape, store, proposals, false)?;
        Ok(out.final_predictions(&tape))
    }

    /// Full-image inference: propose, reason, drop background, pairing NMS,
    /// denormalize, expand symmetric primitives by mirroring.
    pub fn predict(
        &self,
        store: &ParameterStore,
        depth: &[f32],
        norm_mean: &[f64; 9],
        norm_std: &[f64; 9],
    ) -> Result<PredictOutcome> {
        let image = self.image_from_depth(depth);
        let proposals = self.propose(store, &image)?;
        let finals = self.reason(store, &proposals)?;

        let survivors: Vec<(Params9, u32, f64)> = finals
            .iter()
            .filter(|f| f.label > 0)
            .map(|f| (f.params, f.label, f.confidence))
            .collect();
        if survivors.is_empty() {
            log::warn!("all reasoned primitives were classified background");
            return Ok(PredictOutcome {
                shape: ShapeSet::default(),
                empty_warning: true,
            });
        }
        let kept = pairing_nms(&survivors);

        let mut folded = Vec::with_capacity(kept.len());
        for (params, label, _) in &kept {
            folded.push((*label, denormalize(params, norm_mean, norm_std)?));
        }
        let expanded = mirror_expand(&folded, self.config.tau_sym);
        let labels: Vec<u32> = expanded.iter().map(|(l, _)| *l).collect();
        let prims: Vec<Primitive> = expanded.iter().map(|(_, p)| *p).collect();
        Ok(PredictOutcome {
            shape: ShapeSet::with_labels(prims, labels)?,
            empty_warning: false,
        })
    }
}

/// Maps a normalized parameter vector back to a world-frame primitive.
/// Denormalized lengths are floored at 1e-4 so the result is always a valid
/// box.
pub fn denormalize(params: &Params9, mean: &[f64; 9], std: &[f64; 9]) -> Result<Primitive> {
    let mut v = [0.0; 9];
    for i in 0..9 {
        v[i] = params[i] * std[i] + mean[i];
    }
    for l in v[..3].iter_mut() {
        if !l.is_finite() {
            return Err(Error::invalid("non-finite denormalized length"));
        }
        *l = l.max(1e-4);
    }
    Primitive::from_params(&v)
}

/// Maps a world-frame primitive into the normalized parameter frame.
pub fn normalize(p: &Primitive, mean: &[f64; 9], std: &[f64; 9]) -> Params9 {
    let v = p.params();
    let mut out = [0.0; 9];
    for i in 0..9 {
        out[i] = (v[i] - mean[i]) / std[i];
    }
    out
}
