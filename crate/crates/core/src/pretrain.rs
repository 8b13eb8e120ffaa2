//! Self-supervised pretraining: clip sampling, mask planning, the masked
//! reconstruction loss, and per-clip losses for the three reconstruction
//! objectives (slot-context prediction, single-frame autoencoding, and the
//! factorized video autoencoder baseline).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    decode_frame, encode_image, encode_pooled, temporal_forward, FrameTokens, ModelConfig,
};
use crate::nn::DropRng;
use crate::params::Params;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Pretraining hyperparameters. Reference defaults follow the source
/// protocol (32 frames, 8 context frames, 37.5% masking, lr 1e-3,
/// 1000 epochs at batch 256); desk configs scale these down.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub total_frames: usize,
    pub context_frames: usize,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Loss over every query patch instead of masked patches only.
    pub loss_all_patches: bool,
}

impl PretrainConfig {
    pub fn paper_default() -> Self {
        PretrainConfig {
            total_frames: 32,
            context_frames: 8,
            mask_ratio: 0.375,
            epochs: 1000,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            loss_all_patches: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.context_frames >= self.total_frames {
            return Err(format!(
                "context_frames {} must be < total_frames {}",
                self.context_frames, self.total_frames
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(format!("mask_ratio {} violates 0 < r < 1", self.mask_ratio));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Masked patches per query frame for ratio `r`.
pub fn mask_count(r: f64, total_patches: usize) -> usize {
    (r * total_patches as f64).round() as usize
}

/// Per-clip masking description: which frames are context (fully visible)
/// and which patches each query frame hides.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted context frame positions within the clip.
    pub context_frames: Vec<usize>,
    /// `masked[t]` lists the masked patch ids of frame `t`, sorted;
    /// empty for context frames.
    pub masked: Vec<Vec<usize>>,
}

impl MaskPlan {
    pub fn total_frames(&self) -> usize {
        self.masked.len()
    }

    pub fn is_context(&self, frame: usize) -> bool {
        self.context_frames.binary_search(&frame).is_ok()
    }

    /// Query frame positions in ascending order.
    pub fn query_frames(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|f| !self.is_context(*f)).collect()
    }

    /// Sorted unmasked patch ids of a frame.
    pub fn unmasked_ids(&self, frame: usize, total_patches: usize) -> Vec<usize> {
        let masked = &self.masked[frame];
        (0..total_patches).filter(|i| masked.binary_search(i).is_err()).collect()
    }
}

/// Sample `t` distinct frame indices uniformly without replacement, then
/// sort ascending to preserve the arrow of time.
pub fn sample_clip(video_len: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(
        video_len >= t,
        "cannot sample {t} frames from a video of {video_len}"
    );
    let mut all: Vec<usize> = (0..video_len).collect();
    all.partial_shuffle(rng, t);
    let mut picked = all[..t].to_vec();
    picked.sort_unstable();
    picked
}

/// Choose `c` context frames uniformly; every other frame masks exactly
/// `round(r · total_patches)` uniformly chosen patches.
pub fn make_mask_plan(
    t: usize,
    c: usize,
    total_patches: usize,
    r: f64,
    rng: &mut ChaCha8Rng,
) -> MaskPlan {
    assert!(c < t, "context frames {c} must be < total frames {t}");
    assert!(r > 0.0 && r < 1.0, "mask ratio {r} violates 0 < r < 1");
    let k = mask_count(r, total_patches);
    let mut frames: Vec<usize> = (0..t).collect();
    frames.partial_shuffle(rng, c);
    let mut context: Vec<usize> = frames[..c].to_vec();
    context.sort_unstable();

    let masked = (0..t)
        .map(|f| {
            if context.binary_search(&f).is_ok() {
                Vec::new()
            } else {
                let mut patches: Vec<usize> = (0..total_patches).collect();
                patches.partial_shuffle(rng, k);
                let mut picked = patches[..k].to_vec();
                picked.sort_unstable();
                picked
            }
        })
        .collect();
    MaskPlan { context_frames: context, masked }
}

/// Mean squared error over the masked patch pixels of every query frame
/// (or over all query patches when `loss_all_patches` is set). `preds` and
/// `targets` are aligned with `plan.query_frames()`.
pub fn reconstruction_loss<F: Scalar>(
    tape: &mut Tape<F>,
    preds: &[Tensor<F>],
    targets: &[Tensor<F>],
    plan: &MaskPlan,
    loss_all_patches: bool,
) -> Tensor<F> {
    let query = plan.query_frames();
    assert_eq!(preds.len(), query.len(), "one prediction per query frame");
    assert_eq!(targets.len(), query.len(), "one target per query frame");
    let mut parts = Vec::new();
    for ((&frame, pred), target) in query.iter().zip(preds).zip(targets) {
        assert_eq!(pred.shape(), target.shape(), "prediction/target shapes disagree");
        let diff = if loss_all_patches {
            tape.sub(pred, target)
        } else {
            let ids = &plan.masked[frame];
            let p = tape.gather_rows(pred, ids);
            let t = tape.gather_rows(target, ids);
            tape.sub(&p, &t)
        };
        parts.push(diff);
    }
    let all = tape.concat_rows(&parts);
    let sq = tape.mul(&all, &all);
    tape.mean_all(&sq)
}

/// One clip ready for pretraining: patchified f32 frames in clip order.
pub struct ClipFrames<F: Scalar = f32> {
    pub frames: Vec<Tensor<F>>,
}

/// Slot-context reconstruction loss for one clip: context frames are fully
/// encoded and pooled into slots, query frames are encoded from unmasked
/// patches, the temporal transformer propagates both, and the decoder
/// reconstructs every query frame.
pub fn ivcl_clip_loss<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    clip: &ClipFrames<F>,
    plan: &MaskPlan,
    loss_all_patches: bool,
    mut drop: DropRng,
    mut gumbel: Option<&mut ChaCha8Rng>,
) -> Tensor<F> {
    assert_eq!(clip.frames.len(), plan.total_frames(), "clip length vs mask plan");
    let total = cfg.grid_tokens();

    let mut context_slots = Vec::new();
    for &f in &plan.context_frames {
        let (slots, _) = encode_pooled(
            tape,
            params,
            cfg,
            &clip.frames[f],
            drop.as_deref_mut(),
            gumbel.as_deref_mut(),
        );
        context_slots.push(FrameTokens { frame_idx: f, tokens: slots });
    }

    let query = plan.query_frames();
    let mut query_tokens = Vec::new();
    let mut unmasked: Vec<Vec<usize>> = Vec::new();
    for &f in &query {
        let ids = plan.unmasked_ids(f, total);
        let (enc, _) = encode_image(tape, params, cfg, &clip.frames[f], &ids, drop.as_deref_mut());
        query_tokens.push(FrameTokens { frame_idx: f, tokens: enc.patches });
        unmasked.push(ids);
    }

    let contextualized =
        temporal_forward(tape, params, cfg, &context_slots, &query_tokens, drop.as_deref_mut());

    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (i, &f) in query.iter().enumerate() {
        let pred =
            decode_frame(tape, params, cfg, &contextualized[i], &unmasked[i], drop.as_deref_mut());
        preds.push(pred);
        targets.push(clip.frames[f].detached());
    }
    reconstruction_loss(tape, &preds, &targets, plan, loss_all_patches)
}

/// Single-frame masked autoencoding: the degenerate one-frame, zero-context
/// case of the clip loss.
pub fn image_mae_loss<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frame: &Tensor<F>,
    masked_ids: &[usize],
    loss_all_patches: bool,
    drop: DropRng,
) -> Tensor<F> {
    let plan = MaskPlan { context_frames: Vec::new(), masked: vec![masked_ids.to_vec()] };
    let clip = ClipFrames { frames: vec![frame.clone()] };
    ivcl_clip_loss(tape, params, cfg, &clip, &plan, loss_all_patches, drop, None)
}

/// Factorized video autoencoding baseline: every frame is a query frame,
/// per-frame encoding uses patch tokens only (no slot tokens), and the
/// temporal transformer jointly attends over all frames' unmasked patches.
pub fn video_mae_clip_loss<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    clip: &ClipFrames<F>,
    plan: &MaskPlan,
    loss_all_patches: bool,
    mut drop: DropRng,
) -> Tensor<F> {
    assert!(plan.context_frames.is_empty(), "video autoencoding uses no context frames");
    assert_eq!(clip.frames.len(), plan.total_frames(), "clip length vs mask plan");
    let total = cfg.grid_tokens();

    let mut query_tokens = Vec::new();
    let mut unmasked = Vec::new();
    let mut token_count = 0;
    for (f, frame) in clip.frames.iter().enumerate() {
        let ids = plan.unmasked_ids(f, total);
        let (patches, _) =
            crate::model::encode_patches_only(tape, params, cfg, frame, &ids, drop.as_deref_mut());
        token_count += patches.dim(0);
        query_tokens.push(FrameTokens { frame_idx: f, tokens: patches });
        unmasked.push(ids);
    }
    let expected: usize = unmasked.iter().map(|u| u.len()).sum();
    assert_eq!(token_count, expected, "temporal input must carry every unmasked patch token");

    let contextualized = temporal_forward(tape, params, cfg, &[], &query_tokens, drop.as_deref_mut());

    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (f, frame) in clip.frames.iter().enumerate() {
        let pred =
            decode_frame(tape, params, cfg, &contextualized[f], &unmasked[f], drop.as_deref_mut());
        preds.push(pred);
        targets.push(frame.detached());
    }
    reconstruction_loss(tape, &preds, &targets, plan, loss_all_patches)
}
