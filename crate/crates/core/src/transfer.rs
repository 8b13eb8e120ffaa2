//! Transfer learning: a single linear head over the pooled video encoding,
//! trained with softmax cross-entropy under AdamW. Frame selection is
//! random (sorted) during training and uniformly strided, anchored at the
//! final frame, during evaluation.

use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::model::{encode_video_for_transfer, ModelConfig};
use crate::nn::{self, DropRng};
use crate::params::Params;
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Downstream reasoning task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    ShellGame,
    Blicket,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shell_game" => Some(Task::ShellGame),
            "blicket" => Some(Task::Blicket),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::ShellGame => "shell_game",
            Task::Blicket => "blicket",
        }
    }
}

/// Finetuning hyperparameters. Reference defaults: AdamW at 5e-5, 500
/// epochs, batch 512; weight decay 0.05 is an artifact choice.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub task: Task,
    pub frames_per_example: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    /// Linear-probe mode: only the head trains, the backbone stays frozen.
    pub probe: bool,
}

impl TransferConfig {
    pub fn paper_default(task: Task, num_classes: usize) -> Self {
        TransferConfig {
            task,
            frames_per_example: match task {
                Task::ShellGame => 8,
                Task::Blicket => 7,
            },
            lr: 5e-5,
            weight_decay: 0.05,
            epochs: 500,
            batch_size: 512,
            num_classes,
            probe: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes < 2 {
            return Err("num_classes must be >= 2".into());
        }
        if self.frames_per_example == 0 {
            return Err("frames_per_example must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// The task head is exactly one linear layer.
pub fn add_head_params<F: Scalar>(params: &mut Params<F>, seed: u64, d: usize, num_classes: usize) {
    let mut rng = rng_from(seed);
    nn::add_linear(params, &mut rng, "head", d, num_classes);
}

pub fn head_param_names() -> [&'static str; 2] {
    ["head.w", "head.b"]
}

/// Logits for one example: pooled video encoding through the linear head.
pub fn example_logits<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frames: &[Tensor<F>],
    drop: DropRng,
    gumbel: Option<&mut ChaCha8Rng>,
) -> Tensor<F> {
    let pooled = encode_video_for_transfer(tape, params, cfg, frames, drop, gumbel);
    nn::linear(tape, params, "head", &pooled)
}

/// Cross-entropy and correctness for one labelled example.
pub fn example_loss<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frames: &[Tensor<F>],
    label: usize,
    num_classes: usize,
    drop: DropRng,
    gumbel: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<F>, bool), DataError> {
    if label >= num_classes {
        return Err(DataError::Invalid(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let logits = example_logits(tape, params, cfg, frames, drop, gumbel);
    let loss = tape.cross_entropy(&logits, &[label]);
    Ok((loss, argmax(logits.row(0)) == label))
}

pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Causal-induction episodes feed six evidence frames then the query frame,
/// in that order, with temporal positions 0..6.
pub fn assemble_blicket_input<T: Clone>(
    context: &[T],
    query: &T,
) -> Result<Vec<T>, DataError> {
    if context.len() != 6 {
        return Err(DataError::Invalid(format!(
            "blicket episode needs exactly 6 context frames, got {}",
            context.len()
        )));
    }
    let mut frames = context.to_vec();
    frames.push(query.clone());
    Ok(frames)
}

/// Treat a list of still images as a pseudo-video with sequential temporal
/// positions.
pub fn assemble_multi_image_input<T: Clone>(
    images: &[T],
    max_frames: usize,
) -> Result<Vec<T>, DataError> {
    if images.is_empty() {
        return Err(DataError::Invalid("multi-image input needs at least one image".into()));
    }
    if images.len() > max_frames {
        return Err(DataError::Invalid(format!(
            "{} images overflow the temporal table of {max_frames} positions",
            images.len()
        )));
    }
    Ok(images.to_vec())
}

/// Evaluation frame selection: uniform stride anchored so the final frame
/// is always included.
pub fn eval_frame_indices(video_len: usize, t: usize) -> Vec<usize> {
    assert!(video_len >= t, "cannot select {t} frames from {video_len}");
    if t == 1 {
        return vec![video_len - 1];
    }
    let stride = ((video_len - 1) / (t - 1)).max(1);
    (0..t).map(|i| (video_len - 1) - stride * (t - 1 - i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blicket_input_orders_context_then_query() {
        let frames = assemble_blicket_input(&[0, 1, 2, 3, 4, 5], &9).unwrap();
        assert_eq!(frames, vec![0, 1, 2, 3, 4, 5, 9]);
        assert_eq!(frames.len(), 7);
    }

    #[test]
    fn blicket_input_rejects_wrong_context_count() {
        assert!(assemble_blicket_input(&[1, 2, 3], &9).is_err());
    }

    #[test]
    fn multi_image_input_assigns_sequential_ids() {
        let imgs: Vec<usize> = (0..16).collect();
        let seq = assemble_multi_image_input(&imgs, 16).unwrap();
        assert_eq!(seq.len(), 16);
        assert_eq!(seq, imgs);
        assert!(assemble_multi_image_input(&imgs, 15).is_err());
        assert_eq!(assemble_multi_image_input(&[7], 16).unwrap(), vec![7]);
    }

    #[test]
    fn eval_frames_are_strided_and_end_anchored() {
        assert_eq!(eval_frame_indices(24, 8), vec![2, 5, 8, 11, 14, 17, 20, 23]);
        assert_eq!(eval_frame_indices(7, 7), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(eval_frame_indices(10, 1), vec![9]);
    }

    #[test]
    fn multi_image_lengths_one_through_sixteen_feed_the_encoder() {
        use crate::model::{init_params, ModelConfig, PoolMethod};
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            enc_layers: 2,
            enc_dim: 16,
            enc_heads: 2,
            enc_mlp: 32,
            num_slots: 1,
            pool_layer: 0,
            pool_method: PoolMethod::Slice,
            tmp_layers: 1,
            tmp_heads: 2,
            dec_layers: 1,
            dec_heads: 2,
            max_frames: 16,
            dropout: 0.0,
        };
        let params = init_params::<f32>(&cfg, 1);
        let frame = Tensor::full(vec![cfg.grid_tokens(), cfg.patch_dim()], 0.5);
        for len in 1..=16usize {
            let images = vec![frame.clone(); len];
            let seq = assemble_multi_image_input(&images, cfg.max_frames).unwrap();
            let mut tape = Tape::new();
            let out = encode_video_for_transfer(&mut tape, &params, &cfg, &seq, None, None);
            assert_eq!(out.shape(), &[1, 16], "length {len}");
        }
    }
}
