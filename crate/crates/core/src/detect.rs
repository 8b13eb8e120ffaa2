//! Supervised pretraining baselines: sequence-based object detection
//! (boxes quantized into discrete tokens, decoded autoregressively from the
//! slot tokens) and slot-as-CLS classification on object counts.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::model::{encode_image, encode_pooled, ModelConfig};
use crate::nn::{self, add_cross_block_params, cross_transformer_block, BlockConfig, DropRng};
use crate::params::{init_weight, Params};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transfer::argmax;

/// Token layout for sequence-based detection: coordinate bins first, then
/// class tokens, then the terminating EOS as the final id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectionVocab {
    pub n_bins: usize,
    pub n_classes: usize,
}

impl DetectionVocab {
    pub fn new(n_bins: usize, n_classes: usize) -> Self {
        assert!(n_bins >= 2 && n_classes >= 1);
        DetectionVocab { n_bins, n_classes }
    }

    pub fn class_token(&self, class: usize) -> usize {
        assert!(class < self.n_classes, "class {class} out of {}", self.n_classes);
        self.n_bins + class
    }

    pub fn eos(&self) -> usize {
        self.n_bins + self.n_classes
    }

    pub fn size(&self) -> usize {
        self.n_bins + self.n_classes + 1
    }

    pub fn is_coord(&self, tok: usize) -> bool {
        tok < self.n_bins
    }

    pub fn is_class(&self, tok: usize) -> bool {
        tok >= self.n_bins && tok < self.eos()
    }
}

/// Axis-aligned box in normalized [0,1] coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxAnnotation {
    pub ymin: f64,
    pub xmin: f64,
    pub ymax: f64,
    pub xmax: f64,
    pub class: usize,
}

impl BoxAnnotation {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, v) in [
            ("ymin", self.ymin),
            ("xmin", self.xmin),
            ("ymax", self.ymax),
            ("xmax", self.xmax),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.ymin > self.ymax || self.xmin > self.xmax {
            return Err(DataError::Invalid("box corners out of order".into()));
        }
        Ok(())
    }
}

/// Quantize one box into five tokens: ymin, xmin, ymax, xmax, class.
/// Coordinates map to `round(coord · (n_bins − 1))` with round-half-up.
pub fn box_to_tokens(b: &BoxAnnotation, vocab: &DetectionVocab) -> Result<[usize; 5], DataError> {
    b.validate()?;
    let q = |v: f64| (v * (vocab.n_bins - 1) as f64).round() as usize;
    Ok([q(b.ymin), q(b.xmin), q(b.ymax), q(b.xmax), vocab.class_token(b.class)])
}

/// Dequantize five tokens back into a box.
pub fn tokens_to_box(tokens: &[usize], vocab: &DetectionVocab) -> Result<BoxAnnotation, DataError> {
    if tokens.len() != 5 {
        return Err(DataError::Invalid(format!("box group needs 5 tokens, got {}", tokens.len())));
    }
    for &t in &tokens[..4] {
        if !vocab.is_coord(t) {
            return Err(DataError::Invalid(format!("token {t} is not a coordinate bin")));
        }
    }
    if !vocab.is_class(tokens[4]) {
        return Err(DataError::Invalid(format!("token {} is not a class token", tokens[4])));
    }
    let d = |t: usize| t as f64 / (vocab.n_bins - 1) as f64;
    Ok(BoxAnnotation {
        ymin: d(tokens[0]),
        xmin: d(tokens[1]),
        ymax: d(tokens[2]),
        xmax: d(tokens[3]),
        class: tokens[4] - vocab.n_bins,
    })
}

/// Concatenate the boxes in random order as 5-token groups, terminated by
/// EOS. An empty scene is the bare `[EOS]`.
pub fn build_sequence(
    boxes: &[BoxAnnotation],
    vocab: &DetectionVocab,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, DataError> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.shuffle(rng);
    let mut seq = Vec::with_capacity(boxes.len() * 5 + 1);
    for idx in order {
        seq.extend_from_slice(&box_to_tokens(&boxes[idx], vocab)?);
    }
    seq.push(vocab.eos());
    Ok(seq)
}

/// Inverse of [`build_sequence`]: parse 5-token groups until EOS.
pub fn parse_sequence(
    seq: &[usize],
    vocab: &DetectionVocab,
) -> Result<Vec<BoxAnnotation>, DataError> {
    let mut boxes = Vec::new();
    let mut i = 0;
    loop {
        if i >= seq.len() {
            return Err(DataError::Invalid("sequence ended without EOS".into()));
        }
        if seq[i] == vocab.eos() {
            return Ok(boxes);
        }
        if i + 5 > seq.len() {
            return Err(DataError::Invalid("truncated box group".into()));
        }
        boxes.push(tokens_to_box(&seq[i..i + 5], vocab)?);
        i += 5;
    }
}

/// Detection decoder geometry: a small causal transformer cross-attending
/// to the encoded slot tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub vocab: DetectionVocab,
    pub layers: usize,
    pub max_seq: usize,
}

impl DetectorConfig {
    pub fn new(vocab: DetectionVocab, max_seq: usize) -> Self {
        DetectorConfig { vocab, layers: 2, max_seq }
    }
}

/// Decoder parameters (`det.*`) plus the counting classifier (`cls.*`).
pub fn add_detection_params<F: Scalar>(
    params: &mut Params<F>,
    seed: u64,
    mcfg: &ModelConfig,
    det: &DetectorConfig,
) {
    let mut rng = rng_from(seed);
    let d = mcfg.enc_dim;
    params.insert("det.embed", init_weight(&mut rng, vec![det.vocab.size(), d], nn::INIT_SIGMA));
    params.insert("det.pos", init_weight(&mut rng, vec![det.max_seq, d], nn::INIT_SIGMA));
    params.insert("det.start", init_weight(&mut rng, vec![1, d], nn::INIT_SIGMA));
    let block = mcfg.dec_block();
    for i in 0..det.layers {
        add_cross_block_params(params, &mut rng, &format!("det.blk{i}"), &block);
    }
    nn::add_linear(params, &mut rng, "det.head", d, det.vocab.size());
}

pub fn add_count_params<F: Scalar>(
    params: &mut Params<F>,
    seed: u64,
    mcfg: &ModelConfig,
    num_classes: usize,
) {
    let mut rng = rng_from(seed);
    nn::add_linear(params, &mut rng, "cls", mcfg.enc_dim, num_classes);
}

/// Outcome of one teacher-forced detection pass.
pub struct DetectionStep<F: Scalar = f32> {
    pub loss: Tensor<F>,
    pub correct_tokens: usize,
    pub total_tokens: usize,
    /// Target sequence exceeded `max_seq` and was truncated.
    pub truncated: bool,
}

/// Teacher-forced next-token loss for one frame: the frame is encoded
/// unmasked, its pooled slots serve as decoder memory, and a causal
/// transformer predicts the target token sequence. `probe_slot` restricts
/// the memory to a single slot (the probing experiment).
pub fn detection_loss<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    mcfg: &ModelConfig,
    det: &DetectorConfig,
    frame: &Tensor<F>,
    target_seq: &[usize],
    probe_slot: Option<usize>,
    mut drop: DropRng,
) -> DetectionStep<F> {
    let truncated = target_seq.len() > det.max_seq;
    let targets = &target_seq[..target_seq.len().min(det.max_seq)];
    assert!(!targets.is_empty(), "detection target sequence is empty");

    let (slots, _) = encode_pooled(tape, params, mcfg, frame, drop.as_deref_mut(), None);
    let memory = match probe_slot {
        Some(i) => {
            assert!(i < mcfg.num_slots, "probe slot {i} out of {}", mcfg.num_slots);
            tape.slice_rows(&slots, i, 1)
        }
        None => slots,
    };

    // shift right: [start, tok_0, ..., tok_{n-2}] predicts [tok_0, ..., tok_{n-1}]
    let n = targets.len();
    let start = params.get("det.start").clone();
    let inputs = if n > 1 {
        let emb = tape.embedding(params.get("det.embed"), &targets[..n - 1]);
        tape.concat_rows(&[start, emb])
    } else {
        start
    };
    let pos_ids: Vec<usize> = (0..n).collect();
    let pos = tape.embedding(params.get("det.pos"), &pos_ids);
    let mut state = tape.add(&inputs, &pos);

    let block = decoder_block(mcfg);
    for i in 0..det.layers {
        let (next, _) = cross_transformer_block(
            tape,
            params,
            &format!("det.blk{i}"),
            &state,
            &memory,
            &block,
            drop.as_deref_mut(),
        );
        state = next;
    }
    let logits = nn::linear(tape, params, "det.head", &state);
    let loss = tape.cross_entropy(&logits, targets);

    let mut correct = 0;
    for (r, &want) in targets.iter().enumerate() {
        if argmax(logits.row(r)) == want {
            correct += 1;
        }
    }
    DetectionStep { loss, correct_tokens: correct, total_tokens: n, truncated }
}

fn decoder_block(mcfg: &ModelConfig) -> BlockConfig {
    mcfg.dec_block()
}

/// Classifier logits from encoded slots: the head reads slot 0 only.
pub fn count_logits_from_slots<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    slots: &Tensor<F>,
) -> Tensor<F> {
    let cls = tape.slice_rows(slots, 0, 1);
    nn::linear(tape, params, "cls", &cls)
}

/// Slot-as-CLS classification: first slot of the fully visible frame
/// through a linear classifier; the label is the scene's object count.
pub fn count_loss<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    mcfg: &ModelConfig,
    frame: &Tensor<F>,
    label: usize,
    num_classes: usize,
    drop: DropRng,
) -> (Tensor<F>, bool) {
    assert!(label < num_classes, "count label {label} out of {num_classes}");
    let all: Vec<usize> = (0..mcfg.grid_tokens()).collect();
    let (enc, _) = encode_image(tape, params, mcfg, frame, &all, drop);
    let logits = count_logits_from_slots(tape, params, &enc.slots);
    let loss = tape.cross_entropy(&logits, &[label]);
    (loss, argmax(logits.row(0)) == label)
}
