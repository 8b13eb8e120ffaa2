//! The slot-token video model: an image encoder that compresses each frame
//! into a small set of slot tokens, a temporal transformer that propagates
//! slot and patch information across frames, and a reconstruction decoder
//! that predicts masked patches. Stateless given a [`Params`] table.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    self, add_block_params, sinusoidal_positions, transformer_block, BlockConfig, DropRng,
};
use crate::params::{init_weight, Params};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How per-frame slot vectors are produced at the pooling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMethod {
    /// Read the slot token rows directly.
    Slice,
    /// Single-headed soft attention from learned queries over patch tokens.
    SoftAttention,
    /// Hard one-hot patch selection via Gumbel-max, straight-through gradients.
    GumbelMax,
}

impl PoolMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "slice" => Some(PoolMethod::Slice),
            "soft" => Some(PoolMethod::SoftAttention),
            "gumbel" => Some(PoolMethod::GumbelMax),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolMethod::Slice => "slice",
            PoolMethod::SoftAttention => "soft",
            PoolMethod::GumbelMax => "gumbel",
        }
    }
}

/// Architecture hyperparameters. One hidden width is shared by the encoder,
/// temporal transformer, and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub enc_mlp: usize,
    pub num_slots: usize,
    /// 0-based index of the encoder block after which slots are pooled;
    /// the remaining blocks process slot tokens alone.
    pub pool_layer: usize,
    pub pool_method: PoolMethod,
    pub tmp_layers: usize,
    pub tmp_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    /// Size of the learned temporal position table.
    pub max_frames: usize,
    pub dropout: f32,
}

impl ModelConfig {
    /// Reference-scale defaults: ViT-B geometry (12 layers, width 768,
    /// 12 heads, MLP 3072), one slot, pooling after block 10.
    pub fn paper_default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            channels: 3,
            enc_layers: 12,
            enc_dim: 768,
            enc_heads: 12,
            enc_mlp: 3072,
            num_slots: 1,
            pool_layer: 10,
            pool_method: PoolMethod::Slice,
            tmp_layers: 4,
            tmp_heads: 12,
            dec_layers: 4,
            dec_heads: 12,
            max_frames: 32,
            dropout: 0.0,
        }
    }

    /// Desk-scale defaults used throughout the shipped configs and tests.
    pub fn desk_default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            channels: 3,
            enc_layers: 4,
            enc_dim: 128,
            enc_heads: 4,
            enc_mlp: 512,
            num_slots: 1,
            pool_layer: 2,
            pool_method: PoolMethod::Slice,
            tmp_layers: 2,
            tmp_heads: 4,
            dec_layers: 2,
            dec_heads: 4,
            max_frames: 24,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_size % self.patch_size != 0 {
            return Err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_slots < 1 {
            return Err("num_slots must be >= 1".into());
        }
        if self.pool_layer >= self.enc_layers {
            return Err(format!(
                "pool_layer {} must be < enc_layers {}",
                self.pool_layer, self.enc_layers
            ));
        }
        if self.enc_dim % 2 != 0 {
            return Err("enc_dim must be even for sinusoidal positions".into());
        }
        for (what, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("temporal", self.enc_dim, self.tmp_heads),
            ("decoder", self.enc_dim, self.dec_heads),
        ] {
            if dim % heads != 0 {
                return Err(format!("{what} width {dim} not divisible by {heads} heads"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_frames == 0 {
            return Err("max_frames must be >= 1".into());
        }
        Ok(())
    }

    /// Patches per frame.
    pub fn grid_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened pixel dimension of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn enc_block(&self) -> BlockConfig {
        BlockConfig { dim: self.enc_dim, heads: self.enc_heads, mlp_dim: self.enc_mlp, dropout: self.dropout }
    }

    pub fn tmp_block(&self) -> BlockConfig {
        BlockConfig { dim: self.enc_dim, heads: self.tmp_heads, mlp_dim: self.enc_mlp, dropout: self.dropout }
    }

    pub fn dec_block(&self) -> BlockConfig {
        BlockConfig { dim: self.enc_dim, heads: self.dec_heads, mlp_dim: self.enc_mlp, dropout: self.dropout }
    }
}

/// Initialize the full parameter table (encoder + temporal + decoder +
/// pooling queries). Task heads are added by their own modules.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Params<F> {
    cfg.validate().expect("invalid model config");
    let mut rng = rng_from(seed);
    let mut p = Params::new();
    let d = cfg.enc_dim;

    nn::add_linear(&mut p, &mut rng, "enc.patch", cfg.patch_dim(), d);
    p.insert("enc.slots", init_weight(&mut rng, vec![cfg.num_slots, d], nn::INIT_SIGMA));
    for i in 0..cfg.enc_layers {
        add_block_params(&mut p, &mut rng, &format!("enc.blk{i}"), &cfg.enc_block());
    }
    p.insert("pool.q", init_weight(&mut rng, vec![cfg.num_slots, d], nn::INIT_SIGMA));

    p.insert("tmp.pos", init_weight(&mut rng, vec![cfg.max_frames, d], nn::INIT_SIGMA));
    for i in 0..cfg.tmp_layers {
        add_block_params(&mut p, &mut rng, &format!("tmp.blk{i}"), &cfg.tmp_block());
    }

    p.insert("dec.mask", init_weight(&mut rng, vec![1, d], nn::INIT_SIGMA));
    for i in 0..cfg.dec_layers {
        add_block_params(&mut p, &mut rng, &format!("dec.blk{i}"), &cfg.dec_block());
    }
    nn::add_linear(&mut p, &mut rng, "dec.head", d, cfg.patch_dim());
    p
}

/// Per-frame encoder output: slot rows, the encoded unmasked patch rows,
/// and which original patch indices they correspond to.
pub struct EncodedFrame<F: Scalar = f32> {
    pub slots: Tensor<F>,
    pub patches: Tensor<F>,
    pub patch_ids: Vec<usize>,
}

/// Intermediate encoder state surfaced for pooling and rollout analysis.
pub struct EncodeTrace<F: Scalar = f32> {
    /// Token matrix after each block (slots first, then unmasked patches).
    pub layer_states: Vec<Tensor<F>>,
    /// Per-layer attention maps `[heads, n, n]`.
    pub attns: Vec<Tensor<F>>,
}

fn check_patch_ids(ids: &[usize], total: usize) {
    assert!(!ids.is_empty(), "a fully masked frame is never encoded");
    for w in ids.windows(2) {
        assert!(w[0] < w[1], "patch ids must be strictly increasing, got {ids:?}");
    }
    assert!(*ids.last().unwrap() < total, "patch id {} out of {total}", ids.last().unwrap());
}

/// Run the image encoder over the unmasked patches of one frame.
///
/// Patch pixels are linearly projected, sinusoidal spatial positions are
/// added to patch tokens only, the learned slot embeddings are prepended,
/// and the full block stack runs self-attention over everything. Masked
/// patch content never enters, so it cannot leak into any output.
pub fn encode_image<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frame_patches: &Tensor<F>,
    unmasked_ids: &[usize],
    mut drop: DropRng,
) -> (EncodedFrame<F>, EncodeTrace<F>) {
    let total = cfg.grid_tokens();
    assert_eq!(
        frame_patches.shape(),
        &[total, cfg.patch_dim()],
        "frame patches {:?} vs configured {}x{}",
        frame_patches.shape(),
        total,
        cfg.patch_dim()
    );
    check_patch_ids(unmasked_ids, total);

    let x = embed_frame_tokens(tape, params, cfg, frame_patches, unmasked_ids);
    let block = cfg.enc_block();
    let mut state = x;
    let mut trace = EncodeTrace { layer_states: Vec::new(), attns: Vec::new() };
    for i in 0..cfg.enc_layers {
        let (next, attn) =
            transformer_block(tape, params, &format!("enc.blk{i}"), &state, &block, drop.as_deref_mut());
        state = next;
        trace.layer_states.push(state.detached());
        trace.attns.push(attn);
    }

    let s = cfg.num_slots;
    let slots = tape.slice_rows(&state, 0, s);
    let patches = tape.slice_rows(&state, s, unmasked_ids.len());
    (EncodedFrame { slots, patches, patch_ids: unmasked_ids.to_vec() }, trace)
}

/// Encoder variant without slot tokens: patch tokens alone run through the
/// full block stack. Used by the factorized video-autoencoding baseline.
pub fn encode_patches_only<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frame_patches: &Tensor<F>,
    unmasked_ids: &[usize],
    mut drop: DropRng,
) -> (Tensor<F>, EncodeTrace<F>) {
    check_patch_ids(unmasked_ids, cfg.grid_tokens());
    let visible = tape.gather_rows(frame_patches, unmasked_ids);
    let proj = nn::linear(tape, params, "enc.patch", &visible);
    let pos = sinusoidal_positions::<F>(cfg.grid_tokens(), cfg.enc_dim);
    let mut pos_tape = Tape::new();
    let pos_sel = pos_tape.gather_rows(&pos, unmasked_ids);
    let mut state = tape.add(&proj, &pos_sel);

    let block = cfg.enc_block();
    let mut trace = EncodeTrace { layer_states: Vec::new(), attns: Vec::new() };
    for i in 0..cfg.enc_layers {
        let (next, attn) =
            transformer_block(tape, params, &format!("enc.blk{i}"), &state, &block, drop.as_deref_mut());
        state = next;
        trace.layer_states.push(state.detached());
        trace.attns.push(attn);
    }
    (state, trace)
}

/// Project patch pixels, add spatial positions, prepend slot embeddings.
fn embed_frame_tokens<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frame_patches: &Tensor<F>,
    unmasked_ids: &[usize],
) -> Tensor<F> {
    let visible = tape.gather_rows(frame_patches, unmasked_ids);
    let proj = nn::linear(tape, params, "enc.patch", &visible);
    let pos = sinusoidal_positions::<F>(cfg.grid_tokens(), cfg.enc_dim);
    let mut pos_tape = Tape::new();
    let pos_sel = pos_tape.gather_rows(&pos, unmasked_ids);
    let tokens = tape.add(&proj, &pos_sel);
    tape.concat_rows(&[params.get("enc.slots").clone(), tokens])
}

/// Pool slot vectors from the encoder state at the pooling layer, then run
/// the remaining encoder blocks on the pooled slots alone (patch tokens are
/// discarded past this point).
pub fn pool_slots<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    state_at_pool: &Tensor<F>,
    mut drop: DropRng,
    gumbel: Option<&mut ChaCha8Rng>,
) -> Tensor<F> {
    let s = cfg.num_slots;
    let n_patches = state_at_pool.dim(0) - s;
    let mut pooled = match cfg.pool_method {
        PoolMethod::Slice => tape.slice_rows(state_at_pool, 0, s),
        PoolMethod::SoftAttention | PoolMethod::GumbelMax => {
            let patches = tape.slice_rows(state_at_pool, s, n_patches);
            let queries = params.get("pool.q");
            let scale = F::cast_from(1.0 / (cfg.enc_dim as f64).sqrt());
            let scores = tape.matmul_nt(queries, &patches);
            let scores = tape.scale(&scores, scale);
            let weights = pooling_weights(tape, cfg, &scores, gumbel);
            tape.matmul(&weights, &patches)
        }
    };
    let block = cfg.enc_block();
    for i in cfg.pool_layer + 1..cfg.enc_layers {
        let (next, _) =
            transformer_block(tape, params, &format!("enc.blk{i}"), &pooled, &block, drop.as_deref_mut());
        pooled = next;
    }
    pooled
}

/// Soft attention weights, or their Gumbel-max hard one-hot counterpart
/// with straight-through gradients. `gumbel: None` disables the noise
/// (deterministic argmax), which evaluation uses.
fn pooling_weights<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    scores: &Tensor<F>,
    gumbel: Option<&mut ChaCha8Rng>,
) -> Tensor<F> {
    match cfg.pool_method {
        PoolMethod::SoftAttention => tape.softmax(scores, 1),
        PoolMethod::GumbelMax => {
            let perturbed = match gumbel {
                Some(rng) => {
                    let noise: Vec<F> = (0..scores.numel())
                        .map(|_| {
                            let u: f64 = rng.gen_range(1e-9..1.0);
                            F::cast_from(-(-u.ln()).ln())
                        })
                        .collect();
                    let noise = Tensor::from_vec(scores.shape().to_vec(), noise);
                    tape.add(scores, &noise)
                }
                None => scores.clone(),
            };
            let soft = tape.softmax(&perturbed, 1);
            let (rows, cols) = (soft.dim(0), soft.dim(1));
            let mut hard = vec![F::zero(); rows * cols];
            for r in 0..rows {
                let row = perturbed.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                hard[r * cols + best] = F::one();
            }
            let hard = Tensor::from_vec(vec![rows, cols], hard);
            tape.straight_through(&soft, &hard)
        }
        PoolMethod::Slice => unreachable!("slice pooling has no weights"),
    }
}

/// Encode one fully visible frame and pool its slots.
pub fn encode_pooled<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frame_patches: &Tensor<F>,
    mut drop: DropRng,
    gumbel: Option<&mut ChaCha8Rng>,
) -> (Tensor<F>, EncodeTrace<F>) {
    let all: Vec<usize> = (0..cfg.grid_tokens()).collect();
    let x = embed_frame_tokens(tape, params, cfg, frame_patches, &all);
    let block = cfg.enc_block();
    let mut state = x;
    let mut trace = EncodeTrace { layer_states: Vec::new(), attns: Vec::new() };
    for i in 0..=cfg.pool_layer {
        let (next, attn) =
            transformer_block(tape, params, &format!("enc.blk{i}"), &state, &block, drop.as_deref_mut());
        state = next;
        trace.layer_states.push(state.detached());
        trace.attns.push(attn);
    }
    let pooled = pool_slots(tape, params, cfg, &state, drop, gumbel);
    (pooled, trace)
}

/// One group of tokens entering the temporal transformer, tagged with the
/// frame it came from.
pub struct FrameTokens<F: Scalar = f32> {
    pub frame_idx: usize,
    pub tokens: Tensor<F>,
}

/// Add learned temporal positions and run joint self-attention over all
/// groups. Returns the full output matrix plus per-layer attention maps;
/// the final element gives each group's row range.
pub fn temporal_encode<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    groups: &[FrameTokens<F>],
    mut drop: DropRng,
) -> (Tensor<F>, Vec<Tensor<F>>, Vec<(usize, usize)>) {
    assert!(!groups.is_empty(), "temporal transformer needs at least one token group");
    let mut ids = Vec::new();
    let mut parts = Vec::new();
    let mut ranges = Vec::new();
    let mut offset = 0;
    for g in groups {
        assert!(
            g.frame_idx < cfg.max_frames,
            "frame index {} exceeds temporal table of {} positions",
            g.frame_idx,
            cfg.max_frames
        );
        let rows = g.tokens.dim(0);
        ids.extend(std::iter::repeat(g.frame_idx).take(rows));
        parts.push(g.tokens.clone());
        ranges.push((offset, rows));
        offset += rows;
    }
    let x = tape.concat_rows(&parts);
    let pos = tape.embedding(params.get("tmp.pos"), &ids);
    let mut state = tape.add(&x, &pos);
    let block = cfg.tmp_block();
    let mut attns = Vec::new();
    for i in 0..cfg.tmp_layers {
        let (next, attn) =
            transformer_block(tape, params, &format!("tmp.blk{i}"), &state, &block, drop.as_deref_mut());
        state = next;
        attns.push(attn);
    }
    (state, attns, ranges)
}

/// Pretraining-mode temporal pass: context frames contribute their slot
/// vectors, query frames their unmasked patch tokens; returns the
/// contextualized patch tokens of each query frame, in input order.
pub fn temporal_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    context_slots: &[FrameTokens<F>],
    query_patches: &[FrameTokens<F>],
    drop: DropRng,
) -> Vec<Tensor<F>> {
    let mut groups = Vec::with_capacity(context_slots.len() + query_patches.len());
    groups.extend(
        context_slots
            .iter()
            .map(|g| FrameTokens { frame_idx: g.frame_idx, tokens: g.tokens.clone() }),
    );
    groups.extend(
        query_patches
            .iter()
            .map(|g| FrameTokens { frame_idx: g.frame_idx, tokens: g.tokens.clone() }),
    );
    let (out, _, ranges) = temporal_encode(tape, params, cfg, &groups, drop);
    let query_ranges = &ranges[context_slots.len()..];
    query_ranges
        .iter()
        .map(|&(start, rows)| tape.slice_rows(&out, start, rows))
        .collect()
}

/// Reconstruct every patch of one query frame from its contextualized
/// unmasked tokens. A shared learned mask token fills the masked positions,
/// sinusoidal encodings mark each token's spatial location, and a linear
/// head maps decoder outputs to pixel values. Output rows follow the
/// original patch order.
pub fn decode_frame<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    contextualized: &Tensor<F>,
    patch_ids: &[usize],
    drop: DropRng,
) -> Tensor<F> {
    let pos = sinusoidal_positions::<F>(cfg.grid_tokens(), cfg.enc_dim);
    decode_frame_with_positions(tape, params, cfg, contextualized, patch_ids, &pos, drop)
}

/// [`decode_frame`] with injectable positional encodings (exercised by the
/// position-equivariance tests).
pub fn decode_frame_with_positions<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    contextualized: &Tensor<F>,
    patch_ids: &[usize],
    positions: &Tensor<F>,
    mut drop: DropRng,
) -> Tensor<F> {
    let total = cfg.grid_tokens();
    assert_eq!(contextualized.dim(0), patch_ids.len(), "one contextualized row per unmasked patch");
    check_patch_ids(patch_ids, total);

    // Row u of the stack is the shared mask token; gather repeats it for
    // every masked position, summing its gradient contributions.
    let stacked = tape.concat_rows(&[contextualized.clone(), params.get("dec.mask").clone()]);
    let u = patch_ids.len();
    let mut source = vec![u; total];
    for (j, &id) in patch_ids.iter().enumerate() {
        source[id] = j;
    }
    let tokens = tape.gather_rows(&stacked, &source);
    let mut state = tape.add(&tokens, positions);

    let block = cfg.dec_block();
    for i in 0..cfg.dec_layers {
        let (next, _) =
            transformer_block(tape, params, &format!("dec.blk{i}"), &state, &block, drop.as_deref_mut());
        state = next;
    }
    nn::linear(tape, params, "dec.head", &state)
}

/// Transfer-mode video encoding: per-frame pooled slots, temporal
/// transformer over slots only, then mean over all output tokens.
pub fn encode_video_for_transfer<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    frames: &[Tensor<F>],
    mut drop: DropRng,
    mut gumbel: Option<&mut ChaCha8Rng>,
) -> Tensor<F> {
    assert!(!frames.is_empty(), "transfer encoding needs at least one frame");
    let mut groups = Vec::with_capacity(frames.len());
    for (idx, frame) in frames.iter().enumerate() {
        let (slots, _) =
            encode_pooled(tape, params, cfg, frame, drop.as_deref_mut(), gumbel.as_deref_mut());
        groups.push(FrameTokens { frame_idx: idx, tokens: slots });
    }
    let (out, _, _) = temporal_encode(tape, params, cfg, &groups, drop);
    tape.mean_rows(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            enc_layers: 3,
            enc_dim: 16,
            enc_heads: 2,
            enc_mlp: 32,
            num_slots: 1,
            pool_layer: 1,
            pool_method: PoolMethod::Slice,
            tmp_layers: 2,
            tmp_heads: 2,
            dec_layers: 2,
            dec_heads: 2,
            max_frames: 8,
            dropout: 0.0,
        }
    }

    fn rand_patches(cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
        let mut rng = rng_from(seed);
        let n = cfg.grid_tokens() * cfg.patch_dim();
        Tensor::from_vec(
            vec![cfg.grid_tokens(), cfg.patch_dim()],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn encode_image_shapes() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 1);
        let mut tape = Tape::new();
        let patches = rand_patches(&cfg, 2);
        let (enc, trace) = encode_image(&mut tape, &params, &cfg, &patches, &[0, 1, 2, 3], None);
        assert_eq!(enc.slots.shape(), &[1, 16]);
        assert_eq!(enc.patches.shape(), &[4, 16]);
        assert_eq!(trace.layer_states.len(), 3);
        assert_eq!(trace.attns[0].shape(), &[2, 5, 5]);
    }

    #[test]
    fn masked_patch_content_cannot_leak() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 1);
        let patches = rand_patches(&cfg, 3);
        // same frame with patch 2 scribbled over; 2 is masked out below
        let mut altered = patches.data().to_vec();
        for v in &mut altered[2 * cfg.patch_dim()..3 * cfg.patch_dim()] {
            *v = 1.0 - *v;
        }
        let altered = Tensor::from_vec(patches.shape().to_vec(), altered);

        let ids = [0usize, 1, 3];
        let mut t1 = Tape::new();
        let (a, _) = encode_image(&mut t1, &params, &cfg, &patches, &ids, None);
        let mut t2 = Tape::new();
        let (b, _) = encode_image(&mut t2, &params, &cfg, &altered, &ids, None);
        assert_eq!(a.slots, b.slots);
        assert_eq!(a.patches, b.patches);
    }

    #[test]
    fn slots_are_sensitive_to_unmasked_patches() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 1);
        let patches = rand_patches(&cfg, 4);
        let mut altered = patches.data().to_vec();
        altered[0] += 0.5;
        let altered = Tensor::from_vec(patches.shape().to_vec(), altered);
        let ids = [0usize, 1, 2, 3];
        let mut t1 = Tape::new();
        let (a, _) = encode_image(&mut t1, &params, &cfg, &patches, &ids, None);
        let mut t2 = Tape::new();
        let (b, _) = encode_image(&mut t2, &params, &cfg, &altered, &ids, None);
        assert_ne!(a.slots, b.slots);
    }

    #[test]
    #[should_panic(expected = "fully masked frame")]
    fn empty_unmasked_set_rejected() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 1);
        let patches = rand_patches(&cfg, 5);
        let mut tape = Tape::new();
        let _ = encode_image(&mut tape, &params, &cfg, &patches, &[], None);
    }

    #[test]
    fn slice_pool_at_last_layer_matches_encode_output() {
        let mut cfg = tiny_cfg();
        cfg.pool_layer = cfg.enc_layers - 1;
        let params = init_params::<f32>(&cfg, 7);
        let patches = rand_patches(&cfg, 8);
        let all: Vec<usize> = (0..cfg.grid_tokens()).collect();

        let mut t1 = Tape::new();
        let (enc, _) = encode_image(&mut t1, &params, &cfg, &patches, &all, None);
        let mut t2 = Tape::new();
        let (pooled, _) = encode_pooled(&mut t2, &params, &cfg, &patches, None, None);
        assert_eq!(pooled.detached(), enc.slots.detached());
    }

    #[test]
    fn gumbel_without_noise_picks_argmax() {
        let mut cfg = tiny_cfg();
        cfg.pool_method = PoolMethod::GumbelMax;
        let scores = Tensor::from_vec(vec![1, 3], vec![1.0f32, 3.0, 2.0]);
        let mut tape = Tape::new();
        let w = pooling_weights(&mut tape, &cfg, &scores, None);
        assert_eq!(w.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn soft_attention_weights_are_stochastic() {
        let mut cfg = tiny_cfg();
        cfg.pool_method = PoolMethod::SoftAttention;
        cfg.num_slots = 2;
        let params = init_params::<f32>(&cfg, 9);
        let patches = rand_patches(&cfg, 10);
        let all: Vec<usize> = (0..cfg.grid_tokens()).collect();
        let mut tape = Tape::new();
        let x = embed_frame_tokens(&mut tape, &params, &cfg, &patches, &all);
        let block = cfg.enc_block();
        let mut state = x;
        for i in 0..=cfg.pool_layer {
            let (next, _) =
                transformer_block(&mut tape, &params, &format!("enc.blk{i}"), &state, &block, None);
            state = next;
        }
        let s = cfg.num_slots;
        let n = cfg.grid_tokens();
        let patch_rows = tape.slice_rows(&state, s, n);
        let scale = 1.0 / (cfg.enc_dim as f32).sqrt();
        let scores = tape.matmul_nt(params.get("pool.q"), &patch_rows);
        let scores = tape.scale(&scores, scale);
        let w = pooling_weights(&mut tape, &cfg, &scores, None);
        for r in 0..s {
            let sum: f32 = w.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "query {r} weights sum to {sum}");
        }
    }

    #[test]
    fn pooling_methods_share_output_shape() {
        for method in [PoolMethod::Slice, PoolMethod::SoftAttention, PoolMethod::GumbelMax] {
            let mut cfg = tiny_cfg();
            cfg.pool_method = method;
            cfg.num_slots = 3;
            let params = init_params::<f32>(&cfg, 11);
            let patches = rand_patches(&cfg, 12);
            let mut tape = Tape::new();
            let mut rng = rng_from(1);
            let (pooled, _) = encode_pooled(&mut tape, &params, &cfg, &patches, None, Some(&mut rng));
            assert_eq!(pooled.shape(), &[3, 16], "{method:?}");
        }
    }

    #[test]
    fn temporal_zero_context_reduces_to_query_patches_only() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 13);
        let patches = rand_patches(&cfg, 14);
        let mut tape = Tape::new();
        let (enc, _) = encode_image(&mut tape, &params, &cfg, &patches, &[0, 1, 2, 3], None);
        let q = [FrameTokens { frame_idx: 0, tokens: enc.patches.clone() }];
        let out = temporal_forward(&mut tape, &params, &cfg, &[], &q, None);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), enc.patches.shape());

        // identical to feeding the same group through the joint pass alone
        let mut t2 = Tape::new();
        let (full, _, _) = temporal_encode(
            &mut t2,
            &params,
            &cfg,
            &[FrameTokens { frame_idx: 0, tokens: enc.patches.detached() }],
            None,
        );
        assert_eq!(out[0].detached(), full.detached());
    }

    #[test]
    fn temporal_preserves_token_count() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 15);
        let mut tape = Tape::new();
        let ctx_tokens = {
            let mut rng = rng_from(16);
            Tensor::from_vec(vec![12, 16], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let ctx = [FrameTokens { frame_idx: 0, tokens: ctx_tokens }];
        let q = [
            FrameTokens { frame_idx: 1, tokens: Tensor::full(vec![3, 16], 0.1) },
            FrameTokens { frame_idx: 2, tokens: Tensor::full(vec![2, 16], 0.2) },
        ];
        let out = temporal_forward(&mut tape, &params, &cfg, &ctx, &q, None);
        assert_eq!(out[0].shape(), &[3, 16]);
        assert_eq!(out[1].shape(), &[2, 16]);
    }

    #[test]
    fn context_slots_influence_query_outputs() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 17);
        let q_tokens = Tensor::full(vec![3, 16], 0.3);
        let ctx_a = [FrameTokens { frame_idx: 0, tokens: Tensor::full(vec![1, 16], 1.0) }];
        let ctx_b = [FrameTokens { frame_idx: 0, tokens: Tensor::zeros(vec![1, 16]) }];
        let q = [FrameTokens { frame_idx: 1, tokens: q_tokens }];

        let mut t1 = Tape::new();
        let a = temporal_forward(&mut t1, &params, &cfg, &ctx_a, &q, None);
        let mut t2 = Tape::new();
        let b = temporal_forward(&mut t2, &params, &cfg, &ctx_b, &q, None);
        assert_ne!(a[0].detached(), b[0].detached());
    }

    #[test]
    #[should_panic(expected = "exceeds temporal table")]
    fn temporal_rejects_frame_index_past_table() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 18);
        let mut tape = Tape::new();
        let q = [FrameTokens { frame_idx: cfg.max_frames, tokens: Tensor::zeros(vec![1, 16]) }];
        let _ = temporal_forward(&mut tape, &params, &cfg, &[], &q, None);
    }

    #[test]
    fn decode_covers_all_patches_even_without_masking() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 19);
        let mut tape = Tape::new();
        let ctx = Tensor::full(vec![4, 16], 0.2);
        let out = decode_frame(&mut tape, &params, &cfg, &ctx, &[0, 1, 2, 3], None);
        assert_eq!(out.shape(), &[cfg.grid_tokens(), cfg.patch_dim()]);
    }

    #[test]
    fn decode_output_shape_with_masking() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 20);
        let mut tape = Tape::new();
        let ctx = Tensor::full(vec![2, 16], 0.2);
        let out = decode_frame(&mut tape, &params, &cfg, &ctx, &[1, 3], None);
        assert_eq!(out.shape(), &[4, cfg.patch_dim()]);
    }

    #[test]
    fn swapping_mask_positions_swaps_predictions() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 21);
        let ctx = Tensor::from_vec(vec![2, 16], (0..32).map(|i| i as f32 * 0.01).collect());
        let ids = [0usize, 3]; // masked positions are 1 and 2
        let pos = sinusoidal_positions::<f32>(cfg.grid_tokens(), cfg.enc_dim);

        let mut swapped = pos.data().to_vec();
        let d = cfg.enc_dim;
        for i in 0..d {
            swapped.swap(d + i, 2 * d + i);
        }
        let pos_swapped = Tensor::from_vec(pos.shape().to_vec(), swapped);

        let mut t1 = Tape::new();
        let a = decode_frame_with_positions(&mut t1, &params, &cfg, &ctx, &ids, &pos, None);
        let mut t2 = Tape::new();
        let b = decode_frame_with_positions(&mut t2, &params, &cfg, &ctx, &ids, &pos_swapped, None);
        // swapping reorders f32 reductions; equality holds to rounding
        let rows_close = |x: &[f32], y: &[f32]| {
            x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-6)
        };
        assert!(rows_close(a.row(1), b.row(2)));
        assert!(rows_close(a.row(2), b.row(1)));
        assert!(rows_close(a.row(0), b.row(0)));
        assert!(rows_close(a.row(3), b.row(3)));
        assert!(!rows_close(a.row(1), a.row(2)));
    }

    #[test]
    fn single_frame_transfer_equals_its_temporal_token() {
        let cfg = tiny_cfg();
        let params = init_params::<f32>(&cfg, 22);
        let patches = rand_patches(&cfg, 23);

        let mut t1 = Tape::new();
        let pooled = encode_video_for_transfer(&mut t1, &params, &cfg, &[patches.clone()], None, None);
        assert_eq!(pooled.shape(), &[1, 16]);

        let mut t2 = Tape::new();
        let (slots, _) = encode_pooled(&mut t2, &params, &cfg, &patches, None, None);
        let (out, _, _) = temporal_encode(
            &mut t2,
            &params,
            &cfg,
            &[FrameTokens { frame_idx: 0, tokens: slots }],
            None,
        );
        assert_eq!(pooled.detached(), out.detached());
    }

    #[test]
    fn identical_frames_with_zeroed_temporal_embeddings_encode_identically() {
        let cfg = tiny_cfg();
        let mut params = init_params::<f32>(&cfg, 24);
        params.set("tmp.pos", Tensor::zeros(vec![cfg.max_frames, cfg.enc_dim]));
        let patches = rand_patches(&cfg, 25);
        let mut tape = Tape::new();
        let (s0, _) = encode_pooled(&mut tape, &params, &cfg, &patches, None, None);
        let (s1, _) = encode_pooled(&mut tape, &params, &cfg, &patches, None, None);
        let groups = [
            FrameTokens { frame_idx: 0, tokens: s0 },
            FrameTokens { frame_idx: 1, tokens: s1 },
        ];
        let (out, _, _) = temporal_encode(&mut tape, &params, &cfg, &groups, None);
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn slot_counts_one_through_eight_share_the_code_path() {
        for s in [1usize, 2, 4, 8] {
            let mut cfg = tiny_cfg();
            cfg.num_slots = s;
            let params = init_params::<f32>(&cfg, 26);
            let patches = rand_patches(&cfg, 27);
            let mut tape = Tape::new();
            let pooled = encode_video_for_transfer(&mut tape, &params, &cfg, &[patches], None, None);
            assert_eq!(pooled.shape(), &[1, 16]);
        }
    }
}
