//! Transformer building blocks shared by the image encoder, temporal
//! transformer, reconstruction decoder, and the supervised baselines.
//!
//! Parameters live in a [`Params`] table under a caller-chosen prefix;
//! every block here is stateless given those tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{init_weight, Params};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_SIGMA: f64 = 0.02;
const CAUSAL_NEG: f64 = -1e9;

/// Width/head/MLP geometry of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Dropout rate on sublayer outputs; 0 disables (the desk default —
    /// short runs, determinism first).
    pub dropout: f32,
}

impl BlockConfig {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize) -> Self {
        let cfg = BlockConfig { dim, heads, mlp_dim, dropout: 0.0 };
        cfg.validate();
        cfg
    }

    pub fn validate(&self) {
        assert!(
            self.dim % self.heads == 0,
            "hidden dim {} not divisible by {} heads",
            self.dim,
            self.heads
        );
        assert!(
            (0.0..1.0).contains(&self.dropout),
            "dropout {} outside [0, 1)",
            self.dropout
        );
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Dropout source for one forward pass; `None` runs deterministically.
pub type DropRng<'a> = Option<&'a mut ChaCha8Rng>;

// ── patch extraction ────────────────────────────────────────────────

/// Split an H×W×C image into non-overlapping P×P patches, flattened in
/// row-major patch order: token dimension is P·P·C.
pub fn patchify<F: Scalar>(frame: &Tensor<F>, patch: usize) -> Tensor<F> {
    assert_eq!(frame.rank(), 3, "patchify: image must be H×W×C, got {:?}", frame.shape());
    let (h, w, c) = (frame.dim(0), frame.dim(1), frame.dim(2));
    assert!(
        h % patch == 0 && w % patch == 0,
        "patchify: image {}x{} not divisible by patch size {}",
        h,
        w,
        patch
    );
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * c);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                let row = pr * patch + dy;
                let start = (row * w + pc * patch) * c;
                data.extend_from_slice(&frame.data()[start..start + patch * c]);
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, patch * patch * c], data)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(tokens: &Tensor<F>, h: usize, w: usize, c: usize, patch: usize) -> Tensor<F> {
    let (gh, gw) = (h / patch, w / patch);
    assert_eq!(tokens.dim(0), gh * gw, "unpatchify: {} tokens for a {}x{} grid", tokens.dim(0), gh, gw);
    assert_eq!(tokens.dim(1), patch * patch * c);
    let mut data = vec![F::zero(); h * w * c];
    for pr in 0..gh {
        for pc in 0..gw {
            let tok = tokens.row(pr * gw + pc);
            for dy in 0..patch {
                let row = pr * patch + dy;
                let dst = (row * w + pc * patch) * c;
                data[dst..dst + patch * c].copy_from_slice(&tok[dy * patch * c..(dy + 1) * patch * c]);
            }
        }
    }
    Tensor::from_vec(vec![h, w, c], data)
}

// ── positional encodings ────────────────────────────────────────────

/// Interleaved sin/cos positions with frequency base 10000; deterministic
/// and parameter-free.
pub fn sinusoidal_positions<F: Scalar>(n: usize, d: usize) -> Tensor<F> {
    assert!(d % 2 == 0, "sinusoidal positions need an even dim, got {d}");
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            data.push(F::cast_from(angle.sin()));
            data.push(F::cast_from(angle.cos()));
        }
    }
    Tensor::from_vec(vec![n, d], data)
}

// ── parameter construction ──────────────────────────────────────────

pub fn add_linear<F: Scalar>(
    params: &mut Params<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    params.insert(format!("{prefix}.w"), init_weight(rng, vec![fan_in, fan_out], INIT_SIGMA));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
}

fn add_layer_norm<F: Scalar>(params: &mut Params<F>, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Tensor::full(vec![d], F::one()));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]));
}

fn add_attention<F: Scalar>(params: &mut Params<F>, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.{name}"), init_weight(rng, vec![d, d], INIT_SIGMA));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        params.insert(format!("{prefix}.{name}"), Tensor::zeros(vec![d]));
    }
}

/// Pre-norm encoder block: ln1 + self-attention, ln2 + MLP.
pub fn add_block_params<F: Scalar>(
    params: &mut Params<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &BlockConfig,
) {
    add_layer_norm(params, &format!("{prefix}.ln1"), cfg.dim);
    add_attention(params, rng, &format!("{prefix}.attn"), cfg.dim);
    add_layer_norm(params, &format!("{prefix}.ln2"), cfg.dim);
    add_linear(params, rng, &format!("{prefix}.mlp.fc1"), cfg.dim, cfg.mlp_dim);
    add_linear(params, rng, &format!("{prefix}.mlp.fc2"), cfg.mlp_dim, cfg.dim);
}

/// Decoder block with an extra cross-attention sublayer between the
/// self-attention and the MLP.
pub fn add_cross_block_params<F: Scalar>(
    params: &mut Params<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &BlockConfig,
) {
    add_block_params(params, rng, prefix, cfg);
    add_layer_norm(params, &format!("{prefix}.lnx"), cfg.dim);
    add_attention(params, rng, &format!("{prefix}.xattn"), cfg.dim);
}

// ── forward passes ──────────────────────────────────────────────────

pub fn linear<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    x: &Tensor<F>,
) -> Tensor<F> {
    let y = tape.matmul(x, params.get(&format!("{prefix}.w")));
    tape.add_bias(&y, params.get(&format!("{prefix}.b")))
}

pub fn layer_norm_at<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    x: &Tensor<F>,
) -> Tensor<F> {
    tape.layer_norm(
        x,
        params.get(&format!("{prefix}.g")),
        params.get(&format!("{prefix}.b")),
        F::cast_from(LN_EPS),
    )
}

fn causal_mask<F: Scalar>(n: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); n * n];
    for r in 0..n {
        for c in r + 1..n {
            data[r * n + c] = F::cast_from(CAUSAL_NEG);
        }
    }
    Tensor::from_vec(vec![n, n], data)
}

/// Scaled dot-product attention with `q` rows attending over `kv` rows.
/// Returns the projected output and the per-head attention matrices
/// `[heads, n_q, n_kv]` (detached; surfaced for rollout analysis).
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    q_in: &Tensor<F>,
    kv_in: &Tensor<F>,
    cfg: &BlockConfig,
    causal: bool,
) -> (Tensor<F>, Tensor<F>) {
    let dh = cfg.head_dim();
    let scale = F::cast_from(1.0 / (dh as f64).sqrt());
    let q = linear_qkv(tape, params, prefix, "wq", "bq", q_in);
    let k = linear_qkv(tape, params, prefix, "wk", "bk", kv_in);
    let v = linear_qkv(tape, params, prefix, "wv", "bv", kv_in);

    let mask = if causal {
        assert_eq!(q_in.dim(0), kv_in.dim(0), "causal attention needs square score matrix");
        Some(causal_mask::<F>(q_in.dim(0)))
    } else {
        None
    };

    let mut head_outs = Vec::with_capacity(cfg.heads);
    let mut attn_data = Vec::with_capacity(cfg.heads * q_in.dim(0) * kv_in.dim(0));
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(&q, h * dh, dh);
        let kh = tape.slice_cols(&k, h * dh, dh);
        let vh = tape.slice_cols(&v, h * dh, dh);
        let mut scores = tape.matmul_nt(&qh, &kh);
        scores = tape.scale(&scores, scale);
        if let Some(m) = &mask {
            scores = tape.add(&scores, m);
        }
        let attn = tape.softmax(&scores, 1);
        attn_data.extend_from_slice(attn.data());
        head_outs.push(tape.matmul(&attn, &vh));
    }
    let merged = tape.concat_cols(&head_outs);
    let out = tape.matmul(&merged, params.get(&format!("{prefix}.wo")));
    let out = tape.add_bias(&out, params.get(&format!("{prefix}.bo")));
    let attn = Tensor::from_vec(vec![cfg.heads, q_in.dim(0), kv_in.dim(0)], attn_data);
    (out, attn)
}

fn linear_qkv<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    w: &str,
    b: &str,
    x: &Tensor<F>,
) -> Tensor<F> {
    let y = tape.matmul(x, params.get(&format!("{prefix}.{w}")));
    tape.add_bias(&y, params.get(&format!("{prefix}.{b}")))
}

/// Self-attention: every token attends over the whole sequence.
pub fn multi_head_self_attention<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    x: &Tensor<F>,
    cfg: &BlockConfig,
) -> (Tensor<F>, Tensor<F>) {
    multi_head_attention(tape, params, prefix, x, x, cfg, false)
}

fn maybe_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    rate: f32,
    rng: &mut DropRng,
) -> Tensor<F> {
    let rng = match rng {
        Some(r) if rate > 0.0 => r,
        _ => return x.clone(),
    };
    let keep = 1.0 / (1.0 - rate as f64);
    let mask: Vec<F> = (0..x.numel())
        .map(|_| {
            if rng.gen::<f32>() < rate {
                F::zero()
            } else {
                F::cast_from(keep)
            }
        })
        .collect();
    let mask = Tensor::from_vec(x.shape().to_vec(), mask);
    tape.mul(x, &mask)
}

/// Pre-norm transformer encoder layer:
/// `x + MHSA(LN(x))` followed by `+ MLP(LN(·))`, MLP = linear–GELU–linear.
pub fn transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    x: &Tensor<F>,
    cfg: &BlockConfig,
    mut drop: DropRng,
) -> (Tensor<F>, Tensor<F>) {
    let h = layer_norm_at(tape, params, &format!("{prefix}.ln1"), x);
    let (a, attn) = multi_head_self_attention(tape, params, &format!("{prefix}.attn"), &h, cfg);
    let a = maybe_dropout(tape, &a, cfg.dropout, &mut drop);
    let x1 = tape.add(x, &a);

    let m = mlp(tape, params, prefix, &x1, cfg);
    let m = maybe_dropout(tape, &m, cfg.dropout, &mut drop);
    let out = tape.add(&x1, &m);
    (out, attn)
}

/// Decoder layer: causal self-attention, cross-attention over `memory`,
/// then the MLP. Returns the cross-attention maps.
pub fn cross_transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    x: &Tensor<F>,
    memory: &Tensor<F>,
    cfg: &BlockConfig,
    mut drop: DropRng,
) -> (Tensor<F>, Tensor<F>) {
    let h = layer_norm_at(tape, params, &format!("{prefix}.ln1"), x);
    let (a, _) = multi_head_attention(tape, params, &format!("{prefix}.attn"), &h, &h, cfg, true);
    let a = maybe_dropout(tape, &a, cfg.dropout, &mut drop);
    let x1 = tape.add(x, &a);

    let hx = layer_norm_at(tape, params, &format!("{prefix}.lnx"), &x1);
    let (c, xattn) =
        multi_head_attention(tape, params, &format!("{prefix}.xattn"), &hx, memory, cfg, false);
    let c = maybe_dropout(tape, &c, cfg.dropout, &mut drop);
    let x2 = tape.add(&x1, &c);

    let m = mlp(tape, params, prefix, &x2, cfg);
    let m = maybe_dropout(tape, &m, cfg.dropout, &mut drop);
    let out = tape.add(&x2, &m);
    (out, xattn)
}

fn mlp<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<F>,
    prefix: &str,
    x: &Tensor<F>,
    _cfg: &BlockConfig,
) -> Tensor<F> {
    let h = layer_norm_at(tape, params, &format!("{prefix}.ln2"), x);
    let h = linear(tape, params, &format!("{prefix}.mlp.fc1"), &h);
    let h = tape.gelu(&h);
    linear(tape, params, &format!("{prefix}.mlp.fc2"), &h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn patchify_token_arithmetic() {
        let img = Tensor::<f32>::zeros(vec![32, 32, 3]);
        let tokens = patchify(&img, 16);
        assert_eq!(tokens.shape(), &[4, 768]);
    }

    #[test]
    fn patchify_constant_image_gives_identical_tokens() {
        let img = Tensor::<f32>::full(vec![32, 32, 3], 0.5);
        let tokens = patchify(&img, 16);
        for r in 1..tokens.dim(0) {
            assert_eq!(tokens.row(r), tokens.row(0));
        }
    }

    #[test]
    fn patchify_roundtrip_is_bit_exact() {
        let mut rng = rng_from(31);
        let img = rand_tensor(&mut rng, vec![24, 16, 3]);
        let back = unpatchify(&patchify(&img, 8), 24, 16, 3, 8);
        assert_eq!(img, back);
    }

    #[test]
    #[should_panic(expected = "not divisible by patch size")]
    fn patchify_rejects_indivisible_dims() {
        let img = Tensor::<f32>::zeros(vec![30, 32, 3]);
        let _ = patchify(&img, 16);
    }

    #[test]
    fn sinusoidal_position_zero_is_zero_one_pattern() {
        let pe = sinusoidal_positions::<f32>(3, 6);
        for i in 0..3 {
            assert_eq!(pe.row(0)[2 * i], 0.0);
            assert_eq!(pe.row(0)[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn sinusoidal_positions_bounded() {
        let pe = sinusoidal_positions::<f32>(64, 32);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sinusoidal_position_one_closed_form() {
        let pe = sinusoidal_positions::<f64>(2, 4);
        let w1 = 10000f64.powf(-2.0 / 4.0);
        let want = [1f64.sin(), 1f64.cos(), w1.sin(), w1.cos()];
        for (got, want) in pe.row(1).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = rng_from(5);
        let cfg = BlockConfig::new(8, 2, 16);
        let mut params = Params::<f32>::new();
        add_attention(&mut params, &mut rng, "a", cfg.dim);
        let mut tape = Tape::new();
        let x = rand_tensor(&mut rng, vec![1, 8]);
        let (out, attn) = multi_head_self_attention(&mut tape, &params, "a", &x, &cfg);
        assert_eq!(attn.data(), &[1.0, 1.0]);
        // output must equal value-then-output projection of the token
        let v = linear_qkv(&mut tape, &params, "a", "wv", "bv", &x);
        let o = tape.matmul(&v, params.get("a.wo"));
        let o = tape.add_bias(&o, params.get("a.bo"));
        assert_eq!(out.data(), o.data());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = rng_from(6);
        let cfg = BlockConfig::new(8, 4, 16);
        let mut params = Params::<f32>::new();
        add_attention(&mut params, &mut rng, "a", cfg.dim);
        let mut tape = Tape::new();
        let x = rand_tensor(&mut rng, vec![5, 8]);
        let (_, attn) = multi_head_self_attention(&mut tape, &params, "a", &x, &cfg);
        for h in 0..cfg.heads {
            for r in 0..5 {
                let row = &attn.data()[h * 25 + r * 5..h * 25 + (r + 1) * 5];
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "head {h} row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut rng = rng_from(7);
        let cfg = BlockConfig::new(8, 2, 16);
        let mut params = Params::<f32>::new();
        add_attention(&mut params, &mut rng, "a", cfg.dim);
        let x = rand_tensor(&mut rng, vec![4, 8]);
        let perm = [2usize, 0, 3, 1];

        let mut tape = Tape::new();
        let (out, _) = multi_head_self_attention(&mut tape, &params, "a", &x, &cfg);
        let permuted_in = {
            let mut t = Tape::new();
            t.gather_rows(&x, &perm)
        };
        let mut tape2 = Tape::new();
        let (out_p, _) = multi_head_self_attention(&mut tape2, &params, "a", &permuted_in, &cfg);
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in out_p.row(r).iter().zip(out.row(src)) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let mut rng = rng_from(8);
        let cfg = BlockConfig::new(8, 2, 16);
        let mut params = Params::<f32>::new();
        add_block_params(&mut params, &mut rng, "blk", &cfg);
        params.set("blk.attn.wo", Tensor::zeros(vec![8, 8]));
        params.set("blk.mlp.fc2.w", Tensor::zeros(vec![16, 8]));
        let mut tape = Tape::new();
        let x = rand_tensor(&mut rng, vec![5, 8]);
        let (out, _) = transformer_block(&mut tape, &params, "blk", &x, &cfg, None);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn block_stack_preserves_shape() {
        let mut rng = rng_from(9);
        let cfg = BlockConfig::new(12, 3, 24);
        let mut params = Params::<f32>::new();
        add_block_params(&mut params, &mut rng, "b0", &cfg);
        add_block_params(&mut params, &mut rng, "b1", &cfg);
        for n in [1usize, 2, 7] {
            let mut tape = Tape::new();
            let x = rand_tensor(&mut rng, vec![n, 12]);
            let (h, _) = transformer_block(&mut tape, &params, "b0", &x, &cfg, None);
            let (out, _) = transformer_block(&mut tape, &params, "b1", &h, &cfg, None);
            assert_eq!(out.shape(), &[n, 12]);
        }
    }

    #[test]
    fn causal_block_ignores_future_tokens() {
        let mut rng = rng_from(10);
        let cfg = BlockConfig::new(8, 2, 16);
        let mut params = Params::<f32>::new();
        add_cross_block_params(&mut params, &mut rng, "d", &cfg);
        let memory = rand_tensor(&mut rng, vec![3, 8]);
        let x = rand_tensor(&mut rng, vec![4, 8]);
        // perturb the final row only
        let mut bumped = x.data().to_vec();
        for v in &mut bumped[3 * 8..] {
            *v += 1.0;
        }
        let x2 = Tensor::from_vec(vec![4, 8], bumped);

        let mut t1 = Tape::new();
        let (o1, _) = cross_transformer_block(&mut t1, &params, "d", &x, &memory, &cfg, None);
        let mut t2 = Tape::new();
        let (o2, _) = cross_transformer_block(&mut t2, &params, "d", &x2, &memory, &cfg, None);
        for r in 0..3 {
            assert_eq!(o1.row(r), o2.row(r), "row {r} saw a future token");
        }
        assert_ne!(o1.row(3), o2.row(3));
    }

    #[test]
    fn dropout_masks_scale_and_zero() {
        let cfg = BlockConfig { dim: 4, heads: 1, mlp_dim: 8, dropout: 0.5 };
        let mut rng = rng_from(11);
        let mut tape = Tape::new();
        let x = Tensor::<f32>::full(vec![16, 4], 1.0);
        let y = maybe_dropout(&mut tape, &x, cfg.dropout, &mut Some(&mut rng));
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.data().iter().any(|&v| v == 0.0));
    }
}
