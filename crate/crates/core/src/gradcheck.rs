//! Finite-difference gradient verification.
//!
//! Every differentiable primitive and the composite model blocks are
//! re-instantiated at f64 and their analytic gradients compared against
//! central differences (h = 1e-3, inputs in [-1, 1]) at relative error
//! ≤ 1e-3. The hard Gumbel-max selection is non-differentiable by
//! construction; its check runs on the soft surrogate the straight-through
//! estimator rides on, and the forward/backward substitution itself is
//! covered by exact unit tests on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    self, decode_frame, encode_pooled, temporal_forward, FrameTokens, ModelConfig, PoolMethod,
};
use crate::nn::{self, BlockConfig};
use crate::params::Params;
use crate::pretrain::{ivcl_clip_loss, ClipFrames, MaskPlan};
use crate::rng::rng_from;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Fixed random cotangent so every output element is probed.
fn weighted_loss(tape: &mut Tape<f64>, out: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let c = rand_tensor(rng, out.shape().to_vec());
    let prod = tape.mul(out, &c);
    tape.mean_all(&prod)
}

fn bump(params: &Params<f64>, name: &str, idx: usize, delta: f64) -> Params<f64> {
    let mut out = params.clone();
    let t = params.get(name);
    let mut data = t.data().to_vec();
    data[idx] += delta;
    out.set(name, Tensor::from_vec(t.shape().to_vec(), data));
    out
}

/// Compare analytic gradients of `f` against central differences for every
/// element of every parameter.
pub fn finite_diff_check<Fwd>(name: &str, params: &Params<f64>, f: Fwd) -> CheckResult
where
    Fwd: Fn(&Params<f64>, &mut Tape<f64>) -> Tensor<f64>,
{
    let mut tape = Tape::new();
    let watched = params.watch_all(&mut tape);
    let loss = f(&watched, &mut tape);
    assert_eq!(loss.numel(), 1, "{name}: check loss must be scalar");
    let grads = tape.backward(&loss);

    let mut max_err = 0.0f64;
    for (pname, tensor) in params.iter() {
        let analytic = grads.wrt_or_zeros(watched.get(pname));
        for i in 0..tensor.numel() {
            let plus = bump(params, pname, i, FD_STEP);
            let minus = bump(params, pname, i, -FD_STEP);
            let mut tp = Tape::new();
            let lp = f(&plus, &mut tp).item();
            let mut tm = Tape::new();
            let lm = f(&minus, &mut tm).item();
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let err = rel_err(analytic[i], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    CheckResult { name: name.to_string(), max_rel_err: max_err, passed: max_err <= TOLERANCE }
}

fn single(name: &str, x: Tensor<f64>, f: impl Fn(&Tensor<f64>, &mut Tape<f64>) -> Tensor<f64>) -> CheckResult {
    let mut params = Params::new();
    params.insert("x", x);
    finite_diff_check(name, &params, |p, tape| f(p.get("x"), tape))
}

fn pair(
    name: &str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: impl Fn(&Tensor<f64>, &Tensor<f64>, &mut Tape<f64>) -> Tensor<f64>,
) -> CheckResult {
    let mut params = Params::new();
    params.insert("a", a);
    params.insert("b", b);
    finite_diff_check(name, &params, |p, tape| f(p.get("a"), p.get("b"), tape))
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut r = rng.clone();
    let mut w = {
        let seed = rng.gen::<u64>();
        move || rng_from(seed)
    };
    let _ = &mut w;

    let cot_seed = r.gen::<u64>();

    macro_rules! with_loss {
        ($name:expr, $builder:expr) => {{
            let mut cot = rng_from(cot_seed);
            single($name, rand_tensor(&mut r, vec![3, 4]), move |x, tape| {
                let y = $builder(x, tape);
                weighted_loss(tape, &y, &mut cot.clone())
            })
        }};
    }

    out.push(pair("add", rand_tensor(&mut r, vec![3, 4]), rand_tensor(&mut r, vec![3, 4]), {
        let mut cot = rng_from(cot_seed);
        move |a, b, tape| {
            let y = tape.add(a, b);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(pair("sub", rand_tensor(&mut r, vec![3, 4]), rand_tensor(&mut r, vec![3, 4]), {
        let mut cot = rng_from(cot_seed + 1);
        move |a, b, tape| {
            let y = tape.sub(a, b);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(pair("mul", rand_tensor(&mut r, vec![3, 4]), rand_tensor(&mut r, vec![3, 4]), {
        let mut cot = rng_from(cot_seed + 2);
        move |a, b, tape| {
            let y = tape.mul(a, b);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(pair("add_bias", rand_tensor(&mut r, vec![3, 4]), rand_tensor(&mut r, vec![4]), {
        let mut cot = rng_from(cot_seed + 3);
        move |a, b, tape| {
            let y = tape.add_bias(a, b);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(with_loss!("scale", |x: &Tensor<f64>, tape: &mut Tape<f64>| tape.scale(x, 0.7)));
    out.push(pair("matmul", rand_tensor(&mut r, vec![3, 4]), rand_tensor(&mut r, vec![4, 2]), {
        let mut cot = rng_from(cot_seed + 4);
        move |a, b, tape| {
            let y = tape.matmul(a, b);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(pair("matmul_nt", rand_tensor(&mut r, vec![3, 4]), rand_tensor(&mut r, vec![2, 4]), {
        let mut cot = rng_from(cot_seed + 5);
        move |a, b, tape| {
            let y = tape.matmul_nt(a, b);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(with_loss!("transpose", |x: &Tensor<f64>, tape: &mut Tape<f64>| tape.transpose(x)));
    out.push(with_loss!("gelu", |x: &Tensor<f64>, tape: &mut Tape<f64>| tape.gelu(x)));
    out.push(with_loss!("softmax_rows", |x: &Tensor<f64>, tape: &mut Tape<f64>| tape.softmax(x, 1)));
    out.push(with_loss!("softmax_cols", |x: &Tensor<f64>, tape: &mut Tape<f64>| tape.softmax(x, 0)));

    out.push({
        let mut params = Params::new();
        params.insert("x", rand_tensor(&mut r, vec![3, 4]));
        params.insert("gamma", rand_tensor(&mut r, vec![4]));
        params.insert("beta", rand_tensor(&mut r, vec![4]));
        let mut cot = rng_from(cot_seed + 6);
        finite_diff_check("layer_norm", &params, move |p, tape| {
            let y = tape.layer_norm(p.get("x"), p.get("gamma"), p.get("beta"), 1e-6);
            weighted_loss(tape, &y, &mut cot.clone())
        })
    });
    out.push(single("embedding", rand_tensor(&mut r, vec![5, 3]), {
        let mut cot = rng_from(cot_seed + 7);
        move |x, tape| {
            let y = tape.embedding(x, &[1, 4, 1, 0]);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(pair("concat_rows", rand_tensor(&mut r, vec![2, 3]), rand_tensor(&mut r, vec![4, 3]), {
        let mut cot = rng_from(cot_seed + 8);
        move |a, b, tape| {
            let y = tape.concat_rows(&[a.clone(), b.clone()]);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(single("slice_rows", rand_tensor(&mut r, vec![5, 3]), {
        let mut cot = rng_from(cot_seed + 9);
        move |x, tape| {
            let y = tape.slice_rows(x, 1, 3);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(single("gather_rows", rand_tensor(&mut r, vec![5, 3]), {
        let mut cot = rng_from(cot_seed + 10);
        move |x, tape| {
            let y = tape.gather_rows(x, &[4, 0, 4, 2]);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(single("slice_cols", rand_tensor(&mut r, vec![4, 6]), {
        let mut cot = rng_from(cot_seed + 11);
        move |x, tape| {
            let y = tape.slice_cols(x, 2, 3);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(pair("concat_cols", rand_tensor(&mut r, vec![3, 2]), rand_tensor(&mut r, vec![3, 4]), {
        let mut cot = rng_from(cot_seed + 12);
        move |a, b, tape| {
            let y = tape.concat_cols(&[a.clone(), b.clone()]);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(single("sum_all", rand_tensor(&mut r, vec![3, 4]), |x, tape| tape.sum_all(x)));
    out.push(single("mean_all", rand_tensor(&mut r, vec![3, 4]), |x, tape| tape.mean_all(x)));
    out.push(single("mean_rows", rand_tensor(&mut r, vec![4, 3]), {
        let mut cot = rng_from(cot_seed + 13);
        move |x, tape| {
            let y = tape.mean_rows(x);
            weighted_loss(tape, &y, &mut cot)
        }
    }));
    out.push(single("cross_entropy", rand_tensor(&mut r, vec![4, 5]), |x, tape| {
        tape.cross_entropy(x, &[1, 0, 4, 2])
    }));
    out
}

/// Tiny f64 model geometry shared by the composite checks.
fn check_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        enc_layers: 2,
        enc_dim: 8,
        enc_heads: 2,
        enc_mlp: 16,
        num_slots: 2,
        pool_layer: 0,
        pool_method: PoolMethod::Slice,
        tmp_layers: 1,
        tmp_heads: 2,
        dec_layers: 1,
        dec_heads: 2,
        max_frames: 4,
        dropout: 0.0,
    }
}

fn subset(params: &Params<f64>, pred: impl Fn(&str) -> bool) -> Params<f64> {
    let mut out = Params::new();
    for (name, t) in params.iter() {
        if pred(name) {
            out.insert(name, t.clone());
        }
    }
    out
}

fn frame_in_unit_range(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = cfg.grid_tokens() * cfg.patch_dim();
    Tensor::from_vec(
        vec![cfg.grid_tokens(), cfg.patch_dim()],
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
}

fn composite_checks(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let cfg = check_cfg();
    let full = model::init_params::<f64>(&cfg, 1234);
    let mut out = Vec::new();

    // patch embedding: patchify + linear projection
    {
        let mut params = Params::new();
        let mut init_rng = rng_from(rng.gen());
        nn::add_linear(&mut params, &mut init_rng, "pe", cfg.patch_dim(), cfg.enc_dim);
        let image = {
            let n = cfg.image_size * cfg.image_size * cfg.channels;
            let mut r2 = rng_from(rng.gen());
            Tensor::from_vec(
                vec![cfg.image_size, cfg.image_size, cfg.channels],
                (0..n).map(|_| r2.gen_range(0.0..1.0)).collect(),
            )
        };
        let patch = cfg.patch_size;
        let mut cot = rng_from(rng.gen());
        out.push(finite_diff_check("patch-embed", &params, move |p, tape| {
            let tokens = nn::patchify(&image, patch);
            let y = nn::linear(tape, p, "pe", &tokens);
            weighted_loss(tape, &y, &mut cot.clone())
        }));
    }

    // multi-head self-attention over a short sequence
    {
        let block = BlockConfig::new(cfg.enc_dim, cfg.enc_heads, cfg.enc_mlp);
        let mut params = subset(&full, |n| n.starts_with("enc.blk0.attn."));
        let x = rand_tensor(&mut rng.clone(), vec![5, cfg.enc_dim]);
        params.insert("in.x", x);
        let mut cot = rng_from(rng.gen());
        out.push(finite_diff_check("mhsa", &params, move |p, tape| {
            let (y, _) = nn::multi_head_self_attention(tape, p, "enc.blk0.attn", p.get("in.x"), &block);
            weighted_loss(tape, &y, &mut cot.clone())
        }));
    }

    // two stacked transformer blocks
    {
        let block = BlockConfig::new(cfg.enc_dim, cfg.enc_heads, cfg.enc_mlp);
        let mut params = subset(&full, |n| n.starts_with("enc.blk0.") || n.starts_with("enc.blk1."));
        params.insert("in.x", rand_tensor(&mut rng.clone(), vec![4, cfg.enc_dim]));
        let mut cot = rng_from(rng.gen());
        out.push(finite_diff_check("transformer-block-x2", &params, move |p, tape| {
            let (h, _) = nn::transformer_block(tape, p, "enc.blk0", p.get("in.x"), &block, None);
            let (y, _) = nn::transformer_block(tape, p, "enc.blk1", &h, &block, None);
            weighted_loss(tape, &y, &mut cot.clone())
        }));
    }

    // slot pooling, all three methods (hard selection via soft surrogate)
    for method in [PoolMethod::Slice, PoolMethod::SoftAttention, PoolMethod::GumbelMax] {
        let mut cfg_m = cfg.clone();
        cfg_m.pool_method = method;
        let params = subset(&full, |n| n.starts_with("enc.") || n.starts_with("pool."));
        let frame = frame_in_unit_range(&cfg, &mut rng.clone());
        let mut cot = rng_from(rng.gen());
        let name = match method {
            PoolMethod::Slice => "pool-slice",
            PoolMethod::SoftAttention => "pool-soft",
            PoolMethod::GumbelMax => "pool-gumbel-surrogate",
        };
        let surrogate = method == PoolMethod::GumbelMax;
        out.push(finite_diff_check(name, &params, move |p, tape| {
            let cfg_used = if surrogate {
                // differentiate the soft path the straight-through
                // estimator rides on
                let mut c = cfg_m.clone();
                c.pool_method = PoolMethod::SoftAttention;
                c
            } else {
                cfg_m.clone()
            };
            let (pooled, _) = encode_pooled(tape, p, &cfg_used, &frame, None, None);
            weighted_loss(tape, &pooled, &mut cot.clone())
        }));
    }

    // temporal transformer over context slots + query patches
    {
        let params = {
            let mut p = subset(&full, |n| n.starts_with("tmp."));
            let mut r2 = rng.clone();
            p.insert("in.ctx", rand_tensor(&mut r2, vec![cfg.num_slots, cfg.enc_dim]));
            p.insert("in.q", rand_tensor(&mut r2, vec![3, cfg.enc_dim]));
            p
        };
        let mut cot = rng_from(rng.gen());
        let cfg_t = cfg.clone();
        out.push(finite_diff_check("temporal-forward", &params, move |p, tape| {
            let ctx = [FrameTokens { frame_idx: 0, tokens: p.get("in.ctx").clone() }];
            let q = [FrameTokens { frame_idx: 2, tokens: p.get("in.q").clone() }];
            let outs = temporal_forward(tape, p, &cfg_t, &ctx, &q, None);
            weighted_loss(tape, &outs[0], &mut cot.clone())
        }));
    }

    // reconstruction decoder with mask tokens
    {
        let params = {
            let mut p = subset(&full, |n| n.starts_with("dec."));
            p.insert("in.ctx", rand_tensor(&mut rng.clone(), vec![2, cfg.enc_dim]));
            p
        };
        let mut cot = rng_from(rng.gen());
        let cfg_d = cfg.clone();
        out.push(finite_diff_check("decoder", &params, move |p, tape| {
            let y = decode_frame(tape, p, &cfg_d, p.get("in.ctx"), &[0, 3], None);
            weighted_loss(tape, &y, &mut cot.clone())
        }));
    }

    // causal decoder block with cross-attention (detection path)
    {
        let block = BlockConfig::new(cfg.enc_dim, cfg.dec_heads, cfg.enc_mlp);
        let mut params = Params::new();
        let mut init_rng = rng_from(rng.gen());
        nn::add_cross_block_params(&mut params, &mut init_rng, "xb", &block);
        let mut r2 = rng.clone();
        params.insert("in.x", rand_tensor(&mut r2, vec![4, cfg.enc_dim]));
        params.insert("in.mem", rand_tensor(&mut r2, vec![2, cfg.enc_dim]));
        let mut cot = rng_from(rng.gen());
        out.push(finite_diff_check("cross-block", &params, move |p, tape| {
            let (y, _) =
                nn::cross_transformer_block(tape, p, "xb", p.get("in.x"), p.get("in.mem"), &block, None);
            weighted_loss(tape, &y, &mut cot.clone())
        }));
    }

    // reconstruction loss head: full clip objective end to end
    {
        let cfg_c = cfg.clone();
        let mut r2 = rng.clone();
        let clip_frames: Vec<Tensor<f64>> =
            (0..2).map(|_| frame_in_unit_range(&cfg_c, &mut r2)).collect();
        let plan = MaskPlan { context_frames: vec![0], masked: vec![vec![], vec![1, 2]] };
        out.push(finite_diff_check("loss-reconstruction", &full, move |p, tape| {
            let clip = ClipFrames { frames: clip_frames.clone() };
            ivcl_clip_loss(tape, p, &cfg_c, &clip, &plan, false, None, None)
        }));
    }

    // cross-entropy head over the full transfer path (two frames)
    {
        let cfg_c = cfg.clone();
        let mut params = subset(&full, |n| !n.starts_with("dec."));
        let mut init_rng = rng_from(rng.gen());
        nn::add_linear(&mut params, &mut init_rng, "head", cfg.enc_dim, 3);
        let mut r2 = rng.clone();
        let frames: Vec<Tensor<f64>> = (0..2).map(|_| frame_in_unit_range(&cfg_c, &mut r2)).collect();
        out.push(finite_diff_check("loss-xent-transfer", &params, move |p, tape| {
            let pooled =
                crate::model::encode_video_for_transfer(tape, p, &cfg_c, &frames, None, None);
            let logits = nn::linear(tape, p, "head", &pooled);
            tape.cross_entropy(&logits, &[1])
        }));
    }

    out
}

/// The full suite: every primitive, then every composite block.
pub fn run_all() -> Vec<CheckResult> {
    let mut rng = rng_from(0x9d5c);
    let mut results = primitive_checks(&mut rng);
    results.extend(composite_checks(&mut rng));
    results
}
