//! Attention rollout and slot heatmap export.
//!
//! Rollout composes residual-adjusted, row-renormalized attention matrices
//! across layers, attributing final tokens back to input tokens. Slot rows
//! restricted to patch columns become per-slot heatmaps over the patch
//! grid, exported as alpha-blended PPM images.

use std::io::Write;
use std::path::Path;

use crate::error::DataError;
use crate::sim::render::Frame;
use crate::tape::matmul_raw;
use crate::tensor::Tensor;

pub const DEFAULT_RESIDUAL_WEIGHT: f32 = 0.5;

/// Average the `[heads, n, n]` attention stack into one `[n, n]` matrix.
pub fn head_average(attn: &Tensor<f32>) -> Tensor<f32> {
    assert_eq!(attn.rank(), 3, "head attention must be [heads, n, n], got {:?}", attn.shape());
    let (h, n, m) = (attn.dim(0), attn.dim(1), attn.dim(2));
    assert_eq!(n, m, "attention matrices must be square, got {:?}", attn.shape());
    let mut out = vec![0.0f32; n * n];
    for head in 0..h {
        let base = head * n * n;
        for (o, v) in out.iter_mut().zip(&attn.data()[base..base + n * n]) {
            *o += v / h as f32;
        }
    }
    Tensor::from_vec(vec![n, n], out)
}

/// Per layer, mix in the residual path (`w·A + (1−w)·I` with the default
/// w = 0.5), renormalize rows, and left-multiply: rollout = Â_L · … · Â_1.
/// Inputs must be row-stochastic square matrices of equal size.
pub fn attention_rollout(per_layer: &[Tensor<f32>], residual_weight: f32) -> Tensor<f32> {
    assert!(!per_layer.is_empty(), "rollout needs at least one layer");
    let n = per_layer[0].dim(0);
    for (l, a) in per_layer.iter().enumerate() {
        assert_eq!(a.rank(), 2, "layer {l}: attention must be a matrix, got {:?}", a.shape());
        assert_eq!(a.shape(), &[n, n], "layer {l}: size {:?} vs {n}x{n}", a.shape());
        for r in 0..n {
            let sum: f32 = a.row(r).iter().sum();
            assert!(
                (sum - 1.0).abs() < 1e-4 && a.row(r).iter().all(|&v| v >= 0.0),
                "layer {l} row {r} is not row-stochastic (sum {sum})"
            );
        }
    }

    let adjust = |a: &Tensor<f32>| -> Vec<f32> {
        let mut m = vec![0.0f32; n * n];
        for r in 0..n {
            for c in 0..n {
                let residual = if r == c { 1.0 - residual_weight } else { 0.0 };
                m[r * n + c] = residual_weight * a.row(r)[c] + residual;
            }
            let sum: f32 = m[r * n..(r + 1) * n].iter().sum();
            for v in &mut m[r * n..(r + 1) * n] {
                *v /= sum;
            }
        }
        m
    };

    let mut rollout = adjust(&per_layer[0]);
    for a in &per_layer[1..] {
        rollout = matmul_raw(&adjust(a), &rollout, n, n, n);
    }
    Tensor::from_vec(vec![n, n], rollout)
}

/// Per-slot attribution over image patches: nonnegative weights on the
/// patch grid, summing to 1.
#[derive(Clone, Debug)]
pub struct RolloutMap {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
}

impl RolloutMap {
    pub fn check(&self) {
        let sum: f32 = self.weights.iter().sum();
        assert!(
            (sum - 1.0).abs() < 1e-5 && self.weights.iter().all(|&v| v >= 0.0),
            "rollout map must be a distribution (sum {sum})"
        );
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.weights[r * self.cols + c]
    }
}

/// Extract one slot's heatmap from a rollout over `[slots + patches]`
/// tokens: take the slot row, keep the patch columns, renormalize, and
/// reshape to the patch grid.
pub fn slot_heatmap(
    rollout: &Tensor<f32>,
    slot_index: usize,
    num_slots: usize,
    grid_rows: usize,
    grid_cols: usize,
) -> RolloutMap {
    assert!(slot_index < num_slots, "slot {slot_index} out of {num_slots}");
    let n = rollout.dim(0);
    assert_eq!(
        n,
        num_slots + grid_rows * grid_cols,
        "rollout over {n} tokens vs {num_slots} slots + {grid_rows}x{grid_cols} patches"
    );
    let row = rollout.row(slot_index);
    let mut weights: Vec<f32> = row[num_slots..].to_vec();
    let sum: f32 = weights.iter().sum();
    assert!(sum > 0.0, "slot row places no mass on patches");
    for v in &mut weights {
        *v /= sum;
    }
    let map = RolloutMap { rows: grid_rows, cols: grid_cols, weights };
    map.check();
    map
}

/// Nearest-neighbour upsample the map to frame size and alpha-blend a heat
/// color over the grayscale frame; a zero map leaves pure grayscale.
pub fn blend_heatmap(map: &RolloutMap, frame: &Frame) -> Frame {
    const HEAT: [f64; 3] = [255.0, 200.0, 0.0];
    let peak = map.weights.iter().cloned().fold(0.0f32, f32::max);
    let mut out = Frame { h: frame.h, w: frame.w, rgb: vec![0; frame.rgb.len()] };
    for y in 0..frame.h {
        for x in 0..frame.w {
            let [r, g, b] = frame.get(y, x);
            let gray = (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round();
            let mr = y * map.rows / frame.h;
            let mc = x * map.cols / frame.w;
            let alpha = if peak > 0.0 { (map.at(mr, mc) / peak) as f64 } else { 0.0 };
            let blend =
                |h: f64| ((1.0 - alpha) * gray + alpha * h).round().clamp(0.0, 255.0) as u8;
            out.put(y, x, [blend(HEAT[0]), blend(HEAT[1]), blend(HEAT[2])]);
        }
    }
    out
}

/// Write a binary PPM (P6, maxval 255).
pub fn write_ppm(frame: &Frame, path: &Path) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let header = format!("P6\n{} {}\n255\n", frame.w, frame.h);
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&frame.rgb))
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

/// Parse a P6 PPM written by [`write_ppm`] (test oracle for exports).
pub fn read_ppm(path: &Path) -> Result<Frame, DataError> {
    let bytes = std::fs::read(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let bad = |msg: &str| DataError::Invalid(format!("ppm {}: {msg}", path.display()));
    let header_end = bytes
        .windows(1)
        .enumerate()
        .scan(0, |newlines, (i, w)| {
            if w[0] == b'\n' {
                *newlines += 1;
            }
            Some((i, *newlines))
        })
        .find(|&(_, n)| n == 3)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("non-ascii header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P6") {
        return Err(bad("not P6"));
    }
    let dims = lines.next().ok_or_else(|| bad("missing dims"))?;
    let mut it = dims.split_whitespace();
    let w: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad width"))?;
    let h: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad height"))?;
    if lines.next() != Some("255") {
        return Err(bad("maxval must be 255"));
    }
    let rgb = bytes[header_end..].to_vec();
    if rgb.len() != h * w * 3 {
        return Err(bad("pixel payload truncated"));
    }
    Ok(Frame { h, w, rgb })
}

/// Blend, write, done: the operator-facing export.
pub fn export_heatmap(map: &RolloutMap, frame: &Frame, path: &Path) -> Result<(), DataError> {
    write_ppm(&blend_heatmap(map, frame), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn identity(n: usize) -> Tensor<f32> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(vec![n, n], data)
    }

    fn random_stochastic(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f32> {
        let mut data = vec![0.0f32; n * n];
        for r in 0..n {
            let mut sum = 0.0;
            for c in 0..n {
                let v: f32 = rng.gen_range(0.01..1.0);
                data[r * n + c] = v;
                sum += v;
            }
            for c in 0..n {
                data[r * n + c] /= sum;
            }
        }
        Tensor::from_vec(vec![n, n], data)
    }

    #[test]
    fn single_identity_layer_rolls_to_identity() {
        let r = attention_rollout(&[identity(4)], 0.5);
        assert_eq!(r, identity(4));
    }

    #[test]
    fn identity_stacks_of_any_depth_stay_identity() {
        for k in 1..=5 {
            let layers: Vec<Tensor<f32>> = (0..k).map(|_| identity(3)).collect();
            let r = attention_rollout(&layers, 0.5);
            assert_eq!(r, identity(3), "depth {k}");
        }
    }

    #[test]
    fn rollout_rows_stay_stochastic() {
        let mut rng = rng_from(1);
        let layers: Vec<Tensor<f32>> = (0..4).map(|_| random_stochastic(6, &mut rng)).collect();
        let r = attention_rollout(&layers, 0.5);
        for row in 0..6 {
            let sum: f32 = r.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {row} sums to {sum}");
            assert!(r.row(row).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rollout_matches_naive_product_oracle() {
        let mut rng = rng_from(2);
        let n = 4;
        let layers: Vec<Tensor<f32>> = (0..2).map(|_| random_stochastic(n, &mut rng)).collect();
        // independent oracle: explicit 0.5A + 0.5I, renormalize, hand product
        let adj: Vec<Vec<f64>> = layers
            .iter()
            .map(|a| {
                let mut m = vec![0.0f64; n * n];
                for r in 0..n {
                    for c in 0..n {
                        m[r * n + c] = 0.5 * a.row(r)[c] as f64 + if r == c { 0.5 } else { 0.0 };
                    }
                    let s: f64 = m[r * n..(r + 1) * n].iter().sum();
                    for v in &mut m[r * n..(r + 1) * n] {
                        *v /= s;
                    }
                }
                m
            })
            .collect();
        let mut want = vec![0.0f64; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += adj[1][r * n + k] * adj[0][k * n + c];
                }
                want[r * n + c] = s;
            }
        }
        let got = attention_rollout(&layers, 0.5);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    #[should_panic(expected = "not row-stochastic")]
    fn rollout_rejects_non_stochastic_input() {
        let bad = Tensor::from_vec(vec![2, 2], vec![0.9, 0.9, 0.1, 0.1]);
        let _ = attention_rollout(&[bad], 0.5);
    }

    #[test]
    fn slot_heatmap_single_slot_four_patches() {
        let mut rng = rng_from(3);
        let roll = random_stochastic(5, &mut rng);
        let map = slot_heatmap(&roll, 0, 1, 2, 2);
        assert_eq!((map.rows, map.cols), (2, 2));
        let sum: f32 = map.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_rollout_gives_uniform_map() {
        let n = 5;
        let uni = Tensor::from_vec(vec![n, n], vec![1.0 / n as f32; n * n]);
        let map = slot_heatmap(&uni, 0, 1, 2, 2);
        for &w in &map.weights {
            assert!((w - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn ppm_header_and_readback_are_exact() {
        let dir = std::env::temp_dir().join("ivcl_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.ppm");

        let frame = Frame { h: 8, w: 6, rgb: (0..8 * 6 * 3).map(|i| (i % 251) as u8).collect() };
        let map = RolloutMap { rows: 2, cols: 2, weights: vec![0.7, 0.1, 0.1, 0.1] };
        let blended = blend_heatmap(&map, &frame);
        write_ppm(&blended, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n6 8\n255\n"));
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, blended);
    }

    #[test]
    fn zero_map_blends_to_pure_grayscale() {
        let frame = Frame { h: 4, w: 4, rgb: (0..48).map(|i| (i * 5 % 255) as u8).collect() };
        let map = RolloutMap { rows: 2, cols: 2, weights: vec![0.0; 4] };
        let out = blend_heatmap(&map, &frame);
        for y in 0..4 {
            for x in 0..4 {
                let [r, g, b] = out.get(y, x);
                assert_eq!(r, g);
                assert_eq!(g, b);
            }
        }
    }
}
