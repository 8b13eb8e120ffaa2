//! Compositional train/test splits over the shape-color-material grid:
//! held-out attribute combinations never appear in training, while every
//! individual attribute value stays covered on both sides.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::ConfigError;
use crate::sim::blicket::{BlicketObject, N_COMBOS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositionalSplit {
    pub train_combos: Vec<usize>,
    pub test_combos: Vec<usize>,
}

/// Hold out `floor(held_out_frac · combos)` attribute combinations for the
/// test side. Rejection-samples until each shape, color, and material
/// value appears in both sides.
pub fn build_compositional_split(
    held_out_frac: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CompositionalSplit, ConfigError> {
    if !(0.0..1.0).contains(&held_out_frac) {
        return Err(ConfigError::Invariant(format!(
            "held-out fraction {held_out_frac} outside [0, 1)"
        )));
    }
    let n_held = (held_out_frac * N_COMBOS as f64).floor() as usize;
    if n_held == 0 {
        return Err(ConfigError::Invariant(
            "held-out fraction keeps zero combinations for the test side".into(),
        ));
    }

    for _ in 0..1000 {
        let mut combos: Vec<usize> = (0..N_COMBOS).collect();
        for i in (1..combos.len()).rev() {
            let j = rng.gen_range(0..=i);
            combos.swap(i, j);
        }
        let test: Vec<usize> = combos[..n_held].to_vec();
        let train: Vec<usize> = combos[n_held..].to_vec();
        if covers_all_values(&train) && covers_all_values(&test) {
            let mut train = train;
            let mut test = test;
            train.sort_unstable();
            test.sort_unstable();
            return Ok(CompositionalSplit { train_combos: train, test_combos: test });
        }
    }
    Err(ConfigError::Invariant(format!(
        "no attribute partition with {n_held} held-out combinations covers every value on both sides"
    )))
}

fn covers_all_values(combos: &[usize]) -> bool {
    use crate::sim::blicket::{N_COLORS, N_MATERIALS, N_SHAPES};
    let mut shapes = vec![false; N_SHAPES];
    let mut colors = vec![false; N_COLORS];
    let mut materials = vec![false; N_MATERIALS];
    for &c in combos {
        let o = BlicketObject::from_combo(c);
        shapes[o.shape] = true;
        colors[o.color] = true;
        materials[o.material] = true;
    }
    shapes.into_iter().all(|b| b) && colors.into_iter().all(|b| b) && materials.into_iter().all(|b| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn quarter_holdout_gives_fourteen_four() {
        // 3 shapes × 3 colors × 2 materials with 25% held out
        let split = build_compositional_split(0.25, &mut rng_from(1)).unwrap();
        assert_eq!(split.train_combos.len(), 14);
        assert_eq!(split.test_combos.len(), 4);
    }

    #[test]
    fn train_and_test_are_disjoint() {
        let split = build_compositional_split(0.25, &mut rng_from(2)).unwrap();
        for c in &split.test_combos {
            assert!(!split.train_combos.contains(c));
        }
        let mut all = split.train_combos.clone();
        all.extend(&split.test_combos);
        all.sort_unstable();
        assert_eq!(all, (0..N_COMBOS).collect::<Vec<_>>());
    }

    #[test]
    fn every_attribute_value_appears_on_both_sides() {
        for seed in 0..20 {
            let split = build_compositional_split(0.25, &mut rng_from(seed)).unwrap();
            assert!(covers_all_values(&split.train_combos));
            assert!(covers_all_values(&split.test_combos));
        }
    }

    #[test]
    fn infeasible_fractions_error() {
        assert!(build_compositional_split(0.0, &mut rng_from(3)).is_err());
        assert!(build_compositional_split(0.95, &mut rng_from(4)).is_err());
    }
}
