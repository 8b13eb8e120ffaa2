//! Named parameter table.
//!
//! All trainable state lives in one `BTreeMap<String, Tensor>`; the sorted
//! order makes optimizer sweeps, checkpoints, and gradient aggregation
//! deterministic. Prefixes group subsystems: `enc.` image encoder, `tmp.`
//! temporal transformer, `dec.` reconstruction decoder, `det.` detection
//! decoder, `cls.`/`head.` task heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Default)]
pub struct Params<F: Scalar = f32> {
    table: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params { table: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        assert!(
            self.table.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.table
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, t: Tensor<F>) {
        assert!(self.table.contains_key(name), "unknown parameter {name}");
        self.table.insert(name.to_string(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.table.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.table.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.table.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.table.values().map(|t| t.numel()).sum()
    }

    /// Register every parameter on a tape. The returned view is what the
    /// forward pass reads; gradients then reach each leaf.
    pub fn watch_all(&self, tape: &mut Tape<F>) -> Params<F> {
        let table = self
            .table
            .iter()
            .map(|(k, v)| (k.clone(), tape.watch(v)))
            .collect();
        Params { table }
    }

    /// Register only parameters matching `pred`; the rest stay constant.
    /// Used by linear-probe finetuning.
    pub fn watch_matching(&self, tape: &mut Tape<F>, pred: impl Fn(&str) -> bool) -> Params<F> {
        let table = self
            .table
            .iter()
            .map(|(k, v)| {
                let t = if pred(k) { tape.watch(v) } else { v.clone() };
                (k.clone(), t)
            })
            .collect();
        Params { table }
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        let table = self.table.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Params { table }
    }
}

/// Truncated normal draw: resample outside ±2σ.
pub fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, sigma: f64) -> F {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return F::cast_from(z * sigma);
        }
    }
}

pub fn init_weight<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| trunc_normal(rng, sigma)).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn init_is_seed_deterministic_and_truncated() {
        let a: Tensor<f32> = init_weight(&mut rng_from(5), vec![64, 4], 0.02);
        let b: Tensor<f32> = init_weight(&mut rng_from(5), vec![64, 4], 0.02);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut p = Params::<f32>::new();
        p.insert("w", Tensor::scalar(1.0));
        p.insert("w", Tensor::scalar(2.0));
    }
}
