//! Named parameter arrays with matching gradient accumulators.

use super::array::{Mat, Scalar};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng;
use std::collections::HashMap;

/// Parameters and their gradients, iterated in insertion order so that every
/// reduction and checkpoint walk is deterministic.
pub struct ParameterStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<Mat<F>>,
    grads: Vec<Mat<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { names: Vec::new(), values: Vec::new(), grads: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Mat<F>) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name `{name}`")));
        }
        let grad = Mat::zeros(value.rows(), value.cols());
        self.by_name.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(grad);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value_at(&self, idx: usize) -> &Mat<F> {
        &self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Mat<F> {
        &mut self.values[idx]
    }

    pub fn value(&self, name: &str) -> Option<&Mat<F>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn grad_at(&self, idx: usize) -> &Mat<F> {
        &self.grads[idx]
    }

    pub fn grad_at_mut(&mut self, idx: usize) -> &mut Mat<F> {
        &mut self.grads[idx]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(F::ZERO);
        }
    }

    /// Accumulate a parallel set of gradients (same layout) into this store.
    pub fn accumulate_grads(&mut self, other: &ParameterStore<F>) {
        debug_assert_eq!(self.len(), other.len());
        for (g, o) in self.grads.iter_mut().zip(other.grads.iter()) {
            g.add_assign(o);
        }
    }

    pub fn scale_grads(&mut self, c: F) {
        for g in &mut self.grads {
            for v in g.as_mut_slice() {
                *v *= c;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// A store with the same names/shapes, zero-valued; used as a per-worker
    /// gradient buffer.
    pub fn grads_like(&self) -> ParameterStore<F> {
        let mut s = ParameterStore::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            s.insert(name, Mat::zeros(v.rows(), v.cols())).expect("unique names");
        }
        s
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        let mut s = ParameterStore::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            s.insert(name, v.cast()).expect("unique names");
        }
        s
    }
}

/// Glorot-uniform init for dense and convolution weights.
pub fn xavier_uniform<F: Scalar>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, seed: u64) -> Mat<F> {
    let mut rng = rng_from_seed(seed);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| F::from_f64(rng.gen_range(-bound..bound)))
}

/// Orthogonal init for square recurrent blocks, via Gram-Schmidt on a
/// Gaussian matrix. For an (n x m) request with n = k*m, each m x m block is
/// orthogonalized independently (gate-stacked recurrent weights).
pub fn orthogonal<F: Scalar>(rows: usize, cols: usize, seed: u64) -> Mat<F> {
    assert!(rows % cols == 0, "orthogonal init expects stacked square blocks");
    let mut rng = rng_from_seed(seed);
    let mut out = Mat::<f64>::zeros(rows, cols);
    for block in 0..rows / cols {
        let q = gram_schmidt(cols, &mut rng);
        for r in 0..cols {
            out.row_mut(block * cols + r).copy_from_slice(q.row(r));
        }
    }
    out.cast()
}

fn gram_schmidt(n: usize, rng: &mut impl Rng) -> Mat<f64> {
    loop {
        let mut m = Mat::<f64>::from_fn(n, n, |_, _| gaussian(rng));
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                let (head, tail) = m.as_mut_slice().split_at_mut(i * n);
                let rj = &head[j * n..(j + 1) * n];
                for (x, y) in tail[..n].iter_mut().zip(rj) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for x in m.row_mut(i) {
                *x /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("b", Mat::zeros(1, 2)).unwrap();
        s.insert("a", Mat::zeros(1, 2)).unwrap();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["b", "a"]);
        assert!(s.insert("a", Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn orthogonal_blocks_are_orthonormal() {
        let q = orthogonal::<f64>(12, 4, 9);
        for block in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let dot: f64 = (0..4).map(|c| q.at(block * 4 + i, c) * q.at(block * 4 + j, c)).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10, "block {block} ({i},{j}): {dot}");
                }
            }
        }
    }

    #[test]
    fn xavier_bound_respected() {
        let w = xavier_uniform::<f32>(20, 30, 20, 30, 3);
        let bound = (6.0f32 / 50.0).sqrt();
        assert!(w.as_slice().iter().all(|v| v.abs() <= bound));
    }
}
