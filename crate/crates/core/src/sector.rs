//! Functions over `(J x U)^{1+s}`: one tracer slot followed by `s`
//! interchangeable environment slots.
//!
//! Storage is the full row-major tensor with the tracer slot most significant.
//! Public constructors symmetrize over the environment slots; intermediate
//! results of partial-slot operators may be asymmetric and are built with
//! [`SectorFunction::from_raw`].

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorFunction {
    arity: usize,
    n_states: usize,
    data: Vec<f64>,
}

pub fn sector_len(n_states: usize, arity: usize) -> usize {
    n_states.pow(arity as u32 + 1)
}

/// Iterates over all permutations of `0..k` (Heap's algorithm).
pub(crate) fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
    }
    let mut a: Vec<usize> = (0..k).collect();
    let mut out = Vec::new();
    heap(k, &mut a, &mut out);
    out
}

impl SectorFunction {
    pub fn zeros(arity: usize, n_states: usize) -> Self {
        Self {
            arity,
            n_states,
            data: vec![0.0; sector_len(n_states, arity)],
        }
    }

    /// Builds a sector function pointwise and symmetrizes it over the
    /// environment slots.
    pub fn from_fn(arity: usize, n_states: usize, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut out = Self::zeros(arity, n_states);
        let mut slots = vec![0usize; arity + 1];
        for idx in 0..out.data.len() {
            out.decode_into(idx, &mut slots);
            out.data[idx] = f(&slots);
        }
        out.symmetrize();
        out
    }

    /// Wraps data verbatim (no symmetrization). Checks length and finiteness.
    pub fn from_raw(arity: usize, n_states: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != sector_len(n_states, arity) {
            return Err(Error::Shape(format!(
                "sector 1+{arity} over {n_states} states needs {} entries, got {}",
                sector_len(n_states, arity),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sector data"));
        }
        Ok(Self {
            arity,
            n_states,
            data,
        })
    }

    /// Like [`from_raw`](Self::from_raw) but symmetrizes on write.
    pub fn new(arity: usize, n_states: usize, data: Vec<f64>) -> Result<Self> {
        let mut out = Self::from_raw(arity, n_states, data)?;
        out.symmetrize();
        Ok(out)
    }

    pub(crate) fn from_vec_unchecked(arity: usize, n_states: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), sector_len(n_states, arity));
        Self {
            arity,
            n_states,
            data,
        }
    }

    /// Tensor product `tracer(u) * prod_i env[i](u_i)`.
    pub fn product(tracer: &[f64], env: &[&[f64]]) -> Self {
        let n = tracer.len();
        let arity = env.len();
        let mut out = Self::zeros(arity, n);
        let mut slots = vec![0usize; arity + 1];
        for idx in 0..out.data.len() {
            out.decode_into(idx, &mut slots);
            let mut v = tracer[slots[0]];
            for (k, e) in env.iter().enumerate() {
                v *= e[slots[k + 1]];
            }
            out.data[idx] = v;
        }
        out
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index_of(&self, slots: &[usize]) -> usize {
        debug_assert_eq!(slots.len(), self.arity + 1);
        slots.iter().fold(0, |acc, &s| acc * self.n_states + s)
    }

    pub fn decode_into(&self, mut idx: usize, slots: &mut [usize]) {
        for k in (0..=self.arity).rev() {
            slots[k] = idx % self.n_states;
            idx /= self.n_states;
        }
    }

    pub fn get(&self, slots: &[usize]) -> f64 {
        self.data[self.index_of(slots)]
    }

    pub fn symmetrize(&mut self) {
        if self.arity < 2 {
            return;
        }
        let perms = permutations(self.arity);
        let scale = 1.0 / perms.len() as f64;
        let mut out = vec![0.0; self.data.len()];
        let mut slots = vec![0usize; self.arity + 1];
        let mut permuted = vec![0usize; self.arity + 1];
        for (idx, o) in out.iter_mut().enumerate() {
            self.decode_into(idx, &mut slots);
            permuted[0] = slots[0];
            let mut acc = 0.0;
            for p in &perms {
                for (k, &pk) in p.iter().enumerate() {
                    permuted[k + 1] = slots[pk + 1];
                }
                acc += self.data[self.index_of(&permuted)];
            }
            *o = acc * scale;
        }
        self.data = out;
    }

    /// Max deviation under any transposition of two environment slots.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut slots = vec![0usize; self.arity + 1];
        for idx in 0..self.data.len() {
            self.decode_into(idx, &mut slots);
            for a in 1..=self.arity {
                for b in (a + 1)..=self.arity {
                    slots.swap(a, b);
                    let other = self.data[self.index_of(&slots)];
                    slots.swap(a, b);
                    worst = worst.max((self.data[idx] - other).abs());
                }
            }
        }
        worst
    }

    /// Product of entity weights for each flattened index.
    pub fn slot_weight(&self, weights: &[f64], slots: &[usize]) -> f64 {
        slots.iter().map(|&s| weights[s]).product()
    }

    /// Weighted total `sum_x W(x) f(x)`.
    pub fn integrate_all(&self, weights: &[f64]) -> f64 {
        let mut slots = vec![0usize; self.arity + 1];
        let mut acc = 0.0;
        for (idx, v) in self.data.iter().enumerate() {
            self.decode_into(idx, &mut slots);
            acc += self.slot_weight(weights, &slots) * v;
        }
        acc
    }

    /// Integrates out the last `k` environment slots.
    pub fn integrate_last(&self, k: usize, weights: &[f64]) -> Result<SectorFunction> {
        if k > self.arity {
            return Err(Error::Arity {
                expected: k,
                got: self.arity,
            });
        }
        let block = self.n_states.pow(k as u32);
        let mut wblock = vec![1.0; block];
        let mut inner = vec![0usize; k];
        for (b, wb) in wblock.iter_mut().enumerate() {
            let mut r = b;
            for s in inner.iter_mut().rev() {
                *s = r % self.n_states;
                r /= self.n_states;
            }
            *wb = inner.iter().map(|&s| weights[s]).product();
        }
        let out: Vec<f64> = self
            .data
            .chunks(block)
            .map(|c| c.iter().zip(&wblock).map(|(v, w)| v * w).sum())
            .collect();
        Ok(Self::from_vec_unchecked(self.arity - k, self.n_states, out))
    }

    /// Tracer marginal: all environment slots integrated out.
    pub fn tracer_marginal(&self, weights: &[f64]) -> Vec<f64> {
        self.integrate_last(self.arity, weights)
            .expect("arity is in range")
            .into_vec()
    }

    /// Integrates out the tracer slot, returning a function of the
    /// environment slots stored as a row-major `n^arity` array.
    pub fn integrate_tracer(&self, weights: &[f64]) -> Vec<f64> {
        let block = self.n_states.pow(self.arity as u32);
        let mut out = vec![0.0; block];
        for (u, chunk) in self.data.chunks(block).enumerate() {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += weights[u] * v;
            }
        }
        out
    }

    /// Weighted inner product `sum_x W(x) f(x) g(x)`.
    pub fn inner(&self, other: &SectorFunction, weights: &[f64]) -> Result<f64> {
        self.check_same(other)?;
        let mut slots = vec![0usize; self.arity + 1];
        let mut acc = 0.0;
        for (idx, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            self.decode_into(idx, &mut slots);
            acc += self.slot_weight(weights, &slots) * a * b;
        }
        Ok(acc)
    }

    pub fn check_same(&self, other: &SectorFunction) -> Result<()> {
        if self.arity != other.arity || self.n_states != other.n_states {
            return Err(Error::Arity {
                expected: self.arity,
                got: other.arity,
            });
        }
        Ok(())
    }

    /// Lifts `self` (arity m) into arity `target` by reading env argument `k`
    /// of `self` from env slot `slot_map[k]` (1-based) of the target; the
    /// remaining target slots are ignored.
    pub fn embed(&self, target: usize, slot_map: &[usize]) -> Result<SectorFunction> {
        if slot_map.len() != self.arity || slot_map.iter().any(|&s| s == 0 || s > target) {
            return Err(Error::Selector(format!(
                "embedding map {slot_map:?} invalid for target arity {target}"
            )));
        }
        let mut out = Self::zeros(target, self.n_states);
        let mut slots = vec![0usize; target + 1];
        let mut src = vec![0usize; self.arity + 1];
        for idx in 0..out.data.len() {
            out.decode_into(idx, &mut slots);
            src[0] = slots[0];
            for (k, &t) in slot_map.iter().enumerate() {
                src[k + 1] = slots[t];
            }
            out.data[idx] = self.data[self.index_of(&src)];
        }
        Ok(out)
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn add_assign(&mut self, other: &SectorFunction) -> Result<()> {
        self.check_same(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn axpy(&mut self, c: f64, other: &SectorFunction) -> Result<()> {
        self.check_same(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += c * b);
        Ok(())
    }

    pub fn mul_assign(&mut self, other: &SectorFunction) -> Result<()> {
        self.check_same(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a *= b);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &SectorFunction) -> Result<f64> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Observable,
    Distribution,
    Correlation,
}

/// Sectors `1+0, 1+1, ..., 1+n_max` of one observable, distribution or
/// correlation sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceState {
    kind: SequenceKind,
    sectors: Vec<SectorFunction>,
}

impl SequenceState {
    pub fn new(kind: SequenceKind, sectors: Vec<SectorFunction>) -> Result<Self> {
        let Some(first) = sectors.first() else {
            return Err(Error::Invalid("sequence needs at least the 1+0 sector".into()));
        };
        let n = first.n_states();
        for (s, f) in sectors.iter().enumerate() {
            if f.arity() != s {
                return Err(Error::Arity {
                    expected: s,
                    got: f.arity(),
                });
            }
            if f.n_states() != n {
                return Err(Error::Shape("sectors over different state spaces".into()));
            }
        }
        Ok(Self { kind, sectors })
    }

    pub fn zeros(kind: SequenceKind, n_max: usize, n_states: usize) -> Self {
        Self {
            kind,
            sectors: (0..=n_max)
                .map(|s| SectorFunction::zeros(s, n_states))
                .collect(),
        }
    }

    pub fn kind(&self) -> SequenceKind {
        self.kind
    }

    pub fn n_max(&self) -> usize {
        self.sectors.len() - 1
    }

    pub fn n_states(&self) -> usize {
        self.sectors[0].n_states()
    }

    pub fn sector(&self, s: usize) -> &SectorFunction {
        &self.sectors[s]
    }

    pub fn sector_mut(&mut self, s: usize) -> &mut SectorFunction {
        &mut self.sectors[s]
    }

    pub fn sectors(&self) -> &[SectorFunction] {
        &self.sectors
    }

    pub fn get(&self, s: usize) -> Option<&SectorFunction> {
        self.sectors.get(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(0).len(), 1);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(4).len(), 24);
    }

    #[test]
    fn symmetrized_write_is_symmetric() {
        let f = SectorFunction::from_fn(3, 3, |x| {
            (x[0] + 1) as f64 * (x[1] as f64 + 2.0 * x[2] as f64 + 5.0 * x[3] as f64)
        });
        assert!(f.symmetry_defect() < 1e-14);
        let mut g = f.clone();
        g.symmetrize();
        assert!(f.max_abs_diff(&g).unwrap() < 1e-14);
    }

    #[test]
    fn integrate_last_matches_manual_sum() {
        let w = [0.5, 1.5];
        let f = SectorFunction::from_fn(2, 2, |x| (1 + x[0] + 2 * x[1] + 3 * x[2]) as f64);
        let g = f.integrate_last(1, &w).unwrap();
        for u in 0..2 {
            for u1 in 0..2 {
                let manual: f64 = (0..2).map(|v| w[v] * f.get(&[u, u1, v])).sum();
                assert!((g.get(&[u, u1]) - manual).abs() < 1e-14);
            }
        }
        let total: f64 = f.integrate_all(&w);
        let via: f64 = f.integrate_last(2, &w).unwrap().integrate_all(&w);
        assert!((total - via).abs() < 1e-12);
    }

    #[test]
    fn embed_reads_mapped_slot() {
        let f = SectorFunction::from_raw(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = f.embed(2, &[2]).unwrap();
        for u in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    assert_eq!(g.get(&[u, a, b]), f.get(&[u, b]));
                }
            }
        }
        assert!(f.embed(2, &[3]).is_err());
    }

    #[test]
    fn raw_rejects_bad_input() {
        assert!(SectorFunction::from_raw(1, 2, vec![0.0; 3]).is_err());
        assert!(SectorFunction::from_raw(0, 2, vec![0.0, f64::NAN]).is_err());
    }
}
