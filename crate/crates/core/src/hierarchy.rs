//! Observable picture: reduced observables, the solution expansion of the
//! dual hierarchy and its right-hand side, mean-value functionals, and the
//! brute-force evolution of the full truncated ensemble.

use crate::combinatorics::cumulant;
use crate::error::{Error, Result};
use crate::operators::{apply, build_term, Direction, Dynamics, JumpTerm, SubsetSelector};
use crate::sector::{SectorFunction, SequenceKind, SequenceState};
use serde::{Deserialize, Serialize};

/// Cap on the sector arity handled by the solution expansions.
pub const MAX_SECTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableShape {
    /// `O_{1+s} = O_{1+0}(u) + sum_i O_{0+1}(u_i)`.
    Additive,
    /// Depends on at most `k` environment entities.
    KAry(usize),
    General,
}

/// Sequence of observables `O_{1+s}` (or reduced observables `B_{1+s}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeq {
    pub seq: SequenceState,
    pub shape: ObservableShape,
}

impl ObservableSeq {
    pub fn new(seq: SequenceState, shape: ObservableShape) -> Result<Self> {
        if seq.kind() != SequenceKind::Observable {
            return Err(Error::Invalid("observable sequence expected".into()));
        }
        Ok(Self { seq, shape })
    }

    pub fn general(sectors: Vec<SectorFunction>) -> Result<Self> {
        Self::new(
            SequenceState::new(SequenceKind::Observable, sectors)?,
            ObservableShape::General,
        )
    }

    /// Full additive observable over sectors `0..=n_max`.
    pub fn additive(o10: &[f64], o01: &[f64], n_max: usize) -> Self {
        let n = o10.len();
        let sectors = (0..=n_max)
            .map(|s| {
                SectorFunction::from_fn(s, n, |x| {
                    o10[x[0]] + x[1..].iter().map(|&e| o01[e]).sum::<f64>()
                })
            })
            .collect();
        Self {
            seq: SequenceState::new(SequenceKind::Observable, sectors).expect("contiguous"),
            shape: ObservableShape::Additive,
        }
    }

    /// Reduced form of an additive observable: `(O_{1+0}, O_{0+1}(u_1), 0, ...)`.
    pub fn additive_reduced(o10: &[f64], o01: &[f64], n_max: usize) -> Self {
        let n = o10.len();
        let sectors = (0..=n_max)
            .map(|s| match s {
                0 => SectorFunction::from_fn(0, n, |x| o10[x[0]]),
                1 => SectorFunction::from_fn(1, n, |x| o01[x[1]]),
                _ => SectorFunction::zeros(s, n),
            })
            .collect();
        Self {
            seq: SequenceState::new(SequenceKind::Observable, sectors).expect("contiguous"),
            shape: ObservableShape::Additive,
        }
    }

    /// `O_{1+s} = c` in every sector.
    pub fn constant(c: f64, n_states: usize, n_max: usize) -> Self {
        let sectors = (0..=n_max)
            .map(|s| SectorFunction::from_fn(s, n_states, |_| c))
            .collect();
        Self {
            seq: SequenceState::new(SequenceKind::Observable, sectors).expect("contiguous"),
            shape: ObservableShape::KAry(0),
        }
    }

    /// Indicator of the tracer being in state `e`.
    pub fn tracer_indicator(e: usize, n_states: usize, n_max: usize) -> Self {
        let sectors = (0..=n_max)
            .map(|s| SectorFunction::from_fn(s, n_states, |x| f64::from(u8::from(x[0] == e))))
            .collect();
        Self {
            seq: SequenceState::new(SequenceKind::Observable, sectors).expect("contiguous"),
            shape: ObservableShape::KAry(0),
        }
    }

    /// Full 2-ary observable `O_{1+s} = sum_{i<j} phi(u, u_i, u_j)` with
    /// `phi` symmetric in its last two arguments.
    pub fn pair_sum(phi: &SectorFunction, n_max: usize) -> Result<Self> {
        if phi.arity() != 2 {
            return Err(Error::Arity {
                expected: 2,
                got: phi.arity(),
            });
        }
        let sectors = (0..=n_max)
            .map(|s| {
                SectorFunction::from_fn(s, phi.n_states(), |x| {
                    let mut acc = 0.0;
                    for i in 1..=s {
                        for j in (i + 1)..=s {
                            acc += phi.get(&[x[0], x[i], x[j]]);
                        }
                    }
                    acc
                })
            })
            .collect();
        Self::new(
            SequenceState::new(SequenceKind::Observable, sectors)?,
            ObservableShape::KAry(2),
        )
    }

    pub fn sector(&self, s: usize) -> &SectorFunction {
        self.seq.sector(s)
    }

    pub fn n_max(&self) -> usize {
        self.seq.n_max()
    }
}

/// Truncated grand-canonical ensemble `D_{1+n}`, `n = 0..=n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullEnsemble {
    pub seq: SequenceState,
    pub partition_norm: f64,
}

impl FullEnsemble {
    pub fn new(seq: SequenceState, weights: &[f64]) -> Result<Self> {
        if seq.kind() != SequenceKind::Distribution {
            return Err(Error::Invalid("distribution sequence expected".into()));
        }
        if seq
            .sectors()
            .iter()
            .any(|f| f.as_slice().iter().any(|v| *v < 0.0))
        {
            return Err(Error::Invalid("ensemble sectors must be nonnegative".into()));
        }
        let partition_norm = partition_norm(&seq, weights);
        if !(partition_norm > 0.0) {
            return Err(Error::ZeroNorm);
        }
        Ok(Self {
            seq,
            partition_norm,
        })
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `(I, D) = sum_n 1/n! sum_x W(x) D_{1+n}(x)`.
pub fn partition_norm(d: &SequenceState, weights: &[f64]) -> f64 {
    d.sectors()
        .iter()
        .enumerate()
        .map(|(n, f)| f.integrate_all(weights) / factorial(n))
        .sum()
}

/// `F_{1+s} = (I,D)^{-1} sum_n 1/n! int D_{1+s+n} du_{s+1..s+n}`.
pub fn reduce_state(d: &SequenceState, s: usize, weights: &[f64]) -> Result<SectorFunction> {
    if s > d.n_max() {
        return Err(Error::Arity {
            expected: s,
            got: d.n_max(),
        });
    }
    let norm = partition_norm(d, weights);
    if !(norm.is_finite() && norm != 0.0) {
        return Err(Error::ZeroNorm);
    }
    let mut out = SectorFunction::zeros(s, d.n_states());
    for n in 0..=(d.n_max() - s) {
        let part = d.sector(s + n).integrate_last(n, weights)?;
        out.axpy(1.0 / (factorial(n) * norm), &part)?;
    }
    Ok(out)
}

/// All reduced distributions `F_{1+s}`, `s = 0..=n_max`.
pub fn reduce_state_all(d: &SequenceState, weights: &[f64]) -> Result<SequenceState> {
    let sectors = (0..=d.n_max())
        .map(|s| reduce_state(d, s, weights))
        .collect::<Result<Vec<_>>>()?;
    SequenceState::new(SequenceKind::Distribution, sectors)
}

/// Applies the full-sector semigroup to every sector: `e^{tL}` to
/// observables (forward) or `e^{tL*}` to distributions (dual).
pub fn evolve_full(
    dynamics: &Dynamics,
    seq: &SequenceState,
    t: f64,
    direction: Direction,
) -> Result<SequenceState> {
    let sectors = seq
        .sectors()
        .iter()
        .enumerate()
        .map(|(s, f)| dynamics.evolve(&SubsetSelector::full(s), direction, t, f))
        .collect::<Result<Vec<_>>>()?;
    SequenceState::new(seq.kind(), sectors)
}

/// Subsets of `1..=s` as sorted vectors, in order of increasing bitmask.
fn subsets(s: usize) -> impl Iterator<Item = Vec<usize>> {
    (0u32..(1 << s)).map(move |mask| (1..=s).filter(|i| mask & (1 << (i - 1)) != 0).collect())
}

fn complement(s: usize, removed: &[usize]) -> Vec<usize> {
    (1..=s).filter(|i| !removed.contains(i)).collect()
}

/// `B_{1+s} = sum_{S subset Y} (-1)^{|S|} O_{1+s-|S|}(u, Y \ S)`.
pub fn reduce_observable(o: &ObservableSeq, s: usize) -> Result<SectorFunction> {
    if s > o.n_max() {
        return Err(Error::Arity {
            expected: s,
            got: o.n_max(),
        });
    }
    let mut out = SectorFunction::zeros(s, o.seq.n_states());
    for removed in subsets(s) {
        let keep = complement(s, &removed);
        let lifted = o.sector(keep.len()).embed(s, &keep)?;
        let sign = if removed.len() % 2 == 0 { 1.0 } else { -1.0 };
        out.axpy(sign, &lifted)?;
    }
    out.symmetrize();
    Ok(out)
}

pub fn reduce_observable_all(o: &ObservableSeq) -> Result<ObservableSeq> {
    let sectors = (0..=o.n_max())
        .map(|s| reduce_observable(o, s))
        .collect::<Result<Vec<_>>>()?;
    ObservableSeq::new(SequenceState::new(SequenceKind::Observable, sectors)?, o.shape)
}

/// `<O> = (I,D)^{-1} sum_s 1/s! <O_{1+s}, D_{1+s}>`.
pub fn mean_value_full(o: &ObservableSeq, d: &FullEnsemble, weights: &[f64]) -> Result<f64> {
    if !(d.partition_norm > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let top = o.n_max().min(d.seq.n_max());
    let mut acc = 0.0;
    for s in 0..=top {
        acc += o.sector(s).inner(d.seq.sector(s), weights)? / factorial(s);
    }
    Ok(acc / d.partition_norm)
}

/// `(B, F) = sum_s 1/s! <B_{1+s}, F_{1+s}>`.
pub fn mean_value_reduced(b: &ObservableSeq, f: &SequenceState, weights: &[f64]) -> Result<f64> {
    let top = b.n_max().min(f.n_max());
    let mut acc = 0.0;
    for s in 0..=top {
        acc += b.sector(s).inner(f.sector(s), weights)? / factorial(s);
    }
    Ok(acc)
}

fn check_sector(s: usize, b: &ObservableSeq) -> Result<()> {
    if s > MAX_SECTOR {
        return Err(Error::CapExceeded {
            what: "sector arity",
            value: s,
            cap: MAX_SECTOR,
        });
    }
    if s > b.n_max() {
        return Err(Error::Arity {
            expected: s,
            got: b.n_max(),
        });
    }
    Ok(())
}

/// `B_{1+s}(t) = sum_{S subset Y} A_{1+|S|}(t, {tracer, Y \ S}, S) B^0_{1+s-|S|}(Y \ S)`.
pub fn dual_bbgky_solution(
    dynamics: &Dynamics,
    b0: &ObservableSeq,
    t: f64,
    s: usize,
) -> Result<SectorFunction> {
    check_sector(s, b0)?;
    let mut out = SectorFunction::zeros(s, dynamics.n_states());
    for removed in subsets(s) {
        let keep = complement(s, &removed);
        let mut labels = vec![SubsetSelector::new(true, keep.iter().copied())?];
        for &j in &removed {
            labels.push(SubsetSelector::env_slot(j)?);
        }
        let op = cumulant(dynamics, Direction::Forward, t, s, &labels)?;
        let lifted = b0.sector(keep.len()).embed(s, &keep)?;
        out.add_assign(&apply(&op, &lifted)?)?;
    }
    out.symmetrize();
    Ok(out)
}

/// Right-hand side of the dual hierarchy for sector `1+s`:
/// `L(tracer, Y) B_{1+s} + eps sum_j L_int(tracer, j) B_{1+s-1}(Y \ j)
///  + sum_{j1 != j2} sum_{i in (j1, j2)} L_2(j1, j2) B_{1+s-1}(Y \ i)`.
pub fn dual_bbgky_rhs(dynamics: &Dynamics, b: &ObservableSeq, s: usize) -> Result<SectorFunction> {
    check_sector(s, b)?;
    let model = dynamics.model();
    let gen = dynamics.generator(&SubsetSelector::full(s), s, Direction::Forward)?;
    let mut out = apply(&gen.matrix, b.sector(s))?;
    if s == 0 {
        return Ok(out);
    }
    let lower = b.sector(s - 1);
    let without = |i: usize| lower.embed(s, &complement(s, &[i]));
    for j in 1..=s {
        if model.eps != 0.0 {
            let op = build_term(model, JumpTerm::Interaction(j), s, Direction::Forward)?;
            out.add_assign(&apply(&op, &without(j)?)?)?;
        }
        for j2 in 1..=s {
            if j2 == j {
                continue;
            }
            let op = build_term(model, JumpTerm::EnvPair(j, j2), s, Direction::Forward)?;
            for i in [j, j2] {
                out.add_assign(&apply(&op, &without(i)?)?)?;
            }
        }
    }
    out.symmetrize();
    Ok(out)
}

/// Solution of the hierarchy for additive initial data:
/// `A_{1+s}(t, tracer, 1..s) O_{1+0} + sum_j A_s(t, {tracer, j}, Y \ j) O_{0+1}(u_j)`.
pub fn additive_solution(
    dynamics: &Dynamics,
    o10: &[f64],
    o01: &[f64],
    t: f64,
    s: usize,
) -> Result<SectorFunction> {
    if s > MAX_SECTOR {
        return Err(Error::CapExceeded {
            what: "sector arity",
            value: s,
            cap: MAX_SECTOR,
        });
    }
    let n = dynamics.n_states();
    if o10.len() != n || o01.len() != n {
        return Err(Error::Shape("additive components have the wrong length".into()));
    }
    let mut labels = vec![SubsetSelector::tracer_only()];
    for j in 1..=s {
        labels.push(SubsetSelector::env_slot(j)?);
    }
    let op = cumulant(dynamics, Direction::Forward, t, s, &labels)?;
    let tracer_part = SectorFunction::from_raw(0, n, o10.to_vec())?.embed(s, &[])?;
    let mut out = apply(&op, &tracer_part)?;
    for j in 1..=s {
        let mut labels = vec![SubsetSelector::new(true, [j])?];
        for k in complement(s, &[j]) {
            labels.push(SubsetSelector::env_slot(k)?);
        }
        let op = cumulant(dynamics, Direction::Forward, t, s, &labels)?;
        out.add_assign(&apply(&op, &slot_function(s, n, j, o01))?)?;
    }
    out.symmetrize();
    Ok(out)
}

/// `x -> phi(x_j)` on the `1+s` sector.
fn slot_function(s: usize, n: usize, j: usize, phi: &[f64]) -> SectorFunction {
    let mut f = SectorFunction::zeros(s, n);
    let mut slots = vec![0usize; s + 1];
    for idx in 0..f.len() {
        f.decode_into(idx, &mut slots);
        f.as_mut_slice()[idx] = phi[slots[j]];
    }
    f
}
