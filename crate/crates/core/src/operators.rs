//! Forward and dual Liouville generators of the tracer-plus-environment jump
//! process, materialized as dense matrices on one sector, and their
//! semigroups.
//!
//! Slot 0 is the tracer; environment slots are `1..=s`. A generator built on
//! a [`SubsetSelector`] acts on the selected slots only and as the identity on
//! the others.

use crate::error::{Error, Result};
use crate::expm::expm;
use crate::model::{Kernel, ModelSpec, RateTable};
use crate::sector::{sector_len, SectorFunction};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, RwLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Acts on observables.
    Forward,
    /// Acts on distributions.
    Dual,
}

/// Slots `{tracer?} + env` on which a generator acts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetSelector {
    tracer: bool,
    env: Vec<usize>,
}

impl SubsetSelector {
    /// `env` holds 1-based environment slots.
    pub fn new(tracer: bool, env: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut env: Vec<usize> = env.into_iter().collect();
        env.sort_unstable();
        if env.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Selector(format!("duplicate slot in {env:?}")));
        }
        if env.first() == Some(&0) {
            return Err(Error::Selector("environment slots are 1-based".into()));
        }
        if !tracer && env.is_empty() {
            return Err(Error::Selector("selector must be nonempty".into()));
        }
        Ok(Self { tracer, env })
    }

    /// From slot indices where 0 denotes the tracer.
    pub fn from_slots(slots: &[usize]) -> Result<Self> {
        let tracer = slots.contains(&0);
        Self::new(tracer, slots.iter().copied().filter(|&s| s != 0))
    }

    pub fn full(s: usize) -> Self {
        Self {
            tracer: true,
            env: (1..=s).collect(),
        }
    }

    pub fn tracer_only() -> Self {
        Self {
            tracer: true,
            env: Vec::new(),
        }
    }

    pub fn env_slot(i: usize) -> Result<Self> {
        Self::new(false, [i])
    }

    pub fn includes_tracer(&self) -> bool {
        self.tracer
    }

    pub fn env_slots(&self) -> &[usize] {
        &self.env
    }

    /// All selected slots, tracer as 0.
    pub fn slots(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.env.len() + 1);
        if self.tracer {
            out.push(0);
        }
        out.extend_from_slice(&self.env);
        out
    }

    pub fn len(&self) -> usize {
        self.env.len() + usize::from(self.tracer)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, slot: usize) -> bool {
        if slot == 0 {
            self.tracer
        } else {
            self.env.binary_search(&slot).is_ok()
        }
    }

    pub fn is_disjoint(&self, other: &SubsetSelector) -> bool {
        !(self.tracer && other.tracer) && self.env.iter().all(|s| !other.contains(*s))
    }

    pub fn check(&self, s: usize) -> Result<()> {
        match self.env.last() {
            Some(&max) if max > s => Err(Error::Selector(format!(
                "slot {max} outside sector 1+{s}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Separately retained contributions to a generator.
#[derive(Debug, Clone)]
pub struct GeneratorParts {
    pub system: DMatrix<f64>,
    pub environment: DMatrix<f64>,
    /// Already multiplied by the coupling `eps`.
    pub interaction: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub s: usize,
    pub direction: Direction,
    pub selector: SubsetSelector,
    pub matrix: DMatrix<f64>,
    pub parts: GeneratorParts,
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Debug dump of the nonzero entries as `row,col,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "value"])
            .map_err(|e| Error::Io(e.into()))?;
        for c in 0..self.dim() {
            for r in 0..self.dim() {
                let v = self.matrix[(r, c)];
                if v != 0.0 {
                    w.write_record([r.to_string(), c.to_string(), format!("{v:e}")])
                        .map_err(|e| Error::Io(e.into()))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Part {
    System,
    Environment,
    Interaction,
}

struct Term<'a> {
    part: Part,
    jumping: usize,
    partner: Option<usize>,
    rate: &'a RateTable,
    kernel: &'a Kernel,
    scale: f64,
}

fn terms<'a>(model: &'a ModelSpec, selector: &SubsetSelector) -> Vec<Term<'a>> {
    let mut out = Vec::new();
    if selector.tracer {
        out.push(Term {
            part: Part::System,
            jumping: 0,
            partner: None,
            rate: &model.rate_tracer,
            kernel: &model.kernel_tracer,
            scale: 1.0,
        });
    }
    for &i in &selector.env {
        out.push(Term {
            part: Part::Environment,
            jumping: i,
            partner: None,
            rate: &model.rate_env1,
            kernel: &model.kernel_env1,
            scale: 1.0,
        });
    }
    for &i1 in &selector.env {
        for &i2 in &selector.env {
            if i1 != i2 {
                out.push(Term {
                    part: Part::Environment,
                    jumping: i1,
                    partner: Some(i2),
                    rate: &model.rate_env2,
                    kernel: &model.kernel_env2,
                    scale: 1.0,
                });
            }
        }
    }
    if selector.tracer && model.eps != 0.0 {
        for &i in &selector.env {
            out.push(Term {
                part: Part::Interaction,
                jumping: 0,
                partner: Some(i),
                rate: &model.rate_int,
                kernel: &model.kernel_int,
                scale: model.eps,
            });
        }
    }
    out
}

fn assemble(
    model: &ModelSpec,
    s: usize,
    direction: Direction,
    terms: &[Term<'_>],
) -> [DMatrix<f64>; 3] {
    let n = model.n_states();
    let w = model.weights();
    let dim = sector_len(n, s);
    let mut parts = [
        DMatrix::<f64>::zeros(dim, dim),
        DMatrix::<f64>::zeros(dim, dim),
        DMatrix::<f64>::zeros(dim, dim),
    ];
    let mut slots = vec![0usize; s + 1];
    let probe = SectorFunction::zeros(s, n);
    let mut args = [0usize; 2];
    for x in 0..dim {
        probe.decode_into(x, &mut slots);
        for term in terms {
            let m = &mut parts[term.part as usize];
            let k = term.jumping;
            let stride = n.pow((s - k) as u32);
            let base = x - slots[k] * stride;
            args[0] = slots[k];
            let arity = match term.partner {
                Some(p) => {
                    args[1] = slots[p];
                    2
                }
                None => 1,
            };
            let loss = term.scale * term.rate.at(&args[..arity]);
            m[(x, x)] -= loss;
            match direction {
                Direction::Forward => {
                    let row = term.kernel.row(&args[..arity]);
                    for v in 0..n {
                        m[(x, base + v * stride)] += loss * w[v] * row[v];
                    }
                }
                Direction::Dual => {
                    let here = slots[k];
                    for v in 0..n {
                        args[0] = v;
                        let r = term.scale * term.rate.at(&args[..arity]);
                        m[(x, base + v * stride)] += w[v] * r * term.kernel.at(here, &args[..arity]);
                    }
                }
            }
        }
    }
    parts
}

fn build_generator(
    model: &ModelSpec,
    selector: &SubsetSelector,
    s: usize,
    direction: Direction,
) -> Result<GeneratorMatrix> {
    selector.check(s)?;
    let [system, environment, interaction] = assemble(model, s, direction, &terms(model, selector));
    let matrix = &system + &environment + &interaction;
    Ok(GeneratorMatrix {
        s,
        direction,
        selector: selector.clone(),
        matrix,
        parts: GeneratorParts {
            system,
            environment,
            interaction,
        },
    })
}

/// A single collision term of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JumpTerm {
    /// Tracer jumps alone.
    Tracer,
    /// Environment slot `i` jumps alone.
    EnvSingle(usize),
    /// Environment slot `.0` jumps under the influence of slot `.1`.
    EnvPair(usize, usize),
    /// Tracer jumps under the influence of environment slot `i`; includes `eps`.
    Interaction(usize),
}

/// The matrix of one collision term on the `1+s` sector.
pub fn build_term(
    model: &ModelSpec,
    term: JumpTerm,
    s: usize,
    direction: Direction,
) -> Result<DMatrix<f64>> {
    let (part, jumping, partner, rate, kernel, scale) = match term {
        JumpTerm::Tracer => (Part::System, 0, None, &model.rate_tracer, &model.kernel_tracer, 1.0),
        JumpTerm::EnvSingle(i) => (Part::Environment, i, None, &model.rate_env1, &model.kernel_env1, 1.0),
        JumpTerm::EnvPair(i, j) => {
            if i == j {
                return Err(Error::Selector(format!("pair term needs distinct slots, got ({i}, {j})")));
            }
            (Part::Environment, i, Some(j), &model.rate_env2, &model.kernel_env2, 1.0)
        }
        JumpTerm::Interaction(i) => (
            Part::Interaction,
            0,
            Some(i),
            &model.rate_int,
            &model.kernel_int,
            model.eps,
        ),
    };
    let env_jumper = matches!(term, JumpTerm::EnvSingle(_) | JumpTerm::EnvPair(..));
    if jumping > s || partner.is_some_and(|p| p == 0 || p > s) || (env_jumper && jumping == 0) {
        return Err(Error::Selector(format!("{term:?} outside sector 1+{s}")));
    }
    let t = Term {
        part,
        jumping,
        partner,
        rate,
        kernel,
        scale,
    };
    let [a, b, c] = assemble(model, s, direction, &[t]);
    Ok(a + b + c)
}

/// Forward generator restricted to `selector` on the `1+s` sector.
pub fn build_forward_generator(
    model: &ModelSpec,
    selector: &SubsetSelector,
    s: usize,
) -> Result<GeneratorMatrix> {
    build_generator(model, selector, s, Direction::Forward)
}

/// Dual generator restricted to `selector` on the `1+s` sector.
pub fn build_dual_generator(
    model: &ModelSpec,
    selector: &SubsetSelector,
    s: usize,
) -> Result<GeneratorMatrix> {
    build_generator(model, selector, s, Direction::Dual)
}

/// Applies a sector operator to a sector function.
pub fn apply(op: &DMatrix<f64>, f: &SectorFunction) -> Result<SectorFunction> {
    if op.ncols() != f.len() {
        return Err(Error::Shape(format!(
            "operator of size {} applied to sector of size {}",
            op.ncols(),
            f.len()
        )));
    }
    let v = op * DVector::from_column_slice(f.as_slice());
    Ok(SectorFunction::from_vec_unchecked(
        f.arity(),
        f.n_states(),
        v.as_slice().to_vec(),
    ))
}

/// `e^{t L} f` for any real `t`.
pub fn evolve(gen: &GeneratorMatrix, t: f64, f: &SectorFunction) -> Result<SectorFunction> {
    if f.arity() != gen.s {
        return Err(Error::Arity {
            expected: gen.s,
            got: f.arity(),
        });
    }
    if !t.is_finite() || f.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evolve input"));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    apply(&expm(&(&gen.matrix * t)), f)
}

fn check_disjoint(parts: &[SubsetSelector]) -> Result<()> {
    for (a, pa) in parts.iter().enumerate() {
        for pb in &parts[a + 1..] {
            if !pa.is_disjoint(pb) {
                return Err(Error::Overlap(format!("{pa:?} and {pb:?}")));
            }
        }
    }
    Ok(())
}

/// `prod_i e^{t L(X_i)} f` over disjoint slot sets.
pub fn compose_semigroup_on_partition(
    model: &ModelSpec,
    parts: &[SubsetSelector],
    t: f64,
    f: &SectorFunction,
    direction: Direction,
) -> Result<SectorFunction> {
    check_disjoint(parts)?;
    let mut out = f.clone();
    for p in parts {
        let gen = build_generator(model, p, f.arity(), direction)?;
        out = evolve(&gen, t, &out)?;
    }
    Ok(out)
}

type GenKey = (SubsetSelector, usize, Direction);
type SemiKey = (SubsetSelector, usize, Direction, u64);

/// A model together with memoized generators and semigroups.
///
/// Semigroups are keyed on `(selector, s, direction, t)`; the caches only
/// grow, so long-running callers should call [`Dynamics::clear_semigroups`].
#[derive(Debug)]
pub struct Dynamics {
    model: ModelSpec,
    generators: RwLock<HashMap<GenKey, Arc<GeneratorMatrix>>>,
    semigroups: RwLock<HashMap<SemiKey, Arc<DMatrix<f64>>>>,
}

impl Clone for Dynamics {
    fn clone(&self) -> Self {
        Self::new(self.model.clone())
    }
}

impl Dynamics {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            generators: RwLock::default(),
            semigroups: RwLock::default(),
        }
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn n_states(&self) -> usize {
        self.model.n_states()
    }

    pub fn weights(&self) -> &[f64] {
        self.model.weights()
    }

    pub fn clear_semigroups(&self) {
        self.semigroups.write().expect("cache lock").clear();
    }

    pub fn generator(
        &self,
        selector: &SubsetSelector,
        s: usize,
        direction: Direction,
    ) -> Result<Arc<GeneratorMatrix>> {
        let key = (selector.clone(), s, direction);
        if let Some(g) = self.generators.read().expect("cache lock").get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(build_generator(&self.model, selector, s, direction)?);
        self.generators
            .write()
            .expect("cache lock")
            .insert(key, g.clone());
        Ok(g)
    }

    /// `e^{t L(selector)}` on the `1+s` sector.
    pub fn semigroup(
        &self,
        selector: &SubsetSelector,
        s: usize,
        direction: Direction,
        t: f64,
    ) -> Result<Arc<DMatrix<f64>>> {
        if !t.is_finite() {
            return Err(Error::NonFinite("time"));
        }
        let key = (selector.clone(), s, direction, t.to_bits());
        if let Some(e) = self.semigroups.read().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let gen = self.generator(selector, s, direction)?;
        let e = Arc::new(expm(&(&gen.matrix * t)));
        self.semigroups
            .write()
            .expect("cache lock")
            .insert(key, e.clone());
        Ok(e)
    }

    /// `prod_i e^{t L(X_i)}` as one operator on the `1+s` sector.
    pub fn partition_semigroup(
        &self,
        parts: &[SubsetSelector],
        s: usize,
        direction: Direction,
        t: f64,
    ) -> Result<DMatrix<f64>> {
        check_disjoint(parts)?;
        let dim = sector_len(self.n_states(), s);
        let mut out = DMatrix::<f64>::identity(dim, dim);
        for p in parts {
            out = &*self.semigroup(p, s, direction, t)? * out;
        }
        Ok(out)
    }

    pub fn evolve(
        &self,
        selector: &SubsetSelector,
        direction: Direction,
        t: f64,
        f: &SectorFunction,
    ) -> Result<SectorFunction> {
        apply(&*self.semigroup(selector, f.arity(), direction, t)?, f)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{Kernel, MicroGrid, RateTable, StateSpace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random rates in `[0.2, 1.2]` and random normalized kernels.
    pub(crate) fn random_model(n_points: usize, eps: f64, n_max: usize, seed: u64) -> ModelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..n_points).map(|_| rng.random_range(0.5..1.5)).collect();
        let grid = MicroGrid::new((0..n_points).map(|i| i as f64).collect(), weights).unwrap();
        let space = StateSpace::new(1, grid).unwrap();
        let n = space.n_states();
        let w = space.weights().to_vec();
        let rate = |arity: u32, rng: &mut ChaCha8Rng| {
            RateTable::new(
                arity as usize,
                n,
                (0..n.pow(arity)).map(|_| rng.random_range(0.2..1.2)).collect(),
            )
            .unwrap()
        };
        let kernel = |arity: u32, rng: &mut ChaCha8Rng| {
            let mut data = Vec::new();
            for _ in 0..n.pow(arity) {
                let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
                let mass: f64 = row.iter().zip(&w).map(|(a, w)| a * w).sum();
                data.extend(row.iter().map(|a| a / mass));
            }
            Kernel::new(arity as usize, n, data).unwrap()
        };
        let model = ModelSpec {
            eps,
            rate_tracer: rate(1, &mut rng),
            rate_env1: rate(1, &mut rng),
            rate_env2: rate(2, &mut rng),
            rate_int: rate(2, &mut rng),
            kernel_tracer: kernel(1, &mut rng),
            kernel_env1: kernel(1, &mut rng),
            kernel_env2: kernel(2, &mut rng),
            kernel_int: kernel(2, &mut rng),
            n_max,
            space,
        };
        model.validate().unwrap();
        model
    }

    fn random_sector(s: usize, n: usize, rng: &mut ChaCha8Rng) -> SectorFunction {
        let data = (0..sector_len(n, s)).map(|_| rng.random_range(-1.0..1.0)).collect();
        SectorFunction::from_raw(s, n, data).unwrap()
    }

    #[test]
    fn tiny_tracer_generator() {
        let m = ModelSpec::tiny(0.0, 0);
        let sel = SubsetSelector::tracer_only();
        for g in [
            build_forward_generator(&m, &sel, 0).unwrap(),
            build_dual_generator(&m, &sel, 0).unwrap(),
        ] {
            assert_eq!(g.matrix.as_slice(), &[-0.5, 0.5, 0.5, -0.5]);
        }
    }

    #[test]
    fn zero_coupling_is_kronecker_sum() {
        let m = random_model(3, 0.0, 1, 3);
        let full = build_forward_generator(&m, &SubsetSelector::full(1), 1).unwrap();
        let tr = build_forward_generator(&m, &SubsetSelector::tracer_only(), 0).unwrap();
        let e1 = build_forward_generator(&m, &SubsetSelector::env_slot(1).unwrap(), 1).unwrap();
        let t1 = build_forward_generator(&m, &SubsetSelector::tracer_only(), 1).unwrap();
        assert_eq!(full.matrix, &e1.matrix + &t1.matrix);
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(t1.matrix, tr.matrix.kronecker(&id));
        assert!(full.parts.interaction.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_rates_give_zero_matrix() {
        let mut m = ModelSpec::tiny(0.3, 2);
        for r in [&mut m.rate_tracer, &mut m.rate_env1, &mut m.rate_env2, &mut m.rate_int] {
            *r = RateTable::constant(r.arity(), 2, 0.0);
        }
        let g = build_dual_generator(&m, &SubsetSelector::full(2), 2).unwrap();
        assert!(g.matrix.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn selector_out_of_range() {
        let m = ModelSpec::tiny(0.0, 1);
        let sel = SubsetSelector::new(true, [2]).unwrap();
        assert!(matches!(build_forward_generator(&m, &sel, 1), Err(Error::Selector(_))));
        assert!(SubsetSelector::new(false, []).is_err());
        assert!(SubsetSelector::new(false, [1, 1]).is_err());
    }

    #[test]
    fn adjointness_random_model() {
        let m = random_model(3, 0.4, 2, 11);
        let w = m.weights().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sel = SubsetSelector::full(2);
        let fw = build_forward_generator(&m, &sel, 2).unwrap();
        let du = build_dual_generator(&m, &sel, 2).unwrap();
        for _ in 0..100 {
            let b = random_sector(2, 3, &mut rng);
            let f = random_sector(2, 3, &mut rng);
            let lhs = apply(&fw.matrix, &b).unwrap().inner(&f, &w).unwrap();
            let rhs = b.inner(&apply(&du.matrix, &f).unwrap(), &w).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conservation_laws() {
        let m = random_model(3, 0.7, 2, 2);
        let w = m.weights().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in 0..=2 {
            let sel = SubsetSelector::full(s);
            let fw = build_forward_generator(&m, &sel, s).unwrap();
            let du = build_dual_generator(&m, &sel, s).unwrap();
            let ones = SectorFunction::from_fn(s, 3, |_| 1.0);
            assert!(apply(&fw.matrix, &ones).unwrap().max_abs() <= 1e-12);
            for _ in 0..100 {
                let f = random_sector(s, 3, &mut rng);
                let mass = apply(&du.matrix, &f).unwrap().integrate_all(&w);
                assert!(mass.abs() <= 1e-12, "{mass}");
            }
        }
    }

    #[test]
    fn tiny_dual_relaxation() {
        let m = ModelSpec::tiny(0.0, 0);
        let g = build_dual_generator(&m, &SubsetSelector::tracer_only(), 0).unwrap();
        let f = SectorFunction::from_raw(0, 2, vec![1.0, 0.0]).unwrap();
        let out = evolve(&g, 1.0, &f).unwrap();
        let e = (-1.0f64).exp();
        assert!((out.as_slice()[0] - (0.5 + 0.5 * e)).abs() < 1e-14);
        assert!((out.as_slice()[1] - (0.5 - 0.5 * e)).abs() < 1e-14);
        assert!((out.as_slice()[0] - 0.68394).abs() < 1e-5);
        assert_eq!(evolve(&g, 0.0, &f).unwrap(), f);
        let back = evolve(&g, -0.7, &evolve(&g, 0.7, &f).unwrap()).unwrap();
        assert!(back.max_abs_diff(&f).unwrap() < 1e-10);
    }

    #[test]
    fn evolve_rejects_bad_input() {
        let m = ModelSpec::tiny(0.0, 1);
        let g = build_dual_generator(&m, &SubsetSelector::tracer_only(), 0).unwrap();
        let f = SectorFunction::zeros(1, 2);
        assert!(matches!(evolve(&g, 1.0, &f), Err(Error::Arity { .. })));
        let f0 = SectorFunction::zeros(0, 2);
        assert!(evolve(&g, f64::NAN, &f0).is_err());
    }

    #[test]
    fn partition_composition() {
        let m = random_model(2, 0.9, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_sector(1, 2, &mut rng);
        let full = SubsetSelector::full(1);
        let g = build_forward_generator(&m, &full, 1).unwrap();
        let a = compose_semigroup_on_partition(&m, &[full.clone()], 0.6, &f, Direction::Forward).unwrap();
        assert!(a.max_abs_diff(&evolve(&g, 0.6, &f).unwrap()).unwrap() < 1e-15);

        let split = [SubsetSelector::tracer_only(), SubsetSelector::env_slot(1).unwrap()];
        let b = compose_semigroup_on_partition(&m, &split, 0.6, &f, Direction::Forward).unwrap();
        let m0 = m.with_eps(0.0);
        let c = evolve(&build_forward_generator(&m0, &full, 1).unwrap(), 0.6, &f).unwrap();
        assert!(b.max_abs_diff(&c).unwrap() < 1e-13);

        let f4 = random_sector(4, 2, &mut rng);
        let p = SubsetSelector::new(false, [1, 3]).unwrap();
        let q = SubsetSelector::new(false, [2, 4]).unwrap();
        let x = compose_semigroup_on_partition(&m, &[p.clone(), q.clone()], 0.8, &f4, Direction::Dual).unwrap();
        let y = compose_semigroup_on_partition(&m, &[q, p.clone()], 0.8, &f4, Direction::Dual).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() <= 1e-13);
        assert!(matches!(
            compose_semigroup_on_partition(&m, &[p.clone(), p], 0.8, &f4, Direction::Dual),
            Err(Error::Overlap(_))
        ));
    }

    #[test]
    fn cache_matches_direct() {
        let m = random_model(2, 0.5, 2, 8);
        let dynamics = Dynamics::new(m.clone());
        let sel = SubsetSelector::full(2);
        let a = dynamics.semigroup(&sel, 2, Direction::Dual, 0.3).unwrap();
        let b = expm(&(&build_dual_generator(&m, &sel, 2).unwrap().matrix * 0.3));
        assert_eq!(*a, b);
        let again = dynamics.semigroup(&sel, 2, Direction::Dual, 0.3).unwrap();
        assert!(Arc::ptr_eq(&a, &again));
    }

    #[test]
    fn csv_dump_lists_nonzeros() {
        let m = ModelSpec::tiny(0.0, 0);
        let g = build_forward_generator(&m, &SubsetSelector::tracer_only(), 0).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("row,col,value"));
    }
}
