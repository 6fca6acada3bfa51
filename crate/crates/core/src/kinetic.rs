//! State picture: the tracer distribution series with initial correlations,
//! scattering cumulants, the generating operators of the state functionals,
//! the duality representation, and the generalized kinetic equation.
//!
//! All functions here read the initial data in correlation form,
//! `F^0_{1+n} = g_{1+n} F^0_{0+n} F^0_{1+0}`; see [`effective_profile`] for how
//! that form is obtained from a truncated ensemble. Correlations above the
//! truncation `n_max` are zero.

use crate::combinatorics::{cumulant, dissections, DissectionRule};
use crate::error::{Error, Result};
use crate::hierarchy::{dual_bbgky_solution, mean_value_reduced, ObservableSeq};
use crate::model::{CorrelationProfile, InitialState};
use crate::operators::{apply, build_term, Direction, Dynamics, JumpTerm, SubsetSelector};
use crate::sector::{sector_len, SectorFunction, SequenceKind, SequenceState};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

/// Cap on `s + n` for the generating operators.
pub const MAX_TOTAL: usize = 4;

/// Mass drift beyond which the tracer series is renormalized (and logged).
pub const RENORMALIZE_TOL: f64 = 1e-12;

/// Mass drift beyond which a kinetic integration step is rejected.
pub const STEP_DRIFT_LIMIT: f64 = 1e-6;

/// Environment factors attached to the tracer distribution before the
/// generating operators act.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFactor {
    /// `F_{1+0}(t) prod_i (e^{t L*[1]} F^0_{0+1})(u_i)` (variant A).
    Evolved,
    /// `F_{1+0}(t)` alone (variant B).
    None,
}

/// Which entities may seed a correction cumulant in the generating operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedRange {
    /// Environment entities `1..m` only.
    Environment,
    /// The tracer and environment entities `1..m`.
    TracerAndEnvironment,
    /// The tracer only.
    Tracer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KineticOptions {
    pub env_factor: EnvFactor,
    pub seeds: SeedRange,
    pub dissection: DissectionRule,
}

impl Default for KineticOptions {
    fn default() -> Self {
        Self {
            env_factor: EnvFactor::Evolved,
            seeds: SeedRange::Tracer,
            dissection: DissectionRule::Consecutive,
        }
    }
}

/// Tracer distribution `F_{1+0}(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracerDistribution {
    pub t: f64,
    pub values: Vec<f64>,
    /// Weighted mass minus one, before any renormalization.
    pub mass_drift: f64,
}

/// Both sides of the duality representation for one observable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub t: f64,
    pub order: usize,
    pub eps: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
}

/// Correlation-form profile with the same reduced sequence as the truncated
/// ensemble: `F^0_{1+0}` is the reduced tracer distribution, `F^0_{0+n}` the
/// `n`-fold product of the environment one-entity marginal `psi`, and
/// `g_{1+n} = F_{1+n} / (F^0_{1+0} psi^{(x) n})` (1 where the denominator
/// vanishes).
pub fn effective_profile(init: &InitialState, weights: &[f64]) -> Result<CorrelationProfile> {
    let f = &init.reduced;
    let n = f.n_states();
    let tracer0 = f.sector(0).as_slice().to_vec();
    let psi = if f.n_max() >= 1 {
        f.sector(1).integrate_tracer(weights)
    } else {
        vec![0.0; n]
    };
    let mut profile = CorrelationProfile::chaos(tracer0.clone(), &psi, f.n_max());
    let mut sectors = Vec::with_capacity(f.n_max() + 1);
    for (s, fs) in f.sectors().iter().enumerate() {
        let mut slots = vec![0usize; s + 1];
        let mut data = vec![0.0; fs.len()];
        for (idx, g) in data.iter_mut().enumerate() {
            fs.decode_into(idx, &mut slots);
            let denom: f64 = tracer0[slots[0]] * slots[1..].iter().map(|&e| psi[e]).product::<f64>();
            *g = if denom == 0.0 { 1.0 } else { fs.as_slice()[idx] / denom };
        }
        sectors.push(SectorFunction::from_raw(s, n, data)?);
    }
    profile.g = SequenceState::new(SequenceKind::Correlation, sectors)?;
    Ok(profile)
}

/// `F^0_{1+n} = g_{1+n} F^0_{0+n} F^0_{1+0}` from a correlation-form profile.
pub fn initial_sector(profile: &CorrelationProfile, n: usize) -> SectorFunction {
    let g = profile.g.sector(n);
    let env = &profile.env_reduced[n];
    let block = env.len();
    let data = g
        .as_slice()
        .iter()
        .enumerate()
        .map(|(idx, gv)| gv * env[idx % block] * profile.tracer0[idx / block])
        .collect();
    SectorFunction::from_vec_unchecked(n, g.n_states(), data)
}

pub fn initial_sequence(profile: &CorrelationProfile) -> Result<SequenceState> {
    SequenceState::new(
        SequenceKind::Distribution,
        (0..=profile.n_max()).map(|n| initial_sector(profile, n)).collect(),
    )
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Compositions `(n_1, ..., n_k)` with parts `>= 1` and sum `<= n`.
fn bounded_compositions(n: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(cur.clone());
        for p in 1..=left {
            cur.push(p);
            rec(left - p, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, &mut Vec::new(), &mut out);
    out
}

/// Injective maps from `0..k` into `pool`, in lexicographic order.
fn injections(pool: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(pool: &[usize], k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for &p in pool {
            if !cur.contains(&p) {
                cur.push(p);
                rec(pool, k, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(pool, k, &mut Vec::new(), &mut out);
    out
}

type OpKey = (usize, usize, u64);

/// Kinetic machinery for one model, one correlation-form profile and one set
/// of interpretation options, with per-time operator caches.
#[derive(Debug)]
pub struct Kinetic {
    dynamics: Dynamics,
    profile: CorrelationProfile,
    options: KineticOptions,
    functionals: RwLock<HashMap<OpKey, Arc<DMatrix<f64>>>>,
}

impl Kinetic {
    pub fn new(dynamics: Dynamics, profile: CorrelationProfile, options: KineticOptions) -> Result<Self> {
        profile.validate(dynamics.model())?;
        Ok(Self {
            dynamics,
            profile,
            options,
            functionals: RwLock::default(),
        })
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn profile(&self) -> &CorrelationProfile {
        &self.profile
    }

    pub fn options(&self) -> KineticOptions {
        self.options
    }

    fn n_max(&self) -> usize {
        self.profile.n_max()
    }

    fn check_total(&self, total: usize) -> Result<()> {
        if total > MAX_TOTAL {
            return Err(Error::CapExceeded {
                what: "s + n",
                value: total,
                cap: MAX_TOTAL,
            });
        }
        Ok(())
    }

    fn check_order(&self, k: usize) -> Result<()> {
        if k > self.n_max() {
            return Err(Error::CapExceeded {
                what: "series order K",
                value: k,
                cap: self.n_max(),
            });
        }
        Ok(())
    }

    /// Diagonal of multiplication by `g_{1+m}(u, u_{env[0]}, ..., u_{env[m-1]})`
    /// on the `1+total` sector; zero above the truncation.
    fn correlation_diag(&self, total: usize, env: &[usize]) -> Result<Vec<f64>> {
        let n = self.dynamics.n_states();
        let m = env.len();
        if m > self.n_max() {
            return Ok(vec![0.0; sector_len(n, total)]);
        }
        Ok(self.profile.g.sector(m).embed(total, env)?.into_vec())
    }

    /// `A*(t, {cluster}, singles) g prod_k A*_1(t, k)^{-1}` on the `1+total`
    /// sector, the product running over every slot of `cluster` and `singles`.
    /// The correlation factor is applied only when the tracer is in `cluster`;
    /// environment entities are uncorrelated among themselves.
    pub fn scattering_op(
        &self,
        t: f64,
        total: usize,
        cluster: &[usize],
        singles: &[usize],
    ) -> Result<DMatrix<f64>> {
        self.check_total(total)?;
        let d = &self.dynamics;
        let mut labels = vec![SubsetSelector::from_slots(cluster)?];
        for &i in singles {
            labels.push(SubsetSelector::from_slots(&[i])?);
        }
        let mut op = cumulant(d, Direction::Dual, t, total, &labels)?;
        if cluster.contains(&0) {
            let env: Vec<usize> = cluster
                .iter()
                .chain(singles)
                .copied()
                .filter(|&k| k != 0)
                .collect();
            let diag = self.correlation_diag(total, &env)?;
            for (c, g) in diag.iter().enumerate() {
                op.column_mut(c).scale_mut(*g);
            }
        }
        let inverse_slots: Vec<SubsetSelector> = cluster
            .iter()
            .chain(singles)
            .map(|&k| SubsetSelector::from_slots(&[k]))
            .collect::<Result<_>>()?;
        let inverse = d.partition_semigroup(&inverse_slots, total, Direction::Dual, -t)?;
        Ok(op * inverse)
    }

    /// Scattering cumulant `A^_{1+n}(t, {tracer, Y}, X \ Y)` on the `1+s+n` sector.
    pub fn scattering_cumulant(&self, t: f64, s: usize, n: usize) -> Result<DMatrix<f64>> {
        let cluster: Vec<usize> = (0..=s).collect();
        let singles: Vec<usize> = ((s + 1)..=(s + n)).collect();
        self.scattering_op(t, s + n, &cluster, &singles)
    }

    fn seeds(&self, m: usize) -> Vec<usize> {
        match self.options.seeds {
            SeedRange::Environment => (1..=m).collect(),
            SeedRange::TracerAndEnvironment => (0..=m).collect(),
            SeedRange::Tracer => vec![0],
        }
    }

    /// Low-order generating operators written out: `V_1 = A^_1` and
    /// `V_2 = A^_2(t, {tracer, Y}, s+1) - A^_1(t, {tracer, Y}) sum_i A^_2(t, i, s+1)`.
    pub fn generating_v_explicit(&self, t: f64, s: usize, n: usize) -> Result<DMatrix<f64>> {
        let big = self.scattering_cumulant(t, s, n)?;
        match n {
            0 => Ok(big),
            1 => {
                let total = s + 1;
                let a1 = self.scattering_op(t, total, &(0..=s).collect::<Vec<_>>(), &[])?;
                let dim = sector_len(self.dynamics.n_states(), total);
                let mut sum = DMatrix::<f64>::zeros(dim, dim);
                for i in self.seeds(s) {
                    sum += self.scattering_op(t, total, &[i], &[total])?;
                }
                Ok(big - a1 * sum)
            }
            _ => Err(Error::CapExceeded {
                what: "explicit generating operator order",
                value: n,
                cap: 1,
            }),
        }
    }

    /// Generating operator `V_{1+n}(t, {tracer, Y}, X \ Y)` on the `1+s+n`
    /// sector from the alternating sum over compositions and dissections.
    pub fn generating_v(&self, t: f64, s: usize, n: usize) -> Result<DMatrix<f64>> {
        let total = s + n;
        self.check_total(total)?;
        let dim = sector_len(self.dynamics.n_states(), total);
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        let mut corrections: HashMap<(usize, usize), DMatrix<f64>> = HashMap::new();
        for comp in bounded_compositions(n) {
            let used: usize = comp.iter().sum();
            let rest = n - used;
            let cluster: Vec<usize> = (0..=s).collect();
            let singles: Vec<usize> = ((s + 1)..=(s + rest)).collect();
            let mut term = self.scattering_op(t, total, &cluster, &singles)? / factorial(rest);
            let mut upper = total;
            for &nj in &comp {
                let lower = upper - nj;
                if let Entry::Vacant(slot) = corrections.entry((lower, upper)) {
                    slot.insert(self.correction(t, total, lower, upper)?);
                }
                term *= &corrections[&(lower, upper)];
                upper = lower;
            }
            if comp.len() % 2 == 0 {
                acc += term;
            } else {
                acc -= term;
            }
        }
        Ok(acc * factorial(n))
    }

    /// `sum_{D: Z = (lower+1..=upper)} 1/|D|! sum_{distinct seeds <= lower}`
    /// `prod_l 1/|X_l|! A^_{1+|X_l|}(t, seed_l, X_l)`, with at most as many
    /// parts as there are seeds.
    fn correction(&self, t: f64, total: usize, lower: usize, upper: usize) -> Result<DMatrix<f64>> {
        let dim = sector_len(self.dynamics.n_states(), total);
        let z: Vec<usize> = ((lower + 1)..=upper).collect();
        let pool = self.seeds(lower);
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        for d in dissections(z.len(), pool.len(), self.options.dissection)? {
            let parts: Vec<Vec<usize>> = d
                .parts
                .iter()
                .map(|p| p.iter().map(|&i| z[i]).collect())
                .collect();
            let scale = 1.0 / factorial(parts.len());
            for seeds in injections(&pool, parts.len()) {
                let mut prod = DMatrix::<f64>::identity(dim, dim);
                for (part, &seed) in parts.iter().zip(&seeds) {
                    let op = self.scattering_op(t, total, &[seed], part)?;
                    prod = op * prod / factorial(part.len());
                }
                acc += prod * scale;
            }
        }
        Ok(acc)
    }

    /// `e^{t L*[1]} F^0_{0+1}` for one environment entity.
    pub fn env_one_evolved(&self, t: f64) -> Result<Vec<f64>> {
        let n = self.dynamics.n_states();
        let psi0 = if self.n_max() >= 1 {
            self.profile.env_reduced[1].clone()
        } else {
            vec![0.0; n]
        };
        let lifted = SectorFunction::from_fn(1, n, |x| if x[0] == 0 { psi0[x[1]] } else { 0.0 });
        let out = self
            .dynamics
            .evolve(&SubsetSelector::env_slot(1)?, Direction::Dual, t, &lifted)?;
        Ok(out.as_slice()[..n].to_vec())
    }

    /// The state functional as a linear map `F_{1+0} -> F_{1+s}(t | F_{1+0})`,
    /// a `n^{1+s} x n` matrix.
    pub fn state_functional_operator(&self, t: f64, s: usize, order: usize) -> Result<Arc<DMatrix<f64>>> {
        if s == 0 {
            return Err(Error::Invalid("state functionals start at s = 1".into()));
        }
        self.check_order(order)?;
        self.check_total(s + order)?;
        let key = (s, order, t.to_bits());
        if let Some(op) = self.functionals.read().expect("cache lock").get(&key) {
            return Ok(op.clone());
        }
        let n = self.dynamics.n_states();
        let w = self.dynamics.weights();
        let phi = match self.options.env_factor {
            EnvFactor::Evolved => self.env_one_evolved(t)?,
            EnvFactor::None => vec![1.0; n],
        };
        let mut out = DMatrix::<f64>::zeros(sector_len(n, s), n);
        for k in 0..=order {
            let v = self.generating_v(t, s, k)?;
            for u in 0..n {
                let input = SectorFunction::from_fn(s + k, n, |x| {
                    if x[0] == u {
                        x[1..].iter().map(|&e| phi[e]).product()
                    } else {
                        0.0
                    }
                });
                let image = apply(&v, &input)?.integrate_last(k, w)?;
                let mut col = out.column_mut(u);
                col.axpy(1.0 / factorial(k), &DVector::from_column_slice(image.as_slice()), 1.0);
            }
        }
        let out = Arc::new(out);
        self.functionals
            .write()
            .expect("cache lock")
            .insert(key, out.clone());
        Ok(out)
    }

    /// `F_{1+s}(t | F_{1+0})`.
    pub fn state_functional(
        &self,
        t: f64,
        f1: &TracerDistribution,
        s: usize,
        order: usize,
    ) -> Result<SectorFunction> {
        let op = self.state_functional_operator(t, s, order)?;
        let v = &*op * DVector::from_column_slice(&f1.values);
        Ok(SectorFunction::from_vec_unchecked(
            s,
            self.dynamics.n_states(),
            v.as_slice().to_vec(),
        ))
    }

    /// `F_{1+0}(t) = sum_{n<=K} 1/n! int du_1..du_n A*_{1+n}(t, tracer, 1..n) F^0_{1+n}`.
    pub fn reduced_distribution(&self, t: f64, order: usize) -> Result<TracerDistribution> {
        self.check_order(order)?;
        self.check_total(order)?;
        let n = self.dynamics.n_states();
        let w = self.dynamics.weights();
        let mut values = vec![0.0; n];
        for k in 0..=order {
            let mut labels = vec![SubsetSelector::tracer_only()];
            for i in 1..=k {
                labels.push(SubsetSelector::env_slot(i)?);
            }
            let op = cumulant(&self.dynamics, Direction::Dual, t, k, &labels)?;
            let term = apply(&op, &initial_sector(&self.profile, k))?.tracer_marginal(w);
            for (v, x) in values.iter_mut().zip(term) {
                *v += x / factorial(k);
            }
        }
        let mass: f64 = values.iter().zip(w).map(|(f, w)| f * w).sum();
        let drift = mass - 1.0;
        if drift.abs() > RENORMALIZE_TOL {
            log::warn!("tracer series at t = {t}, K = {order}: mass drift {drift:e}, renormalized");
            values.iter_mut().for_each(|v| *v /= mass);
        }
        Ok(TracerDistribution {
            t,
            values,
            mass_drift: drift,
        })
    }

    /// Both sides of `(B(t), F(0)) = (B(0), F(t | F_1(t)))` for a reduced
    /// observable sequence `b0`.
    pub fn duality_check(&self, b0: &ObservableSeq, t: f64, order: usize) -> Result<DualityReport> {
        let w = self.dynamics.weights();
        let top = b0.n_max().min(self.n_max());
        let bt = ObservableSeq::general(
            (0..=top)
                .map(|s| dual_bbgky_solution(&self.dynamics, b0, t, s))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let lhs = mean_value_reduced(&bt, &initial_sequence(&self.profile)?, w)?;
        let f1 = self.reduced_distribution(t, order)?;
        let mut rhs = SectorFunction::from_vec_unchecked(0, self.dynamics.n_states(), f1.values.clone())
            .inner(b0.sector(0), w)?;
        for s in 1..=b0.n_max() {
            if b0.sector(s).max_abs() == 0.0 {
                continue;
            }
            let fs = self.state_functional(t, &f1, s, order)?;
            rhs += b0.sector(s).inner(&fs, w)? / factorial(s);
        }
        let abs_residual = (lhs - rhs).abs();
        Ok(DualityReport {
            t,
            order,
            eps: self.dynamics.model().eps,
            lhs,
            rhs,
            abs_residual,
            rel_residual: abs_residual / lhs.abs().max(f64::MIN_POSITIVE),
        })
    }

    /// The kinetic right-hand side as a matrix acting on `F_{1+0}`:
    /// `L*[tracer] + eps int du_1 L*_int(tracer, 1) F_{1+1}(t | .)`.
    pub fn fp_matrix(&self, t: f64, order: usize) -> Result<DMatrix<f64>> {
        let d = &self.dynamics;
        let n = d.n_states();
        let mut m = d
            .generator(&SubsetSelector::tracer_only(), 0, Direction::Dual)?
            .matrix
            .clone();
        if d.model().eps != 0.0 && order >= 1 && self.n_max() >= 1 {
            let w = d.weights();
            let int = build_term(d.model(), JumpTerm::Interaction(1), 1, Direction::Dual)?;
            let functional = self.state_functional_operator(t, 1, order)?;
            let collision = int * &*functional;
            // Integrate out the environment slot: rows are (u, u_1).
            for u in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for (e, we) in w.iter().enumerate() {
                        acc += we * collision[(u * n + e, c)];
                    }
                    m[(u, c)] += acc;
                }
            }
        }
        Ok(m)
    }

    /// Right-hand side of the generalized kinetic equation at `F_{1+0}`.
    pub fn fp_rhs(&self, f1: &TracerDistribution, t: f64, order: usize) -> Result<Vec<f64>> {
        let m = self.fp_matrix(t, order)?;
        Ok((m * DVector::from_column_slice(&f1.values)).as_slice().to_vec())
    }

    /// Classical RK4 for the kinetic equation from `F^0_{1+0}`; returns every
    /// step including `t = 0`.
    pub fn integrate_fp(
        &self,
        f0: &[f64],
        t_max: f64,
        dt: f64,
        order: usize,
    ) -> Result<Vec<TracerDistribution>> {
        if !(dt > 0.0 && dt.is_finite()) || !(t_max >= 0.0 && t_max.is_finite()) {
            return Err(Error::Invalid(format!("need dt > 0 and t_max >= 0, got {dt}, {t_max}")));
        }
        let w = self.dynamics.weights();
        let mass = |v: &DVector<f64>| v.iter().zip(w).map(|(f, w)| f * w).sum::<f64>();
        let steps = (t_max / dt).round() as usize;
        let mut f = DVector::from_column_slice(f0);
        let m0 = mass(&f);
        let mut out = vec![TracerDistribution {
            t: 0.0,
            values: f0.to_vec(),
            mass_drift: m0 - 1.0,
        }];
        for step in 0..steps {
            let t = step as f64 * dt;
            let h = dt;
            let a = self.fp_matrix(t, order)?;
            let b = self.fp_matrix(t + 0.5 * h, order)?;
            let c = self.fp_matrix(t + h, order)?;
            let k1 = &a * &f;
            let k2 = &b * (&f + &k1 * (0.5 * h));
            let k3 = &b * (&f + &k2 * (0.5 * h));
            let k4 = &c * (&f + &k3 * h);
            f += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let t_next = (step + 1) as f64 * dt;
            let drift = mass(&f) - 1.0;
            if (drift - (m0 - 1.0)).abs() > STEP_DRIFT_LIMIT || !drift.is_finite() {
                return Err(Error::StepRejected {
                    t: t_next,
                    drift,
                    limit: STEP_DRIFT_LIMIT,
                });
            }
            out.push(TracerDistribution {
                t: t_next,
                values: f.as_slice().to_vec(),
                mass_drift: drift,
            });
            // Operators at past times are not needed again.
            self.forget_before(t);
        }
        Ok(out)
    }

    fn forget_before(&self, t: f64) {
        self.functionals
            .write()
            .expect("cache lock")
            .retain(|k, _| f64::from_bits(k.2) >= t);
        self.dynamics.clear_semigroups();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expm::expm;
    use crate::model::{build_initial_state, Kernel, ModelSpec, RateTable};
    use crate::operators::build_dual_generator;
    use crate::operators::tests::random_model;
    use proptest::prelude::*;

    fn tiny_kinetic(eps: f64, n_max: usize, profile: CorrelationProfile, options: KineticOptions) -> Kinetic {
        let m = ModelSpec::tiny(eps, n_max);
        let init = build_initial_state(&profile, &m, 0.5).unwrap();
        let eff = effective_profile(&init, m.weights()).unwrap();
        Kinetic::new(Dynamics::new(m), eff, options).unwrap()
    }

    fn without_env_pairs(mut m: ModelSpec) -> ModelSpec {
        m.rate_env2 = RateTable::constant(2, m.n_states(), 0.0);
        m
    }

    /// One-entity dual generator written out from the rates:
    /// `L*[x, v] = w(v) r(v) A(x | v)`, `L*[x, x] -= r(x)`.
    fn one_body_dual(rate: &RateTable, kernel: &Kernel, w: &[f64]) -> DMatrix<f64> {
        let n = w.len();
        DMatrix::from_fn(n, n, |x, v| {
            let gain = w[v] * rate.at(&[v]) * kernel.at(x, &[v]);
            if x == v {
                gain - rate.at(&[x])
            } else {
                gain
            }
        })
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn effective_profile_reproduces_reduced_sequence() {
        let m = ModelSpec::tiny(0.0, 3);
        let p = CorrelationProfile::spin(vec![0.8, 0.2], &[0.6, 0.4], 3, 0.4);
        let init = build_initial_state(&p, &m, 0.7).unwrap();
        let eff = effective_profile(&init, m.weights()).unwrap();
        eff.validate(&m).unwrap();
        for s in 0..=3 {
            let d = initial_sector(&eff, s).max_abs_diff(init.reduced.sector(s)).unwrap();
            assert!(d < 1e-14, "sector {s}: {d}");
        }
    }

    #[test]
    fn scattering_cumulant_factorizes_without_interactions() {
        let m = without_env_pairs(random_model(3, 0.0, 2, 5));
        let p = CorrelationProfile::chaos(vec![1.0 / 3.0; 3], &[0.5, 0.2, 0.3], 2);
        let w = m.weights().to_vec();
        let p = CorrelationProfile::chaos(
            p.tracer0.iter().map(|v| v / w.iter().sum::<f64>() * 3.0).collect(),
            &[0.5, 0.2, 0.3],
            2,
        );
        let k = Kinetic::new(Dynamics::new(m), p, KineticOptions::default()).unwrap();
        for s in 0..=2 {
            let a = k.scattering_cumulant(0.8, s, 0).unwrap();
            let dim = a.nrows();
            assert!((a - DMatrix::<f64>::identity(dim, dim)).abs().max() < 1e-12);
        }
        let v = k.generating_v(0.8, 1, 1).unwrap();
        assert!(v.abs().max() < 1e-12);
    }

    #[test]
    fn scattering_cumulant_at_zero_time_is_correlation() {
        let k = Kinetic::new(
            Dynamics::new(ModelSpec::tiny(0.3, 2)),
            CorrelationProfile::spin(vec![0.8, 0.2], &[0.5, 0.5], 2, 0.3),
            KineticOptions::default(),
        )
        .unwrap();
        let a = k.scattering_cumulant(0.0, 2, 0).unwrap();
        let g = k.profile().g.sector(2);
        assert_eq!(a, DMatrix::from_diagonal(&DVector::from_column_slice(g.as_slice())));
        assert!(k.scattering_cumulant(0.0, 1, 1).unwrap().abs().max() == 0.0);
    }

    #[test]
    fn scattering_cumulant_matches_factor_by_factor_product() {
        let m = ModelSpec::tiny(0.1, 2);
        let k = Kinetic::new(
            Dynamics::new(m.clone()),
            CorrelationProfile::spin(vec![0.8, 0.2], &[0.5, 0.5], 2, 0.3),
            KineticOptions::default(),
        )
        .unwrap();
        let t = 0.5;
        let gen = |sel: SubsetSelector| build_dual_generator(&m, &sel, 1).unwrap().matrix;
        let full = gen(SubsetSelector::full(1));
        let tracer = gen(SubsetSelector::tracer_only());
        let env = gen(SubsetSelector::env_slot(1).unwrap());
        let cumulant = expm(&(&full * t)) - expm(&(&tracer * t)) * expm(&(&env * t));
        // g_{1+1}(u, u_1) = 1 + 0.3 s(u) s(u_1) with s = (+1, -1).
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.3, 0.7, 0.7, 1.3]));
        let expected = cumulant * g * expm(&(&tracer * -t)) * expm(&(&env * -t));
        let got = k.scattering_cumulant(t, 0, 1).unwrap();
        assert!((got - expected).abs().max() < 1e-12);
    }

    #[test]
    fn explicit_and_general_generating_operators_agree() {
        for seeds in [SeedRange::Environment, SeedRange::TracerAndEnvironment, SeedRange::Tracer] {
            let k = tiny_kinetic(
                0.1,
                2,
                CorrelationProfile::spin(vec![0.8, 0.2], &[0.5, 0.5], 2, 0.3),
                KineticOptions { seeds, ..Default::default() },
            );
            for s in 0..=2 {
                for n in 0..=1 {
                    let a = k.generating_v_explicit(0.7, s, n).unwrap();
                    let b = k.generating_v(0.7, s, n).unwrap();
                    assert!((a - b).abs().max() < 1e-11, "{seeds:?} s={s} n={n}");
                }
            }
        }
    }

    #[test]
    fn generating_operator_first_order_is_scattering_cumulant() {
        let k = tiny_kinetic(0.2, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
        assert_eq!(k.generating_v(0.4, 2, 0).unwrap(), k.scattering_cumulant(0.4, 2, 0).unwrap());
    }

    #[test]
    fn caps_are_enforced() {
        let k = tiny_kinetic(0.1, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
        assert!(matches!(k.scattering_cumulant(0.1, 3, 2), Err(Error::CapExceeded { .. })));
        assert!(matches!(k.reduced_distribution(0.1, 3), Err(Error::CapExceeded { .. })));
        assert!(matches!(k.generating_v_explicit(0.1, 1, 2), Err(Error::CapExceeded { .. })));
        let f1 = k.reduced_distribution(0.1, 1).unwrap();
        assert!(matches!(k.state_functional(0.1, &f1, 0, 1), Err(Error::Invalid(_))));
        assert!(matches!(k.state_functional(0.1, &f1, 3, 2), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn zeroth_order_series_is_tiny_relaxation() {
        for eps in [0.0, 0.1] {
            let k = tiny_kinetic(eps, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
            for t in [0.0, 0.3, 1.0, 2.0] {
                let f = k.reduced_distribution(t, 0).unwrap();
                let a = 0.5 + 0.3 * (-t as f64).exp();
                assert!(max_diff(&f.values, &[a, 1.0 - a]) < 1e-12);
            }
        }
    }

    #[test]
    fn series_at_zero_time_is_initial_tracer() {
        let k = tiny_kinetic(0.2, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
        for order in 0..=2 {
            let f = k.reduced_distribution(0.0, order).unwrap();
            assert!(max_diff(&f.values, &[0.8, 0.2]) < 1e-14);
        }
    }

    #[test]
    fn uncoupled_series_is_order_independent() {
        let m = random_model(3, 0.0, 2, 9);
        let p = CorrelationProfile::spin(vec![0.2, 0.5, 0.3], &[0.3, 0.3, 0.4], 2, 0.2);
        let tracer0: Vec<f64> = {
            let mass: f64 = p.tracer0.iter().zip(m.weights()).map(|(a, w)| a * w).sum();
            p.tracer0.iter().map(|a| a / mass).collect()
        };
        let p = CorrelationProfile::spin(tracer0, &[0.3, 0.3, 0.4], 2, 0.2);
        let init = build_initial_state(&p, &m, 0.5).unwrap();
        let eff = effective_profile(&init, m.weights()).unwrap();
        let k = Kinetic::new(Dynamics::new(m), eff, KineticOptions::default()).unwrap();
        let f0 = k.reduced_distribution(0.9, 0).unwrap();
        for order in 1..=2 {
            assert!(max_diff(&k.reduced_distribution(0.9, order).unwrap().values, &f0.values) < 1e-12);
        }
    }

    #[test]
    fn series_at_full_order_is_exact_marginal() {
        // Oracle: reduce the exactly evolved full ensemble.
        let m = random_model(2, 0.3, 2, 4);
        let w = m.weights().to_vec();
        let mass: f64 = w.iter().sum();
        let p = CorrelationProfile::spin(vec![1.0 / mass; 2], &[0.6, 0.4], 2, 0.25);
        let init = build_initial_state(&p, &m, 0.8).unwrap();
        let d = Dynamics::new(m);
        let full = crate::hierarchy::evolve_full(
            &d,
            &init.full,
            0.7,
            Direction::Dual,
        )
        .unwrap();
        let exact = crate::hierarchy::reduce_state(&full, 0, &w).unwrap();
        let eff = effective_profile(&init, &w).unwrap();
        let k = Kinetic::new(d, eff, KineticOptions::default()).unwrap();
        let f = k.reduced_distribution(0.7, 2).unwrap();
        assert!(max_diff(&f.values, exact.as_slice()) < 1e-12);
    }

    #[test]
    fn state_functional_factorizes_for_chaos_without_interactions() {
        let m = without_env_pairs(ModelSpec::tiny(0.0, 2));
        let p = CorrelationProfile::chaos(vec![0.8, 0.2], &[0.7, 0.3], 2);
        let k = Kinetic::new(Dynamics::new(m.clone()), p, KineticOptions::default()).unwrap();
        let l = one_body_dual(&m.rate_env1, &m.kernel_env1, m.weights());
        for t in [0.0, 0.4, 1.5] {
            let phi = expm(&(&l * t)) * DVector::from_vec(vec![0.7, 0.3]);
            let f1 = k.reduced_distribution(t, 1).unwrap();
            for order in 0..=1 {
                let f11 = k.state_functional(t, &f1, 1, order).unwrap();
                let expected = SectorFunction::product(&f1.values, &[phi.as_slice()]);
                assert!(f11.max_abs_diff(&expected).unwrap() < 1e-12, "t={t} K={order}");
            }
        }
    }

    #[test]
    fn duality_is_exact_for_factorized_dynamics() {
        let m = without_env_pairs(ModelSpec::tiny(0.0, 2));
        let p = CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2);
        let init = build_initial_state(&p, &m, 0.5).unwrap();
        let eff = effective_profile(&init, m.weights()).unwrap();
        let k = Kinetic::new(Dynamics::new(m), eff, KineticOptions::default()).unwrap();
        let b0 = ObservableSeq::additive_reduced(&[1.0, -1.0], &[0.3, 1.0], 2);
        for t in [0.5, 1.0] {
            let r = k.duality_check(&b0, t, 0).unwrap();
            assert!(r.abs_residual <= 1e-10, "{r:?}");
        }
    }

    #[test]
    fn duality_selects_attached_environment_factors() {
        let b0 = ObservableSeq::additive_reduced(&[1.0, -1.0], &[0.3, 1.0], 2);
        let residual = |env_factor| {
            let k = tiny_kinetic(
                0.05,
                2,
                CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2),
                KineticOptions { env_factor, ..Default::default() },
            );
            k.duality_check(&b0, 1.0, 1).unwrap().abs_residual
        };
        let attached = residual(EnvFactor::Evolved);
        let bare = residual(EnvFactor::None);
        assert!(attached < 1e-4 && bare > 1e-1, "{attached} vs {bare}");
    }

    #[test]
    fn duality_residual_vanishes_at_full_order_for_chaos() {
        let b0 = ObservableSeq::additive_reduced(&[1.0, -1.0], &[0.3, 1.0], 2);
        for eps in [0.2, 0.05] {
            let k = tiny_kinetic(eps, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
            let r = k.duality_check(&b0, 1.0, 2).unwrap();
            assert!(r.abs_residual < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn fp_rhs_reduces_to_tracer_generator_without_coupling() {
        let k = tiny_kinetic(0.0, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
        let f = TracerDistribution { t: 0.3, values: vec![0.7, 0.3], mass_drift: 0.0 };
        let r = k.fp_rhs(&f, 0.3, 1).unwrap();
        assert!(max_diff(&r, &[-0.2, 0.2]) < 1e-15);
        let k = tiny_kinetic(0.2, 2, CorrelationProfile::chaos(vec![0.5, 0.5], &[0.5, 0.5], 2), KineticOptions::default());
        let f = k.reduced_distribution(0.6, 1).unwrap();
        assert!(k.fp_rhs(&f, 0.6, 1).unwrap().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn kinetic_identity_at_full_order() {
        let mut m = ModelSpec::tiny(0.1, 2);
        m.kernel_int = Kernel::copy(2, m.weights());
        let p = CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2);
        let init = build_initial_state(&p, &m, 0.5).unwrap();
        let eff = effective_profile(&init, m.weights()).unwrap();
        let k = Kinetic::new(Dynamics::new(m), eff, KineticOptions::default()).unwrap();
        let (t, h) = (0.5, 1e-4);
        let plus = k.reduced_distribution(t + h, 2).unwrap().values;
        let minus = k.reduced_distribution(t - h, 2).unwrap().values;
        let f = k.reduced_distribution(t, 2).unwrap();
        let rhs = k.fp_rhs(&f, t, 2).unwrap();
        let fd: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(max_diff(&fd, &rhs) < 1e-5);
    }

    #[test]
    fn uncoupled_integration_matches_relaxation() {
        let k = tiny_kinetic(0.0, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
        let traj = k.integrate_fp(&[0.8, 0.2], 2.0, 1e-3, 1).unwrap();
        assert_eq!(traj.len(), 2001);
        for f in &traj {
            let a = 0.5 + 0.3 * (-f.t).exp();
            assert!(max_diff(&f.values, &[a, 1.0 - a]) < 1e-9);
            assert!(f.mass_drift.abs() < 1e-9);
        }
    }

    #[test]
    fn integration_rejects_bad_steps() {
        let k = tiny_kinetic(0.1, 2, CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 2), KineticOptions::default());
        assert!(matches!(k.integrate_fp(&[0.8, 0.2], 1.0, 0.0, 1), Err(Error::Invalid(_))));
        assert!(matches!(
            k.integrate_fp(&[0.8, 0.2], 1.0, 1e-2, 3),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn small_activity_series_terms_decay() {
        let m = ModelSpec::tiny(0.5, 3);
        let p = CorrelationProfile::chaos(vec![0.8, 0.2], &[0.5, 0.5], 3);
        let init = build_initial_state(&p, &m, 0.05).unwrap();
        let eff = effective_profile(&init, m.weights()).unwrap();
        let k = Kinetic::new(Dynamics::new(m), eff, KineticOptions::default()).unwrap();
        let mut prev = f64::INFINITY;
        for order in 0..=3 {
            let lower = if order == 0 { vec![0.0; 2] } else { k.reduced_distribution(1.0, order - 1).unwrap().values };
            let term = max_diff(&k.reduced_distribution(1.0, order).unwrap().values, &lower);
            if order >= 1 {
                assert!(term < prev, "order {order}: {term} >= {prev}");
            }
            prev = term;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn collision_term_conserves_mass(a in 0.0..1.0f64, t in 0.0..2.0f64, eps in 0.0..0.5f64, seed in 0u64..50) {
            let m = random_model(3, eps, 2, seed);
            let w = m.weights().to_vec();
            let mass: f64 = w.iter().sum();
            let p = CorrelationProfile::spin(vec![1.0 / mass; 3], &[0.4, 0.3, 0.3], 2, 0.2);
            let init = build_initial_state(&p, &m, 0.6).unwrap();
            let eff = effective_profile(&init, &w).unwrap();
            let k = Kinetic::new(Dynamics::new(m), eff, KineticOptions::default()).unwrap();
            let raw = [a, 1.0 - a, 0.5];
            let norm: f64 = raw.iter().zip(&w).map(|(f, w)| f * w).sum();
            let f = TracerDistribution { t, values: raw.iter().map(|f| f / norm).collect(), mass_drift: 0.0 };
            let r = k.fp_rhs(&f, t, 1).unwrap();
            let balance: f64 = r.iter().zip(&w).map(|(r, w)| r * w).sum();
            prop_assert!(balance.abs() < 1e-11);
        }

        #[test]
        fn series_keeps_unit_mass(t in 0.0..3.0f64, eps in 0.0..0.5f64, order in 0usize..=2) {
            let k = tiny_kinetic(eps, 2, CorrelationProfile::spin(vec![0.8, 0.2], &[0.5, 0.5], 2, 0.3), KineticOptions::default());
            let f = k.reduced_distribution(t, order).unwrap();
            prop_assert!(f.mass_drift.abs() < 1e-12);
            prop_assert!(f.values.iter().all(|v| *v >= -1e-12));
        }
    }
}
