//! Exact-jump simulation of the tracer-plus-environment process and Monte
//! Carlo estimates of mean values.
//!
//! Trajectory `k` of a run with seed `s` draws from `ChaCha8Rng` seeded with
//! `s` on stream `k`, so results do not depend on thread scheduling.

use crate::error::{Error, Result};
use crate::hierarchy::ObservableSeq;
use crate::model::{build_initial_state, CorrelationProfile, ModelSpec};
use crate::sector::SectorFunction;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Tracer state and environment states (flat entity indices), at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub tracer: usize,
    pub env: Vec<usize>,
    pub t: f64,
}

impl Configuration {
    /// Slot values in sector order: tracer first.
    pub fn slots(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.env.len() + 1);
        out.push(self.tracer);
        out.extend(&self.env);
        out
    }

    fn state(&self, slot: usize) -> usize {
        if slot == 0 {
            self.tracer
        } else {
            self.env[slot - 1]
        }
    }

    fn state_mut(&mut self, slot: usize) -> &mut usize {
        if slot == 0 {
            &mut self.tracer
        } else {
            &mut self.env[slot - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Tracer,
    EnvSingle,
    EnvPair,
    Interaction,
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tracer => "tracer",
            Self::EnvSingle => "env_single",
            Self::EnvPair => "env_pair",
            Self::Interaction => "interaction",
        }
    }
}

/// One jump channel: `participants[0]` jumps, `participants[1]` (if any) is
/// the partner. Slot 0 is the tracer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventChannel {
    pub kind: ChannelKind,
    pub participants: Vec<usize>,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

impl Estimate {
    /// Mean and standard error of the mean, summed in input order.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Invalid("no samples".into()));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n_samples: n,
        })
    }

    /// `|mean - exact| / stderr`, or 0/inf when the stderr vanishes.
    pub fn z_score(&self, exact: f64) -> f64 {
        let d = (self.mean - exact).abs();
        if self.stderr > 0.0 {
            d / self.stderr
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// One recorded jump of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub trajectory_id: u64,
    pub t_event: f64,
    pub channel_kind: ChannelKind,
    pub participants: Vec<usize>,
    pub new_state: usize,
}

/// Exact sampler for the truncated grand-canonical initial ensemble:
/// `P(n) ~ (1/n!) int D_{1+n}` and, given `n`, slots drawn with density
/// `W(x) D_{1+n}(x)`. `D` already carries the activity factor `z^n`.
#[derive(Debug, Clone)]
pub struct InitialSampler {
    n_states: usize,
    sectors: WeightedIndex<f64>,
    configurations: Vec<Option<WeightedIndex<f64>>>,
}

impl InitialSampler {
    pub fn new(profile: &CorrelationProfile, model: &ModelSpec, activity: f64) -> Result<Self> {
        let init = build_initial_state(profile, model, activity)?;
        Self::from_sectors(init.full.sectors(), model.weights())
    }

    pub fn from_sectors(sectors: &[SectorFunction], weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        let mut masses = Vec::with_capacity(sectors.len());
        let mut configurations = Vec::with_capacity(sectors.len());
        let mut slots = Vec::new();
        let mut fact = 1.0;
        for (s, d) in sectors.iter().enumerate() {
            if s > 0 {
                fact *= s as f64;
            }
            slots.resize(s + 1, 0);
            let cell: Vec<f64> = (0..d.len())
                .map(|idx| {
                    d.decode_into(idx, &mut slots);
                    d.slot_weight(weights, &slots) * d.as_slice()[idx]
                })
                .collect();
            if cell.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::validation(
                    "distribution positivity",
                    format!("D[{s}]"),
                    "negative or non-finite entry",
                ));
            }
            let mass: f64 = cell.iter().sum();
            masses.push(mass / fact);
            configurations.push(if mass > 0.0 {
                Some(WeightedIndex::new(&cell).map_err(|e| Error::Invalid(e.to_string()))?)
            } else {
                None
            });
        }
        let sectors = WeightedIndex::new(&masses).map_err(|_| Error::ZeroNorm)?;
        Ok(Self {
            n_states: n,
            sectors,
            configurations,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let s = self.sectors.sample(rng);
        let mut idx = self.configurations[s]
            .as_ref()
            .expect("sector with positive mass")
            .sample(rng);
        // Row-major with the tracer most significant.
        let mut slots = vec![0; s + 1];
        for k in (0..=s).rev() {
            slots[k] = idx % self.n_states;
            idx /= self.n_states;
        }
        Configuration {
            tracer: slots[0],
            env: slots[1..].to_vec(),
            t: 0.0,
        }
    }
}

/// Draws a configuration from the initial ensemble built from `profile`.
pub fn sample_initial<R: Rng + ?Sized>(
    profile: &CorrelationProfile,
    model: &ModelSpec,
    activity: f64,
    rng: &mut R,
) -> Result<Configuration> {
    Ok(InitialSampler::new(profile, model, activity)?.sample(rng))
}

/// All jump channels of `cfg`, in a fixed order: tracer, single environment
/// jumps, ordered environment pairs, tracer-environment interactions.
pub fn channels(cfg: &Configuration, model: &ModelSpec) -> Vec<EventChannel> {
    let n = cfg.env.len();
    let mut out = Vec::with_capacity(1 + n * (n + 1));
    out.push(EventChannel {
        kind: ChannelKind::Tracer,
        participants: vec![0],
        rate: model.rate_tracer.at(&[cfg.tracer]),
    });
    for i in 1..=n {
        out.push(EventChannel {
            kind: ChannelKind::EnvSingle,
            participants: vec![i],
            rate: model.rate_env1.at(&[cfg.state(i)]),
        });
    }
    for i in 1..=n {
        for j in 1..=n {
            if i != j {
                out.push(EventChannel {
                    kind: ChannelKind::EnvPair,
                    participants: vec![i, j],
                    rate: model.rate_env2.at(&[cfg.state(i), cfg.state(j)]),
                });
            }
        }
    }
    if model.eps != 0.0 {
        for i in 1..=n {
            out.push(EventChannel {
                kind: ChannelKind::Interaction,
                participants: vec![0, i],
                rate: model.eps * model.rate_int.at(&[cfg.tracer, cfg.state(i)]),
            });
        }
    }
    out
}

/// Index drawn with probability proportional to `weights`; `total` is their sum.
fn pick<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = f64>, total: f64) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if target < acc {
                return i;
            }
        }
    }
    last
}

/// One exact jump. Returns the dwell time, the channel fired and the new state
/// of the jumping entity; `None` when the configuration is absorbing.
pub fn gillespie_step<R: Rng + ?Sized>(
    cfg: &mut Configuration,
    model: &ModelSpec,
    rng: &mut R,
) -> Option<(f64, EventChannel, usize)> {
    let chans = channels(cfg, model);
    let total: f64 = chans.iter().map(|c| c.rate).sum();
    if total <= 0.0 {
        cfg.t = f64::INFINITY;
        return None;
    }
    let dwell = -(1.0 - rng.random::<f64>()).ln() / total;
    let chan = chans[pick(rng, chans.iter().map(|c| c.rate), total)].clone();
    let args: Vec<usize> = chan.participants.iter().map(|&k| cfg.state(k)).collect();
    let kernel = match chan.kind {
        ChannelKind::Tracer => &model.kernel_tracer,
        ChannelKind::EnvSingle => &model.kernel_env1,
        ChannelKind::EnvPair => &model.kernel_env2,
        ChannelKind::Interaction => &model.kernel_int,
    };
    let w = model.weights();
    let row = kernel.row(&args);
    let mass: f64 = row.iter().zip(w).map(|(a, w)| a * w).sum();
    let v = pick(rng, row.iter().zip(w).map(|(a, w)| a * w), mass);
    *cfg.state_mut(chan.participants[0]) = v;
    cfg.t += dwell;
    Some((dwell, chan, v))
}

/// Runs `cfg` forward to time `t_end` (the state at `t_end` is the one before
/// the first jump past it), optionally recording events.
pub fn run_until<R: Rng + ?Sized>(
    cfg: &mut Configuration,
    model: &ModelSpec,
    t_end: f64,
    rng: &mut R,
    mut record: Option<(&mut Vec<Event>, u64)>,
) {
    loop {
        let mut next = cfg.clone();
        match gillespie_step(&mut next, model, rng) {
            Some((_, chan, v)) if next.t <= t_end => {
                if let Some((events, id)) = record.as_mut() {
                    events.push(Event {
                        trajectory_id: *id,
                        t_event: next.t,
                        channel_kind: chan.kind,
                        participants: chan.participants,
                        new_state: v,
                    });
                }
                *cfg = next;
            }
            _ => {
                cfg.t = t_end;
                return;
            }
        }
    }
}

/// RNG for trajectory `id` of a run seeded with `seed`.
pub fn trajectory_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Monte Carlo engine for one model and initial ensemble.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ModelSpec,
    sampler: InitialSampler,
}

impl Simulator {
    pub fn new(model: ModelSpec, profile: &CorrelationProfile, activity: f64) -> Result<Self> {
        let sampler = InitialSampler::new(profile, &model, activity)?;
        Ok(Self { model, sampler })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// Final configurations of `n_traj` trajectories at time `t`, in id order.
    pub fn final_configurations(&self, t: f64, n_traj: usize, seed: u64) -> Vec<Configuration> {
        (0..n_traj as u64)
            .into_par_iter()
            .map(|id| {
                let mut rng = trajectory_rng(seed, id);
                let mut cfg = self.sampler.sample(&mut rng);
                run_until(&mut cfg, &self.model, t, &mut rng, None);
                cfg
            })
            .collect()
    }

    /// Mean of `O_{1+n}(tracer, env)` over `n_traj` trajectories at time `t`.
    pub fn estimate_mean(&self, o: &ObservableSeq, t: f64, n_traj: usize, seed: u64) -> Result<Estimate> {
        if n_traj < 100 {
            return Err(Error::Invalid(format!("need at least 100 trajectories, got {n_traj}")));
        }
        let configs = self.final_configurations(t, n_traj, seed);
        let samples = configs
            .iter()
            .map(|c| {
                o.seq
                    .get(c.env.len())
                    .map(|f| f.get(&c.slots()))
                    .ok_or(Error::CapExceeded {
                        what: "observable sector",
                        value: c.env.len(),
                        cap: o.n_max(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Estimate::from_samples(&samples)
    }

    /// Event log of trajectories `0..n_traj` up to time `t`.
    pub fn record(&self, t: f64, n_traj: usize, seed: u64) -> Vec<Event> {
        (0..n_traj as u64)
            .into_par_iter()
            .map(|id| {
                let mut rng = trajectory_rng(seed, id);
                let mut cfg = self.sampler.sample(&mut rng);
                let mut events = Vec::new();
                run_until(&mut cfg, &self.model, t, &mut rng, Some((&mut events, id)));
                events
            })
            .collect::<Vec<_>>()
            .concat()
    }
}

/// `estimate_mean` without keeping the simulator around.
pub fn estimate_mean(
    o: &ObservableSeq,
    profile: &CorrelationProfile,
    model: &ModelSpec,
    activity: f64,
    t: f64,
    n_traj: usize,
    seed: u64,
) -> Result<Estimate> {
    Simulator::new(model.clone(), profile, activity)?.estimate_mean(o, t, n_traj, seed)
}

/// CSV with columns `trajectory_id, t_event, channel_kind, participants, new_state`;
/// participants are `;`-separated slot indices.
pub fn write_events_csv<W: Write>(events: &[Event], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trajectory_id", "t_event", "channel_kind", "participants", "new_state"])
        .map_err(csv_error)?;
    for e in events {
        let participants = e
            .participants
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            e.trajectory_id.to_string(),
            e.t_event.to_string(),
            e.channel_kind.name().to_string(),
            participants,
            e.new_state.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
