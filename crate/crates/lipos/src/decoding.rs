//! Sampling strategies and decoding helpers that live *above* the syscall
//! surface: greedy/temperature/top-k sampling, automaton-constrained
//! decoding, and the verification step of speculative decoding.
//!
//! Everything here is a pure function. Stochastic samplers draw their
//! uniform variate by hashing the distribution's bits together with
//! `rng_seed`, so a sample is a deterministic function of `(dist, spec)` —
//! two programs sampling the same distribution with the same spec always
//! agree, which is what makes seeded runs replayable without threading an
//! RNG through every generation loop.

use crate::model::{mix64, unit_f64, Dist, GOLDEN};
use crate::types::TokenId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    /// No probability mass is left after masking (or the distribution was
    /// all-zero / empty to begin with).
    #[error("no probability mass after masking")]
    DegenerateDist,
    /// The automaton state allows no tokens at all; the grammar and the
    /// generation loop have diverged.
    #[error("automaton state {0:?} allows no tokens")]
    DeadState(String),
    #[error("{dists} dists for {draft} draft tokens")]
    ArityMismatch { draft: usize, dists: usize },
    /// Speculative verification is exact only under greedy sampling;
    /// stochastic acceptance is not implemented.
    #[error("speculative verification requires a greedy sampler")]
    GreedyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Argmax; ties go to the lowest token id.
    Greedy,
    /// Sample from `softmax(log p / t)`, i.e. weights `p^(1/t)`.
    Temperature { t: f64 },
    /// Keep the `k` highest-probability tokens (boundary ties keep the
    /// lower id), renormalize, then temperature-sample among them.
    TopK { k: u32, t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Ignored by greedy. For stochastic kinds, the draw is a hash of this
    /// seed and the distribution, so distinct seeds decorrelate streams.
    pub rng_seed: u64,
}

impl SamplerSpec {
    pub fn greedy() -> SamplerSpec {
        SamplerSpec { kind: SamplerKind::Greedy, rng_seed: 0 }
    }

    pub fn temperature(t: f64, rng_seed: u64) -> SamplerSpec {
        SamplerSpec { kind: SamplerKind::Temperature { t }, rng_seed }
    }

    pub fn top_k(k: u32, t: f64, rng_seed: u64) -> SamplerSpec {
        SamplerSpec { kind: SamplerKind::TopK { k, t }, rng_seed }
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self.kind, SamplerKind::Greedy)
    }
}

/// Uniform variate in [0, 1) derived from the distribution bits and the
/// seed. Any change to either produces an unrelated draw.
fn draw_unit(dist: &Dist, rng_seed: u64) -> f64 {
    let mut h = mix64(rng_seed ^ GOLDEN);
    for p in dist.probs() {
        h = mix64(h ^ p.to_bits());
    }
    unit_f64(mix64(h))
}

/// Temperature weights `p^(1/t)`, computed in log space and scaled so the
/// largest weight is 1 (avoids overflow for t → 0 and underflow for spiky
/// dists). Zero probabilities stay exactly zero.
fn temperature_weights(probs: &[f64], t: f64, weights: &mut Vec<f64>) {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    weights.clear();
    if max <= 0.0 {
        weights.resize(probs.len(), 0.0);
        return;
    }
    let log_max = max.ln();
    weights.extend(probs.iter().map(|&p| {
        if p <= 0.0 {
            0.0
        } else {
            ((p.ln() - log_max) / t).exp()
        }
    }));
}

/// Walk the cumulative weight vector and return the index owning `u·total`.
fn pick(weights: &[f64], u: f64) -> Result<TokenId, DecodeError> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(DecodeError::DegenerateDist);
    }
    let target = u * total;
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = Some(i as TokenId);
            cum += w;
            if cum > target {
                return Ok(i as TokenId);
            }
        }
    }
    // Float round-off can leave cum marginally below target; the draw then
    // belongs to the last token with mass.
    Ok(last_positive.expect("total > 0 implies a positive weight"))
}

/// Argmax over raw weights; strict `>` scan so ties keep the lowest id.
fn argmax_slice(weights: &[f64]) -> Result<TokenId, DecodeError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && best.map_or(true, |(_, bw)| w > bw) {
            best = Some((i, w));
        }
    }
    best.map(|(i, _)| i as TokenId).ok_or(DecodeError::DegenerateDist)
}

/// Shared sampling core. `weights` is the (possibly masked) probability
/// vector actually sampled from; `draw_src` is the distribution whose bits
/// seed the uniform draw. Keeping the draw tied to the *unmasked* dist means
/// masking with the full vocabulary reproduces the unmasked sample exactly.
fn sample_from(
    weights: &[f64],
    draw_src: &Dist,
    spec: &SamplerSpec,
) -> Result<TokenId, DecodeError> {
    match spec.kind {
        SamplerKind::Greedy => argmax_slice(weights),
        SamplerKind::Temperature { t } => {
            let mut w = Vec::new();
            temperature_weights(weights, t, &mut w);
            pick(&w, draw_unit(draw_src, spec.rng_seed))
        }
        SamplerKind::TopK { k, t } => {
            if k == 0 {
                return Err(DecodeError::DegenerateDist);
            }
            let mut order: Vec<usize> = (0..weights.len()).collect();
            // By probability descending, then token id ascending, so
            // boundary ties keep the lower id.
            order.sort_by(|&a, &b| {
                weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b))
            });
            order.truncate(k as usize);
            let mut kept = vec![0.0; weights.len()];
            for &i in &order {
                kept[i] = weights[i];
            }
            let mut w = Vec::new();
            temperature_weights(&kept, t, &mut w);
            pick(&w, draw_unit(draw_src, spec.rng_seed))
        }
    }
}

/// Draw one token. Greedy is pure argmax; stochastic kinds are deterministic
/// given `spec.rng_seed` (see module docs).
pub fn sample(dist: &Dist, spec: &SamplerSpec) -> Result<TokenId, DecodeError> {
    sample_from(dist.probs(), dist, spec)
}

/// A deterministic finite automaton over token ids. `allowed(s)` is exactly
/// the set of tokens with a defined transition out of `s`; there are no
/// epsilon moves and at most one successor per (state, token).
///
/// States are addressed by dense `usize` indices in the order they appear in
/// the definition; [`TokenAutomaton::state_name`] maps back to names.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAutomaton {
    names: Vec<String>,
    start: usize,
    accept: BTreeSet<usize>,
    edges: Vec<BTreeMap<TokenId, usize>>,
}

#[derive(Debug, Error)]
pub enum AutomatonError {
    #[error("bad automaton JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("state {0:?} is not in the state list")]
    UnknownState(String),
    #[error("state {0:?} appears twice in the state list")]
    DuplicateState(String),
    #[error("duplicate transition from {state:?} on token {token}")]
    DuplicateTransition { state: String, token: TokenId },
    #[error("automaton has no states")]
    Empty,
}

/// Serialized form: `{"states": [...], "start": "...", "accept": [...],
/// "transitions": [{"from": ..., "token": ..., "to": ...}, ...]}`.
#[derive(Serialize, Deserialize)]
struct AutomatonDef {
    states: Vec<String>,
    start: String,
    accept: Vec<String>,
    transitions: Vec<TransitionDef>,
}

#[derive(Serialize, Deserialize)]
struct TransitionDef {
    from: String,
    token: TokenId,
    to: String,
}

impl TokenAutomaton {
    pub fn new(
        states: &[&str],
        start: &str,
        accept: &[&str],
        transitions: &[(&str, TokenId, &str)],
    ) -> Result<TokenAutomaton, AutomatonError> {
        TokenAutomaton::from_def(AutomatonDef {
            states: states.iter().map(|s| s.to_string()).collect(),
            start: start.to_string(),
            accept: accept.iter().map(|s| s.to_string()).collect(),
            transitions: transitions
                .iter()
                .map(|&(f, t, to)| TransitionDef {
                    from: f.to_string(),
                    token: t,
                    to: to.to_string(),
                })
                .collect(),
        })
    }

    pub fn from_json(json: &str) -> Result<TokenAutomaton, AutomatonError> {
        TokenAutomaton::from_def(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> String {
        let def = AutomatonDef {
            states: self.names.clone(),
            start: self.names[self.start].clone(),
            accept: self.accept.iter().map(|&s| self.names[s].clone()).collect(),
            transitions: self
                .edges
                .iter()
                .enumerate()
                .flat_map(|(from, map)| {
                    map.iter().map(move |(&token, &to)| (from, token, to))
                })
                .map(|(from, token, to)| TransitionDef {
                    from: self.names[from].clone(),
                    token,
                    to: self.names[to].clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&def).expect("automaton def serializes")
    }

    fn from_def(def: AutomatonDef) -> Result<TokenAutomaton, AutomatonError> {
        if def.states.is_empty() {
            return Err(AutomatonError::Empty);
        }
        let mut index = BTreeMap::new();
        for (i, name) in def.states.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(AutomatonError::DuplicateState(name.clone()));
            }
        }
        let resolve = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| AutomatonError::UnknownState(name.to_string()))
        };
        let start = resolve(&def.start)?;
        let mut accept = BTreeSet::new();
        for name in &def.accept {
            accept.insert(resolve(name)?);
        }
        let mut edges = vec![BTreeMap::new(); def.states.len()];
        for t in &def.transitions {
            let from = resolve(&t.from)?;
            let to = resolve(&t.to)?;
            if edges[from].insert(t.token, to).is_some() {
                return Err(AutomatonError::DuplicateTransition {
                    state: t.from.clone(),
                    token: t.token,
                });
            }
        }
        Ok(TokenAutomaton { names: def.states, start, accept, edges })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn is_accept(&self, state: usize) -> bool {
        self.accept.contains(&state)
    }

    pub fn step(&self, state: usize, token: TokenId) -> Option<usize> {
        self.edges[state].get(&token).copied()
    }

    /// Tokens with a defined transition out of `state`, ascending.
    pub fn allowed(&self, state: usize) -> impl Iterator<Item = TokenId> + '_ {
        self.edges[state].keys().copied()
    }

    pub fn state_name(&self, state: usize) -> &str {
        &self.names[state]
    }

    pub fn state_count(&self) -> usize {
        self.names.len()
    }
}

/// Mask `dist` to the automaton's allowed set at `state`, renormalize,
/// sample with `spec`, and advance the automaton. Allowed tokens outside the
/// vocabulary simply carry zero mass. The effective distribution is the
/// masked probabilities divided by their total; the division happens inside
/// the sampler so that an all-allowing state reproduces [`sample`] bitwise.
pub fn constrained_next(
    dist: &Dist,
    state: usize,
    aut: &TokenAutomaton,
    spec: &SamplerSpec,
) -> Result<(TokenId, usize), DecodeError> {
    let probs = dist.probs();
    let mut masked = vec![0.0; probs.len()];
    let mut any_allowed = false;
    for t in aut.allowed(state) {
        any_allowed = true;
        if let Some(&p) = probs.get(t as usize) {
            masked[t as usize] = p;
        }
    }
    if !any_allowed {
        return Err(DecodeError::DeadState(aut.state_name(state).to_string()));
    }
    let token = sample_from(&masked, dist, spec)?;
    let next = aut
        .step(state, token)
        .expect("sampled token carries mass only on allowed transitions");
    Ok((token, next))
}

/// Outcome of [`speculative_verify`]: `accepted` is the length of the
/// longest draft prefix the model agrees with; `correction` is the token the
/// model wanted at the first disagreement (`None` when the whole draft was
/// accepted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verification {
    pub accepted: usize,
    pub correction: Option<TokenId>,
}

/// Greedy verification step of speculative decoding.
///
/// `dists[i]` must be the model's next-token distribution *before* draft
/// token `i` is consumed — i.e. conditioned on the committed context plus
/// `draft[..i]`. In terms of a `pred` call that scored the draft, that is
/// the distribution returned alongside draft token `i−1`, with `dists[0]`
/// being the distribution already in hand before the draft (from the prompt
/// or the previous step).
pub fn speculative_verify(
    draft: &[TokenId],
    dists: &[Dist],
    spec: &SamplerSpec,
) -> Result<Verification, DecodeError> {
    if !spec.is_greedy() {
        return Err(DecodeError::GreedyOnly);
    }
    if dists.len() != draft.len() {
        return Err(DecodeError::ArityMismatch { draft: draft.len(), dists: dists.len() });
    }
    for (i, (&t, dist)) in draft.iter().zip(dists).enumerate() {
        if dist.is_empty() {
            return Err(DecodeError::DegenerateDist);
        }
        let want = dist.argmax();
        if t != want {
            return Ok(Verification { accepted: i, correction: Some(want) });
        }
    }
    Ok(Verification { accepted: draft.len(), correction: None })
}
