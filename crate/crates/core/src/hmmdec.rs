//! Viterbi decoding over a left-to-right topology with a minimum phoneme
//! duration and equally likely phonemes.

use crate::error::{Error, Result};
use crate::eval::collapse_path;
use crate::real::Real;

/// `K` phonemes with `D` states each. State `k * D + d` is state `d` of
/// phoneme `k`. Moves: `d -> d + 1`, a self-loop on the last state, and last
/// state of any phoneme to the first state of any phoneme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DurationGraph {
    num_phonemes: usize,
    states_per_phoneme: usize,
}

pub const DEFAULT_MIN_DURATION: usize = 3;

pub fn build_duration_graph(num_phonemes: usize, states_per_phoneme: usize) -> Result<DurationGraph> {
    if num_phonemes == 0 || states_per_phoneme == 0 {
        return Err(Error::invalid("duration graph needs K >= 1 and D >= 1"));
    }
    Ok(DurationGraph {
        num_phonemes,
        states_per_phoneme,
    })
}

impl DurationGraph {
    pub fn num_phonemes(&self) -> usize {
        self.num_phonemes
    }

    pub fn min_duration(&self) -> usize {
        self.states_per_phoneme
    }

    pub fn num_states(&self) -> usize {
        self.num_phonemes * self.states_per_phoneme
    }

    pub fn phoneme_of(&self, state: usize) -> usize {
        state / self.states_per_phoneme
    }

    /// Whether the graph allows `from -> to` between consecutive frames.
    pub fn allows(&self, from: usize, to: usize) -> bool {
        let d = self.states_per_phoneme;
        let last = |s: usize| s % d == d - 1;
        (to == from + 1 && !last(from)) || (last(from) && (to == from || to % d == 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmDecoding {
    pub states: Vec<usize>,
    pub frame_labels: Vec<usize>,
    /// Phoneme sequence with frame repeats collapsed.
    pub phonemes: Vec<usize>,
    /// Summed log posteriors along the best path.
    pub score: f64,
}

/// Decodes a `T x K` matrix of per-frame posteriors. Rows must sum to 1.
pub fn hmm_decode<F: Real>(posteriors: &[Vec<F>], graph: &DurationGraph) -> Result<HmmDecoding> {
    let k = graph.num_phonemes;
    for (t, row) in posteriors.iter().enumerate() {
        if row.len() != k {
            return Err(Error::shape(format!(
                "frame {t} has {} posteriors for {k} phonemes",
                row.len()
            )));
        }
        let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= F::zero())) {
            return Err(Error::invalid(format!(
                "frame {t} posteriors are not a distribution (sum {sum})"
            )));
        }
    }
    let logs: Vec<Vec<f64>> = posteriors
        .iter()
        .map(|r| r.iter().map(|p| p.as_f64().ln()).collect())
        .collect();
    decode_log(&logs, graph)
}

/// Viterbi with log scores as emissions and zero transition scores.
pub fn decode_log(log_emissions: &[Vec<f64>], graph: &DurationGraph) -> Result<HmmDecoding> {
    let (k, d) = (graph.num_phonemes, graph.states_per_phoneme);
    let n = log_emissions.len();
    if n < d {
        return Err(Error::NoLegalPath(format!(
            "{n} frames cannot hold a phoneme of minimum duration {d}"
        )));
    }
    if let Some(row) = log_emissions.iter().find(|r| r.len() != k) {
        return Err(Error::shape(format!("{} scores for {k} phonemes", row.len())));
    }
    let states = k * d;
    let neg = f64::NEG_INFINITY;
    let mut delta = vec![neg; states];
    for p in 0..k {
        delta[p * d] = log_emissions[0][p];
    }
    let mut next = vec![neg; states];
    let mut back = vec![usize::MAX; n * states];
    for t in 1..n {
        // best last state feeds every first state
        let mut best_last = d - 1;
        for p in 1..k {
            if delta[p * d + d - 1] > delta[best_last] {
                best_last = p * d + d - 1;
            }
        }
        for p in 0..k {
            let e = log_emissions[t][p];
            for s in p * d..(p + 1) * d {
                let (from, score) = if s == p * d {
                    (best_last, delta[best_last])
                } else if s == (p + 1) * d - 1 && delta[s] > delta[s - 1] {
                    (s, delta[s])
                } else {
                    (s - 1, delta[s - 1])
                };
                next[s] = score + e;
                back[t * states + s] = from;
            }
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut end = d - 1;
    for p in 1..k {
        if delta[p * d + d - 1] > delta[end] {
            end = p * d + d - 1;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = end;
    for t in (1..n).rev() {
        path[t - 1] = back[t * states + path[t]];
    }
    let frame_labels: Vec<usize> = path.iter().map(|&s| graph.phoneme_of(s)).collect();
    Ok(HmmDecoding {
        phonemes: collapse_path(&frame_labels, None),
        frame_labels,
        states: path,
        score: delta[end],
    })
}
