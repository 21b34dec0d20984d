//! Linear-chain CRF over network emission scores.
//!
//! `A[i][j]` scores a move from label `j` at `t-1` to label `i` at `t`. There
//! is no initial transition term.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::FrameMatrix;
use crate::real::Real;
use crate::train::logadd_unchecked;

/// `T x K` emission scores; row `t` holds `f_i(x_t)` for every label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionSequence<F = f64> {
    scores: FrameMatrix<F>,
}

impl<F: Real> EmissionSequence<F> {
    pub fn new(scores: FrameMatrix<F>) -> Self {
        EmissionSequence { scores }
    }

    pub fn from_rows<G: Real>(rows: &[Vec<G>]) -> Result<Self> {
        let cast: Vec<Vec<F>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| F::of(v.as_f64())).collect())
            .collect();
        Ok(EmissionSequence {
            scores: FrameMatrix::from_rows(&cast)?,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_labels(&self) -> usize {
        self.scores.dim()
    }

    pub fn frame(&self, t: usize) -> &[F] {
        self.scores.frame(t)
    }

    pub fn scores(&self) -> &FrameMatrix<F> {
        &self.scores
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<F = f64> {
    k: usize,
    data: Vec<F>,
}

impl<F: Real> TransitionMatrix<F> {
    pub fn zeros(k: usize) -> Self {
        TransitionMatrix {
            k,
            data: vec![F::zero(); k * k],
        }
    }

    /// Row-major `k x k` values; entry `i * k + j` is `A[i][j]`.
    pub fn new(k: usize, data: Vec<F>) -> Result<Self> {
        if k == 0 || data.len() != k * k {
            return Err(Error::shape(format!(
                "transition matrix needs {k}x{k} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("transition matrix has non-finite entries"));
        }
        Ok(TransitionMatrix { k, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("transition matrix must be square"));
        }
        Self::new(k, rows.concat())
    }

    pub fn num_labels(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, to: usize, from: usize) -> F {
        self.data[to * self.k + from]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn cast<G: Real>(&self) -> TransitionMatrix<G> {
        TransitionMatrix {
            k: self.k,
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }
}

fn check<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>) -> Result<()> {
    if e.num_labels() != a.num_labels() {
        return Err(Error::invalid(format!(
            "{} emission labels but {}x{} transitions",
            e.num_labels(),
            a.k,
            a.k
        )));
    }
    Ok(())
}

fn check_path<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>, y: &[usize]) -> Result<()> {
    check(e, a)?;
    if y.len() != e.len() {
        return Err(Error::invalid(format!(
            "label path of length {} for {} frames",
            y.len(),
            e.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= a.k) {
        return Err(Error::invalid(format!("label {bad} outside {} labels", a.k)));
    }
    Ok(())
}

pub fn path_score<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>, y: &[usize]) -> Result<F> {
    check_path(e, a, y)?;
    let mut s = e.frame(0)[y[0]];
    for t in 1..y.len() {
        s = s + a.get(y[t], y[t - 1]);
        s = s + e.frame(t)[y[t]];
    }
    Ok(s)
}

fn forward<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>) -> Vec<F> {
    let (n, k) = (e.len(), a.k);
    let mut alpha = vec![F::zero(); n * k];
    alpha[..k].copy_from_slice(e.frame(0));
    let mut tmp = vec![F::zero(); k];
    for t in 1..n {
        let (prev, cur) = alpha.split_at_mut(t * k);
        let prev = &prev[(t - 1) * k..];
        for i in 0..k {
            for j in 0..k {
                tmp[j] = prev[j] + a.get(i, j);
            }
            cur[i] = e.frame(t)[i] + logadd_unchecked(&tmp);
        }
    }
    alpha
}

/// Log of the summed exponentiated scores of all `K^T` paths.
pub fn log_partition<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>) -> Result<F> {
    check(e, a)?;
    let k = a.k;
    let alpha = forward(e, a);
    Ok(logadd_unchecked(&alpha[(e.len() - 1) * k..]))
}

pub fn crf_log_likelihood<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>, y: &[usize]) -> Result<F> {
    Ok(path_score(e, a, y)? - log_partition(e, a)?)
}

/// Best path and its score. Ties go to the smaller label at the latest
/// position where tied paths differ.
pub fn viterbi<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>) -> Result<(Vec<usize>, F)> {
    check(e, a)?;
    let (n, k) = (e.len(), a.k);
    let mut delta: Vec<F> = e.frame(0).to_vec();
    let mut next = vec![F::zero(); k];
    let mut back = vec![0usize; n * k];
    for t in 1..n {
        for i in 0..k {
            let mut best = delta[0] + a.get(i, 0);
            let mut arg = 0;
            for j in 1..k {
                let cand = delta[j] + a.get(i, j);
                if cand > best {
                    best = cand;
                    arg = j;
                }
            }
            next[i] = best + e.frame(t)[i];
            back[t * k + i] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    for i in 1..k {
        if delta[i] > delta[last] {
            last = i;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    Ok((path, delta[last]))
}

/// Posterior marginals under the path softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals<F = f64> {
    pub num_labels: usize,
    /// `T x K`, row-major.
    pub node: Vec<F>,
    /// `(T-1) x K x K`; entry `(t, i, j)` is the probability of label `j` at
    /// `t` followed by label `i` at `t + 1`.
    pub pair: Vec<F>,
    pub log_partition: F,
}

impl<F: Real> Marginals<F> {
    pub fn node_at(&self, t: usize, i: usize) -> F {
        self.node[t * self.num_labels + i]
    }

    pub fn pair_at(&self, t: usize, to: usize, from: usize) -> F {
        let k = self.num_labels;
        self.pair[(t * k + to) * k + from]
    }
}

pub fn forward_backward<F: Real>(e: &EmissionSequence<F>, a: &TransitionMatrix<F>) -> Result<Marginals<F>> {
    check(e, a)?;
    let (n, k) = (e.len(), a.k);
    let alpha = forward(e, a);
    let log_z = logadd_unchecked(&alpha[(n - 1) * k..]);

    let mut beta = vec![F::zero(); n * k];
    let mut tmp = vec![F::zero(); k];
    for t in (0..n - 1).rev() {
        for j in 0..k {
            for i in 0..k {
                tmp[i] = a.get(i, j) + e.frame(t + 1)[i] + beta[(t + 1) * k + i];
            }
            beta[t * k + j] = logadd_unchecked(&tmp);
        }
    }

    let node = (0..n * k).map(|x| (alpha[x] + beta[x] - log_z).exp()).collect();
    let mut pair = vec![F::zero(); (n - 1) * k * k];
    for t in 0..n - 1 {
        for i in 0..k {
            let tail = e.frame(t + 1)[i] + beta[(t + 1) * k + i] - log_z;
            for j in 0..k {
                pair[(t * k + i) * k + j] = (alpha[t * k + j] + a.get(i, j) + tail).exp();
            }
        }
    }
    Ok(Marginals {
        num_labels: k,
        node,
        pair,
        log_partition: log_z,
    })
}

/// Gradient of [`crf_log_likelihood`] with respect to `A`: observed minus
/// expected transition counts.
pub fn transition_gradient<F: Real>(
    e: &EmissionSequence<F>,
    a: &TransitionMatrix<F>,
    y: &[usize],
) -> Result<TransitionMatrix<F>> {
    check_path(e, a, y)?;
    let k = a.k;
    let m = forward_backward(e, a)?;
    let mut g = vec![F::zero(); k * k];
    for t in 1..y.len() {
        g[y[t] * k + y[t - 1]] += F::one();
    }
    for t in 0..y.len() - 1 {
        for (x, gv) in g.iter_mut().enumerate() {
            *gv -= m.pair[t * k * k + x];
        }
    }
    Ok(TransitionMatrix { k, data: g })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CrfTrainConfig {
    fn default() -> Self {
        CrfTrainConfig {
            learning_rate: 0.01,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Trains `A` from zeros with one ascent step per utterance, visiting
/// utterances in a seeded order each epoch. Emissions stay fixed.
pub fn train_transitions(
    data: &[(EmissionSequence<f64>, Vec<usize>)],
    num_labels: usize,
    config: &CrfTrainConfig,
) -> Result<TransitionMatrix<f64>> {
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::invalid("learning rate must be finite and >= 0"));
    }
    let mut a = TransitionMatrix::zeros(num_labels);
    for (e, y) in data {
        check_path(e, &a, y)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &u in &order {
            let (e, y) = &data[u];
            let g = transition_gradient(e, &a, y)?;
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite transition gradient at epoch {epoch}, utterance {u}"
                )));
            }
            for (av, gv) in a.data.iter_mut().zip(&g.data) {
                *av += config.learning_rate * gv;
            }
        }
    }
    Ok(a)
}

/// Summed log-likelihood of every labelled sequence.
pub fn corpus_log_likelihood(data: &[(EmissionSequence<f64>, Vec<usize>)], a: &TransitionMatrix<f64>) -> Result<f64> {
    data.iter().map(|(e, y)| crf_log_likelihood(e, a, y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn em<R: AsRef<[f64]>>(rows: &[R]) -> EmissionSequence<f64> {
        EmissionSequence::from_rows(&rows.iter().map(|r| r.as_ref().to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn tm<R: AsRef<[f64]>>(rows: &[R]) -> TransitionMatrix<f64> {
        TransitionMatrix::from_rows(&rows.iter().map(|r| r.as_ref().to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Every label path of length `t` over `k` labels, in lexicographic order.
    fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |l| {
                        let mut q = p.clone();
                        q.push(l);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn enumerated_log_partition(e: &EmissionSequence<f64>, a: &TransitionMatrix<f64>) -> f64 {
        let scores: Vec<f64> = all_paths(e.len(), a.k)
            .iter()
            .map(|y| path_score(e, a, y).unwrap())
            .collect();
        let m = scores.iter().copied().fold(f64::MIN, f64::max);
        m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
    }

    fn example() -> (EmissionSequence<f64>, TransitionMatrix<f64>) {
        (em(&[&[1.0, 0.0], &[0.0, 1.0]]), tm(&[&[0.5, -0.5], &[-0.5, 0.5]]))
    }

    #[test]
    fn path_score_examples() {
        let (e, a) = example();
        assert_eq!(path_score(&e, &a, &[0, 1]).unwrap(), 1.5);
        let single = em(&[&[0.25, -2.0, 3.0]]);
        assert_eq!(path_score(&single, &TransitionMatrix::zeros(3), &[1]).unwrap(), -2.0);
        assert_eq!(path_score(&e, &TransitionMatrix::zeros(2), &[1, 1]).unwrap(), 1.0);
        assert!(matches!(path_score(&e, &a, &[0]), Err(Error::InvalidArgument(_))));
        assert!(path_score(&e, &a, &[0, 2]).is_err());
    }

    #[test]
    fn log_partition_examples() {
        let (e, a) = example();
        let z = log_partition(&e, &a).unwrap();
        let expected = (3.0 * 1.5f64.exp() + (-0.5f64).exp()).ln();
        assert!((z - expected).abs() < 1e-12);
        assert!((z - 2.64277).abs() < 1e-4);
        assert!((z - enumerated_log_partition(&e, &a)).abs() < 1e-12);

        let single = em(&[&[0.25, -2.0, 3.0]]);
        let z1 = log_partition(&single, &TransitionMatrix::zeros(3)).unwrap();
        assert!((z1 - logadd_unchecked(&[0.25, -2.0, 3.0])).abs() < 1e-15);

        let zeros = em(&[[0.0; 3]; 4]);
        let z0 = log_partition(&zeros, &TransitionMatrix::zeros(3)).unwrap();
        assert!((z0 - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_examples() {
        let (e, a) = example();
        let ll = crf_log_likelihood(&e, &a, &[0, 1]).unwrap();
        assert!((ll - (1.5 - (3.0 * 1.5f64.exp() + (-0.5f64).exp()).ln())).abs() < 1e-12);
        assert!((ll + 1.14277).abs() < 1e-4);
        let one = em(&[&[0.3], &[-1.0], &[2.0]]);
        assert_eq!(crf_log_likelihood(&one, &tm(&[&[0.7]]), &[0, 0, 0]).unwrap(), 0.0);
        let flat = em(&[[0.5; 3]; 4]);
        let ll = crf_log_likelihood(&flat, &tm(&[[0.2; 3]; 3]), &[0, 2, 1, 1]).unwrap();
        assert!((ll + 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn viterbi_examples() {
        let e = em(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let a = tm(&[&[0.3, 0.1], &[0.2, 0.4]]);
        let (path, score) = viterbi(&e, &a).unwrap();
        assert_eq!(path, vec![0, 1]);
        assert!((score - 3.2).abs() < 1e-12);
        let best = all_paths(2, 2)
            .iter()
            .map(|y| path_score(&e, &a, y).unwrap())
            .fold(f64::MIN, f64::max);
        assert_eq!(score, best);

        let e = em(&[&[1.0, 3.0, 3.0], &[0.0, 0.0, -1.0], &[5.0, 2.0, 5.0]]);
        let (path, _) = viterbi(&e, &TransitionMatrix::zeros(3)).unwrap();
        assert_eq!(path, vec![1, 0, 0]);

        let one = em(&[&[0.3], &[-1.0]]);
        assert_eq!(viterbi(&one, &tm(&[&[0.7]])).unwrap().0, vec![0, 0]);
    }

    #[test]
    fn transition_learning_rate_zero_keeps_zeros() {
        let (e, _) = example();
        let data = vec![(e, vec![0, 1])];
        let cfg = CrfTrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            seed: 1,
        };
        assert_eq!(train_transitions(&data, 2, &cfg).unwrap(), TransitionMatrix::zeros(2));
    }

    #[test]
    fn unseen_transition_score_decreases() {
        // labels only ever move 0 -> 1 or stay; 1 -> 0 never occurs
        let flat = em(&[[0.0, 0.0]; 5]);
        let data: Vec<_> = [vec![0, 0, 1, 1, 1], vec![0, 1, 1, 1, 1], vec![0, 0, 0, 1, 1]]
            .into_iter()
            .map(|y| (flat.clone(), y))
            .collect();
        let mut prev = 0.0;
        for epochs in 1..=5 {
            let a = train_transitions(
                &data,
                2,
                &CrfTrainConfig {
                    learning_rate: 0.1,
                    epochs,
                    seed: 9,
                },
            )
            .unwrap();
            assert!(a.get(0, 1) < prev, "epoch {epochs}: {}", a.get(0, 1));
            prev = a.get(0, 1);
        }
    }

    #[test]
    fn training_raises_corpus_likelihood_and_is_deterministic() {
        let e = em(&[&[1.0, 0.2, -0.3], &[0.1, 0.4, 0.0], &[-0.5, 0.3, 0.9], &[0.0, 0.0, 0.1]]);
        let data = vec![(e.clone(), vec![0, 1, 2, 0]), (e, vec![0, 1, 2, 2])];
        let cfg = CrfTrainConfig {
            learning_rate: 0.05,
            epochs: 20,
            seed: 4,
        };
        let a = train_transitions(&data, 3, &cfg).unwrap();
        assert_eq!(a, train_transitions(&data, 3, &cfg).unwrap());
        let before = corpus_log_likelihood(&data, &TransitionMatrix::zeros(3)).unwrap();
        assert!(corpus_log_likelihood(&data, &a).unwrap() > before);
    }

    fn instance(max_t: usize, max_k: usize) -> impl Strategy<Value = (EmissionSequence<f64>, TransitionMatrix<f64>, Vec<usize>)> {
        (1..=max_t, 1..=max_k).prop_flat_map(|(t, k)| {
            (
                proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, k), t),
                proptest::collection::vec(-2.0f64..2.0, k * k),
                proptest::collection::vec(0..k, t),
            )
                .prop_map(move |(rows, a, y)| {
                    (
                        EmissionSequence::from_rows(&rows).unwrap(),
                        TransitionMatrix::new(k, a).unwrap(),
                        y,
                    )
                })
        })
    }

    /// Emissions drawn from a handful of values so that ties are common.
    fn tied_instance() -> impl Strategy<Value = (EmissionSequence<f64>, TransitionMatrix<f64>)> {
        (1..=6usize, 1..=4usize).prop_flat_map(|(t, k)| {
            let v = prop_oneof![Just(0.0f64), Just(1.0), Just(0.5), -2.0f64..2.0];
            (
                proptest::collection::vec(proptest::collection::vec(v.clone(), k), t),
                proptest::collection::vec(v, k * k),
            )
                .prop_map(move |(rows, a)| {
                    (EmissionSequence::from_rows(&rows).unwrap(), TransitionMatrix::new(k, a).unwrap())
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn path_probabilities_sum_to_one((e, a, _) in instance(5, 3)) {
            let total: f64 = all_paths(e.len(), a.k)
                .iter()
                .map(|y| crf_log_likelihood(&e, &a, y).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-8);
        }

        #[test]
        fn partition_matches_enumeration_and_bounds_paths((e, a, _) in instance(6, 4)) {
            let z = log_partition(&e, &a).unwrap();
            prop_assert!((z - enumerated_log_partition(&e, &a)).abs() < 1e-9);
            let paths = all_paths(e.len(), a.k);
            for y in &paths {
                let s = path_score(&e, &a, y).unwrap();
                if paths.len() > 1 {
                    prop_assert!(z > s);
                } else {
                    prop_assert!((z - s).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn viterbi_matches_enumerated_maximum((e, a) in tied_instance()) {
            let (path, score) = viterbi(&e, &a).unwrap();
            let paths = all_paths(e.len(), a.k);
            let scores: Vec<f64> = paths.iter().map(|y| path_score(&e, &a, y).unwrap()).collect();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(score, best);
            prop_assert_eq!(path_score(&e, &a, &path).unwrap(), best);
            // among tied optima, compare right to left; the smaller label wins
            let expected = paths
                .iter()
                .zip(&scores)
                .filter(|(_, &s)| s == best)
                .map(|(y, _)| y.iter().rev().copied().collect::<Vec<_>>())
                .min()
                .unwrap();
            prop_assert_eq!(path.iter().rev().copied().collect::<Vec<_>>(), expected);
        }

        #[test]
        fn marginals_match_enumeration((e, a, _) in instance(6, 4)) {
            let m = forward_backward(&e, &a).unwrap();
            let (n, k) = (e.len(), a.k);
            let mut node = vec![0.0; n * k];
            let mut pair = vec![0.0; (n - 1) * k * k];
            for y in all_paths(n, k) {
                let p = crf_log_likelihood(&e, &a, &y).unwrap().exp();
                for t in 0..n {
                    node[t * k + y[t]] += p;
                }
                for t in 0..n - 1 {
                    pair[(t * k + y[t + 1]) * k + y[t]] += p;
                }
            }
            for (x, y) in m.node.iter().zip(&node) {
                prop_assert!((x - y).abs() < 1e-8);
            }
            for (x, y) in m.pair.iter().zip(&pair) {
                prop_assert!((x - y).abs() < 1e-8);
            }
            for t in 0..n {
                let row: f64 = m.node[t * k..(t + 1) * k].iter().sum();
                prop_assert!((row - 1.0).abs() < 1e-8);
            }
            for t in 0..n - 1 {
                let slice: f64 = m.pair[t * k * k..(t + 1) * k * k].iter().sum();
                prop_assert!((slice - 1.0).abs() < 1e-8);
            }
        }

        #[test]
        fn frame_offset_shifts_scores_exactly_by_c((e, a, y) in instance(6, 4), frame in 0usize..6, c in -5.0f64..5.0) {
            let t = frame % e.len();
            let mut rows: Vec<Vec<f64>> = (0..e.len()).map(|r| e.frame(r).to_vec()).collect();
            rows[t].iter_mut().for_each(|v| *v += c);
            let shifted = EmissionSequence::from_rows(&rows).unwrap();
            let ds = path_score(&shifted, &a, &y).unwrap() - path_score(&e, &a, &y).unwrap();
            prop_assert!((ds - c).abs() < 1e-9);
            let dz = log_partition(&shifted, &a).unwrap() - log_partition(&e, &a).unwrap();
            prop_assert!((dz - c).abs() < 1e-9);
            let dl = crf_log_likelihood(&shifted, &a, &y).unwrap() - crf_log_likelihood(&e, &a, &y).unwrap();
            prop_assert!(dl.abs() < 1e-9);
        }

        #[test]
        fn viterbi_ignores_frame_offsets((e, a) in tied_instance(), frame in 0usize..6, c in prop_oneof![Just(1.0f64), Just(-4.0), Just(0.5)]) {
            // exactly representable offsets on dyadic data keep every sum exact
            let dyadic = |v: f64| (v * 8.0).round() / 8.0;
            let rows: Vec<Vec<f64>> = (0..e.len()).map(|r| e.frame(r).iter().map(|&v| dyadic(v)).collect()).collect();
            let a = TransitionMatrix::new(a.k, a.as_slice().iter().map(|&v| dyadic(v)).collect()).unwrap();
            let e = EmissionSequence::from_rows(&rows).unwrap();
            let mut shifted_rows = rows.clone();
            let t = frame % rows.len();
            shifted_rows[t].iter_mut().for_each(|v| *v += c);
            let shifted = EmissionSequence::from_rows(&shifted_rows).unwrap();
            prop_assert_eq!(viterbi(&e, &a).unwrap().0, viterbi(&shifted, &a).unwrap().0);
        }

        #[test]
        fn gradient_matches_finite_differences((e, a, y) in instance(5, 3)) {
            let g = transition_gradient(&e, &a, &y).unwrap();
            let k = a.k;
            let h = 1e-3;
            let ll_at = |x: usize, d: f64| {
                let mut v = a.as_slice().to_vec();
                v[x] += d;
                crf_log_likelihood(&e, &TransitionMatrix::new(k, v).unwrap(), &y).unwrap()
            };
            // roundoff of the stencil below, which no analytic gradient can beat
            let noise = 4.0 * f64::EPSILON * ll_at(0, 0.0).abs().max(1.0) / h;
            for x in 0..k * k {
                // fourth-order central difference
                let fd = (8.0 * (ll_at(x, h) - ll_at(x, -h)) - (ll_at(x, 2.0 * h) - ll_at(x, -2.0 * h)))
                    / (12.0 * h);
                let an = g.as_slice()[x];
                let scale = fd.abs().max(an.abs());
                if scale > 1e-6 {
                    prop_assert!((fd - an).abs() < 1e-6 * scale + noise, "entry {}: {} vs {}", x, an, fd);
                } else {
                    prop_assert!((fd - an).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn uniform_marginals_are_flat() {
        let m = forward_backward(&em(&[[0.3; 4]; 3]), &tm(&[[0.1; 4]; 4])).unwrap();
        assert!(m.node.iter().all(|p| (p - 0.25).abs() < 1e-12));
        let single = forward_backward(&em(&[&[1.0, 2.0]]), &TransitionMatrix::zeros(2)).unwrap();
        let s = crate::nn::softmax(&[1.0f64, 2.0]);
        assert!((single.node[0] - s[0]).abs() < 1e-12 && single.pair.is_empty());
    }
}
