//! Per-frame stochastic gradient ascent on the log-likelihood of the correct
//! class, early stopping on a cross-validation set, and grid search.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FrameSequence, Frontend, LabeledUtterance};
use crate::error::{Error, Result};
use crate::eval::{collapse_path, frame_accuracy, pooled_accuracy, align};
use crate::frame::FrameMatrix;
use crate::nn::{backward_into, forward_pass, softmax, NetworkConfig, NetworkParams, StageConfig};
use crate::real::{argmax, Real};
use crate::seed::derive_seed;

/// `log(sum(exp(z)))`, shifted by `max(z)` so it cannot overflow.
pub fn logadd<F: Real>(z: &[F]) -> Result<F> {
    if z.is_empty() {
        return Err(Error::invalid("logadd of an empty vector"));
    }
    Ok(logadd_unchecked(z))
}

#[inline]
pub(crate) fn logadd_unchecked<F: Real>(z: &[F]) -> F {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + z.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// `f[target] - logadd(f)`: log-probability of `target` under the softmax of
/// the scores.
pub fn frame_log_likelihood<F: Real>(scores: &[F], target: usize) -> Result<F> {
    if target >= scores.len() {
        return Err(Error::invalid(format!(
            "target class {target} outside {} scores",
            scores.len()
        )));
    }
    Ok(scores[target] - logadd(scores)?)
}

/// Gradient of [`frame_log_likelihood`] with respect to the scores:
/// `onehot(target) - softmax(scores)`.
pub fn score_gradient<F: Real>(scores: &[F], target: usize) -> Vec<F> {
    let mut g = softmax(scores);
    g.iter_mut().for_each(|v| *v = -*v);
    g[target] += F::one();
    g
}

/// One ascent step: `theta += lr * grad` for every parameter.
pub fn sgd_step<F: Real>(params: &mut NetworkParams<F>, grads: &NetworkParams<F>, lr: F) -> Result<()> {
    let infos = grads.tensor_infos();
    for (info, g) in infos.iter().zip(grads.tensors()) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient in {} at index {i}",
                info.name
            )));
        }
    }
    if lr == F::zero() {
        return Ok(());
    }
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        if p.len() != g.len() {
            return Err(Error::shape("gradient shape does not match parameters"));
        }
        for (pv, &gv) in p.iter_mut().zip(g) {
            *pv += lr * gv;
        }
    }
    Ok(())
}

/// Metric used to pick the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    FrameAccuracy,
    /// Phoneme accuracy of collapsed per-frame argmax decoding.
    PhonemeAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without cv improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            shuffle: true,
            selection: SelectionMetric::FrameAccuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("max_epochs and patience must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-frame log-likelihood over the epoch's updates.
    pub train_log_likelihood: f64,
    pub cv_frame_accuracy: f64,
    /// Value of the selection metric (equals `cv_frame_accuracy` by default).
    pub cv_score: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Class scores for every frame of an utterance.
pub fn utterance_scores<F: Real>(params: &NetworkParams<F>, seq: &FrameSequence) -> Result<Vec<Vec<F>>> {
    let mut window: FrameMatrix<F> = seq.window(0);
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        seq.window_into(t, window.as_mut_slice());
        out.push(forward_pass(&window, params)?.0);
    }
    Ok(out)
}

/// Pooled cv frame accuracy and the requested selection score.
pub fn evaluate(
    params: &NetworkParams<f32>,
    cv: &[FrameSequence],
    metric: SelectionMetric,
) -> Result<(f64, f64)> {
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let mut alignments = Vec::new();
    for seq in cv {
        let hyp: Vec<usize> = utterance_scores(params, seq)?
            .iter()
            .map(|s| argmax(s))
            .collect();
        if metric == SelectionMetric::PhonemeAccuracy && !seq.reference().is_empty() {
            alignments.push(align(seq.reference(), &collapse_path(&hyp, None)));
        }
        refs.extend_from_slice(seq.labels());
        hyps.extend(hyp);
    }
    let frame = frame_accuracy(&refs, &hyps)?;
    let score = match metric {
        SelectionMetric::FrameAccuracy => frame,
        SelectionMetric::PhonemeAccuracy => pooled_accuracy(&alignments).unwrap_or(0.0),
    };
    Ok((frame, score))
}

/// Trains from a seeded initialization, one update per training frame, and
/// returns the parameters of the epoch with the best cv score.
pub fn train_network(
    train: &[FrameSequence],
    cv: &[FrameSequence],
    config: &NetworkConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    config.validate()?;
    let frames: usize = train.iter().map(FrameSequence::len).sum();
    if frames == 0 || cv.iter().all(FrameSequence::is_empty) {
        return Err(Error::invalid("training and cv sets must both contain frames"));
    }
    let k = config.num_classes;
    for seq in train.iter().chain(cv) {
        if seq.window_shape() != (config.input_window, config.input_dim) {
            return Err(Error::shape(format!(
                "utterance {} yields {:?} windows, network expects {}x{}",
                seq.id,
                seq.window_shape(),
                config.input_window,
                config.input_dim
            )));
        }
        if seq.labels().len() != seq.len() {
            return Err(Error::data(format!("utterance {} has no frame labels", seq.id)));
        }
        if let Some(&bad) = seq.labels().iter().find(|&&l| l >= k) {
            return Err(Error::data(format!(
                "utterance {} has label {bad} but the network has {k} classes",
                seq.id
            )));
        }
    }

    let mut params = NetworkParams::<f32>::init(config, tc.seed)?;
    let mut grads = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 1));
    let mut order: Vec<(u32, u32)> = train
        .iter()
        .enumerate()
        .flat_map(|(u, s)| (0..s.len() as u32).map(move |t| (u as u32, t)))
        .collect();
    let lr = tc.learning_rate as f32;
    let mut window: FrameMatrix<f32> = FrameMatrix::zeros(config.input_window, config.input_dim);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, NetworkParams<f32>)> = None;
    let mut stale = 0;
    for epoch in 1..=tc.max_epochs {
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0f64;
        for &(u, t) in &order {
            let seq = &train[u as usize];
            let target = seq.labels()[t as usize];
            seq.window_into(t as usize, window.as_mut_slice());
            let (scores, cache) = forward_pass(&window, &params)?;
            let ll = frame_log_likelihood(&scores, target)?;
            if !ll.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite log-likelihood at epoch {epoch}, utterance {}, frame {t}",
                    seq.id
                )));
            }
            total += ll as f64;
            let d_scores = score_gradient(&scores, target);
            backward_into(&cache, &params, &d_scores, &mut grads, false)?;
            sgd_step(&mut params, &grads, lr).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!(
                    "{m} at epoch {epoch}, utterance {}, frame {t}",
                    seq.id
                )),
                other => other,
            })?;
        }
        let (cv_frame, cv_score) = evaluate(&params, cv, tc.selection)?;
        history.push(EpochRecord {
            epoch,
            train_log_likelihood: total / frames as f64,
            cv_frame_accuracy: cv_frame,
            cv_score,
        });
        if best.as_ref().is_none_or(|(b, _, _)| cv_score > *b) {
            best = Some((cv_score, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

/// `epoch,train_log_likelihood,cv_frame_accuracy` rows.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_log_likelihood,cv_frame_accuracy\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.4}\n",
            r.epoch, r.train_log_likelihood, r.cv_frame_accuracy
        ));
    }
    out
}

/// Candidate values for each searched hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub window_ms: Vec<u32>,
    /// Candidate kernel widths, one list per filter stage.
    pub kernel_widths: Vec<Vec<usize>>,
    /// Filters per stage (shared by all stages).
    pub filters: Vec<usize>,
    pub hidden_units: Vec<usize>,
    /// Pool width (shared by all stages).
    pub pool_widths: Vec<usize>,
    /// Train only this many configurations, drawn without replacement.
    pub sample: Option<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let kw = vec![1, 3, 5, 7, 9];
        GridSpec {
            window_ms: vec![100, 200, 300, 400, 500, 600, 700],
            kernel_widths: vec![kw.clone(), kw.clone(), kw],
            filters: vec![10, 30, 50, 70, 90],
            hidden_units: vec![100, 500, 1000, 1500],
            pool_widths: vec![3],
            sample: None,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = self.window_ms.is_empty()
            || self.kernel_widths.iter().any(Vec::is_empty)
            || self.filters.is_empty()
            || self.hidden_units.is_empty()
            || self.pool_widths.is_empty();
        if empty {
            return Err(Error::invalid("every grid dimension needs at least one candidate"));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.window_ms.len()
            * self.kernel_widths.iter().map(Vec::len).product::<usize>()
            * self.filters.len()
            * self.hidden_units.len()
            * self.pool_widths.len()
    }

    /// Configuration number `ordinal` of the Cartesian product. Stage shifts
    /// come from `base` (1 for stages `base` does not have).
    pub fn config(&self, ordinal: usize, base: &NetworkConfig, frontend: &Frontend) -> NetworkConfig {
        let mut rest = ordinal;
        let mut take = |n: usize| {
            let i = rest % n;
            rest /= n;
            i
        };
        // innermost dimension varies fastest: pool, hidden, filters, kW (last stage first), window
        let pool = self.pool_widths[take(self.pool_widths.len())];
        let hidden = self.hidden_units[take(self.hidden_units.len())];
        let filters = self.filters[take(self.filters.len())];
        let mut kws: Vec<usize> = self
            .kernel_widths
            .iter()
            .rev()
            .map(|c| c[take(c.len())])
            .collect();
        kws.reverse();
        let window_ms = self.window_ms[take(self.window_ms.len())];
        NetworkConfig {
            input_window: frontend.window_for_ms(window_ms),
            input_dim: frontend.input_dim(),
            stages: kws
                .iter()
                .enumerate()
                .map(|(s, &kw)| {
                    let shift = base.stages.get(s).map_or(1, |st| st.shift);
                    StageConfig::new(kw, shift, filters, pool)
                })
                .collect(),
            hidden_units: hidden,
            num_classes: base.num_classes,
        }
    }

    /// Ordinals to train: all of them, or a seeded sample in increasing order.
    pub fn ordinals(&self, seed: u64) -> Vec<usize> {
        let total = self.size();
        match self.sample {
            Some(n) if n < total => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6772_6964));
                let mut picked = rand::seq::index::sample(&mut rng, total, n).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..total).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub ordinal: usize,
    pub window_ms: u32,
    pub config: NetworkConfig,
    pub param_count: Option<usize>,
    pub outcome: std::result::Result<f64, String>,
}

/// Trains every selected grid configuration and ranks them by cv score
/// (descending), then parameter count, then ordinal. Failed configurations
/// are listed last. Configuration `i` trains with seed
/// `derive_seed(tc.seed, i)`, so results do not depend on `threads`.
pub fn grid_search(
    train: &[LabeledUtterance],
    cv: &[LabeledUtterance],
    frontend: &Frontend,
    garbage: Option<usize>,
    grid: &GridSpec,
    base: &NetworkConfig,
    tc: &TrainConfig,
    threads: usize,
) -> Result<Vec<GridResult>> {
    grid.validate()?;
    let ordinals = grid.ordinals(tc.seed);
    let ms_of = |ordinal: usize| {
        let inner = grid.size() / grid.window_ms.len();
        grid.window_ms[ordinal / inner]
    };

    let run_one = |ordinal: usize| -> GridResult {
        let config = grid.config(ordinal, base, frontend);
        let param_count = config.param_count().ok();
        let outcome = (|| {
            let prep = |utts: &[LabeledUtterance]| {
                utts.iter()
                    .map(|u| FrameSequence::new(u, frontend, config.input_window, garbage))
                    .collect::<Result<Vec<_>>>()
            };
            let tc = TrainConfig {
                seed: derive_seed(tc.seed, ordinal as u64),
                ..tc.clone()
            };
            let out = train_network(&prep(train)?, &prep(cv)?, &config, &tc)?;
            Ok::<f64, Error>(out.best().cv_score)
        })()
        .map_err(|e| e.to_string());
        GridResult {
            ordinal,
            window_ms: ms_of(ordinal),
            config,
            param_count,
            outcome,
        }
    };

    let results: Vec<GridResult> = if threads <= 1 {
        ordinals.iter().map(|&o| run_one(o)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<GridResult>>> = Mutex::new(vec![None; ordinals.len()]);
        std::thread::scope(|scope| {
            for _ in 0..threads.min(ordinals.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&ordinal) = ordinals.get(i) else { break };
                    let r = run_one(ordinal);
                    slots.lock().expect("no panics while holding the lock")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("workers finished")
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    };

    let mut ranked = results;
    ranked.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => y
            .total_cmp(x)
            .then(a.param_count.cmp(&b.param_count))
            .then(a.ordinal.cmp(&b.ordinal)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.ordinal.cmp(&b.ordinal),
    });
    Ok(ranked)
}

pub fn grid_csv(results: &[GridResult]) -> String {
    let mut out = String::from(
        "rank,ordinal,window_ms,kernel_widths,shifts,filters,pool_width,hidden_units,cv_accuracy,param_count,status\n",
    );
    for (rank, r) in results.iter().enumerate() {
        let join = |f: fn(&StageConfig) -> usize| {
            r.config
                .stages
                .iter()
                .map(|s| f(s).to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let first = r.config.stages.first();
        let (acc, status) = match &r.outcome {
            Ok(a) => (format!("{a:.4}"), "ok".to_string()),
            Err(e) => (String::new(), format!("\"error: {}\"", e.replace('"', "'"))),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            rank + 1,
            r.ordinal,
            r.window_ms,
            join(|s| s.kernel_width),
            join(|s| s.shift),
            first.map_or(0, |s| s.filters),
            first.map_or(1, |s| s.pool_width),
            r.config.hidden_units,
            acc,
            r.param_count.map_or(String::new(), |c| c.to_string()),
            status
        ));
    }
    out
}
