//! Corpus handling: labeled utterances, JSON-lines manifests, feature-matrix
//! files, the synthetic tone corpus, and per-frame training views.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{LabelAlphabet, LabelMapping};
use crate::frame::FrameMatrix;
use crate::real::Real;
use crate::seed::derive_seed;
use crate::signal::{
    frame_labels, read_label_file, read_wav, FrameGrid, LabelLine, Segment, SegmentAnnotation,
    Waveform, WindowExtractor,
};

/// How utterance inputs are turned into network input windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Frontend {
    /// Raw waveform windows, one frame every `hop_samples`.
    Raw { sample_rate: u32, hop_samples: usize },
    /// Precomputed feature frames of dimension `dim`, one per 10 ms.
    Features { dim: usize },
}

impl Frontend {
    pub fn input_dim(&self) -> usize {
        match *self {
            Frontend::Raw { .. } => 1,
            Frontend::Features { dim } => dim,
        }
    }

    /// Window length in input frames (samples for raw input) for a context
    /// of `ms` milliseconds.
    pub fn window_for_ms(&self, ms: u32) -> usize {
        match *self {
            Frontend::Raw { sample_rate, .. } => (sample_rate as usize * ms as usize) / 1000,
            Frontend::Features { .. } => ((ms as usize + 5) / 10).max(1),
        }
    }

    pub fn sample_rate(&self) -> Option<u32> {
        match *self {
            Frontend::Raw { sample_rate, .. } => Some(sample_rate),
            Frontend::Features { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UtteranceInput {
    Wave(Waveform),
    Features(FrameMatrix<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    /// Segments in samples (waveforms) or frames (feature matrices).
    Segments(SegmentAnnotation),
    Frames(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub id: String,
    pub input: UtteranceInput,
    pub annotation: Annotation,
}

impl LabeledUtterance {
    pub fn new(id: String, input: UtteranceInput, annotation: Annotation) -> Result<Self> {
        let len = match &input {
            UtteranceInput::Wave(w) => w.len(),
            UtteranceInput::Features(m) => m.rows(),
        };
        let span = match &annotation {
            Annotation::Segments(s) => s.end(),
            Annotation::Frames(f) => f.len(),
        };
        if span > len {
            return Err(Error::data(format!(
                "utterance {id}: annotation ends at {span}, past input length {len}"
            )));
        }
        Ok(LabeledUtterance {
            id,
            input,
            annotation,
        })
    }

    /// Reference label sequence with runs of identical segment labels merged.
    pub fn reference_labels(&self) -> Vec<usize> {
        match &self.annotation {
            Annotation::Segments(s) => crate::eval::collapse_path(&s.labels().collect::<Vec<_>>(), None),
            Annotation::Frames(f) => crate::eval::collapse_path(f, None),
        }
    }
}

/// Reads a headerless little-endian `f32` file of `dim`-dimensional frames.
pub fn load_feature_matrix(path: &Path, dim: usize) -> Result<FrameMatrix<f32>> {
    if dim == 0 {
        return Err(Error::invalid("feature dimension must be >= 1"));
    }
    let size = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len() as usize;
    if size % (4 * dim) != 0 {
        return Err(Error::format(
            path,
            format!(
                "size {size} is not divisible by {} (4 bytes x dimension {dim})",
                4 * dim
            ),
        ));
    }
    if size == 0 {
        return Err(Error::format(path, "feature file holds no frames"));
    }
    let values = crate::signal::read_f32_file(path)?;
    FrameMatrix::new(values.len() / dim, dim, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_feature_matrix(path: &Path, m: &FrameMatrix<f32>) -> Result<()> {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wav: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feat: Option<PathBuf>,
    labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputRef {
    Wav(PathBuf),
    Feat(PathBuf),
}

/// One manifest line. Files are only opened by [`ManifestEntry::load`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub input: InputRef,
    pub labels: PathBuf,
}

/// Settings needed to turn label text into class indices.
#[derive(Debug, Clone)]
pub struct LoadOptions<'a> {
    pub alphabet: &'a LabelAlphabet,
    pub mapping: Option<&'a LabelMapping>,
    /// Dimension of `feat` inputs.
    pub feature_dim: Option<usize>,
}

impl ManifestEntry {
    /// Reads only the input file.
    pub fn load_input(&self, feature_dim: Option<usize>) -> Result<UtteranceInput> {
        Ok(match &self.input {
            InputRef::Wav(p) => UtteranceInput::Wave(read_wav(p)?),
            InputRef::Feat(p) => {
                let dim = feature_dim.ok_or_else(|| {
                    Error::invalid(format!(
                        "utterance {} has a feature file but no feature dimension was given",
                        self.id
                    ))
                })?;
                UtteranceInput::Features(load_feature_matrix(p, dim)?)
            }
        })
    }

    pub fn load(&self, opts: &LoadOptions<'_>) -> Result<LabeledUtterance> {
        let input = self.load_input(opts.feature_dim)?;
        let lines = read_label_file(&self.labels)?;
        let segments = lines
            .iter()
            .map(|l| {
                let text = match opts.mapping {
                    Some(m) => m.map(&l.label)?,
                    None => &l.label,
                };
                Ok(Segment {
                    start: l.start,
                    end: l.end,
                    label: opts.alphabet.index_of(text)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::data(format!("{}: {e}", self.labels.display())))?;
        let ann = SegmentAnnotation::new(segments, opts.alphabet.len())
            .map_err(|e| Error::data(format!("{}: {e}", self.labels.display())))?;
        LabeledUtterance::new(self.id.clone(), input, Annotation::Segments(ann))
    }

    /// Label strings of the entry's label file, mapped if a table is given.
    pub fn label_strings(&self, mapping: Option<&LabelMapping>) -> Result<Vec<String>> {
        read_label_file(&self.labels)?
            .into_iter()
            .map(|l| match mapping {
                Some(m) => m.map(&l.label).map(String::from),
                None => Ok(l.label),
            })
            .collect()
    }
}

/// Parses a JSON-lines manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let input = match (rec.wav, rec.feat) {
            (Some(w), None) => InputRef::Wav(base.join(w)),
            (None, Some(f)) => InputRef::Feat(base.join(f)),
            _ => return Err(parse_err("exactly one of `wav` and `feat` is required".into())),
        };
        out.push(ManifestEntry {
            id: rec.id,
            input,
            labels: base.join(rec.labels),
        });
    }
    Ok(out)
}

/// Writes a manifest whose paths are relative to `dir` when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_path_buf();
    let mut text = String::new();
    for e in entries {
        let (wav, feat) = match &e.input {
            InputRef::Wav(p) => (Some(rel(p)), None),
            InputRef::Feat(p) => (None, Some(rel(p))),
        };
        let rec = ManifestRecord {
            id: e.id.clone(),
            wav,
            feat,
            labels: rel(&e.labels),
        };
        text.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Alphabet of every label used by the entries, sorted.
pub fn collect_alphabet(
    entries: &[ManifestEntry],
    mapping: Option<&LabelMapping>,
    garbage: Option<&str>,
) -> Result<LabelAlphabet> {
    let mut labels = std::collections::BTreeSet::new();
    for e in entries {
        labels.extend(e.label_strings(mapping)?);
    }
    if let Some(g) = garbage {
        labels.insert(g.to_string());
    }
    LabelAlphabet::new(labels.into_iter().collect(), garbage)
}

#[derive(Debug, Clone)]
enum Source {
    Wave(WindowExtractor),
    Features {
        padded: Vec<f32>,
        dim: usize,
        window: usize,
    },
}

/// An utterance viewed as a sequence of (input window, frame label) pairs.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub id: String,
    source: Source,
    frames: usize,
    labels: Vec<usize>,
    reference: Vec<usize>,
}

impl FrameSequence {
    /// `window` is the network input length in frames (samples for raw input).
    pub fn new(
        utt: &LabeledUtterance,
        frontend: &Frontend,
        window: usize,
        garbage: Option<usize>,
    ) -> Result<Self> {
        let wrap = |e: Error| Error::data(format!("utterance {}: {e}", utt.id));
        let (mut seq, grid) = Self::build(&utt.id, &utt.input, frontend, window)?;
        seq.labels = match &utt.annotation {
            Annotation::Segments(ann) => frame_labels(ann, &grid, garbage).map_err(wrap)?,
            Annotation::Frames(f) => {
                if f.len() != grid.num_frames {
                    return Err(wrap(Error::data(format!(
                        "{} frame labels for {} frames",
                        f.len(),
                        grid.num_frames
                    ))));
                }
                f.clone()
            }
        };
        seq.reference = utt.reference_labels();
        Ok(seq)
    }

    /// A sequence without labels, for decoding.
    pub fn unlabeled(id: &str, input: &UtteranceInput, frontend: &Frontend, window: usize) -> Result<Self> {
        Ok(Self::build(id, input, frontend, window)?.0)
    }

    fn build(
        id: &str,
        input: &UtteranceInput,
        frontend: &Frontend,
        window: usize,
    ) -> Result<(Self, FrameGrid)> {
        let wrap = |e: Error| Error::data(format!("utterance {id}: {e}"));
        let (source, grid) = match (input, frontend) {
            (UtteranceInput::Wave(w), Frontend::Raw { sample_rate, hop_samples }) => {
                if w.sample_rate() != *sample_rate {
                    return Err(wrap(Error::data(format!(
                        "sample rate {} differs from the model's {sample_rate}",
                        w.sample_rate()
                    ))));
                }
                let grid = FrameGrid::new(w.len(), *hop_samples, window).map_err(wrap)?;
                (Source::Wave(WindowExtractor::new(w, grid).map_err(wrap)?), grid)
            }
            (UtteranceInput::Features(m), Frontend::Features { dim }) => {
                if m.dim() != *dim {
                    return Err(wrap(Error::data(format!(
                        "feature dimension {} differs from the model's {dim}",
                        m.dim()
                    ))));
                }
                let half = window / 2;
                let mut padded = vec![0.0f32; (m.rows() + window) * dim];
                padded[half * dim..(half + m.rows()) * dim].copy_from_slice(m.as_slice());
                let grid = FrameGrid::new(m.rows(), 1, window).map_err(wrap)?;
                (
                    Source::Features {
                        padded,
                        dim: *dim,
                        window,
                    },
                    grid,
                )
            }
            _ => {
                return Err(wrap(Error::data(
                    "input kind does not match the frontend (waveform vs features)",
                )))
            }
        };
        let seq = FrameSequence {
            id: id.to_string(),
            source,
            frames: grid.num_frames,
            labels: Vec::new(),
            reference: Vec::new(),
        };
        Ok((seq, grid))
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    /// Per-frame labels; empty for unlabeled sequences.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Collapsed reference label sequence of the utterance.
    pub fn reference(&self) -> &[usize] {
        &self.reference
    }

    /// Number of values in one input window.
    pub fn window_len(&self) -> usize {
        match &self.source {
            Source::Wave(ex) => ex.grid().window_samples,
            Source::Features { dim, window, .. } => dim * window,
        }
    }

    pub fn window_shape(&self) -> (usize, usize) {
        match &self.source {
            Source::Wave(ex) => (ex.grid().window_samples, 1),
            Source::Features { dim, window, .. } => (*window, *dim),
        }
    }

    /// Writes the network input for frame `t` into `out`.
    pub fn window_into<F: Real>(&self, t: usize, out: &mut [F]) {
        match &self.source {
            Source::Wave(ex) => ex.window_into(t, out),
            Source::Features {
                padded,
                dim,
                window,
            } => {
                let src = &padded[t * dim..(t + window) * dim];
                for (o, &v) in out.iter_mut().zip(src) {
                    *o = F::of(v as f64);
                }
            }
        }
    }

    pub fn window<F: Real>(&self, t: usize) -> FrameMatrix<F> {
        let (rows, dim) = self.window_shape();
        let mut data = vec![F::zero(); rows * dim];
        self.window_into(t, &mut data);
        FrameMatrix::from_raw(rows, dim, data)
    }
}

/// Parameters of the synthetic tone-phoneme corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Fundamental of class `k` is `base_hz + step_hz * k`.
    pub base_hz: f64,
    pub step_hz: f64,
    pub amplitude: f64,
    /// Relative amplitude of the second harmonic.
    pub harmonic_gain: f64,
    pub noise_sigma: f64,
    pub segment_ms: (u32, u32),
    pub segments_per_utterance: (usize, usize),
    /// Row `j` weighs the classes that may follow class `j`.
    pub bigram: Option<Vec<Vec<f64>>>,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 5,
            base_hz: 300.0,
            step_hz: 400.0,
            amplitude: 0.5,
            harmonic_gain: 0.5,
            noise_sigma: 0.05,
            segment_ms: (60, 200),
            segments_per_utterance: (3, 6),
            bigram: None,
            sample_rate: 16000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn fundamental(&self, class: usize) -> f64 {
        self.base_hz + self.step_hz * class as f64
    }

    pub fn label(class: usize) -> String {
        format!("p{class}")
    }

    pub fn alphabet(&self) -> LabelAlphabet {
        LabelAlphabet::new((0..self.num_classes).map(Self::label).collect(), None)
            .expect("generated labels are unique")
    }

    pub fn frontend(&self) -> Frontend {
        Frontend::Raw {
            sample_rate: self.sample_rate,
            hop_samples: crate::signal::default_hop(self.sample_rate),
        }
    }

    /// Bigram weights that make `k -> k+1 (mod K)` `factor` times likelier
    /// than any other change of class, with no self-transitions.
    pub fn cyclic_bigram(num_classes: usize, factor: f64) -> Vec<Vec<f64>> {
        (0..num_classes)
            .map(|j| {
                (0..num_classes)
                    .map(|i| match i {
                        _ if i == j => 0.0,
                        _ if i == (j + 1) % num_classes => factor,
                        _ => 1.0,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic corpus needs at least two classes"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for k in 0..self.num_classes {
            let f = self.fundamental(k);
            if f <= 0.0 {
                return Err(Error::invalid(format!("class {k} frequency {f} Hz is not positive")));
            }
            if 2.0 * f >= nyquist {
                return Err(Error::invalid(format!(
                    "class {k} harmonic at {} Hz reaches the Nyquist frequency {nyquist} Hz",
                    2.0 * f
                )));
            }
        }
        let (lo, hi) = self.segment_ms;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("segment duration range must be 1 <= min <= max ms"));
        }
        let (lo, hi) = self.segments_per_utterance;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("segments per utterance must be 1 <= min <= max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and >= 0"));
        }
        if let Some(b) = &self.bigram {
            if b.len() != self.num_classes || b.iter().any(|r| r.len() != self.num_classes) {
                return Err(Error::invalid("bigram must be K x K"));
            }
            for (j, row) in b.iter().enumerate() {
                if row.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || row.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::invalid(format!(
                        "bigram row {j} needs non-negative weights with a positive sum"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<LabeledUtterance>,
    pub cv: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates one utterance. Each utterance draws from its own ChaCha8 stream
/// seeded by `derive_seed(spec.seed, stream)`.
pub fn synth_utterance(spec: &SynthSpec, id: String, stream: u64) -> Result<LabeledUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream));
    let k = spec.num_classes;
    let sr = spec.sample_rate as f64;
    let (smin, smax) = spec.segments_per_utterance;
    let count = rng.random_range(smin..=smax);
    let (dmin, dmax) = spec.segment_ms;
    let to_samples = |ms: u32| (ms as usize * spec.sample_rate as usize / 1000).max(1);

    let mut classes: Vec<usize> = Vec::with_capacity(count);
    for i in 0..count {
        let c = match (&spec.bigram, i) {
            (_, 0) | (None, _) => rng.random_range(0..k),
            (Some(b), _) => pick_weighted(&mut rng, &b[classes[i - 1]]),
        };
        classes.push(c);
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut samples = Vec::new();
    let mut segments = Vec::with_capacity(count);
    for &c in &classes {
        let len = rng.random_range(to_samples(dmin)..=to_samples(dmax));
        let f = spec.fundamental(c);
        let phase1 = rng.random_range(0.0..TAU);
        let phase2 = rng.random_range(0.0..TAU);
        let start = samples.len();
        for n in 0..len {
            let t = n as f64 / sr;
            let mut v = spec.amplitude * (TAU * f * t + phase1).sin()
                + spec.amplitude * spec.harmonic_gain * (TAU * 2.0 * f * t + phase2).sin();
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            // quantize to the 16-bit grid so in-memory and on-disk corpora agree
            let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0;
            samples.push(q as f32);
        }
        segments.push(Segment {
            start,
            end: start + len,
            label: c,
        });
    }
    let wave = Waveform::new(samples, spec.sample_rate)?;
    let ann = SegmentAnnotation::new(segments, k)?;
    LabeledUtterance::new(id, UtteranceInput::Wave(wave), Annotation::Segments(ann))
}

/// Generates disjoint train/cv/test splits. Utterance `i` of split `s` uses
/// stream `s * 2^32 + i`, so split sizes do not affect each other's content.
pub fn synth_corpus(spec: &SynthSpec, n_train: usize, n_cv: usize, n_test: usize) -> Result<Corpus> {
    spec.validate()?;
    let split = |tag: u64, name: &str, n: usize| {
        (0..n)
            .map(|i| synth_utterance(spec, format!("{name}-{i:05}"), (tag << 32) | i as u64))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Corpus {
        train: split(0, "train", n_train)?,
        cv: split(1, "cv", n_cv)?,
        test: split(2, "test", n_test)?,
    })
}

/// Writes an utterance as `<id>.wav` and `<id>.lab` under `dir` and returns
/// its manifest entry.
pub fn write_utterance(
    dir: &Path,
    utt: &LabeledUtterance,
    alphabet: &LabelAlphabet,
) -> Result<ManifestEntry> {
    let UtteranceInput::Wave(w) = &utt.input else {
        return Err(Error::invalid("only waveform utterances can be written"));
    };
    let Annotation::Segments(ann) = &utt.annotation else {
        return Err(Error::invalid("only segment annotations can be written"));
    };
    let wav = dir.join(format!("{}.wav", utt.id));
    let labels = dir.join(format!("{}.lab", utt.id));
    crate::signal::write_wav(&wav, w)?;
    let lines: Vec<LabelLine> = ann
        .segments()
        .iter()
        .map(|s| LabelLine {
            start: s.start,
            end: s.end,
            label: alphabet.label(s.label).to_string(),
        })
        .collect();
    crate::signal::write_label_file(&labels, &lines)?;
    Ok(ManifestEntry {
        id: utt.id.clone(),
        input: InputRef::Wav(wav),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave_of(u: &LabeledUtterance) -> &Waveform {
        match &u.input {
            UtteranceInput::Wave(w) => w,
            _ => panic!("expected waveform"),
        }
    }

    fn segments_of(u: &LabeledUtterance) -> &[Segment] {
        match &u.annotation {
            Annotation::Segments(s) => s.segments(),
            _ => panic!("expected segments"),
        }
    }

    #[test]
    fn noiseless_single_segment_is_a_two_tone() {
        let spec = SynthSpec {
            num_classes: 2,
            noise_sigma: 0.0,
            segments_per_utterance: (1, 1),
            ..SynthSpec::default()
        };
        let u = synth_utterance(&spec, "u".into(), 3).unwrap();
        let w = wave_of(&u);
        let segs = segments_of(&u);
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start, segs[0].end), (0, w.len()));
        let f = spec.fundamental(segs[0].label);
        // least-squares fit on sin/cos at f and 2f, then check amplitudes and residual
        let sr = spec.sample_rate as f64;
        let basis = |n: usize| {
            let t = n as f64 / sr;
            [
                (TAU * f * t).sin(),
                (TAU * f * t).cos(),
                (TAU * 2.0 * f * t).sin(),
                (TAU * 2.0 * f * t).cos(),
            ]
        };
        let mut a = [[0.0f64; 5]; 4];
        for (n, &x) in w.samples().iter().enumerate() {
            let b = basis(n);
            for i in 0..4 {
                for j in 0..4 {
                    a[i][j] += b[i] * b[j];
                }
                a[i][4] += b[i] * x as f64;
            }
        }
        for i in 0..4 {
            for r in 0..4 {
                if r != i {
                    let m = a[r][i] / a[i][i];
                    for c in 0..5 {
                        a[r][c] -= m * a[i][c];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..4).map(|i| a[i][4] / a[i][i]).collect();
        assert!((coef[0].hypot(coef[1]) - 0.5).abs() < 1e-3);
        assert!((coef[2].hypot(coef[3]) - 0.25).abs() < 1e-3);
        for (n, &x) in w.samples().iter().enumerate() {
            let b = basis(n);
            let fit: f64 = (0..4).map(|i| coef[i] * b[i]).sum();
            assert!((x as f64 - fit).abs() < 1e-4, "sample {n}");
        }
    }

    #[test]
    fn corpus_is_deterministic_and_tiles() {
        let spec = SynthSpec {
            seed: 11,
            ..SynthSpec::default()
        };
        let a = synth_corpus(&spec, 4, 2, 2).unwrap();
        let b = synth_corpus(&spec, 4, 2, 2).unwrap();
        assert_eq!(a, b);
        for u in a.train.iter().chain(&a.cv).chain(&a.test) {
            let segs = segments_of(u);
            assert_eq!(segs[0].start, 0);
            assert_eq!(segs.last().unwrap().end, wave_of(u).len());
            assert!(segs.windows(2).all(|p| p[0].end == p[1].start));
        }
        let ids: std::collections::HashSet<_> =
            a.train.iter().chain(&a.cv).chain(&a.test).map(|u| &u.id).collect();
        assert_eq!(ids.len(), 8);
        // split sizes do not perturb other splits
        assert_eq!(synth_corpus(&spec, 4, 5, 0).unwrap().train, a.train);
    }

    #[test]
    fn forbidden_self_transitions_never_occur() {
        let spec = SynthSpec {
            bigram: Some(SynthSpec::cyclic_bigram(5, 10.0)),
            segment_ms: (5, 10),
            seed: 4,
            ..SynthSpec::default()
        };
        let corpus = synth_corpus(&spec, 1000, 0, 0).unwrap();
        for u in &corpus.train {
            let segs = segments_of(u);
            assert!(segs.windows(2).all(|p| p[0].label != p[1].label), "{}", u.id);
        }
    }

    #[test]
    fn nyquist_violation_names_frequency() {
        let spec = SynthSpec {
            num_classes: 12,
            ..SynthSpec::default()
        };
        let err = synth_corpus(&spec, 1, 0, 0).unwrap_err().to_string();
        assert!(err.contains("8600"), "{err}");
    }

    #[test]
    fn feature_matrix_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let values: Vec<f32> = (0..78).map(|i| i as f32 * 0.5).collect();
        std::fs::write(&p, values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
        let m = load_feature_matrix(&p, 39).unwrap();
        assert_eq!((m.rows(), m.dim()), (2, 39));
        assert_eq!(m.as_slice(), &values[..]);
        assert_eq!(load_feature_matrix(&p, 78).unwrap().rows(), 1);
        let err = load_feature_matrix(&p, 40).unwrap_err().to_string();
        assert!(err.contains("160"), "{err}");
        std::fs::write(&p, b"").unwrap();
        assert!(matches!(load_feature_matrix(&p, 39), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
        std::fs::write(&p, "{\"id\": \"a\", \"wav\": \"a.wav\", \"labels\": \"a.lab\"}\n").unwrap();
        let entries = load_manifest(&p).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].input, InputRef::Wav(dir.path().join("a.wav")));
        std::fs::write(
            &p,
            "{\"id\": \"a\", \"wav\": \"a.wav\", \"labels\": \"a.lab\"}\n{\"id\": \"b\", \"wav\": \"b.wav\"}\n",
        )
        .unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let missing = dir.path().join("nope.jsonl");
        assert!(matches!(load_manifest(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn written_corpus_loads_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let corpus = synth_corpus(&spec, 2, 0, 0).unwrap();
        let alphabet = spec.alphabet();
        let entries: Vec<_> = corpus
            .train
            .iter()
            .map(|u| write_utterance(dir.path(), u, &alphabet).unwrap())
            .collect();
        let manifest = dir.path().join("train.jsonl");
        write_manifest(&manifest, &entries).unwrap();
        let opts = LoadOptions {
            alphabet: &alphabet,
            mapping: None,
            feature_dim: None,
        };
        let loaded: Vec<_> = load_manifest(&manifest)
            .unwrap()
            .iter()
            .map(|e| e.load(&opts).unwrap())
            .collect();
        assert_eq!(loaded, corpus.train);
    }

    #[test]
    fn feature_frame_sequences_use_frame_units() {
        let m = FrameMatrix::new(4, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        let ann = SegmentAnnotation::new(
            vec![
                Segment { start: 0, end: 1, label: 0 },
                Segment { start: 1, end: 4, label: 1 },
            ],
            2,
        )
        .unwrap();
        let utt = LabeledUtterance::new("f".into(), UtteranceInput::Features(m), Annotation::Segments(ann)).unwrap();
        let seq = FrameSequence::new(&utt, &Frontend::Features { dim: 2 }, 3, None).unwrap();
        assert_eq!(seq.labels(), &[0, 1, 1, 1]);
        let w: FrameMatrix<f32> = seq.window(0);
        assert_eq!(w.as_slice(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let w: FrameMatrix<f32> = seq.window(3);
        assert_eq!(w.as_slice(), &[4.0, 5.0, 6.0, 7.0, 0.0, 0.0]);
        assert!(FrameSequence::new(&utt, &Frontend::Raw { sample_rate: 16000, hop_samples: 160 }, 3, None).is_err());
    }
}
