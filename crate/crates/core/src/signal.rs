//! Waveform framing: normalized analysis windows on a regular frame grid, and
//! alignment of segment annotations to that grid.
//!
//! Frame `t` is centered on sample `t * hop + hop / 2`. The waveform is
//! zero-padded symmetrically so that every frame sees a full window.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::FrameMatrix;
use crate::real::Real;

/// Default frame shift: 10 ms.
pub const DEFAULT_HOP_MS: u32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Samples per hop for the default 10 ms frame shift.
pub fn default_hop(sample_rate: u32) -> usize {
    (sample_rate * DEFAULT_HOP_MS / 1000).max(1) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub hop_samples: usize,
    pub window_samples: usize,
    pub num_frames: usize,
}

impl FrameGrid {
    /// Grid over a signal of `length` samples; `num_frames = length / hop`.
    pub fn new(length: usize, hop_samples: usize, window_samples: usize) -> Result<Self> {
        if hop_samples == 0 {
            return Err(Error::invalid("hop must be at least one sample"));
        }
        if window_samples == 0 {
            return Err(Error::invalid("window must be at least one sample"));
        }
        Ok(FrameGrid {
            hop_samples,
            window_samples,
            num_frames: length / hop_samples,
        })
    }

    pub fn center(&self, t: usize) -> usize {
        t * self.hop_samples + self.hop_samples / 2
    }
}

/// Shifts and scales `window` to zero mean and unit population variance.
/// A constant window maps to all zeros.
pub fn normalize_window<F: Real>(window: &[F]) -> Result<Vec<F>> {
    let mut out = window.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn normalize_in_place<F: Real>(window: &mut [F]) -> Result<()> {
    if window.is_empty() {
        return Err(Error::invalid("cannot normalize an empty window"));
    }
    let first = window[0];
    if window.iter().all(|&v| v == first) {
        window.iter_mut().for_each(|v| *v = F::zero());
        return Ok(());
    }
    let n = window.len() as f64;
    let mean = window.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = window
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        window.iter_mut().for_each(|v| *v = F::zero());
        return Ok(());
    }
    let inv_std = 1.0 / var.sqrt();
    for v in window.iter_mut() {
        *v = F::of((v.as_f64() - mean) * inv_std);
    }
    Ok(())
}

/// On-demand window extraction over a padded copy of the waveform, so training
/// never has to materialize every window of a corpus at once.
#[derive(Debug, Clone)]
pub struct WindowExtractor {
    padded: Vec<f32>,
    grid: FrameGrid,
}

impl WindowExtractor {
    pub fn new(w: &Waveform, grid: FrameGrid) -> Result<Self> {
        if grid.num_frames != w.len() / grid.hop_samples {
            return Err(Error::invalid(format!(
                "grid has {} frames but a {}-sample waveform at hop {} has {}",
                grid.num_frames,
                w.len(),
                grid.hop_samples,
                w.len() / grid.hop_samples
            )));
        }
        if grid.num_frames == 0 {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one hop ({})",
                w.len(),
                grid.hop_samples
            )));
        }
        let half = grid.window_samples / 2;
        let last_end = grid.center(grid.num_frames - 1) + grid.window_samples;
        let padded_len = (half + w.len()).max(last_end);
        if grid.window_samples > padded_len {
            return Err(Error::invalid(format!(
                "window of {} samples exceeds padded length {}",
                grid.window_samples, padded_len
            )));
        }
        let mut padded = vec![0.0f32; padded_len];
        padded[half..half + w.len()].copy_from_slice(w.samples());
        Ok(WindowExtractor { padded, grid })
    }

    pub fn grid(&self) -> FrameGrid {
        self.grid
    }

    /// Unnormalized samples of window `t`.
    pub fn raw_window(&self, t: usize) -> &[f32] {
        let start = self.grid.center(t);
        &self.padded[start..start + self.grid.window_samples]
    }

    /// Writes the normalized window `t` into `out`.
    pub fn window_into<F: Real>(&self, t: usize, out: &mut [F]) {
        for (o, &s) in out.iter_mut().zip(self.raw_window(t)) {
            *o = F::of(s as f64);
        }
        normalize_in_place(out).expect("window is non-empty");
    }
}

/// All normalized windows of `w`, one per grid frame.
pub fn extract_windows(w: &Waveform, grid: FrameGrid) -> Result<FrameMatrix<f32>> {
    let ex = WindowExtractor::new(w, grid)?;
    let width = grid.window_samples;
    let mut data = vec![0.0f32; grid.num_frames * width];
    for (t, chunk) in data.chunks_exact_mut(width).enumerate() {
        ex.window_into(t, chunk);
    }
    Ok(FrameMatrix::from_raw(grid.num_frames, width, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// Sorted, non-overlapping labeled sample ranges `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentAnnotation {
    segments: Vec<Segment>,
}

impl SegmentAnnotation {
    pub fn new(segments: Vec<Segment>, num_labels: usize) -> Result<Self> {
        let mut prev_end = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.start >= s.end {
                return Err(Error::data(format!(
                    "segment {i} is empty or reversed: [{}, {})",
                    s.start, s.end
                )));
            }
            if i > 0 && s.start < prev_end {
                return Err(Error::data(format!(
                    "segment {i} starts at {} before the previous segment ends at {prev_end}",
                    s.start
                )));
            }
            if s.label >= num_labels {
                return Err(Error::data(format!(
                    "segment {i} label {} outside alphabet of {num_labels}",
                    s.label
                )));
            }
            prev_end = s.end;
        }
        Ok(SegmentAnnotation { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn end(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().map(|s| s.label)
    }
}

/// Label of every grid frame: the segment containing the frame's center
/// sample, or `garbage` when no segment covers it.
pub fn frame_labels(
    ann: &SegmentAnnotation,
    grid: &FrameGrid,
    garbage: Option<usize>,
) -> Result<Vec<usize>> {
    let segs = ann.segments();
    let mut out = Vec::with_capacity(grid.num_frames);
    let mut k = 0;
    for t in 0..grid.num_frames {
        let c = grid.center(t);
        while k < segs.len() && segs[k].end <= c {
            k += 1;
        }
        match segs.get(k).filter(|s| s.start <= c) {
            Some(s) => out.push(s.label),
            None => match garbage {
                Some(g) => out.push(g),
                None => {
                    return Err(Error::data(format!(
                        "frame {t} (center sample {c}) is not covered by any segment \
                         and no garbage label is configured"
                    )))
                }
            },
        }
    }
    Ok(out)
}

/// Reads a mono 16-bit PCM WAV file, scaling samples by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected mono audio, found {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(path, "expected 16-bit signed PCM"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a mono 16-bit PCM WAV file. Samples are clamped to [-1, 1) and
/// rounded to the nearest step of 1/32768.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in w.samples() {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::format(path, other.to_string()),
    }
}

/// Reads a headerless little-endian `f32` sample file.
pub fn read_raw_f32(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let values = read_f32_file(path)?;
    if values.is_empty() {
        return Err(Error::format(path, "empty sample file"));
    }
    Waveform::new(values, sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a multiple of 4 bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// One line of a segment label file, label still as text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelLine {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Parses `start end label` lines; blank lines are skipped.
pub fn read_label_file(path: &Path) -> Result<Vec<LabelLine>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [start, end, label] = fields[..] else {
            return Err(parse_err(format!(
                "expected `start end label`, got {} fields",
                fields.len()
            )));
        };
        let start = start
            .parse()
            .map_err(|_| parse_err(format!("bad start sample `{start}`")))?;
        let end = end
            .parse()
            .map_err(|_| parse_err(format!("bad end sample `{end}`")))?;
        out.push(LabelLine {
            start,
            end,
            label: label.to_string(),
        });
    }
    Ok(out)
}

pub fn write_label_file(path: &Path, lines: &[LabelLine]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&format!("{} {} {}\n", l.start, l.end, l.label));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
