//! Magnitude spectra of first-layer convolution filters.

use rawcnn::data::Frontend;
use rawcnn::model::Model;
use rawcnn::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const DEFAULT_N_FFT: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpectrum {
    pub filter: usize,
    /// Magnitudes of bins `0..=n_fft / 2`.
    pub magnitudes: Vec<f64>,
}

impl FilterSpectrum {
    /// Bin with the largest magnitude; the lowest such bin on ties.
    pub fn peak_bin(&self) -> usize {
        rawcnn::real::argmax(&self.magnitudes)
    }
}

/// Zero-pads each filter to `n_fft` samples and returns the one-sided DFT
/// magnitudes.
pub fn filter_spectra(filters: &[Vec<f64>], n_fft: usize) -> Result<Vec<FilterSpectrum>> {
    if n_fft < 2 {
        return Err(Error::InvalidArgument("n_fft must be >= 2".into()));
    }
    if let Some(f) = filters.iter().find(|f| f.len() > n_fft) {
        return Err(Error::InvalidArgument(format!(
            "filter length {} exceeds n_fft {n_fft}",
            f.len()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    Ok(filters
        .iter()
        .enumerate()
        .map(|(filter, taps)| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &v) in buf.iter_mut().zip(taps) {
                c.re = v;
            }
            fft.process(&mut buf);
            FilterSpectrum {
                filter,
                magnitudes: buf[..=n_fft / 2].iter().map(|c| c.norm()).collect(),
            }
        })
        .collect())
}

/// First-layer filters of a raw-waveform model and its sample rate.
pub fn first_layer_filters(model: &Model) -> Result<(Vec<Vec<f64>>, u32)> {
    let Frontend::Raw { sample_rate, .. } = model.frontend else {
        return Err(Error::Shape("filter spectra need a raw-waveform model".into()));
    };
    let conv = model
        .params
        .conv
        .first()
        .ok_or_else(|| Error::Shape("model has no convolution stage".into()))?;
    if conv.in_dim != 1 {
        return Err(Error::Shape(format!(
            "first layer has input dimension {}, spectra need 1",
            conv.in_dim
        )));
    }
    let filters = (0..conv.out_dim)
        .map(|o| conv.filter(o).iter().map(|&v| v as f64).collect())
        .collect();
    Ok((filters, sample_rate))
}

pub fn bin_frequency(bin: usize, sample_rate: u32, n_fft: usize) -> f64 {
    bin as f64 * sample_rate as f64 / n_fft as f64
}

/// `filter,bin,frequency_hz,magnitude` rows.
pub fn spectra_csv(spectra: &[FilterSpectrum], sample_rate: u32, n_fft: usize) -> String {
    let mut out = String::from("filter,bin,frequency_hz,magnitude\n");
    for s in spectra {
        for (bin, m) in s.magnitudes.iter().enumerate() {
            out.push_str(&format!(
                "{},{bin},{:.4},{m:.9}\n",
                s.filter,
                bin_frequency(bin, sample_rate, n_fft)
            ));
        }
    }
    out
}

/// `filter,peak_bin,peak_frequency_hz,peak_magnitude` rows.
pub fn peaks_csv(spectra: &[FilterSpectrum], sample_rate: u32, n_fft: usize) -> String {
    let mut out = String::from("filter,peak_bin,peak_frequency_hz,peak_magnitude\n");
    for s in spectra {
        let bin = s.peak_bin();
        out.push_str(&format!(
            "{},{bin},{:.4},{:.9}\n",
            s.filter,
            bin_frequency(bin, sample_rate, n_fft),
            s.magnitudes[bin]
        ));
    }
    out
}
