//! The three decoders applied to one utterance.

use clap::ValueEnum;
use rawcnn::crf::{viterbi, TransitionMatrix};
use rawcnn::data::FrameSequence;
use rawcnn::eval::collapse_path;
use rawcnn::hmmdec::{build_duration_graph, hmm_decode};
use rawcnn::model::Model;
use rawcnn::real::argmax;
use rawcnn::Result;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    /// Per-frame argmax of the network scores.
    Argmax,
    /// Viterbi with the model's transition matrix (zeros if it has none).
    Crf,
    /// Minimum-duration HMM over softmax posteriors.
    Hmm,
}

/// Frame labels chosen by `decoder`.
pub fn decode_frames(model: &Model, seq: &FrameSequence, decoder: Decoder, min_duration: usize) -> Result<Vec<usize>> {
    match decoder {
        Decoder::Argmax => Ok(model.emissions(seq)?.scores().as_slice().chunks(model.config.num_classes).map(argmax).collect()),
        Decoder::Crf => {
            let e = model.emissions(seq)?;
            let a = match &model.transitions {
                Some(a) => a.cast::<f64>(),
                None => TransitionMatrix::zeros(model.config.num_classes),
            };
            Ok(viterbi(&e, &a)?.0)
        }
        Decoder::Hmm => {
            let graph = build_duration_graph(model.config.num_classes, min_duration)?;
            Ok(hmm_decode(&model.posteriors(seq)?, &graph)?.frame_labels)
        }
    }
}

/// Phoneme sequence: frame labels with the garbage class dropped and runs
/// merged.
pub fn decode_phonemes(model: &Model, seq: &FrameSequence, decoder: Decoder, min_duration: usize) -> Result<Vec<usize>> {
    let frames = decode_frames(model, seq, decoder, min_duration)?;
    Ok(collapse_path(&frames, model.alphabet.garbage().as_ref()))
}
