//! Model container: magic `RCN1`, a little-endian `u32` header length, a JSON
//! header, then every tensor as raw little-endian `f32` values in header
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crf::{EmissionSequence, TransitionMatrix};
use crate::data::{FrameSequence, Frontend};
use crate::error::{Error, Result};
use crate::eval::LabelAlphabet;
use crate::nn::{softmax, NetworkConfig, NetworkParams, TensorInfo};
use crate::train::utterance_scores;

pub const MAGIC: &[u8; 4] = b"RCN1";
pub const TRANSITIONS_TENSOR: &str = "crf.A";
const MAX_HEADER: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub alphabet: LabelAlphabet,
    pub frontend: Frontend,
    pub params: NetworkParams<f32>,
    /// CRF transitions, if trained.
    pub transitions: Option<TransitionMatrix<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetworkConfig,
    alphabet: LabelAlphabet,
    frontend: Frontend,
    tensors: Vec<TensorInfo>,
}

impl Model {
    pub fn new(
        config: NetworkConfig,
        alphabet: LabelAlphabet,
        frontend: Frontend,
        params: NetworkParams<f32>,
    ) -> Result<Self> {
        config.validate()?;
        if alphabet.len() != config.num_classes {
            return Err(Error::invalid(format!(
                "{} labels for {} network classes",
                alphabet.len(),
                config.num_classes
            )));
        }
        if frontend.input_dim() != config.input_dim {
            return Err(Error::invalid("frontend and network disagree on input dimension"));
        }
        if NetworkParams::<f32>::zeros(&config)?.tensor_infos() != params.tensor_infos() {
            return Err(Error::shape("parameters do not match the network configuration"));
        }
        Ok(Model {
            config,
            alphabet,
            frontend,
            params,
            transitions: None,
        })
    }

    pub fn with_transitions(mut self, a: TransitionMatrix<f32>) -> Result<Self> {
        if a.num_labels() != self.config.num_classes {
            return Err(Error::shape("transition matrix size differs from the class count"));
        }
        self.transitions = Some(a);
        Ok(self)
    }

    fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut infos = self.params.tensor_infos();
        if let Some(a) = &self.transitions {
            infos.push(TensorInfo {
                name: TRANSITIONS_TENSOR.into(),
                shape: vec![a.num_labels(), a.num_labels()],
            });
        }
        infos
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            alphabet: self.alphabet.clone(),
            frontend: self.frontend,
            tensors: self.tensor_infos(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let extra = self.transitions.as_ref().map(|a| a.as_slice());
        for t in self.params.tensors().into_iter().chain(extra) {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err("missing RCN1 magic".into());
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if len > MAX_HEADER || 8 + len > bytes.len() {
            return Err(format!("header length {len} exceeds the file"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[8..8 + len]).map_err(|e| format!("bad header: {e}"))?;
        let alphabet = header.alphabet.reindex().map_err(|e| e.to_string())?;
        let mut params = NetworkParams::<f32>::zeros(&header.config).map_err(|e| e.to_string())?;
        let expected = params.tensor_infos();
        let k = header.config.num_classes;
        let has_crf = match header.tensors.len().checked_sub(expected.len()) {
            Some(0) => false,
            Some(1) => {
                let last = &header.tensors[expected.len()];
                if last.name != TRANSITIONS_TENSOR || last.shape != [k, k] {
                    return Err(format!("unexpected tensor {} {:?}", last.name, last.shape));
                }
                true
            }
            _ => return Err("tensor list does not match the configuration".into()),
        };
        if header.tensors[..expected.len()] != expected[..] {
            return Err("tensor list does not match the configuration".into());
        }

        let mut payload = bytes[8 + len..].chunks_exact(4);
        let values_needed = params.len() + if has_crf { k * k } else { 0 };
        if payload.len() != values_needed || !payload.remainder().is_empty() {
            return Err(format!(
                "expected {} tensor bytes, found {}",
                4 * values_needed,
                bytes.len() - 8 - len
            ));
        }
        let mut next = || f32::from_le_bytes(payload.next().expect("length checked").try_into().expect("4 bytes"));
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = next());
        }
        let transitions = if has_crf {
            let a: Vec<f32> = (0..k * k).map(|_| next()).collect();
            Some(TransitionMatrix::new(k, a).map_err(|e| e.to_string())?)
        } else {
            None
        };
        if params.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err("non-finite parameter value".into());
        }
        let model = Model::new(header.config, alphabet, header.frontend, params).map_err(|e| e.to_string())?;
        Ok(Model { transitions, ..model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Per-frame class scores for one utterance.
    pub fn scores(&self, seq: &FrameSequence) -> Result<Vec<Vec<f32>>> {
        utterance_scores(&self.params, seq)
    }

    /// Per-frame softmax posteriors.
    pub fn posteriors(&self, seq: &FrameSequence) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .scores(seq)?
            .iter()
            .map(|s| softmax(&s.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect())
    }

    pub fn emissions(&self, seq: &FrameSequence) -> Result<EmissionSequence<f64>> {
        EmissionSequence::from_rows(&self.scores(seq)?)
    }
}
