//! Run configuration: a JSON file, command-line overrides on top, and the
//! resolved result echoed next to every command's outputs.

use std::path::Path;

use rawcnn::crf::CrfTrainConfig;
use rawcnn::data::{Frontend, SynthSpec};
use rawcnn::gradcheck::GradCheckConfig;
use rawcnn::hmmdec::DEFAULT_MIN_DURATION;
use rawcnn::nn::{NetworkConfig, StageConfig};
use rawcnn::seed::derive_seed;
use rawcnn::train::{GridSpec, TrainConfig};
use rawcnn::{Error, Result};
use serde::{Deserialize, Serialize};

/// Network shape independent of the input frontend and alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub window_ms: u32,
    pub stages: Vec<StageConfig>,
    pub hidden_units: usize,
}

impl Default for NetworkSpec {
    /// 270 ms window, three stages of 90 filters, 500 hidden units.
    fn default() -> Self {
        NetworkSpec {
            window_ms: 270,
            stages: vec![
                StageConfig::new(10, 10, 90, 3),
                StageConfig::new(5, 1, 90, 3),
                StageConfig::new(9, 1, 90, 3),
            ],
            hidden_units: 500,
        }
    }
}

impl NetworkSpec {
    pub fn resolve(&self, frontend: &Frontend, num_classes: usize) -> Result<NetworkConfig> {
        let config = NetworkConfig {
            input_window: frontend.window_for_ms(self.window_ms),
            input_dim: frontend.input_dim(),
            stages: self.stages.clone(),
            hidden_units: self.hidden_units,
            num_classes,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Utterances per split for `synth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub cv: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            cv: 40,
            test: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Every component seed is derived from it.
    pub seed: u64,
    pub synth: SynthSpec,
    pub counts: SplitCounts,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub crf: CrfTrainConfig,
    pub grid: GridSpec,
    pub gradcheck: GradCheckConfig,
    /// Minimum phoneme duration in frames for HMM decoding.
    pub min_duration: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthSpec::default(),
            counts: SplitCounts::default(),
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
            crf: CrfTrainConfig::default(),
            grid: GridSpec::default(),
            gradcheck: GradCheckConfig::default(),
            min_duration: DEFAULT_MIN_DURATION,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Copies the master seed into every component; the CRF gets stream 2.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self.crf.seed = derive_seed(seed, 2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.min_duration == 0 {
            return Err(Error::InvalidArgument("min_duration must be >= 1".into()));
        }
        if self.network.stages.iter().any(|s| {
            s.kernel_width == 0 || s.shift == 0 || s.filters == 0 || s.pool_width == 0
        }) {
            return Err(Error::InvalidArgument(
                "stage kernel width, shift, filters and pool width must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Parses `kW:dW:filters:pool` stages separated by commas; an empty string
/// means no filter stages.
pub fn parse_stages(text: &str) -> std::result::Result<Vec<StageConfig>, String> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            let nums: Vec<usize> = part
                .split(':')
                .map(|n| n.trim().parse::<usize>().map_err(|e| format!("`{part}`: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            match nums[..] {
                [kw, dw, f, p] => Ok(StageConfig::new(kw, dw, f, p)),
                _ => Err(format!("`{part}` is not kW:dW:filters:pool")),
            }
        })
        .collect()
}

/// Writes `config.json`: the command, its inputs and the resolved config.
pub fn echo_config(out: &Path, command: &str, inputs: serde_json::Value, config: &RunConfig) -> Result<()> {
    let doc = serde_json::json!({
        "command": command,
        "inputs": inputs,
        "config": config,
    });
    let path = out.join("config.json");
    let text = serde_json::to_string_pretty(&doc).expect("config serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}
