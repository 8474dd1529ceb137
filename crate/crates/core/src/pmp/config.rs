use serde::{Deserialize, Serialize};

use super::PmpError;
use crate::motion::{Category, ParametricModelSpec};

/// Closed vocabulary for text conditioning: category words and the action
/// words understood by the synthetic generator.
pub fn default_vocab() -> Vec<String> {
    ["human", "animal", "object", "static", "walk", "reach", "drop", "slide", "slow", "fast"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmpConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_frames: usize,
    pub max_pose_dim: usize,
    pub vocab: Vec<String>,
    /// Number of times [`super::PmpModel::refine`] feeds its output back in.
    #[serde(default = "one")]
    pub refinement_iterations: usize,
    /// Multiplier on the output projection's initial range. Values below 1
    /// start the prior close to the identity map.
    #[serde(default = "unit_gain")]
    pub output_init_gain: f64,
}

fn one() -> usize {
    1
}

fn unit_gain() -> f64 {
    1.0
}

impl Default for PmpConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ffn_dim: 256,
            max_frames: 128,
            max_pose_dim: 165,
            vocab: default_vocab(),
            refinement_iterations: 1,
            output_init_gain: 1.0,
        }
    }
}

impl PmpConfig {
    /// One-block variant that trains 5000 steps in a few minutes on one core,
    /// with a near-identity output head.
    pub fn desk() -> Self {
        Self { layers: 1, output_init_gain: 0.01, ..Self::default() }
    }
}

/// Sinusoidal features of the scalar motion strength.
pub const STRENGTH_FEATURES: usize = 16;
/// Category one-hot width appended to every input frame.
pub const CATEGORY_SLOTS: usize = 3;
/// Upper bound on conditioning tokens per sequence.
pub const MAX_TOKENS: usize = 32;

impl PmpConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn input_dim(&self) -> usize {
        self.max_pose_dim + CATEGORY_SLOTS
    }

    pub fn validate(&self) -> Result<(), PmpError> {
        let bad = |m: String| Err(PmpError::InvalidConfig(m));
        if self.layers == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.max_frames == 0
            || self.max_pose_dim == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.vocab.is_empty() {
            return bad("vocabulary is empty".into());
        }
        if !(self.output_init_gain.is_finite() && self.output_init_gain >= 0.0) {
            return bad(format!("output_init_gain {} must be finite and >= 0", self.output_init_gain));
        }
        if self.refinement_iterations == 0 {
            return bad("refinement_iterations must be at least 1".into());
        }
        for c in Category::ALL {
            let dim = ParametricModelSpec::preset(c).pose_dim;
            if dim > self.max_pose_dim {
                return bad(format!("max_pose_dim {} < {} pose_dim {dim}", self.max_pose_dim, c.name()));
            }
        }
        Ok(())
    }

    pub fn token_index(&self, word: &str) -> Result<usize, PmpError> {
        self.vocab
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| PmpError::UnknownToken(word.to_string()))
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>, PmpError> {
        words.iter().map(|w| self.token_index(w.as_ref())).collect()
    }
}
