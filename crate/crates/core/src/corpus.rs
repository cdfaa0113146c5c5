//! Procedural prompt-conditioned images.
//!
//! Each sample is one colored shape on a dark background. The prompt names
//! the shape (its category), the color, a grid position and a size. Token
//! ids are laid out as
//!
//! ```text
//! 0            padding
//! 1..          categories
//! ..           colors
//! ..           x positions, then y positions
//! ..           sizes
//! ```
//!
//! Sample `i` always has category `i % n_categories` and is a pure function
//! of `(config, i)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dit::DitConfig;
use crate::error::{config, Result};
use crate::flow::{FlowSample, TimestepSampling};
use crate::rng;
use crate::tensor::Tensor;

const PROMPT_TOKENS: usize = 5;
const BACKGROUND: f64 = -0.8;

/// RGB in [-1, 1].
const PALETTE: [[f64; 3]; 8] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.9, -0.6],
    [-0.6, -0.6, 0.9],
    [0.9, 0.9, -0.6],
    [0.9, -0.6, 0.9],
    [-0.6, 0.9, 0.9],
    [0.95, 0.95, 0.95],
    [0.9, 0.3, -0.7],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_categories: usize,
    pub n_colors: usize,
    /// Grid cells per axis for the shape center.
    pub n_positions: usize,
    pub n_sizes: usize,
    /// Distinct training images; training batches cycle through them.
    pub train_size: usize,
    pub timesteps: TimestepSampling,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_categories: 10,
            n_colors: 6,
            n_positions: 3,
            n_sizes: 3,
            train_size: 1000,
            timesteps: TimestepSampling::Uniform,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Vocabulary needed by the prompt encoding.
    pub fn vocab_needed(&self) -> usize {
        1 + self.n_categories + self.n_colors + 2 * self.n_positions + self.n_sizes
    }
}

/// A clean image with its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub image: Tensor,
    pub prompt: Vec<usize>,
    pub category: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    image_size: usize,
    channels: usize,
    text_len: usize,
}

/// Index ranges of the three disjoint splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Calibration,
    Validation,
}

impl Corpus {
    pub fn new(cfg: CorpusConfig, model: &DitConfig) -> Result<Self> {
        if cfg.n_categories == 0
            || cfg.n_colors == 0
            || cfg.n_positions == 0
            || cfg.n_sizes == 0
            || cfg.train_size == 0
        {
            return Err(config("corpus counts must be positive"));
        }
        if cfg.n_categories > SHAPES {
            return Err(config(format!("at most {SHAPES} categories are drawable")));
        }
        if cfg.vocab_needed() > model.vocab {
            return Err(config(format!(
                "corpus needs {} tokens, vocabulary has {}",
                cfg.vocab_needed(),
                model.vocab
            )));
        }
        if model.text_len < PROMPT_TOKENS {
            return Err(config(format!("prompts need text_len >= {PROMPT_TOKENS}")));
        }
        Ok(Self {
            config: cfg,
            image_size: model.image_size,
            channels: model.channels,
            text_len: model.text_len,
        })
    }

    fn first_index(&self, split: Split) -> u64 {
        let n = self.config.train_size as u64;
        match split {
            Split::Train => 0,
            Split::Calibration => n,
            Split::Validation => 1 << 40,
        }
    }

    /// The `i`-th clean sample.
    pub fn sample(&self, index: u64) -> CorpusSample {
        let c = &self.config;
        let category = (index % c.n_categories as u64) as usize;
        let mut r = rng::stream(c.seed, &[rng::tag("corpus"), index]);
        let pick = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> usize {
            ((rng::uniform(r) * n as f64) as usize).min(n - 1)
        };
        let color = pick(&mut r, c.n_colors);
        let px = pick(&mut r, c.n_positions);
        let py = pick(&mut r, c.n_positions);
        let size = pick(&mut r, c.n_sizes);

        let base_color = 1 + c.n_categories;
        let base_x = base_color + c.n_colors;
        let base_y = base_x + c.n_positions;
        let base_size = base_y + c.n_positions;
        let mut prompt = vec![
            1 + category,
            base_color + color,
            base_x + px,
            base_y + py,
            base_size + size,
        ];
        prompt.resize(self.text_len, 0);

        let s = self.image_size as f64;
        let cell = s / c.n_positions as f64;
        let cx = (px as f64 + 0.5) * cell;
        let cy = (py as f64 + 0.5) * cell;
        let radius = s * (0.15 + 0.25 * (size as f64 + 1.0) / c.n_sizes as f64) / 2.0;
        let rgb = PALETTE[color % PALETTE.len()];
        let n = self.image_size;
        let mut image = Tensor::full(&[self.channels, n, n], BACKGROUND);
        for row in 0..n {
            for col in 0..n {
                let dx = (col as f64 + 0.5 - cx) / radius;
                let dy = (row as f64 + 0.5 - cy) / radius;
                if inside(category, dx, dy) {
                    for ch in 0..self.channels {
                        image.data_mut()[(ch * n + row) * n + col] = rgb[ch % 3];
                    }
                }
            }
        }
        CorpusSample {
            image,
            prompt,
            category,
        }
    }

    /// Noise and timestep for sample `index` at draw `draw`.
    pub fn flow_sample(&self, index: u64, draw: u64) -> FlowSample {
        let s = self.sample(index);
        let mut r = rng::stream(self.config.seed, &[rng::tag("flow"), draw, index]);
        let t = self.config.timesteps.draw(&mut r);
        let eps = rng::randn(&mut r, s.image.shape(), 1.0);
        FlowSample {
            x0: s.image,
            eps,
            t,
            prompt: s.prompt,
            category: s.category,
        }
    }

    /// Training batch number `step`; the sample indices cycle through the
    /// training split.
    pub fn train_batch(&self, step: u64, batch_size: usize) -> Vec<FlowSample> {
        let n = self.config.train_size as u64;
        (0..batch_size as u64)
            .map(|i| {
                let draw = step * batch_size as u64 + i;
                self.flow_sample(draw % n, draw)
            })
            .collect()
    }

    /// `n` samples of a held-out split, consecutive indices so categories
    /// are balanced.
    pub fn split(&self, split: Split, n: usize) -> Vec<FlowSample> {
        let first = self.first_index(split);
        (0..n as u64).map(|i| self.flow_sample(first + i, first + i)).collect()
    }

    /// `n` clean samples of a held-out split.
    pub fn clean(&self, split: Split, n: usize) -> Vec<CorpusSample> {
        let first = self.first_index(split);
        (0..n as u64).map(|i| self.sample(first + i)).collect()
    }
}

const SHAPES: usize = 10;

/// Shape membership in coordinates scaled by the radius.
fn inside(category: usize, dx: f64, dy: f64) -> bool {
    let (ax, ay) = (libm::fabs(dx), libm::fabs(dy));
    let r2 = dx * dx + dy * dy;
    match category {
        0 => r2 <= 1.0,
        1 => ax <= 0.8 && ay <= 0.8,
        2 => (0.45..=1.0).contains(&r2),
        3 => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
        4 => ax <= 1.0 && ay <= 0.35,
        5 => ay <= 1.0 && ax <= 0.35,
        6 => dy <= 0.8 && dy >= -1.0 && ax <= (dy + 1.0) * 0.55,
        7 => ax + ay <= 1.0,
        8 => ax <= 1.0 && ay <= 1.0 && libm::fabs(dx - dy) <= 0.4,
        _ => ax <= 1.0 && ay <= 1.0 && ((dx + 1.0) as i64 + (dy + 1.0) as i64) % 2 == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Corpus {
        Corpus::new(CorpusConfig::default(), &DitConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_per_index() {
        let c = corpus();
        assert_eq!(c.sample(17), c.sample(17));
        assert_eq!(c.flow_sample(3, 9), c.flow_sample(3, 9));
        assert_ne!(c.flow_sample(3, 9).eps, c.flow_sample(3, 10).eps);
    }

    #[test]
    fn categories_are_uniform() {
        let c = corpus();
        let mut hist = [0usize; 10];
        for i in 0..100 {
            hist[c.sample(i).category] += 1;
        }
        assert!(hist.iter().all(|&h| h == 10));
    }

    #[test]
    fn pixels_in_range_and_shape_drawn() {
        let c = corpus();
        for i in 0..40 {
            let s = c.sample(i);
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(s.image.data().iter().any(|&v| v != BACKGROUND), "sample {i} is blank");
            assert!(s.prompt.iter().all(|&tok| tok < 32));
        }
    }

    #[test]
    fn vocabulary_overflow_is_config_error() {
        let cfg = CorpusConfig { n_colors: 30, ..CorpusConfig::default() };
        assert!(matches!(
            Corpus::new(cfg, &DitConfig::default()),
            Err(crate::Error::Config(_))
        ));
    }
}
