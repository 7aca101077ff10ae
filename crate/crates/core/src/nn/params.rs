use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How a parameter block is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    /// Uniform in `±bound`.
    Uniform(f64),
    Zeros,
    Ones,
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> Range<usize> {
        let block = ParamBlock {
            name: name.into(),
            shape,
            offset: self.len(),
            init,
        };
        let r = block.range();
        self.blocks.push(block);
        r
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map(|b| b.offset + b.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws every block in layout order from one ChaCha stream seeded by `seed`.
    pub fn initialize(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.len());
        for b in &self.blocks {
            match b.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    out.extend((0..b.len()).map(|_| rng.gen_range(-bound..bound)));
                }
                Init::Uniform(bound) => {
                    out.extend((0..b.len()).map(|_| rng.gen_range(-bound..bound)));
                }
                Init::Zeros => out.extend(std::iter::repeat(0.0).take(b.len())),
                Init::Ones => out.extend(std::iter::repeat(1.0).take(b.len())),
            }
        }
        out
    }
}
