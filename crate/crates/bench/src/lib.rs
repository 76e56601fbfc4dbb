//! Shared problem sizes for the criterion benches.

use mllc_core::refine::{RefineConfig, RefineLayers};
use mllc_core::slg::Neighbors;
use mllc_core::synth::refine_instance;
use mllc_core::{FeatureMatrix, ProbMatrix};

#[derive(Clone, Copy, Debug)]
pub struct Case {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub k: usize,
    pub rounds: usize,
}

impl Case {
    pub const fn new(n: usize, k: usize) -> Self {
        Case {
            n,
            dim: 32,
            classes: 8,
            k,
            rounds: 2,
        }
    }

    pub fn label(&self) -> String {
        format!("n{}_k{}_K{}", self.n, self.k, self.rounds)
    }

    pub fn inputs(&self) -> (FeatureMatrix, ProbMatrix) {
        refine_instance(self.n, self.dim, self.classes, 0).expect("valid case")
    }

    pub fn config(&self) -> RefineConfig {
        RefineConfig {
            rounds: self.rounds,
            k: Neighbors::K(self.k),
            ..RefineConfig::default()
        }
    }

    pub fn layers(&self) -> RefineLayers {
        RefineLayers::identity_averaging(self.rounds, self.classes, self.dim)
    }
}

pub const CASES: [Case; 3] = [Case::new(256, 20), Case::new(1024, 20), Case::new(4096, 20)];
