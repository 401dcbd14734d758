//! Built-in reference models used across tests, docs and examples.

use crate::model::{BranchingModel, DiscreteLaw};

/// Single-type critical model: offspring 0 or 2 with probability 1/2 each,
/// Poisson(1) immigration. Offspring mean 1, offspring variance 1,
/// immigration mean/variance 1; limit coefficients b = c = 1, δ = 4.
pub fn critical_single_type() -> BranchingModel {
    BranchingModel::new(
        vec![DiscreteLaw::FiniteSupport {
            atoms: vec![(vec![0], 0.5), (vec![2], 0.5)],
        }],
        DiscreteLaw::IndependentPoisson { rates: vec![1.0] },
    )
    .expect("reference model is valid")
}

/// Two-type critical model with mean matrix [[0, 1/2], [1, 1/2]]
/// (Perron data ρ = 1, u = (1/3, 2/3), v = (1, 1)) and Poisson(1)
/// immigration into the first type only. Limit coefficients b = c = 1.
pub fn critical_two_type() -> BranchingModel {
    BranchingModel::new(
        vec![
            DiscreteLaw::FiniteSupport {
                atoms: vec![(vec![0, 0], 0.5), (vec![0, 2], 0.5)],
            },
            DiscreteLaw::FiniteSupport {
                atoms: vec![(vec![0, 0], 0.5), (vec![1, 1], 0.5)],
            },
        ],
        DiscreteLaw::IndependentPoisson {
            rates: vec![1.0, 0.0],
        },
    )
    .expect("reference model is valid")
}
