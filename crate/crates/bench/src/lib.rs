//! Shared fixtures for the criterion benches.

use agentopt::nn::{init_params, BlobsSpec};
use agentopt::sparsity::{init_mask, Mask, SparsitySchedule, UpdateRule};
use agentopt::{Dataset, ModelSpec, ParamSet, RngStream};

pub struct Fixture {
    pub data: Dataset,
    pub params: ParamSet,
    pub anchor: ParamSet,
    pub mask: Mask,
}

/// Blobs in `dim` dimensions and a `dim`-`hidden`-`hidden`-10 MLP at the given sparsity.
pub fn fixture(n: usize, dim: usize, hidden: usize, sparsity: f64) -> Fixture {
    let (data, _) = BlobsSpec { classes: 10, dim, train_size: n, test_size: 10, separation: 0.5, noise: 0.2, seed: 1 }
        .generate()
        .expect("valid blobs spec");
    let spec = ModelSpec::mlp(dim, &[hidden, hidden], 10).expect("valid model");
    let mut rng = RngStream::new(7);
    let params = init_params(&spec, &mut rng);
    let anchor = init_params(&spec, &mut rng);
    let mask = if sparsity > 0.0 {
        init_mask(&params, &SparsitySchedule::new(sparsity, UpdateRule::Set), &mut rng).expect("valid sparsity")
    } else {
        Mask::dense(&spec)
    };
    Fixture { data, params, anchor, mask }
}
