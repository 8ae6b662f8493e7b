//! Shared fixtures for the benchmarks.

use crossgrad::data::{gen_rotated_clouds, make_batches, Batch, DomainDataset, DEFAULT_ANGLES};
use crossgrad::NetConfig;

/// Six rotated cloud domains with 100 examples each.
pub fn clouds() -> DomainDataset {
    gen_rotated_clouds(6, &DEFAULT_ANGLES, 100, 0.15, 0).expect("fixture dataset")
}

pub fn net_for(ds: &DomainDataset) -> NetConfig {
    let mut net = NetConfig::vector(2, ds.label_count, ds.domain_count());
    net.hidden_sizes = vec![32, 32];
    net.domain_hidden = vec![32];
    net.g_dim = 8;
    net
}

pub fn first_batch(ds: &DomainDataset, size: usize) -> Batch {
    make_batches(ds, size, 0, 0).expect("fixture batches").remove(0)
}
