//! Shared fixtures for the criterion benches.

use osface::{generate_synthetic, make_split, FeatureStore, ProtocolSplit, SplitSpec};

/// A synthetic store with `known` enrolled identities out of `identities`.
pub fn workload(
    identities: usize,
    samples_per_id: usize,
    dim: usize,
    known: usize,
) -> (FeatureStore, ProtocolSplit) {
    let store =
        generate_synthetic(identities, samples_per_id, dim, 0.1, 1).expect("valid synthetic spec");
    let spec = SplitSpec::absolute(known).expect("known > 0");
    let split = make_split(&store, &spec, 0.5, 2).expect("enough identities");
    (store, split)
}
