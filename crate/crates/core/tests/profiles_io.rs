// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use proptest::prelude::*;

use gshare_core::memory_model::MemorySpec;
use gshare_core::profiles::{
    ingest_profiles, load_profiles, standard_grid, write_profiles, FunctionProfile, ProfileEntry, ProfileFormat,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn resnet_fixture_is_clean() {
    let profiles = load_profiles(&fixture("resnet_profile.csv")).unwrap();
    assert_eq!(profiles.len(), 1);
    let p = &profiles[0];
    assert_eq!(p.len(), 35);
    assert!(p.monotonicity_warnings().is_empty());
    assert_eq!(p.slo_latency_ms(), 69.0);
    assert_eq!(p.memory(), MemorySpec::new(1525, 1427, 398).unwrap());
    assert!(standard_grid().iter().all(|g| p.entry(*g).is_some()));
}

#[test]
fn consolidation_fixture_has_single_points() {
    let profiles = load_profiles(&fixture("consolidation_profiles.csv")).unwrap();
    let ids: Vec<&str> = profiles.iter().map(|p| p.function_id().as_str()).collect();
    assert_eq!(ids, ["resnet", "rnnt", "bert"]);
    assert!(profiles.iter().all(|p| p.len() == 1));
}

fn arb_profile(name: &'static str) -> impl Strategy<Value = FunctionProfile> {
    let grid = standard_grid();
    (
        proptest::sample::subsequence(grid, 1..=35),
        proptest::collection::vec(0.0f64..500.0, 35),
        1.0f64..1000.0,
        (1u64..8000, 1u64..8000, 1u64..8000),
    )
        .prop_map(move |(points, ts, slo, (a, b, c))| {
            let entries = points.into_iter().zip(ts).map(|(point, t)| ProfileEntry {
                point,
                throughput_rps: t,
                p99_latency_ms: 12.5,
            });
            FunctionProfile::new(name.into(), entries, slo, MemorySpec::new(a, b, c).unwrap()).unwrap()
        })
}

proptest! {
    #[test]
    fn round_trips_through_both_formats(a in arb_profile("alpha"), b in arb_profile("beta")) {
        let profiles = vec![a, b];
        for format in [ProfileFormat::Csv, ProfileFormat::JsonLines] {
            let mut buf = Vec::new();
            write_profiles(&profiles, format, &mut buf).unwrap();
            let back = ingest_profiles(buf.as_slice(), format).unwrap();
            prop_assert_eq!(&back, &profiles);
        }
    }
}
