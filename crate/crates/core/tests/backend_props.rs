// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use proptest::prelude::*;

use gshare_core::resource::ResourceConfig;
use gshare_core::token_backend::{BackendTable, QUOTA_EPSILON, SM_GLOBAL_LIMIT};
use gshare_core::PodId;

const SMS: [f64; 7] = [6.0, 12.0, 24.0, 50.0, 60.0, 80.0, 100.0];

#[derive(Debug, Clone)]
struct PodSpec {
    sm: f64,
    request: f64,
    limit: f64,
}

fn arb_pods() -> impl Strategy<Value = Vec<PodSpec>> {
    let pod = (0usize..7, 1u32..=10, 0u32..=5).prop_map(|(s, r, extra)| {
        let request = f64::from(r) / 10.0;
        PodSpec {
            sm: SMS[s],
            request,
            limit: (request + f64::from(extra) / 10.0).min(1.0),
        }
    });
    proptest::collection::vec(pod, 1..=12)
}

fn table(pods: &[PodSpec]) -> BackendTable {
    let mut t = BackendTable::new(1000.0, 0.02).unwrap();
    for (i, p) in pods.iter().enumerate() {
        let cfg = ResourceConfig::new(p.sm, p.request, p.limit, 0).unwrap();
        t.register_pod(PodId::new(format!("p{i:02}")), &cfg).unwrap();
    }
    t
}

proptest! {
    #[test]
    fn running_sms_never_exceed_the_gpu(
        pods in arb_pods(),
        rounds in proptest::collection::vec((any::<u64>(), 0.0f64..=1.0), 1..80),
    ) {
        let mut t = table(&pods);
        let ids: Vec<PodId> = t.pods().map(|p| p.pod_id.clone()).collect();
        for (i, (mask, frac)) in rounds.into_iter().enumerate() {
            if i % 20 == 0 {
                t.reset_window();
            }
            let requesting: Vec<PodId> = ids.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, id)| id.clone()).collect();
            t.schedule_round(&requesting, 0.0);
            let live: f64 = t.live_tokens().map(|tok| t.pod(&tok.pod_id).unwrap().s_sms).sum();
            prop_assert!(live <= SM_GLOBAL_LIMIT + 1e-9);
            prop_assert!((live - t.s_running()).abs() < 1e-9);
            let done: Vec<(u64, f64)> = t.live_tokens().filter(|tok| tok.id % 2 == mask % 2).map(|tok| (tok.id, tok.duration * frac)).collect();
            for (id, elapsed) in done {
                t.complete_token(id, elapsed).unwrap();
            }
        }
    }

    #[test]
    fn tokens_stay_within_quota(pods in arb_pods(), steps in 1usize..200) {
        let mut t = table(&pods);
        let ids: Vec<PodId> = t.pods().map(|p| p.pod_id.clone()).collect();
        let mut granted: BTreeMap<PodId, f64> = BTreeMap::new();
        for _ in 0..steps {
            for tok in t.schedule_round(&ids, 0.0) {
                prop_assert!(tok.duration > 0.0 && tok.duration <= t.quantum() + 1e-12);
                *granted.entry(tok.pod_id.clone()).or_default() += tok.duration;
            }
            let live: Vec<(u64, f64)> = t.live_tokens().map(|tok| (tok.id, tok.duration)).collect();
            for (id, d) in live {
                t.complete_token(id, d).unwrap();
            }
        }
        for p in t.pods() {
            let g = granted.get(&p.pod_id).copied().unwrap_or(0.0);
            prop_assert!(g <= p.q_limit + 1e-9, "{} granted {} of {}", p.pod_id, g, p.q_limit);
            prop_assert!((g - p.q_used).abs() < 1e-9);
            prop_assert_eq!(p.is_blocked(), p.q_limit - p.q_used <= QUOTA_EPSILON);
        }
    }

    #[test]
    fn overrun_is_rejected(pods in arb_pods(), extra in 0.001f64..1.0) {
        let mut t = table(&pods);
        let ids: Vec<PodId> = t.pods().map(|p| p.pod_id.clone()).collect();
        let tokens = t.schedule_round(&ids, 0.0);
        prop_assert!(!tokens.is_empty());
        let tok = &tokens[0];
        prop_assert!(t.complete_token(tok.id, tok.duration + extra).is_err());
        prop_assert!(t.complete_token(tok.id, tok.duration).is_ok());
    }
}
