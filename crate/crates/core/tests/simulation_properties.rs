use proptest::prelude::*;

use satedge::scenario::{parse_scenario_str, Scenario};
use satedge::simkernel::simulate_fine_tuning;

fn scenario() -> impl Strategy<Value = Scenario> {
    (
        1usize..=3,
        2usize..=5,
        40.0..80.0f64,
        1usize..=3,
        any::<bool>(),
        1u64..=256,
        prop::option::of(any::<u64>()),
    )
        .prop_map(|(p, s, inc, rounds, decentralized, samples, seed)| {
            let text = serde_json::json!({
                "seed": seed,
                "constellation": {
                    "num_orbits": p,
                    "sats_per_orbit": s,
                    "altitude_km": 550.0,
                    "inclination_deg": inc,
                    "link_config": {"cross_seam_policy": "enabled"},
                    "ground_stations": [
                        {"id": 0, "latitude_deg": 10.0, "longitude_deg": 20.0, "dedicated_rate_bps": 1e10, "min_elevation_deg": 10.0},
                        {"id": 1, "latitude_deg": -30.0, "longitude_deg": 150.0, "dedicated_rate_bps": 5e9, "min_elevation_deg": 10.0}
                    ]
                },
                "workload": {"samples_per_satellite": samples, "batch_size": 64},
                "federation": {
                    "rounds": rounds,
                    "aggregation_mode": if decentralized { "fully_decentralized" } else { "ground_coordinated" },
                    "horizon_s": 40000.0,
                    "window_step_s": 30.0
                }
            });
            parse_scenario_str(&text.to_string()).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scenario_round_trips(s in scenario()) {
        let pretty = serde_json::to_string_pretty(&s).unwrap();
        let back = parse_scenario_str(&pretty).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.digest(), s.digest());
    }

    #[test]
    fn round_traces_reconcile(s in scenario()) {
        let ctx = s.sim_context().unwrap();
        let (traces, report) = simulate_fine_tuning(&ctx, &s.workload).unwrap();
        prop_assert!(!traces.is_empty() && traces.len() <= s.federation.rounds);
        prop_assert_eq!(report.rounds_completed, traces.iter().filter(|t| t.complete).count());
        prop_assert_eq!(report.complete, report.rounds_completed == s.federation.rounds);
        let mut clock = s.federation.start_time_s;
        for (i, t) in traces.iter().enumerate() {
            prop_assert_eq!(t.round, i);
            prop_assert!((t.start_s - clock).abs() <= 1e-9 * clock.max(1.0));
            let sum: f64 = t.phases.as_array().iter().sum();
            prop_assert!((sum - t.total_s).abs() <= 1e-9);
            prop_assert!(t.phases.as_array().iter().all(|p| *p >= 0.0 && p.is_finite()));
            let e = t.counters.energy(&s.energy);
            prop_assert!((e - t.energy_j).abs() <= 1e-9 * e.max(1.0));
            // only the last trace may be incomplete
            prop_assert!(t.complete || i + 1 == traces.len());
            prop_assert_eq!(t.complete, t.failed_phase.is_none());
            clock = t.start_s + t.total_s;
        }
        let energy: f64 = traces.iter().map(|t| t.energy_j).sum();
        prop_assert!((energy - report.total_energy_j).abs() <= 1e-9 * energy.max(1.0));
    }
}
