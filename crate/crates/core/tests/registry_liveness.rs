use mnsm_core::wire::{valid_service_name, Liveness, LivenessVerdict, Registry, RegistryError, ServiceKind};
use proptest::prelude::*;

#[test]
fn replacement_and_lookup() {
    let mut r = Registry::new();
    assert_eq!(r.register("node-a", ServiceKind::Daemon, "10.0.0.1:7001", 1).unwrap().generation, 1);
    let second = r.register("node-a", ServiceKind::Daemon, "10.0.0.1:7002", 2).unwrap();
    assert_eq!(second.generation, 2);
    assert_eq!(r.lookup("node-a").unwrap().address, "10.0.0.1:7002");
    assert!(r.lookup("nonexistent").is_none());
    // a stale session going away must not evict the fresh record
    assert!(!r.remove("node-a", 1));
    assert!(r.remove("node-a", 2));
    assert!(r.lookup("node-a").is_none());
    assert_eq!(r.register("node-a", ServiceKind::Daemon, "x:1", 3).unwrap().generation, 3);
}

#[test]
fn fifty_daemons_listed() {
    let mut r = Registry::new();
    r.register("manager", ServiceKind::Manager, "m:1", 0).unwrap();
    let names: Vec<String> = (1..=50).map(|i| format!("node-{i:02}")).collect();
    for n in &names {
        r.register(n, ServiceKind::Daemon, "h:1", 0).unwrap();
    }
    let listed: Vec<String> = r.list(Some(ServiceKind::Daemon)).into_iter().map(|s| s.name).collect();
    assert_eq!(listed, names);
    assert_eq!(r.list(None).len(), 51);
}

#[test]
fn malformed_names_rejected() {
    let mut r = Registry::new();
    for bad in ["", "has space", "new\nline", "slash/y"] {
        assert!(!valid_service_name(bad));
        assert_eq!(
            r.register(bad, ServiceKind::Daemon, "h:1", 0),
            Err(RegistryError::MalformedName(bad.into()))
        );
    }
    assert!(r.is_empty());
}

proptest! {
    #[test]
    fn k_registrations_leave_one_record_at_generation_k(k in 1u64..40, kinds in prop::collection::vec(0u8..3, 40)) {
        let mut r = Registry::new();
        for i in 0..k {
            let kind = [ServiceKind::Manager, ServiceKind::Daemon, ServiceKind::Controller][kinds[i as usize] as usize];
            r.register("svc", kind, &format!("h:{i}"), i).unwrap();
        }
        prop_assert_eq!(r.len(), 1);
        prop_assert_eq!(r.lookup("svc").unwrap().generation, k);
    }

    /// Two endpoints heartbeat over a simulated link that is cut at `cut`.
    /// Each side polls once per interval at its own phase.
    #[test]
    fn silent_peer_detected_within_three_to_four_intervals(
        interval in 1u64..500,
        phase_a in 0u64..500,
        phase_b in 0u64..500,
        delay in 0u64..5,
        cut in 0u64..20_000,
    ) {
        let (phase_a, phase_b) = (phase_a % interval, phase_b % interval);
        let delay = delay.min(interval - 1);
        let mut sides = [Liveness::new(interval, 0), Liveness::new(interval, 0)];
        let phases = [phase_a, phase_b];
        // (arrival time, receiving side)
        let mut in_flight: Vec<(u64, usize)> = Vec::new();
        let mut dead_at = [None, None];
        let horizon = cut + 6 * interval;
        for now in 0..=horizon {
            in_flight.retain(|&(at, to)| {
                if at == now {
                    sides[to].on_receive(now);
                    false
                } else {
                    true
                }
            });
            for side in 0..2 {
                if dead_at[side].is_some() || now % interval != phases[side] {
                    continue;
                }
                match sides[side].poll(now) {
                    LivenessVerdict::Dead => dead_at[side] = Some(now),
                    LivenessVerdict::Alive { send_heartbeat } => {
                        if send_heartbeat {
                            sides[side].on_send(now);
                            if now < cut {
                                in_flight.push((now + delay + 1, 1 - side));
                            }
                        }
                    }
                }
            }
        }
        for side in 0..2 {
            let at = dead_at[side];
            prop_assert!(at.is_some(), "side {} never noticed", side);
            let silent_for = at.unwrap() - sides[side].last_heard();
            prop_assert!(silent_for >= 3 * interval && silent_for < 4 * interval,
                "side {}: silent for {} with interval {}", side, silent_for, interval);
            // nobody is declared dead while the link still works
            prop_assert!(at.unwrap() >= cut);
        }
    }
}
