use proptest::prelude::*;
use tsb_core::model::hard_decision;
use tsb_core::specgen::*;

fn quiet(slots: usize) -> ScenarioConfig {
    ScenarioConfig {
        slots,
        hu_fraction: 0.0,
        ..ScenarioConfig::default()
    }
}

#[test]
fn noise_only_cells_sit_near_the_floor() {
    let cfg = ScenarioConfig {
        mode: InterferenceMode::Fixed { channels: vec![] },
        ..quiet(500)
    };
    let frame = generate_frame(&cfg).unwrap();
    let band = 3.0 * cfg.noise_std_db;
    let inside = frame
        .power
        .data()
        .iter()
        .filter(|p| (*p - cfg.noise_floor_dbm).abs() <= band)
        .count();
    // a 3σ band holds 99.7% of Gaussian draws
    assert!(inside as f64 / frame.power.numel() as f64 > 0.99);
    assert!(frame.occupancy.data().iter().all(|&o| o == 0.0));
}

#[test]
fn sweep_schedule_matches_modular_oracle() {
    let (f, t, p) = (32, 123, 20);
    for (start, step) in [(0.0, 1.0), (5.0, 1.0), (2.0, 1.5), (30.0, 1.0)] {
        let mask = interference_schedule(&InterferenceMode::Sweep { start, step }, f, t, p).unwrap();
        for s in 0..t {
            let expected = ((start + step * (s % p) as f64).floor() as usize) % f;
            for c in 0..f {
                assert_eq!(mask.data()[c * t + s] == 1.0, c == expected, "slot {s} channel {c}");
            }
        }
        for s in p..t {
            let col = |x: usize| (0..f).map(|c| mask.data()[c * t + x]).collect::<Vec<_>>();
            assert_eq!(col(s), col(s - p));
        }
    }
    let unit = interference_schedule(&InterferenceMode::default(), 20, 100, 20).unwrap();
    assert!((0..100).all(|s| unit.data()[(s % 20) * 100 + s] == 1.0));
}

#[test]
fn jammed_cells_exceed_the_threshold() {
    let frame = generate_frame(&ScenarioConfig {
        slots: 400,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let mu = &frame.indicators.as_ref().unwrap().mu;
    for (p, a) in frame.power.data().iter().zip(mu.data()) {
        if *a == 1.0 {
            assert!(*p >= -50.0);
        }
    }
    assert_eq!(frame.occupancy, hard_decision(&frame.power, frame.config.threshold_dbm));
}

#[test]
fn same_seed_gives_identical_frames() {
    let cfg = ScenarioConfig {
        slots: 300,
        ..ScenarioConfig::default()
    };
    let a = generate_frame(&cfg).unwrap();
    let b = generate_frame(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_frame(&ScenarioConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.power, c.power);
}

#[test]
fn channel_streams_are_independent_of_other_channels() {
    let base = quiet(200);
    let a = generate_frame(&ScenarioConfig {
        mode: InterferenceMode::Fixed { channels: vec![0] },
        ..base.clone()
    })
    .unwrap();
    let b = generate_frame(&ScenarioConfig {
        mode: InterferenceMode::Fixed { channels: vec![1] },
        ..base
    })
    .unwrap();
    for c in 2..32 {
        assert_eq!(a.power.row(c), b.power.row(c));
    }
}

#[test]
fn swept_channel_occupancy_is_one_over_period() {
    let frame = generate_frame(&quiet(4000)).unwrap();
    let t = frame.slots();
    for c in 0..20 {
        let occ = frame.occupancy.data()[c * t..(c + 1) * t].iter().sum::<f64>() / t as f64;
        assert!((occ - 1.0 / 20.0).abs() < 0.01, "channel {c}: {occ}");
    }
    for c in 20..32 {
        assert!(frame.occupancy.row(c).iter().all(|&o| o == 0.0));
    }
}

#[test]
fn honest_users_persist_on_their_channels() {
    let cfg = ScenarioConfig {
        slots: 500,
        mode: InterferenceMode::Fixed { channels: vec![] },
        ..ScenarioConfig::default()
    };
    let frame = generate_frame(&cfg).unwrap();
    let hu = &frame.indicators.as_ref().unwrap().hu;
    let active: Vec<usize> = (0..32).filter(|&c| hu.row(c).contains(&1.0)).collect();
    assert!(!active.is_empty() && active.len() <= 8);
    for c in active {
        let on = frame.power.row(c).iter().zip(hu.row(c)).filter(|(_, &h)| h == 1.0);
        assert!(on.clone().all(|(p, _)| *p >= -48.0 - 1e-9));
    }
}

proptest! {
    #[test]
    fn adding_a_component_never_lowers_power(
        parts in prop::collection::vec(-120.0f64..0.0, 1..6),
        extra in -120.0f64..0.0,
    ) {
        let before = combine_powers_dbm(&parts).unwrap();
        let mut more = parts.clone();
        more.push(extra);
        prop_assert!(combine_powers_dbm(&more).unwrap() >= before - 1e-12);
    }
}
