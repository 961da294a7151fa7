use proptest::prelude::*;

use gepnet_core::channel::{qam_constellation, snr_to_sigma2, SimRng, TransmissionSample};
use gepnet_core::detectors::{ep_detect_with_state, ml_detect, mmse_detect, EpConfig};
use gepnet_core::ep::FallbackMode;
use gepnet_core::gepnet::{gnn_node_init, gnn_round, GepnetConfig, GepnetWeights};
use gepnet_core::sweep::{run_sweep, DetectorKind, SweepConfig};
use gepnet_core::weights::{bundle_constellation, random_gepnet_bundle};

fn small_cfg() -> GepnetConfig {
    GepnetConfig {
        su: 5,
        nh1: 12,
        nh2: 7,
        nr1: 9,
        nr2: 6,
        ..GepnetConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gnn_round_is_node_permutation_equivariant(seed in 0u64..10_000, nt in 2usize..5, shift in 1usize..4) {
        let c = qam_constellation(16).unwrap();
        let b = random_gepnet_bundle(&small_cfg(), &c, nt, 8, 3, 1.0, seed);
        let w = GepnetWeights::from_bundle(&b).unwrap();
        let mut rng = SimRng::new(seed, 1);
        let s = TransmissionSample::draw(&mut rng, nt, 8, &c, snr_to_sigma2(10.0, nt, 8));
        let perm: Vec<usize> = (0..nt).map(|i| (i + shift) % nt).collect();
        let permuted = s.channel.permute_users(&perm);
        // real node i < nt is Re of user i, node nt + i its Im
        let node = |i: usize| if i < nt { perm[i] } else { nt + perm[i - nt] };
        let k = 2 * nt;
        let x_obs: Vec<f64> = (0..k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let v_obs: Vec<f64> = (0..k).map(|_| rng.uniform(0.05, 1.0)).collect();
        let xp: Vec<f64> = (0..k).map(|i| x_obs[node(i)]).collect();
        let vp: Vec<f64> = (0..k).map(|i| v_obs[node(i)]).collect();

        let mut a = gnn_node_init(s.channel.h(), &s.y, s.channel.sigma2(), &w, None).unwrap();
        let mut p = gnn_node_init(permuted.h(), &s.y, s.channel.sigma2(), &w, None).unwrap();
        for _ in 0..2 {
            gnn_round(&mut a, &x_obs, &v_obs, &w).unwrap();
            gnn_round(&mut p, &xp, &vp, &w).unwrap();
        }
        for i in 0..k {
            for (x, y) in p.u[i].iter().zip(&a.u[node(i)]) {
                prop_assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn ep_precisions_stay_positive(seed in 0u64..10_000, snr in -5.0f64..35.0, whole in any::<bool>()) {
        let c = qam_constellation(16).unwrap();
        let mut rng = SimRng::new(seed, 2);
        let s = TransmissionSample::draw(&mut rng, 3, 4, &c, snr_to_sigma2(snr, 3, 4));
        let cfg = EpConfig {
            fallback: if whole { FallbackMode::WholeVector } else { FallbackMode::PerElement },
            ..EpConfig::default()
        };
        let (r, st) = ep_detect_with_state(&s.y, &s.channel, &c, &cfg).unwrap();
        prop_assert!(st.lambda.iter().all(|l| *l > 0.0 && l.is_finite()));
        for p in r.probabilities.unwrap() {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn ml_high_snr_ser() {
    let c = qam_constellation(16).unwrap();
    let cfg = SweepConfig {
        nt: 2,
        nr: 8,
        detector: DetectorKind::Ml,
        snr_start: 20.0,
        snr_stop: 20.0,
        snr_step: 1.0,
        min_trials: 10_000,
        min_errors: 0,
        max_trials: 10_000,
        seed: 20,
        ..SweepConfig::default()
    };
    let p = &run_sweep(&cfg, &c, None).unwrap().points[0];
    assert_eq!(p.trials, 10_000);
    assert!(p.ser < 1e-3, "ser {}", p.ser);
}

#[test]
fn detectors_agree_near_noiseless() {
    let c = qam_constellation(16).unwrap();
    let mut rng = SimRng::new(77, 0);
    let trials = 2_000;
    let mut agree = 0;
    for _ in 0..trials {
        let s = TransmissionSample::draw(&mut rng, 2, 16, &c, snr_to_sigma2(50.0, 2, 16));
        let ml = ml_detect(&s.y, &s.channel, &c).unwrap().messages;
        let mmse = mmse_detect(&s.y, &s.channel, &c).unwrap().messages;
        let (ep, _) = ep_detect_with_state(&s.y, &s.channel, &c, &EpConfig::default()).unwrap();
        agree += (ml == mmse && ml == ep.messages) as usize;
    }
    assert!(agree * 1000 >= trials * 999, "{agree}/{trials}");
}

#[test]
fn sweep_independent_of_thread_count() {
    let c = qam_constellation(4).unwrap();
    let cfg = SweepConfig {
        nt: 2,
        nr: 4,
        detector: DetectorKind::Ep,
        snr_start: 0.0,
        snr_stop: 8.0,
        snr_step: 4.0,
        min_trials: 600,
        min_errors: 30,
        workers: 3,
        batch: 100,
        seed: 5,
        ..SweepConfig::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_sweep(&cfg, &c, None).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn qam_bundle_exports_grid() {
    let c = qam_constellation(16).unwrap();
    let b = random_gepnet_bundle(&small_cfg(), &c, 2, 8, 3, 1.0, 0);
    let got = bundle_constellation(&b).unwrap();
    assert_eq!(got.order(), 16);
    assert!((got.average_power() - 1.0).abs() < 1e-6);
    for (a, b) in got.points().iter().zip(c.points()) {
        assert!((a - b).norm() < 1e-7);
    }
}
