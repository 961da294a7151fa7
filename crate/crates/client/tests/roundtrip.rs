use std::net::SocketAddr;

use gepnet_client::Client;
use gepnet_core::channel::{qam_constellation, snr_to_sigma2, SimRng, TransmissionSample};
use gepnet_core::complexity::ReadoutSizes;
use gepnet_core::detectors::EpConfig;
use gepnet_core::gepnet::GepnetConfig;
use gepnet_core::service::{self, ComplexityRequest, DetectRequest, LoadedWeights, Modulation, SimulateRequest};
use gepnet_core::sweep::{DetectorKind, SweepConfig};
use gepnet_core::weights::random_gepnet_bundle;

async fn spawn() -> Client {
    let (listener, addr) = gepnet_server::bind(SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap();
    tokio::spawn(gepnet_server::serve(listener));
    Client::new(format!("http://{addr}"))
}

fn small_bundle_bytes() -> Vec<u8> {
    let cfg = GepnetConfig {
        t_iters: 3,
        su: 4,
        nh1: 16,
        nh2: 8,
        nr1: 16,
        nr2: 8,
        ..GepnetConfig::default()
    };
    let c = qam_constellation(4).unwrap();
    random_gepnet_bundle(&cfg, &c, 2, 4, 3, 1.0, 17).to_bytes().unwrap()
}

fn sweep(detector: DetectorKind) -> SweepConfig {
    SweepConfig {
        nt: 2,
        nr: 4,
        detector,
        snr_start: 0.0,
        snr_stop: 10.0,
        snr_step: 5.0,
        min_trials: 200,
        min_errors: 10,
        max_trials: 2_000,
        seed: 9,
        workers: 2,
        batch: 50,
        ..SweepConfig::default()
    }
}

#[tokio::test]
async fn health_and_complexity() {
    let client = spawn().await;
    assert!(client.health().await.unwrap());
    let req = ComplexityRequest { m: 16, k: 8, n: 8, sizes: ReadoutSizes::default() };
    let remote = client.complexity(&req).await.unwrap();
    assert_eq!(remote, service::complexity(&req).unwrap());
}

#[tokio::test]
async fn remote_sweep_equals_local() {
    let client = spawn().await;
    let req = SimulateRequest {
        config: sweep(DetectorKind::Mmse),
        modulation: Modulation::Qam { order: 4 },
        weights: None,
    };
    let remote = client.simulate(&req).await.unwrap();
    let local = service::simulate(&req, None).unwrap();
    assert_eq!(remote, local);
    assert!(remote.csv.contains("snr_db,trials,symbol_errors,ser\n"));
}

#[tokio::test]
async fn uploaded_weights_drive_gepnet() {
    let client = spawn().await;
    let bytes = small_bundle_bytes();
    let info = client.upload_weights(bytes.clone()).await.unwrap();
    assert_eq!(info.order, 4);
    assert_eq!(info.su, 4);
    assert_eq!(client.weights_info(&info.id).await.unwrap(), info);

    let loaded = LoadedWeights::from_bytes(&bytes).unwrap();
    let points = client.constellation(&info.id).await.unwrap();
    assert_eq!(points.order, 4);

    let req = SimulateRequest {
        config: sweep(DetectorKind::Gepnet),
        modulation: Modulation::Bundle,
        weights: Some(info.id.clone()),
    };
    let remote = client.simulate(&req).await.unwrap();
    assert_eq!(remote, service::simulate(&req, Some(&loaded.weights)).unwrap());

    let c = qam_constellation(4).unwrap();
    let mut rng = SimRng::new(1, 1);
    let s = TransmissionSample::draw(&mut rng, 2, 4, &c, snr_to_sigma2(8.0, 2, 4));
    let h = s.channel.h();
    let det = DetectRequest {
        detector: DetectorKind::Gepnet,
        h: (0..h.nrows()).map(|r| h.row(r).iter().copied().collect()).collect(),
        y: s.y.iter().copied().collect(),
        sigma2: s.channel.sigma2(),
        modulation: Modulation::Bundle,
        weights: Some(info.id),
        ep: EpConfig::default(),
    };
    let remote = client.detect(&det).await.unwrap();
    let local = service::detect_one(&det, Some(&loaded.weights)).unwrap();
    assert_eq!(remote, local);
    let probs = remote.probabilities.unwrap();
    assert_eq!(probs.len(), 2);
    for p in probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
