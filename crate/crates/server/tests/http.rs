use std::net::SocketAddr;

use gepnet_client::{Client, ClientError};
use gepnet_core::service::{Modulation, SimulateRequest};
use gepnet_core::sweep::{DetectorKind, SweepConfig};
use gepnet_core::weights::WeightBundle;

async fn spawn() -> Client {
    let (listener, addr) = gepnet_server::bind(SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap();
    tokio::spawn(gepnet_server::serve(listener));
    Client::new(format!("http://{addr}/"))
}

fn api_error(e: ClientError) -> (u16, i32) {
    match e {
        ClientError::Api { status, exit_code, .. } => (status.as_u16(), exit_code),
        other => panic!("expected an API error, got {other}"),
    }
}

#[tokio::test]
async fn garbage_upload_is_unprocessable() {
    let client = spawn().await;
    let err = client.upload_weights(b"GEPX....".to_vec()).await.unwrap_err();
    assert_eq!(api_error(err), (422, 3));

    // a well-formed but empty bundle is not a usable parameter set
    let empty = WeightBundle::default().to_bytes().unwrap();
    let err = client.upload_weights(empty).await.unwrap_err();
    assert_eq!(api_error(err), (422, 3));
}

#[tokio::test]
async fn unknown_weights_id_is_not_found() {
    let client = spawn().await;
    let err = client.constellation("w404").await.unwrap_err();
    assert_eq!(api_error(err), (404, 2));
}

#[tokio::test]
async fn invalid_sweep_is_bad_request() {
    let client = spawn().await;
    let req = SimulateRequest {
        config: SweepConfig {
            snr_step: 0.0,
            ..SweepConfig::default()
        },
        modulation: Modulation::Qam { order: 16 },
        weights: None,
    };
    assert_eq!(api_error(client.simulate(&req).await.unwrap_err()), (400, 2));

    let req = SimulateRequest {
        config: SweepConfig {
            detector: DetectorKind::Ml,
            nt: 8,
            ..SweepConfig::default()
        },
        modulation: Modulation::Qam { order: 16 },
        weights: None,
    };
    assert_eq!(api_error(client.simulate(&req).await.unwrap_err()), (400, 2));
}

#[tokio::test]
async fn malformed_json_is_client_error() {
    let client = spawn().await;
    let req = gepnet_core::service::ComplexityRequest {
        m: 16,
        k: 3,
        n: 8,
        sizes: Default::default(),
    };
    assert_eq!(api_error(client.complexity(&req).await.unwrap_err()), (400, 2));
}

#[tokio::test]
async fn unreachable_service_is_io_error() {
    let client = Client::new("http://127.0.0.1:9");
    let err = client.health().await.unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
