use std::net::SocketAddr;

#[tokio::main]
async fn main() {
    gepnet_server::init_tracing();
    let addr: SocketAddr = match std::env::args().nth(1).as_deref().unwrap_or("127.0.0.1:8080").parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("usage: gepnet-server [ADDR:PORT] ({e})");
            std::process::exit(2);
        }
    };
    let (listener, local) = match gepnet_server::bind(addr).await {
        Ok(v) => v,
        Err(e) => {
            eprintln!("cannot bind {addr}: {e}");
            std::process::exit(3);
        }
    };
    tracing::info!(%local, "listening");
    if let Err(e) = gepnet_server::serve(listener).await {
        eprintln!("server error: {e}");
        std::process::exit(3);
    }
}
