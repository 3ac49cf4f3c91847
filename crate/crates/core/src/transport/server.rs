use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::broker::{BrokerConfig, BrokerCore, GraphInfo};
use super::{inproc, tcp, EndpointAddress, Scheme, TransportError};

/// A running broker. Dropping the handle shuts the broker down and closes
/// every connection.
pub struct BrokerHandle {
    core: Arc<BrokerCore>,
    address: EndpointAddress,
    tcp: Option<TcpServer>,
}

struct TcpServer {
    local: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

/// Starts a broker on `address`.
pub fn broker_serve(address: &EndpointAddress, config: BrokerConfig) -> Result<BrokerHandle, TransportError> {
    match address.scheme {
        Scheme::Inproc => {
            let core = BrokerCore::new(config);
            if let Err(e) = inproc::register(&address.target, &core) {
                core.shutdown();
                return Err(e);
            }
            Ok(BrokerHandle {
                core,
                address: address.clone(),
                tcp: None,
            })
        }
        Scheme::Tcp => {
            let listener = TcpListener::bind(&address.target)
                .map_err(|e| TransportError::Bind(format!("{address}: {e}")))?;
            serve_listener(listener, config)
        }
    }
}

/// Starts a TCP broker on an already bound listener (useful with port 0).
pub fn serve_listener(listener: TcpListener, config: BrokerConfig) -> Result<BrokerHandle, TransportError> {
    let local = listener.local_addr()?;
    let core = BrokerCore::new(config);
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let core = Arc::clone(&core);
        let stop = Arc::clone(&stop);
        thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || tcp::serve(listener, core, stop))?
    };
    Ok(BrokerHandle {
        core,
        address: EndpointAddress {
            scheme: Scheme::Tcp,
            target: local.to_string(),
        },
        tcp: Some(TcpServer {
            local,
            stop,
            accept: Some(accept),
        }),
    })
}

impl BrokerHandle {
    /// Address clients should connect to (with the real port for TCP).
    pub fn address(&self) -> &EndpointAddress {
        &self.address
    }

    pub fn core(&self) -> &Arc<BrokerCore> {
        &self.core
    }

    pub fn graph_info(&self) -> GraphInfo {
        self.core.graph_info()
    }

    pub fn shutdown(&mut self) {
        if self.address.scheme == Scheme::Inproc {
            inproc::unregister(&self.address.target, &self.core);
        }
        self.core.shutdown();
        if let Some(srv) = &mut self.tcp {
            srv.stop.store(true, Ordering::Release);
            // Wake the blocking accept.
            let _ = TcpStream::connect(srv.local);
            if let Some(h) = srv.accept.take() {
                let _ = h.join();
            }
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
