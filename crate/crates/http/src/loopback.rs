//! Simulator transport over a real loopback socket.

use std::net::{Ipv4Addr, SocketAddr};

use ota_core::agent::CloudLink;
use ota_core::cloud::{Clock, SharedService};
use ota_core::sim::{LinkFactory, Transport};

use crate::client::{Client, HttpLink};
use crate::server::ServerHandle;

/// Starts a server on `127.0.0.1:0` when attached; agents talk to it over
/// HTTP while the simulator keeps driving the clock.
#[derive(Default)]
pub struct LoopbackHttp {
    server: Option<ServerHandle>,
}

impl LoopbackHttp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn url(&self) -> Option<String> {
        self.server.as_ref().map(ServerHandle::url)
    }
}

impl Transport for LoopbackHttp {
    fn attach(&mut self, service: SharedService, clock: Clock) -> Result<Box<dyn LinkFactory>, String> {
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, 0));
        let server = ServerHandle::spawn(service, clock, addr).map_err(|e| e.to_string())?;
        let base = server.url();
        self.server = Some(server);
        Ok(Box::new(HttpFactory { base }))
    }
}

struct HttpFactory {
    base: String,
}

impl LinkFactory for HttpFactory {
    fn connect(&self, _vehicle_id: &str, token: &str) -> Box<dyn CloudLink> {
        Box::new(HttpLink::new(Client::new(&self.base, token)))
    }
}
