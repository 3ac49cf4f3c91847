use std::fmt;
use std::str::FromStr;

use super::TransportError;

pub const DEFAULT_TCP_PORT: u16 = 7447;
/// Environment variable naming the broker address used when none is given.
pub const BROKER_ENV: &str = "METAROS_BROKER";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Inproc,
    Tcp,
}

/// `inproc://<registry key>` or `tcp://<host>:<port>`. A bare `host:port`
/// is read as TCP.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EndpointAddress {
    pub scheme: Scheme,
    pub target: String,
}

impl EndpointAddress {
    pub fn inproc(key: impl Into<String>) -> EndpointAddress {
        EndpointAddress {
            scheme: Scheme::Inproc,
            target: key.into(),
        }
    }

    pub fn tcp(host: &str, port: u16) -> Result<EndpointAddress, TransportError> {
        format!("tcp://{host}:{port}").parse()
    }

    /// `$METAROS_BROKER`, falling back to `tcp://127.0.0.1:7447`.
    pub fn from_env_or_default() -> Result<EndpointAddress, TransportError> {
        match std::env::var(BROKER_ENV) {
            Ok(v) if !v.is_empty() => v.parse(),
            _ => Ok(EndpointAddress {
                scheme: Scheme::Tcp,
                target: format!("127.0.0.1:{DEFAULT_TCP_PORT}"),
            }),
        }
    }

    /// Host and port of a TCP address.
    pub fn host_port(&self) -> Option<(&str, u16)> {
        if self.scheme != Scheme::Tcp {
            return None;
        }
        let (host, port) = self.target.rsplit_once(':')?;
        Some((host.trim_start_matches('[').trim_end_matches(']'), port.parse().ok()?))
    }
}

impl FromStr for EndpointAddress {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || TransportError::InvalidAddress(s.to_string());
        if let Some(key) = s.strip_prefix("inproc://") {
            if key.is_empty() {
                return Err(invalid());
            }
            return Ok(EndpointAddress::inproc(key));
        }
        let target = s.strip_prefix("tcp://").unwrap_or(s);
        let (host, port) = target.rsplit_once(':').ok_or_else(invalid)?;
        let port: u16 = port.parse().map_err(|_| invalid())?;
        if host.is_empty() || port == 0 {
            return Err(invalid());
        }
        Ok(EndpointAddress {
            scheme: Scheme::Tcp,
            target: target.to_string(),
        })
    }
}

impl fmt::Display for EndpointAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scheme {
            Scheme::Inproc => write!(f, "inproc://{}", self.target),
            Scheme::Tcp => write!(f, "tcp://{}", self.target),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_schemes() {
        let a: EndpointAddress = "inproc://bus".parse().unwrap();
        assert_eq!(a, EndpointAddress::inproc("bus"));
        let t: EndpointAddress = "tcp://127.0.0.1:7447".parse().unwrap();
        assert_eq!(t.host_port(), Some(("127.0.0.1", 7447)));
        let bare: EndpointAddress = "localhost:9000".parse().unwrap();
        assert_eq!(bare.scheme, Scheme::Tcp);
        assert_eq!(bare.to_string(), "tcp://localhost:9000");
    }

    #[test]
    fn rejects_bad_ports_and_hosts() {
        for bad in ["tcp://host:0", "tcp://host:65536", "tcp://host", "tcp://:80", "inproc://", "host:x"] {
            assert!(bad.parse::<EndpointAddress>().is_err(), "{bad}");
        }
        assert!("tcp://h:1".parse::<EndpointAddress>().is_ok());
        assert!("tcp://h:65535".parse::<EndpointAddress>().is_ok());
    }
}
