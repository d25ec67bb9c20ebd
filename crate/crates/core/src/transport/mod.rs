//! Message transports: a deterministic simulator and TCP sockets.

pub mod sim;
pub mod socket;

pub use sim::{Cluster, SimConnection, SimNetConfig};
pub use socket::{NamingServer, NodeServer, TcpConnection, TriggerSinkServer};
