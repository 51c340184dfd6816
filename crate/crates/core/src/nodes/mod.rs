//! Node state machines: end devices, gateways, the network server and the
//! gateway registry.

pub mod device;
pub mod gateway;
pub mod registry;
pub mod server;

/// Logical network address (`host:port`) of a UDP endpoint.
pub type Addr = String;
