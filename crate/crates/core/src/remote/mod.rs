//! Model-server wire protocol: a client adapter and a reference server.

mod client;
pub mod protocol;
mod server;

pub use client::{Endpoint, RemoteModel, DEFAULT_TIMEOUT};
pub use protocol::{Request, Response, WireFloat, PROTOCOL_VERSION};
pub use server::{serve_connection, serve_stdio, serve_tcp, Handler};
