//! The stdio proxy, its consent API and supporting pieces.

pub mod api;
pub mod fake;
pub mod framing;
pub mod jsonrpc;
pub mod launch;
pub mod proxy;
pub mod state;
pub mod tty;
