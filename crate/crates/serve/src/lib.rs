//! Imagination service: live sessions that step a private simulator on
//! streamed actions and return synchronized ground-truth and imagined
//! frames over a WebSocket JSON protocol.

mod error;
pub mod protocol;
mod server;
mod session;
mod worker;

pub use error::{Result, ServeError};
pub use server::{router, serve, AppState};
pub use session::{Session, SessionConfig, SessionEnv};
pub use worker::{Backend, ImagineRequest, Worker};
