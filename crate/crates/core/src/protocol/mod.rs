//! Round-based coordinator/client protocol.
//!
//! The coordinator sits with the first client and holds `y`. Clients hold
//! their covariate blocks and their share of θ; only the statistics in
//! [`ProtocolMessage`] ever cross a boundary. Residuals `e` and the
//! imputation inputs `(d, r)` are broadcast as n-vectors, which is the main
//! leakage surface of the scheme.

mod client;
mod federation;
mod message;
mod server;
mod transport;

pub use client::{gaussian_projection, ClientAgent, ClientRecord, LocalParameters, SketchSecrets};
pub use federation::{Federation, FederationConfig, FederationOutcome, Scheduler};
pub use message::{
    Envelope, MissingRows, ModelMatrix, ModelVector, PayloadClass, ProtocolMessage, SampleScalars, SchemaContext,
    Sketch, SketchMode, SketchSeeding, UpdateRule, HEADER_BYTES, MESSAGE_KINDS,
};
pub use server::{
    CgSettings, CouplingMode, EStepState, IterationSummary, LocalGramReport, ServerCoordinator, ServerRecord,
};
pub use transport::{
    channel_pair, ChannelEndpoint, Endpoint, SocketEndpoint, TraceWriter, Traffic, TrafficCounter, TransportKind,
};
