//! Launching a coordinator and its clients over a chosen transport.

use std::collections::VecDeque;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread::JoinHandle;

use super::client::{ClientAgent, LocalParameters, SketchSecrets};
use super::message::{Envelope, ProtocolMessage, UpdateRule};
use super::server::{CgSettings, CouplingMode, IterationSummary, Link, ServerCoordinator, ServerRecord};
use super::transport::{channel_pair, Endpoint, SocketEndpoint, TraceWriter, Traffic, TransportKind};
use crate::error::{Result, VfemError};
use crate::model::{ModelParameters, VerticalDataset};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduler {
    /// Agents stepped in client order on the coordinator's thread.
    #[default]
    RoundRobin,
    /// One worker thread per client.
    Threaded,
}

#[derive(Debug, Clone, Default)]
pub struct FederationConfig {
    pub transport: TransportKind,
    pub scheduler: Scheduler,
    pub coupling: CouplingMode,
    pub cg: CgSettings,
    pub trace: Option<PathBuf>,
    /// Silently drop the n-th coordinator-to-client message (fault injection).
    pub drop_message: Option<u64>,
    /// Keep per-iteration snapshots on every agent.
    pub record: bool,
    /// Source of the clients' sketch secrets.
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.transport == TransportKind::Socket && self.scheduler == Scheduler::RoundRobin {
            return Err(VfemError::InvalidConfig("the socket transport needs the threaded scheduler".into()));
        }
        if self.drop_message.is_some() && self.scheduler == Scheduler::Threaded {
            return Err(VfemError::InvalidConfig("fault injection runs under the round-robin scheduler".into()));
        }
        Ok(())
    }

    pub fn threaded(mut self, transport: TransportKind) -> Self {
        self.scheduler = Scheduler::Threaded;
        self.transport = transport;
        self
    }
}

/// What remains after the clients shut down.
pub struct FederationOutcome {
    pub agents: Vec<ClientAgent>,
    pub server_records: Vec<ServerRecord>,
    pub traffic: Traffic,
}

pub struct Federation {
    server: ServerCoordinator,
    workers: Vec<Option<JoinHandle<Result<ClientAgent>>>>,
    closed: bool,
}

fn run_client(mut agent: ClientAgent, mut ep: impl Endpoint) -> Result<ClientAgent> {
    loop {
        let env = ep.recv()?;
        let (replies, stop) = agent.handle(env)?;
        for r in replies {
            ep.send(r)?;
        }
        if stop {
            return Ok(agent);
        }
    }
}

impl Federation {
    /// Start one agent per client holding its share of `theta`.
    pub fn launch(data: &VerticalDataset, theta: &ModelParameters, cfg: &FederationConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = data.layout().clone();
        theta.validate(&layout)?;
        let dims = layout.dims().to_vec();
        let shared = seed::derive(cfg.seed, &[0x5EED]);
        let agents: Vec<ClientAgent> = (0..layout.num_clients())
            .map(|k| {
                let local = LocalParameters {
                    beta: theta.beta_block(&layout, k).into_owned(),
                    mu: theta.mu[k].clone(),
                    sigma: theta.sigma[k].clone(),
                };
                let secrets = SketchSecrets { shared, own: seed::derive(cfg.seed, &[0xC11E, k as u64]) };
                let agent = ClientAgent::new(data.client(k).clone(), local, dims.clone(), secrets);
                if cfg.record {
                    agent.with_recording()
                } else {
                    agent
                }
            })
            .collect();

        let mut workers = Vec::new();
        let links = match (cfg.scheduler, cfg.transport) {
            (Scheduler::RoundRobin, _) => agents
                .into_iter()
                .map(|a| Link::Local { agent: Box::new(a), inbox: VecDeque::new(), outbox: VecDeque::new() })
                .collect(),
            (Scheduler::Threaded, TransportKind::InProcess) => {
                let mut links = Vec::new();
                for agent in agents {
                    let (server_end, client_end) = channel_pair();
                    workers.push(Some(std::thread::spawn(move || run_client(agent, client_end))));
                    links.push(Link::Remote(Box::new(server_end)));
                }
                links
            }
            (Scheduler::Threaded, TransportKind::Socket) => {
                let listener = TcpListener::bind("127.0.0.1:0")?;
                let addr = listener.local_addr()?;
                let kk = agents.len();
                for agent in agents {
                    workers.push(Some(std::thread::spawn(move || {
                        let mut ep = SocketEndpoint::new(TcpStream::connect(addr)?)?;
                        let ident = Envelope::new(0, 0, agent.index() as u32 + 1, ProtocolMessage::Hello);
                        ep.send(ident)?;
                        run_client(agent, ep)
                    })));
                }
                let mut slots: Vec<Option<SocketEndpoint>> = (0..kk).map(|_| None).collect();
                for _ in 0..kk {
                    let (stream, _) = listener.accept()?;
                    let mut ep = SocketEndpoint::new(stream)?;
                    let ident = ep.recv()?;
                    let k = (ident.from as usize).checked_sub(1).filter(|&k| k < kk && slots[k].is_none());
                    let k = k.ok_or_else(|| VfemError::Transport(format!("bad client identity {}", ident.from)))?;
                    slots[k] = Some(ep);
                }
                slots.into_iter().map(|ep| Link::Remote(Box::new(ep.expect("all slots filled")))).collect()
            }
        };
        let mut server =
            ServerCoordinator::new(data.y().clone(), layout, theta.sigma2, links, cfg.coupling, cfg.cg);
        if let Some(path) = &cfg.trace {
            server.set_trace(TraceWriter::create(path)?);
        }
        if let Some(nth) = cfg.drop_message {
            server.set_drop(nth);
        }
        if cfg.record {
            server.enable_recording();
        }
        let mut fed = Self { server, workers, closed: false };
        let hs = fed.server.handshake();
        fed.check(hs)?;
        Ok(fed)
    }

    pub fn server(&self) -> &ServerCoordinator {
        &self.server
    }

    /// Surface a worker's own error in place of the hang-up it caused.
    fn check<T>(&mut self, r: Result<T>) -> Result<T> {
        match r {
            Err(VfemError::Transport(msg)) => {
                for slot in self.workers.iter_mut() {
                    if slot.as_ref().is_some_and(|h| h.is_finished()) {
                        if let Some(Ok(Err(e))) = slot.take().map(|h| h.join()) {
                            return Err(e);
                        }
                    }
                }
                Err(VfemError::Transport(msg))
            }
            other => other,
        }
    }

    pub fn iterate(&mut self, rule: UpdateRule) -> Result<IterationSummary> {
        let r = self.server.iterate(rule);
        self.check(r)
    }

    pub fn parameters(&mut self) -> Result<ModelParameters> {
        let r = self.server.report_parameters();
        self.check(r)
    }

    pub fn checkpoint(&mut self) -> Result<()> {
        let r = self.server.checkpoint();
        self.check(r)
    }

    pub fn restore(&mut self) -> Result<()> {
        let r = self.server.restore();
        self.check(r)
    }

    pub fn perturb(&mut self, coord: usize, delta: f64) -> Result<()> {
        let r = self.server.perturb(coord, delta);
        self.check(r)
    }

    pub fn announce_converged(&mut self) -> Result<()> {
        let r = self.server.announce_converged();
        self.check(r)
    }

    pub fn server_mut(&mut self) -> &mut ServerCoordinator {
        &mut self.server
    }

    /// One application of the closed-form EM map at the current θ, shifted
    /// by `delta` along flat coordinate `coord`. State is restored afterwards.
    pub fn em_map(&mut self, shift: Option<(usize, f64)>) -> Result<ModelParameters> {
        self.checkpoint()?;
        if let Some((coord, delta)) = shift {
            self.perturb(coord, delta)?;
        }
        self.iterate(UpdateRule::ClosedForm)?;
        let out = self.parameters()?;
        self.restore()?;
        Ok(out)
    }

    /// Stop every client and collect the agents in client order.
    pub fn finish(mut self) -> Result<FederationOutcome> {
        self.closed = true;
        let r = self.server.shutdown();
        self.check(r)?;
        let mut agents: Vec<ClientAgent> = Vec::new();
        for link in std::mem::take(&mut self.server.links) {
            if let Link::Local { agent, .. } = link {
                agents.push(*agent);
            }
        }
        for slot in self.workers.iter_mut() {
            let handle = slot.take().ok_or_else(|| VfemError::Transport("client worker already gone".into()))?;
            let agent = handle.join().map_err(|_| VfemError::Transport("client worker panicked".into()))??;
            agents.push(agent);
        }
        agents.sort_by_key(|a| a.index());
        Ok(FederationOutcome {
            agents,
            server_records: self.server.records().to_vec(),
            traffic: self.server.traffic(),
        })
    }
}

impl Drop for Federation {
    fn drop(&mut self) {
        if self.closed {
            return;
        }
        let _ = self.server.shutdown();
        for slot in self.workers.iter_mut() {
            if let Some(h) = slot.take() {
                let _ = h.join();
            }
        }
    }
}
