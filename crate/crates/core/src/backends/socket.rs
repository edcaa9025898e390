//! TCP mesh transport for multi-process runs on one host.
//!
//! Rank r accepts connections from ranks below it and connects to ranks
//! above it. Both sides of a new connection exchange a 9-byte handshake:
//! magic, version, rank (u32 LE). Each connection gets a reader thread
//! that forwards decoded frames into one inbox, so sends never block on a
//! peer that is itself blocked sending.

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{self, MsgType, WireHeader, HEADER_LEN, MAGIC, VERSION};
use super::{Frame, Transport, TransportError};

pub const DEFAULT_BASE_PORT: u16 = 29500;
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(30);
const HANDSHAKE_LEN: usize = 9;

/// Launch parameters read from `GSYNC_RANK`, `GSYNC_WORLD_SIZE`,
/// `GSYNC_HOSTFILE` and `GSYNC_BASE_PORT`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocketEnv {
    pub rank: usize,
    pub world: usize,
    pub hostfile: Option<PathBuf>,
    pub base_port: u16,
}

impl SocketEnv {
    /// Missing rank and world default to a single-process run.
    pub fn from_env() -> Result<Self, TransportError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, TransportError> {
        fn num<T: std::str::FromStr>(key: &str, v: Option<String>, default: T) -> Result<T, TransportError> {
            match v {
                None => Ok(default),
                Some(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| TransportError::Config(format!("{key}={s:?} is not a valid number"))),
            }
        }
        let env = SocketEnv {
            rank: num("GSYNC_RANK", get("GSYNC_RANK"), 0)?,
            world: num("GSYNC_WORLD_SIZE", get("GSYNC_WORLD_SIZE"), 1)?,
            hostfile: get("GSYNC_HOSTFILE").filter(|s| !s.is_empty()).map(PathBuf::from),
            base_port: num("GSYNC_BASE_PORT", get("GSYNC_BASE_PORT"), DEFAULT_BASE_PORT)?,
        };
        if env.world == 0 || env.rank >= env.world {
            return Err(TransportError::Config(format!(
                "rank {} out of range for world size {}",
                env.rank, env.world
            )));
        }
        Ok(env)
    }

    pub fn endpoints(&self) -> Result<Vec<String>, TransportError> {
        endpoints(self.world, self.hostfile.as_deref(), self.base_port)
    }
}

/// One `host:port` per line; line r is rank r. Blank lines and `#` comments
/// are skipped.
pub fn parse_hostfile(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Endpoints from a hostfile, or `127.0.0.1:base_port+r` without one.
pub fn endpoints(world: usize, hostfile: Option<&Path>, base_port: u16) -> Result<Vec<String>, TransportError> {
    let eps = match hostfile {
        Some(p) => parse_hostfile(&std::fs::read_to_string(p)?),
        None => (0..world)
            .map(|r| format!("127.0.0.1:{}", base_port as usize + r))
            .collect(),
    };
    if eps.len() < world {
        return Err(TransportError::Config(format!(
            "hostfile lists {} endpoints for world size {world}",
            eps.len()
        )));
    }
    Ok(eps.into_iter().take(world).collect())
}

pub fn sock_connect_all(
    rank: usize,
    world: usize,
    hostfile: Option<&Path>,
    base_port: u16,
) -> Result<SocketTransport, TransportError> {
    let eps = endpoints(world, hostfile, base_port)?;
    connect_mesh(rank, &eps, None, DEFAULT_CONNECT_TIMEOUT)
}

fn handshake_bytes(rank: usize) -> [u8; HANDSHAKE_LEN] {
    let mut b = [0u8; HANDSHAKE_LEN];
    b[0..4].copy_from_slice(&MAGIC);
    b[4] = VERSION;
    b[5..9].copy_from_slice(&(rank as u32).to_le_bytes());
    b
}

fn read_handshake(stream: &mut TcpStream, who: &str) -> Result<usize, TransportError> {
    let mut b = [0u8; HANDSHAKE_LEN];
    stream.read_exact(&mut b).map_err(|e| TransportError::Handshake {
        peer: who.to_string(),
        reason: format!("read failed: {e}"),
    })?;
    let fail = |reason: String| TransportError::Handshake {
        peer: who.to_string(),
        reason,
    };
    let rank = u32::from_le_bytes([b[5], b[6], b[7], b[8]]) as usize;
    if b[0..4] != MAGIC {
        return Err(fail(format!("bad magic {:02x?}", &b[0..4])));
    }
    if b[4] != VERSION {
        return Err(fail(format!(
            "rank {rank} speaks version {}, expected {VERSION}",
            b[4]
        )));
    }
    Ok(rank)
}

fn connect_with_retry(addr: &str, peer: usize, deadline: Instant) -> Result<TcpStream, TransportError> {
    let timeout = || TransportError::ConnectTimeout {
        peer,
        addr: addr.to_string(),
    };
    loop {
        let resolved = addr.to_socket_addrs().ok().and_then(|mut a| a.next());
        if let Some(sa) = resolved {
            let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
            if let Ok(s) = TcpStream::connect_timeout(&sa, left.min(Duration::from_secs(1))) {
                return Ok(s);
            }
        }
        if Instant::now() >= deadline {
            return Err(timeout());
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Builds the full mesh. `listener` may be pre-bound by the caller (useful
/// with ephemeral ports); otherwise this rank binds its own endpoint.
pub fn connect_mesh(
    rank: usize,
    endpoints: &[String],
    listener: Option<TcpListener>,
    timeout: Duration,
) -> Result<SocketTransport, TransportError> {
    let world = endpoints.len();
    if rank >= world {
        return Err(TransportError::Config(format!("rank {rank} out of range for {world} endpoints")));
    }
    let deadline = Instant::now() + timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

    let listener = match (listener, rank > 0) {
        (Some(l), _) => Some(l),
        (None, true) => Some(TcpListener::bind(&endpoints[rank])?),
        (None, false) => None,
    };

    for (peer, addr) in endpoints.iter().enumerate().skip(rank + 1) {
        let mut s = connect_with_retry(addr, peer, deadline)?;
        let who = format!("rank {peer} ({addr})");
        s.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))))?;
        s.write_all(&handshake_bytes(rank))?;
        let got = read_handshake(&mut s, &who)?;
        if got != peer {
            return Err(TransportError::Handshake {
                peer: who,
                reason: format!("announced rank {got}"),
            });
        }
        streams[peer] = Some(s);
    }

    if let Some(listener) = listener {
        listener.set_nonblocking(true)?;
        let mut pending = rank;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, addr)) => {
                    s.set_nonblocking(false)?;
                    s.set_read_timeout(Some(Duration::from_secs(5)))?;
                    let got = read_handshake(&mut s, &addr.to_string())?;
                    let who = format!("rank {got} ({addr})");
                    if got >= rank || streams[got].is_some() {
                        return Err(TransportError::Handshake {
                            peer: who,
                            reason: format!("unexpected rank for acceptor {rank}"),
                        });
                    }
                    s.write_all(&handshake_bytes(rank))?;
                    streams[got] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing = (0..rank).find(|&p| streams[p].is_none()).unwrap_or(0);
                        return Err(TransportError::ConnectTimeout {
                            peer: missing,
                            addr: endpoints[missing].clone(),
                        });
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    SocketTransport::start(rank, streams)
}

/// A connected mesh. Dropping it sends an orderly close to every peer.
pub struct SocketTransport {
    rank: usize,
    writers: Vec<Option<TcpStream>>,
    inbox: Receiver<Result<Frame, TransportError>>,
    bytes_sent: u64,
}

impl SocketTransport {
    fn start(rank: usize, streams: Vec<Option<TcpStream>>) -> Result<Self, TransportError> {
        let (tx, inbox) = mpsc::channel();
        let mut writers = Vec::with_capacity(streams.len());
        for (peer, s) in streams.into_iter().enumerate() {
            match s {
                None => writers.push(None),
                Some(s) => {
                    s.set_read_timeout(None)?;
                    s.set_nodelay(true)?;
                    let reader = s.try_clone()?;
                    let tx = tx.clone();
                    thread::Builder::new()
                        .name(format!("gsync-rx{peer}"))
                        .spawn(move || read_loop(reader, peer, tx))?;
                    writers.push(Some(s));
                }
            }
        }
        Ok(SocketTransport {
            rank,
            writers,
            inbox,
            bytes_sent: 0,
        })
    }

    /// Number of open peer connections.
    pub fn connections(&self) -> usize {
        self.writers.iter().filter(|w| w.is_some()).count()
    }
}

fn read_loop(mut stream: TcpStream, peer: usize, tx: Sender<Result<Frame, TransportError>>) {
    loop {
        match wire::recv_chunk(&mut stream, peer) {
            Ok((header, _)) if header.msg_type == MsgType::Close => return,
            Ok((header, payload)) => {
                if tx.send(Ok(Frame { from: peer, header, payload })).is_err() {
                    return;
                }
            }
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.writers.len()
    }

    fn send(&mut self, to: usize, header: &WireHeader, payload: &[u8]) -> Result<(), TransportError> {
        let s = self
            .writers
            .get_mut(to)
            .and_then(Option::as_mut)
            .ok_or_else(|| TransportError::Config(format!("no connection to rank {to}")))?;
        wire::send_chunk(s, header, payload).map_err(|e| match e {
            TransportError::Io(_) => TransportError::PeerClosed { peer: to },
            other => other,
        })?;
        self.bytes_sent += (HEADER_LEN + payload.len()) as u64;
        Ok(())
    }

    fn try_recv(&mut self) -> Result<Option<Frame>, TransportError> {
        match self.inbox.try_recv() {
            Ok(Ok(f)) => Ok(Some(f)),
            Ok(Err(e)) => Err(e),
            Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => Ok(None),
        }
    }

    fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for s in self.writers.iter_mut().flatten() {
            let _ = wire::send_chunk(s, &WireHeader::close(), &[]);
            let _ = s.shutdown(Shutdown::Write);
        }
    }
}
