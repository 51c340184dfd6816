//! Live-wire mode: the simulated network server on a real UDP socket.
//!
//! A socket thread only receives and hands datagrams over a channel; the
//! loop in `run_for` is the only code touching server state.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::encode_datagram;
use crate::ids::{Alert, IdsEngine};
use crate::nodes::server::ServerState;
use crate::radio::TimeMs;

#[derive(Debug, Clone, Default)]
pub struct LiveSummary {
    pub received: u64,
    pub replies: u64,
    pub downlinks: u64,
    pub alerts: Vec<Alert>,
}

pub struct LiveServer {
    socket: UdpSocket,
    server: ServerState,
    ids: IdsEngine,
    rng: ChaCha8Rng,
}

impl LiveServer {
    pub fn bind(listen: &str, server: ServerState, ids: IdsEngine, seed: u64) -> io::Result<(Self, SocketAddr)> {
        let socket = UdpSocket::bind(listen)?;
        let local = socket.local_addr()?;
        Ok((
            LiveServer {
                socket,
                server,
                ids,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            local,
        ))
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    /// Serves for `duration` of wall-clock time, then returns.
    pub fn run_for(&mut self, duration: Duration) -> io::Result<LiveSummary> {
        let intake = self.socket.try_clone()?;
        intake.set_read_timeout(Some(Duration::from_millis(50)))?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel::<(Instant, SocketAddr, Vec<u8>)>();
        let stop_flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            let mut buf = [0u8; 65_535];
            while !stop_flag.load(Ordering::Relaxed) {
                match intake.recv_from(&mut buf) {
                    Ok((n, from)) => {
                        if tx.send((Instant::now(), from, buf[..n].to_vec())).is_err() {
                            break;
                        }
                    }
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    Err(_) => break,
                }
            }
        });

        let start = Instant::now();
        let ms = |t: Instant| t.duration_since(start).as_millis() as TimeMs;
        let mut summary = LiveSummary::default();
        let mut pending = Vec::new();
        let result = loop {
            let now = Instant::now();
            if now.duration_since(start) >= duration {
                break Ok(());
            }
            let wait = Duration::from_millis(10).min(duration - now.duration_since(start));
            match rx.recv_timeout(wait) {
                Ok((at, from, bytes)) => {
                    summary.received += 1;
                    let inbound = self.server.receive(ms(at), &bytes, &from.to_string(), false);
                    for r in &inbound.replies {
                        if let Ok(b) = encode_datagram(r) {
                            self.socket.send_to(&b, from)?;
                            summary.replies += 1;
                        }
                    }
                    for o in &inbound.observations {
                        if let Ok(a) = self.ids.observe(o) {
                            summary.alerts.extend(a);
                        }
                    }
                    pending.extend(inbound.downlinks);
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => break Ok(()),
            }
            let now_ms = ms(Instant::now());
            let (due, later): (Vec<_>, Vec<_>) = pending.drain(..).partition(|r| r.at <= now_ms);
            pending = later;
            for req in due {
                let Ok(dl) = self.server.send_downlink(&req, &mut self.rng) else {
                    continue;
                };
                let (Ok(b), Ok(to)) = (encode_datagram(&dl.datagram), dl.address.parse::<SocketAddr>()) else {
                    continue;
                };
                self.socket.send_to(&b, to)?;
                summary.downlinks += 1;
            }
        };
        stop.store(true, Ordering::Relaxed);
        let _ = handle.join();
        result.map(|_: ()| summary)
    }
}
