//! Live mode: the pipeline runs on the calling thread while a link thread
//! keeps a TCP connection to the station, drains the candidate buffer onto it
//! and forwards inbound messages back to the pipeline.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::{RobotNode, RobotStats};
use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::protocol::{encode, CandidateBuffer, FrameDecoder, Message};

#[derive(Debug, Clone, PartialEq)]
pub struct LiveOptions {
    pub endpoint: String,
    /// Pause between frames, emulating the camera rate.
    pub frame_interval_ms: u64,
    /// How long to keep serving feedback after the last frame.
    pub linger_ms: u64,
    pub reconnect_ms: u64,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            endpoint: "127.0.0.1:7878".into(),
            frame_interval_ms: 100,
            linger_ms: 5000,
            reconnect_ms: 500,
        }
    }
}

enum Notice {
    Sent { frame_id: u64, score: f64 },
}

struct Link {
    endpoint: String,
    reconnect: Duration,
    hello: Message,
    buffer: Arc<CandidateBuffer>,
    control: Receiver<Message>,
    inbound: Sender<Message>,
    notices: Sender<Notice>,
    stop: Arc<AtomicBool>,
}

impl Link {
    fn run(self) {
        while !self.stop.load(Ordering::SeqCst) {
            match TcpStream::connect(&self.endpoint) {
                Ok(stream) => {
                    log::info!("connected to station at {}", self.endpoint);
                    if let Err(e) = self.serve(stream) {
                        log::warn!("station link dropped: {e}");
                    }
                }
                Err(e) => log::debug!("station unreachable: {e}"),
            }
            if !self.stop.load(Ordering::SeqCst) {
                thread::sleep(self.reconnect);
            }
        }
    }

    fn serve(&self, mut stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_millis(50)))?;
        let alive = Arc::new(AtomicBool::new(true));
        let reader = {
            let stream = stream.try_clone()?;
            let inbound = self.inbound.clone();
            let alive = Arc::clone(&alive);
            let stop = Arc::clone(&self.stop);
            thread::spawn(move || read_loop(stream, inbound, alive, stop))
        };
        let result = self.write_loop(&mut stream, &alive);
        alive.store(false, Ordering::SeqCst);
        let _ = stream.shutdown(std::net::Shutdown::Both);
        let _ = reader.join();
        result
    }

    fn write_loop(&self, stream: &mut TcpStream, alive: &AtomicBool) -> Result<()> {
        stream.write_all(&encode(&self.hello)?)?;
        while alive.load(Ordering::SeqCst) && !self.stop.load(Ordering::SeqCst) {
            while let Ok(msg) = self.control.try_recv() {
                stream.write_all(&encode(&msg)?)?;
            }
            for c in self.buffer.drain_highest(self.buffer.capacity()) {
                let msg = Message::Candidate {
                    frame_id: c.frame_id,
                    score: c.score,
                    t_ms: c.t_ms,
                    image: c.payload.clone(),
                };
                if let Err(e) = stream.write_all(&encode(&msg)?) {
                    // keep the candidate for the next connection
                    self.buffer.push(c)?;
                    return Err(e.into());
                }
                let _ = self.notices.send(Notice::Sent {
                    frame_id: c.frame_id,
                    score: c.score,
                });
            }
            thread::sleep(Duration::from_millis(10));
        }
        Ok(())
    }
}

fn read_loop(mut stream: TcpStream, inbound: Sender<Message>, alive: Arc<AtomicBool>, stop: Arc<AtomicBool>) {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    while alive.load(Ordering::SeqCst) && !stop.load(Ordering::SeqCst) {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                decoder.push(&buf[..n]);
                while let Some(next) = decoder.next_message() {
                    match next {
                        Ok(msg) => {
                            if inbound.send(msg).is_err() {
                                return;
                            }
                        }
                        Err(e) => log::warn!("dropping bad frame from station: {e}"),
                    }
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                log::warn!("station read failed: {e}");
                break;
            }
        }
    }
    alive.store(false, Ordering::SeqCst);
}

fn pump(node: &mut RobotNode, t: u64, msg: Message, control: &Sender<Message>) -> Result<()> {
    for reply in node.handle_message(t, msg)? {
        let _ = control.send(reply);
    }
    Ok(())
}

/// Runs the whole dataset through `node` while talking to a live station.
/// Transport failures never stop the pipeline; candidates stay buffered until
/// a connection is available.
pub fn run_live(node: &mut RobotNode, ds: &Dataset, opts: &LiveOptions) -> Result<RobotStats> {
    let warmup = node.config().warmup;
    if ds.len() < warmup {
        return Err(invalid(format!(
            "dataset has {} frames, fewer than the {warmup} warmup frames",
            ds.len()
        )));
    }
    let start = Instant::now();
    let now = || start.elapsed().as_millis() as u64;

    let (control_tx, control_rx) = mpsc::channel();
    let (inbound_tx, inbound_rx) = mpsc::channel();
    let (notice_tx, notice_rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let link = Link {
        endpoint: opts.endpoint.clone(),
        reconnect: Duration::from_millis(opts.reconnect_ms.max(1)),
        hello: node.hello(),
        buffer: node.buffer(),
        control: control_rx,
        inbound: inbound_tx,
        notices: notice_tx,
        stop: Arc::clone(&stop),
    };
    let link_thread = thread::spawn(move || link.run());

    let result = (|| {
        let warm = (0..warmup as u64)
            .map(|id| node.features(&ds.read_bytes(id)?))
            .collect::<Result<Vec<_>>>()?;
        node.warmup(now(), &warm)?;

        let drain = |node: &mut RobotNode| -> Result<()> {
            while let Ok(Notice::Sent { frame_id, score }) = notice_rx.try_recv() {
                node.note_sent(now(), frame_id, score)?;
            }
            while let Ok(msg) = inbound_rx.try_recv() {
                pump(node, now(), msg, &control_tx)?;
            }
            Ok(())
        };

        for id in warmup as u64..ds.len() as u64 {
            node.process(now(), id, ds.read_bytes(id)?)?;
            drain(node)?;
            if opts.frame_interval_ms > 0 {
                thread::sleep(Duration::from_millis(opts.frame_interval_ms));
            }
        }
        let deadline = Instant::now() + Duration::from_millis(opts.linger_ms);
        while Instant::now() < deadline {
            match inbound_rx.recv_timeout(Duration::from_millis(20)) {
                Ok(msg) => pump(node, now(), msg, &control_tx)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            drain(node)?;
        }
        // give the link a moment to flush queued acks
        thread::sleep(Duration::from_millis(50));
        drain(node)?;
        node.finish(now())
    })();

    stop.store(true, Ordering::SeqCst);
    let _ = link_thread.join();
    result?;
    Ok(node.stats())
}
