//! Live station: robot link over TCP, operator API over HTTP, background
//! training and, optionally, the oracle operator.

use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinSet;

use super::api::{router, ApiState, Clock};
use super::{OracleOperator, Station, StationSummary};
use crate::error::{Error, Result};
use crate::protocol::{encode, FrameDecoder};

/// Receives the bound `(http, robot)` addresses once listening.
pub type ReadyHook = Box<dyn FnOnce(Option<std::net::SocketAddr>, Option<std::net::SocketAddr>) + Send>;

pub struct ServeOptions {
    /// HTTP address for the operator API.
    pub http: Option<String>,
    /// TCP address the robot connects to.
    pub robot: Option<String>,
    pub oracle: Option<OracleOperator>,
    pub tick_ms: u64,
    pub on_ready: Option<ReadyHook>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            http: None,
            robot: None,
            oracle: None,
            tick_ms: 20,
            on_ready: None,
        }
    }
}

/// Runs until `shutdown` resolves or a task fails, then returns the final
/// station summary. Store I/O failures stop the service with an error.
pub async fn serve(
    station: Station,
    mut opts: ServeOptions,
    shutdown: impl Future<Output = ()>,
) -> Result<(Station, StationSummary)> {
    let start = Instant::now();
    let clock: Clock = Arc::new(move || start.elapsed().as_millis() as u64);
    let shared = Arc::new(Mutex::new(station));
    let (stop_tx, stop_rx) = watch::channel(false);
    let tick = Duration::from_millis(opts.tick_ms.max(1));
    let mut tasks: JoinSet<Result<()>> = JoinSet::new();

    let mut http_addr = None;
    if let Some(addr) = &opts.http {
        let listener = TcpListener::bind(addr).await?;
        http_addr = Some(listener.local_addr()?);
        log::info!("operator API on http://{}", listener.local_addr()?);
        let app = router(ApiState {
            station: Arc::clone(&shared),
            clock: Arc::clone(&clock),
        });
        let mut stop = stop_rx.clone();
        tasks.spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move { stopped(&mut stop).await })
                .await?;
            Ok(())
        });
    }

    let mut robot_addr = None;
    if let Some(addr) = &opts.robot {
        let listener = TcpListener::bind(addr).await?;
        robot_addr = Some(listener.local_addr()?);
        log::info!("waiting for robot on {}", listener.local_addr()?);
        let shared = Arc::clone(&shared);
        let clock = Arc::clone(&clock);
        let mut stop = stop_rx.clone();
        tasks.spawn(async move {
            loop {
                tokio::select! {
                    accepted = listener.accept() => {
                        let (stream, peer) = accepted?;
                        log::info!("robot connected from {peer}");
                        if let Err(e) = robot_session(stream, &shared, &clock, stop.clone(), tick).await {
                            if matches!(e, Error::Io(_) | Error::Framing(_)) {
                                log::warn!("robot link closed: {e}");
                            } else {
                                return Err(e);
                            }
                        }
                    }
                    _ = stopped(&mut stop) => return Ok(()),
                }
            }
        });
    }

    {
        let shared = Arc::clone(&shared);
        let clock = Arc::clone(&clock);
        let mut stop = stop_rx.clone();
        tasks.spawn(async move {
            let mut interval = tokio::time::interval(tick);
            loop {
                tokio::select! {
                    _ = interval.tick() => {}
                    _ = stopped(&mut stop) => return Ok(()),
                }
                let job = shared.lock().start_cycle(clock());
                if let Some(job) = job {
                    let job = Arc::new(job);
                    let runner = Arc::clone(&job);
                    let result = tokio::task::spawn_blocking(move || runner.run())
                        .await
                        .map_err(|e| Error::Training(format!("training task panicked: {e}")))?;
                    shared.lock().finish_cycle(clock(), &job, result)?;
                }
                shared.lock().poll_sync(clock())?;
            }
        });
    }

    if let Some(mut oracle) = opts.oracle.take() {
        let shared = Arc::clone(&shared);
        let clock = Arc::clone(&clock);
        let mut stop = stop_rx.clone();
        tasks.spawn(async move {
            let mut interval = tokio::time::interval(tick);
            loop {
                tokio::select! {
                    _ = interval.tick() => {}
                    _ = stopped(&mut stop) => return Ok(()),
                }
                let mut st = shared.lock();
                while let Some(id) = st.next_pending().map(|i| i.frame_id) {
                    let answer = oracle.decide(id);
                    st.operator_decision(clock(), id, answer.decision, answer.boxes)?;
                }
            }
        });
    }

    if let Some(ready) = opts.on_ready.take() {
        ready(http_addr, robot_addr);
    }

    let mut failure = None;
    tokio::pin!(shutdown);
    tokio::select! {
        _ = &mut shutdown => {}
        Some(done) = tasks.join_next() => {
            if let Ok(Err(e)) = done {
                failure = Some(e);
            }
        }
    }
    let _ = stop_tx.send(true);
    while let Some(done) = tasks.join_next().await {
        if let Ok(Err(e)) = done {
            failure.get_or_insert(e);
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let t = clock();
    let mut station = Arc::try_unwrap(shared)
        .map_err(|_| Error::Sync("station still shared after shutdown".into()))?
        .into_inner();
    station.record_status(t)?;
    let summary = station.summary();
    Ok((station, summary))
}

async fn stopped(rx: &mut watch::Receiver<bool>) {
    let _ = rx.wait_for(|s| *s).await.map(|_| ());
}

async fn robot_session(
    stream: TcpStream,
    shared: &Arc<Mutex<Station>>,
    clock: &Clock,
    mut stop: watch::Receiver<bool>,
    tick: Duration,
) -> Result<()> {
    stream.set_nodelay(true)?;
    let (mut rd, mut wr) = stream.into_split();
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut interval = tokio::time::interval(tick);
    loop {
        tokio::select! {
            n = rd.read(&mut buf) => {
                let n = n?;
                if n == 0 {
                    log::info!("robot disconnected");
                    return Ok(());
                }
                decoder.push(&buf[..n]);
                while let Some(next) = decoder.next_message() {
                    match next {
                        Ok(msg) => shared.lock().handle_message(clock(), msg)?,
                        Err(e) => log::warn!("dropping bad frame from robot: {e}"),
                    }
                }
            }
            _ = interval.tick() => {
                let out = shared.lock().take_outbox();
                for msg in out {
                    wr.write_all(&encode(&msg)?).await?;
                }
            }
            _ = stopped(&mut stop) => {
                let out = shared.lock().take_outbox();
                for msg in out {
                    wr.write_all(&encode(&msg)?).await?;
                }
                return Ok(());
            }
        }
    }
}
