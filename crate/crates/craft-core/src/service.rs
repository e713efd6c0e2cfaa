//! TCP process boundary around the surrogate oracle: clients can register
//! image features and request predictions, and see nothing else — no
//! weights, no features back, no activations.
//!
//! The protocol is the newline-delimited JSON of [`crate::blackbox::wire`],
//! one request in flight per connection. All connections share one model
//! and one query ledger, so the budget holds globally no matter how many
//! clients connect. Every request is answered — a malformed line gets an
//! `ok:false` response and the connection stays open — and logged to stderr
//! as one line carrying the op, handle, ledger state, and latency.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use crate::blackbox::wire::{features_matrix, prompt_matrices, Request, Response};
use crate::blackbox::{BlackBoxOracle, InProcessOracle, SurrogateModel, SurrogateParams};
use crate::error::Result;

/// A bound, not-yet-serving oracle server.
pub struct OracleServer {
    listener: TcpListener,
    oracle: Arc<InProcessOracle>,
}

impl OracleServer {
    /// Binds `addr` (e.g. `"127.0.0.1:0"` for an ephemeral port) around a
    /// shared model with a fresh ledger of `budget` queries.
    pub fn bind(addr: &str, model: Arc<SurrogateModel>, budget: u64) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            oracle: Arc::new(InProcessOracle::new(model, budget)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until the process dies. Each connection gets its own thread;
    /// accept errors are logged and skipped.
    pub fn run(self) -> Result<()> {
        accept_loop(self.listener, self.oracle, Arc::new(AtomicBool::new(false)));
        Ok(())
    }

    /// Serves on a background thread; the returned handle stops it.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_for_loop = Arc::clone(&stop);
        let thread = thread::spawn(move || accept_loop(self.listener, self.oracle, stop_for_loop));
        Ok(ServerHandle { addr, stop, thread })
    }
}

/// Handle to a background server; dropping it without calling [`stop`]
/// leaves the server running detached.
///
/// [`stop`]: ServerHandle::stop
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

impl ServerHandle {
    /// Stops accepting and joins the accept loop. Connections already open
    /// run to completion on their own threads.
    pub fn stop(self) {
        self.stop.store(true, Ordering::SeqCst);
        // The accept loop blocks in accept(); poke it awake.
        let _ = TcpStream::connect(self.addr);
        let _ = self.thread.join();
    }
}

/// Builds the seeded model and serves it on `listen` until terminated —
/// the one-call form used by the CLI.
pub fn serve(params: &SurrogateParams, budget: u64, listen: &str) -> Result<()> {
    let model = Arc::new(SurrogateModel::new(params)?);
    let server = OracleServer::bind(listen, model, budget)?;
    eprintln!(
        "[serve] listening on {} (budget {budget}, seed {})",
        server.local_addr()?,
        params.seed
    );
    server.run()
}

fn accept_loop(listener: TcpListener, oracle: Arc<InProcessOracle>, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(stream) => {
                let oracle = Arc::clone(&oracle);
                thread::spawn(move || handle_connection(stream, &oracle));
            }
            Err(e) => eprintln!("[serve] accept failed: {e}"),
        }
    }
}

/// Reads one request per line until the client hangs up, answering each
/// with exactly one JSON line. Request/response pairing is in-order because
/// nothing is pipelined.
fn handle_connection(stream: TcpStream, oracle: &InProcessOracle) {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "?".into());
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(e) => {
            eprintln!("[serve] {peer}: cannot clone stream: {e}");
            return;
        }
    };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => {
                eprintln!("[serve] {peer}: read failed: {e}");
                break;
            }
        }
        let started = Instant::now();
        let (op, handle, response) = match serde_json::from_str::<Request>(line.trim()) {
            Ok(request) => dispatch(request, oracle),
            Err(e) => (
                "malformed",
                "-".to_string(),
                Response::failure(format!("malformed request: {e}")),
            ),
        };
        eprintln!(
            "[serve] {peer} op={op} handle={handle} ok={} used={}/{} latency={:?}",
            response.ok,
            oracle.queries_used(),
            oracle.query_budget(),
            started.elapsed()
        );
        let payload =
            serde_json::to_string(&response).expect("responses contain only JSON-safe fields");
        if writeln!(writer, "{payload}")
            .and_then(|_| writer.flush())
            .is_err()
        {
            break;
        }
    }
}

fn dispatch(request: Request, oracle: &InProcessOracle) -> (&'static str, String, Response) {
    match request {
        Request::Register {
            handle,
            n_images,
            dim,
            features,
        } => {
            let outcome = features_matrix(n_images, dim, features)
                .and_then(|m| oracle.register_images(&handle, &m));
            let response = match outcome {
                Ok(()) => Response::success(),
                Err(e) => Response::failure(e.to_string()),
            };
            ("register", handle, response)
        }
        Request::Predict {
            handle,
            k,
            rows,
            cols,
            prompts,
        } => {
            let outcome =
                prompt_matrices(k, rows, cols, prompts).and_then(|ps| oracle.predict(&handle, &ps));
            let response = match outcome {
                Ok(logits) => Response::prediction(
                    logits.into_data(),
                    oracle.queries_used(),
                    oracle.query_budget(),
                ),
                Err(e) => Response::failure(e.to_string()),
            };
            ("predict", handle, response)
        }
    }
}
