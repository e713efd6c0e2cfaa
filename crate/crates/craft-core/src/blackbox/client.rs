//! TCP client implementing [`BlackBoxOracle`] against the service: same
//! contract as the in-process oracle, reached over the wire protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::blackbox::wire::{self, Request, Response};
use crate::blackbox::BlackBoxOracle;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug)]
struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Remote oracle over one TCP connection. Requests are serialized (one in
/// flight per connection, enforced with a mutex); the server-side ledger
/// state is mirrored from each predict response so `queries_used` /
/// `query_budget` reflect the last thing the server told us.
#[derive(Debug)]
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    used: AtomicU64,
    budget: AtomicU64,
}

impl RemoteOracle {
    /// Connects to `addr` (e.g. "127.0.0.1:7878"). Transport failures are
    /// retriable I/O errors; nothing is charged by connecting.
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self {
            conn: Mutex::new(Connection {
                reader: BufReader::new(stream),
                writer,
            }),
            used: AtomicU64::new(0),
            budget: AtomicU64::new(0),
        })
    }

    fn call(&self, req: &Request) -> Result<Response> {
        let mut conn = self.conn.lock().unwrap();
        let mut line = serde_json::to_string(req)
            .map_err(|e| Error::Protocol(format!("failed to encode request: {e}")))?;
        line.push('\n');
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.flush()?;

        let mut buf = String::new();
        let n = conn.reader.read_line(&mut buf)?;
        if n == 0 {
            return Err(Error::Protocol("server closed the connection".into()));
        }
        serde_json::from_str(buf.trim_end())
            .map_err(|e| Error::Protocol(format!("malformed response line: {e}")))
    }

    /// Maps a server-reported failure back onto the local error type. The
    /// budget error is terminal and keeps its exact message; anything else
    /// surfaces as a protocol-level error carrying the server's text.
    fn server_error(msg: String) -> Error {
        if msg == Error::BudgetExhausted.to_string() {
            Error::BudgetExhausted
        } else {
            Error::Protocol(format!("server error: {msg}"))
        }
    }
}

impl BlackBoxOracle for RemoteOracle {
    fn register_images(&self, handle: &str, features: &Matrix) -> Result<()> {
        let req = Request::Register {
            handle: handle.to_string(),
            n_images: features.rows(),
            dim: features.cols(),
            features: features.data().to_vec(),
        };
        let resp = self.call(&req)?;
        if !resp.ok {
            return Err(Self::server_error(
                resp.error
                    .unwrap_or_else(|| "response missing field: error".into()),
            ));
        }
        Ok(())
    }

    fn predict(&self, handle: &str, prompts: &[Matrix]) -> Result<Matrix> {
        let (k, rows, cols, flat) = wire::flatten_prompts(prompts)?;
        let req = Request::Predict {
            handle: handle.to_string(),
            k,
            rows,
            cols,
            prompts: flat,
        };
        let resp = self.call(&req)?;
        if !resp.ok {
            return Err(Self::server_error(
                resp.error
                    .unwrap_or_else(|| "response missing field: error".into()),
            ));
        }
        let logits = resp
            .logits
            .ok_or_else(|| Error::Protocol("response missing field: logits".into()))?;
        let used = resp
            .used
            .ok_or_else(|| Error::Protocol("response missing field: used".into()))?;
        let budget = resp
            .budget
            .ok_or_else(|| Error::Protocol("response missing field: budget".into()))?;
        self.used.store(used, Ordering::SeqCst);
        self.budget.store(budget, Ordering::SeqCst);

        if logits.is_empty() || logits.len() % k != 0 {
            return Err(Error::Protocol(format!(
                "logits has length {} which does not divide into k={k} columns",
                logits.len()
            )));
        }
        Matrix::from_vec(logits.len() / k, k, logits)
    }

    fn queries_used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    fn query_budget(&self) -> u64 {
        self.budget.load(Ordering::SeqCst)
    }
}
