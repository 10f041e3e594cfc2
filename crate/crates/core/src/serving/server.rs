//! Newline-delimited JSON service over TCP.
//!
//! Request: `{"query": "...", "top_k": K}` (`top_k` optional). Response:
//! `{"model_version", "predictions": [...], "cache_hit"}`. A line that is not
//! a valid request gets `{"error":"bad_request"}` and the connection stays
//! open.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{categorize_top_k, emit_retrieval_terms, QueryCache, RetrievalTerm, ServingBundle};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    /// Port 0 picks a free port.
    pub addr: SocketAddr,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], 7878)),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    query: String,
    top_k: Option<usize>,
}

#[derive(Debug, Serialize)]
struct WirePrediction<'a> {
    path: String,
    per_level_probs: &'a [f64],
    path_score: f64,
    retrieval_terms: Vec<RetrievalTerm>,
}

#[derive(Debug, Serialize)]
struct Response<'a> {
    model_version: &'a str,
    predictions: Vec<WirePrediction<'a>>,
    cache_hit: bool,
}

pub const BAD_REQUEST: &str = r#"{"error":"bad_request"}"#;

/// Answers one protocol line.
pub fn handle_line(bundle: &ServingBundle, cache: &QueryCache, line: &str) -> String {
    let Ok(req) = serde_json::from_str::<Request>(line) else {
        return BAD_REQUEST.to_string();
    };
    let width = req.top_k.unwrap_or(bundle.beam().width);
    let result = categorize_top_k(bundle, cache, &req.query, width);
    let predictions = result
        .predictions
        .iter()
        .map(|p| WirePrediction {
            path: bundle.taxonomy().render(&p.path),
            per_level_probs: &p.per_level_probs,
            path_score: p.path_score,
            retrieval_terms: emit_retrieval_terms(&p.path, bundle.boosts()),
        })
        .collect();
    serde_json::to_string(&Response {
        model_version: bundle.model_version(),
        predictions,
        cache_hit: result.cache_hit,
    })
    .expect("response serializes")
}

fn handle_connection(stream: TcpStream, bundle: &ServingBundle, cache: &QueryCache) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                writeln!(writer, "{BAD_REQUEST}")?;
                continue;
            }
            Err(e) => return Err(e),
        };
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", handle_line(bundle, cache, &line))?;
    }
    Ok(())
}

/// Running service. Dropping the handle does not stop it; call `shutdown`.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Flag that stops the accept loop when set (for signal handlers).
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Open connections finish on their own threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the stop flag is raised by someone else.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds and starts serving on a background thread, one thread per connection.
pub fn serve(bundle: Arc<ServingBundle>, cache: Arc<QueryCache>, config: &ServerConfig) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(config.addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let (bundle, cache) = (Arc::clone(&bundle), Arc::clone(&cache));
            std::thread::spawn(move || {
                if let Err(e) = handle_connection(stream, &bundle, &cache) {
                    log::debug!("connection closed: {e}");
                }
            });
        }
        log::info!("server on {addr} stopped");
    });
    log::info!("serving on {addr}");
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

/// Raises `flag` then pokes the listener so a blocked accept returns.
pub fn request_stop(flag: &AtomicBool, addr: SocketAddr) {
    flag.store(true, Ordering::SeqCst);
    let _ = TcpStream::connect(addr);
}
