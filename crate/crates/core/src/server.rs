//! Line-oriented TCP query endpoint: one JSON request per line, one JSON
//! response per line. Read-only over an immutable Retriever; any number of
//! concurrent connections, no locking on the query path. Malformed input
//! gets a structured error response and the connection (and process) stay
//! alive.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::retrieval::{RetrievalRequest, Retriever, ScoredProduct};

/// Wire response. Exactly one of `results`/`error` is present; `latency_us`
/// is the server-side time spent answering.
#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<Vec<ScoredProduct>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_us: u64,
}

pub struct ServeHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl ServeHandle {
    /// The bound address; with port 0 this carries the ephemeral port.
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Block until the handle is told to stop from another thread, then
    /// tear the server down. Used by the foreground serve command.
    pub fn join(mut self) {
        while !self.shutdown.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(100));
        }
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Force EOF on open connections so their reader threads unblock.
        for conn in self.conns.lock().unwrap().iter() {
            let _ = conn.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServeHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn answer(retriever: &Retriever, line: &str, started: Instant) -> QueryResponse {
    let parsed: std::result::Result<RetrievalRequest, _> = serde_json::from_str(line);
    let outcome = match parsed {
        Ok(req) => retriever.retrieve(&req).map_err(|e| e.to_string()),
        Err(e) => Err(format!("malformed request: {e}")),
    };
    let latency_us = started.elapsed().as_micros() as u64;
    match outcome {
        Ok(results) => QueryResponse {
            ok: true,
            results: Some(results),
            error: None,
            latency_us,
        },
        Err(error) => QueryResponse {
            ok: false,
            results: None,
            error: Some(error),
            latency_us,
        },
    }
}

fn handle_connection(retriever: Arc<Retriever>, stream: TcpStream) {
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { return };
        if line.trim().is_empty() {
            continue;
        }
        let response = answer(&retriever, &line, Instant::now());
        let mut bytes = serde_json::to_vec(&response).expect("response serializes");
        bytes.push(b'\n');
        if writer.write_all(&bytes).is_err() {
            return;
        }
    }
}

/// Bind 127.0.0.1:`port` (0 picks an ephemeral port) and serve queries until
/// the handle is shut down or dropped. One thread per connection; the
/// Retriever is shared immutably.
pub fn serve(retriever: Retriever, port: u16) -> Result<ServeHandle> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::new(Mutex::new(Vec::new()));
    let retriever = Arc::new(retriever);
    let flag = Arc::clone(&shutdown);
    let conn_list = Arc::clone(&conns);
    let accept_thread = std::thread::spawn(move || {
        let mut workers = Vec::new();
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false).ok();
                    if let Ok(clone) = stream.try_clone() {
                        conn_list.lock().unwrap().push(clone);
                    }
                    let r = Arc::clone(&retriever);
                    workers.push(std::thread::spawn(move || handle_connection(r, stream)));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(_) => break,
            }
        }
        drop(listener);
        for w in workers {
            let _ = w.join();
        }
    });
    Ok(ServeHandle {
        addr,
        shutdown,
        conns,
        accept_thread: Some(accept_thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, GeoPoint, ProductRecord, UserProfile};
    use crate::index::{EmbeddingIndex, IndexEntry};
    use crate::retrieval::Strategy;

    fn fixture_retriever() -> Retriever {
        let users = vec![UserProfile {
            user_id: 1,
            keywords: vec![],
            demographics: vec![],
            location: GeoPoint { lat: 0.0, lon: 0.0 },
            radius_km: 100.0,
        }];
        let products: Vec<ProductRecord> = (1..=5u64)
            .map(|id| ProductRecord {
                product_id: id,
                title: format!("product {id}"),
                description: String::new(),
                image_features: None,
                location: GeoPoint { lat: 0.0, lon: 0.0 },
                created_at: 100 * id as i64,
            })
            .collect();
        let entries: Vec<IndexEntry> = products
            .iter()
            .map(|p| IndexEntry {
                product_id: p.product_id,
                embedding: vec![1.0, 0.0],
                location: p.location,
                created_at: p.created_at,
            })
            .collect();
        let catalog = Catalog::new(users, products).unwrap();
        let index = EmbeddingIndex::new(2, "t".into(), entries).unwrap();
        Retriever::new(catalog, index, None, None).unwrap()
    }

    fn roundtrip(stream: &mut TcpStream, line: &str) -> QueryResponse {
        stream.write_all(line.as_bytes()).unwrap();
        stream.write_all(b"\n").unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut out = String::new();
        reader.read_line(&mut out).unwrap();
        serde_json::from_str(&out).unwrap()
    }

    #[test]
    fn endpoint_matches_in_process_results() {
        let retriever = fixture_retriever();
        let req = RetrievalRequest {
            user_id: 1,
            m: 5,
            n: 3,
            strategy: Strategy::Time,
            as_of: None,
        };
        let expected = retriever.retrieve(&req).unwrap();
        let handle = serve(retriever, 0).unwrap();
        let mut stream = TcpStream::connect(handle.addr()).unwrap();
        let resp = roundtrip(
            &mut stream,
            &serde_json::to_string(&req).unwrap(),
        );
        assert!(resp.ok, "{:?}", resp.error);
        assert_eq!(resp.results.unwrap(), expected);
        handle.shutdown();
    }

    #[test]
    fn malformed_requests_get_errors_and_the_server_survives() {
        let handle = serve(fixture_retriever(), 0).unwrap();
        let mut stream = TcpStream::connect(handle.addr()).unwrap();
        let bad = roundtrip(&mut stream, "this is not json");
        assert!(!bad.ok);
        assert!(bad.error.unwrap().contains("malformed"));
        let invalid = roundtrip(
            &mut stream,
            r#"{"user_id":1,"m":5,"n":0,"strategy":"time"}"#,
        );
        assert!(!invalid.ok);
        assert!(invalid.error.unwrap().contains("n must be >= 1"));
        let unknown_user = roundtrip(
            &mut stream,
            r#"{"user_id":404,"m":5,"n":1,"strategy":"time"}"#,
        );
        assert!(!unknown_user.ok);
        // Still alive: a valid request on the same connection succeeds.
        let good = roundtrip(
            &mut stream,
            r#"{"user_id":1,"m":5,"n":1,"strategy":"time"}"#,
        );
        assert!(good.ok);
        assert_eq!(good.results.unwrap()[0].product_id, 5);
        handle.shutdown();
    }

    #[test]
    fn concurrent_connections_see_identical_results() {
        let handle = serve(fixture_retriever(), 0).unwrap();
        let addr = handle.addr();
        let threads: Vec<std::thread::JoinHandle<Vec<u64>>> = (0..4)
            .map(|_| {
                std::thread::spawn(move || {
                    let mut stream = TcpStream::connect(addr).unwrap();
                    stream.write_all(b"{\"user_id\":1,\"m\":5,\"n\":2,\"strategy\":\"time\"}\n").unwrap();
                    let mut reader = BufReader::new(stream);
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let resp: QueryResponse = serde_json::from_str(&line).unwrap();
                    resp.results
                        .unwrap()
                        .iter()
                        .map(|r| r.product_id)
                        .collect()
                })
            })
            .collect();
        let results: Vec<Vec<u64>> = threads.into_iter().map(|t| t.join().unwrap()).collect();
        assert!(results.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(results[0], vec![5, 4]);
        handle.shutdown();
    }
}
