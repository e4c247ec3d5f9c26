use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::model::protocol::{Hello, LogitsRequest, LogitsResponse, PROTOCOL_VERSION};
use crate::model::Model;
use crate::types::{LogitMatrix, TokenSeq, Vocab};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`
    Tcp(String),
    /// A server process speaking the protocol on its stdin/stdout.
    Command { program: String, args: Vec<String> },
}

impl Endpoint {
    /// Splits a shell-like command line on whitespace.
    pub fn command(cmdline: &str) -> Result<Self> {
        let mut parts = cmdline.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty server command".into()))?;
        Ok(Endpoint::Command {
            program,
            args: parts.collect(),
        })
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    /// Ids whose responses timed out; late answers to them are dropped.
    abandoned: HashSet<u64>,
}

/// Client for a model served over the line protocol.
///
/// One connection is shared by all callers and requests are serialized on
/// it; open one `RemoteModel` per concurrent decode.
pub struct RemoteModel {
    vocab: Vocab,
    timeout: Duration,
    conn: Mutex<Connection>,
    tcp: Option<TcpStream>,
    child: Option<Mutex<Child>>,
}

impl std::fmt::Debug for RemoteModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteModel")
            .field("vocab", &self.vocab)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

fn transport(e: impl std::fmt::Display) -> Error {
    Error::Transport(e.to_string())
}

fn spawn_line_reader(reader: impl Read + Send + 'static) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

fn recv_line(lines: &Receiver<io::Result<String>>, timeout: Duration) -> Result<String> {
    match lines.recv_timeout(timeout) {
        Ok(Ok(line)) => Ok(line),
        Ok(Err(e)) => Err(transport(e)),
        Err(RecvTimeoutError::Timeout) => Err(transport(format!("no response within {} ms", timeout.as_millis()))),
        Err(RecvTimeoutError::Disconnected) => Err(transport("connection closed by server")),
    }
}

impl RemoteModel {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(transport)?;
                stream.set_nodelay(true).map_err(transport)?;
                let read_half = stream.try_clone().map_err(transport)?;
                let closer = stream.try_clone().map_err(transport)?;
                let mut model = Self::from_streams(read_half, stream, timeout)?;
                model.tcp = Some(closer);
                Ok(model)
            }
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| transport(format!("failed to start {program}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut model = match Self::from_streams(stdout, stdin, timeout) {
                    Ok(m) => m,
                    Err(e) => {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(e);
                    }
                };
                model.child = Some(Mutex::new(child));
                Ok(model)
            }
        }
    }

    /// Runs the handshake over an arbitrary byte stream pair.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        let lines = spawn_line_reader(reader);
        let line = recv_line(&lines, timeout)?;
        let hello: Hello =
            serde_json::from_str(line.trim()).map_err(|e| Error::protocol(format!("bad handshake: {e}"), &line))?;
        if hello.op != "hello" {
            return Err(Error::protocol("expected a hello message", &line));
        }
        if hello.version != PROTOCOL_VERSION {
            return Err(Error::protocol(
                format!("unsupported protocol version {}", hello.version),
                &line,
            ));
        }
        let vocab = Vocab::new(hello.vocab_size, hello.mask_id).map_err(|e| Error::protocol(e.to_string(), &line))?;
        Ok(Self {
            vocab,
            timeout,
            conn: Mutex::new(Connection {
                writer: Box::new(BufWriter::new(writer)),
                lines,
                next_id: 0,
                abandoned: HashSet::new(),
            }),
            tcp: None,
            child: None,
        })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn parse_response(&self, id: u64, seq: &TokenSeq, line: &str) -> Result<LogitMatrix> {
        let value: serde_json::Value =
            serde_json::from_str(line.trim()).map_err(|e| Error::protocol(format!("malformed response: {e}"), line))?;
        if let Some(err) = value.get("error") {
            return Err(Error::protocol(
                format!("server reported error for request {id}: {err}"),
                line,
            ));
        }
        let resp: LogitsResponse =
            serde_json::from_value(value).map_err(|e| Error::protocol(format!("malformed response: {e}"), line))?;
        if resp.id != id {
            return Err(Error::protocol(
                format!("response id {} does not match request id {id}", resp.id),
                line,
            ));
        }
        let cols = self.vocab.size();
        if resp.vocab_size != cols {
            return Err(Error::protocol(
                format!("response vocab_size {} differs from handshake {cols}", resp.vocab_size),
                line,
            ));
        }
        if resp.logits.len() != seq.len() {
            return Err(Error::protocol(
                format!("expected {} logit rows, got {}", seq.len(), resp.logits.len()),
                line,
            ));
        }
        if let Some(bad) = resp.logits.iter().position(|r| r.len() != cols) {
            return Err(Error::protocol(
                format!("row {bad} has {} columns, expected {cols}", resp.logits[bad].len()),
                line,
            ));
        }
        let m = LogitMatrix::from_rows(resp.logits).map_err(|e| Error::protocol(e.to_string(), line))?;
        if !m.is_finite() {
            return Err(Error::protocol("non-finite logits", line));
        }
        Ok(m)
    }
}

impl Model for RemoteModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn logits(&self, seq: &TokenSeq) -> Result<LogitMatrix> {
        let mut conn = self.conn.lock().map_err(|_| transport("connection lock poisoned"))?;
        let id = conn.next_id;
        conn.next_id += 1;
        let request = serde_json::to_string(&LogitsRequest::new(id, seq))?;
        writeln!(conn.writer, "{request}").map_err(transport)?;
        conn.writer.flush().map_err(transport)?;
        loop {
            let line = match recv_line(&conn.lines, self.timeout) {
                Ok(line) => line,
                Err(e) => {
                    conn.abandoned.insert(id);
                    return Err(e);
                }
            };
            let stale = serde_json::from_str::<serde_json::Value>(line.trim())
                .ok()
                .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64))
                .is_some_and(|rid| rid != id && conn.abandoned.remove(&rid));
            if stale {
                continue;
            }
            return self.parse_response(id, seq, &line);
        }
    }
}

impl Drop for RemoteModel {
    fn drop(&mut self) {
        if let Some(tcp) = &self.tcp {
            let _ = tcp.shutdown(Shutdown::Both);
        }
        if let Some(child) = &self.child {
            if let Ok(mut child) = child.lock() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}
