//! Line-delimited JSON protocol between the engine and an external model
//! server.
//!
//! The server greets each connection with a hello line, then answers every
//! `logits` request, in order, with one line echoing the request id:
//!
//! ```text
//! <- {"op":"hello","version":1,"vocab_size":5,"mask_id":4}
//! -> {"id":0,"op":"logits","tokens":[0,4,4],"prompt_len":1}
//! <- {"id":0,"logits":[[...],[...],[...]],"vocab_size":5}
//! ```
//!
//! Failures are reported in-band as `{"id":0,"error":"..."}`.
//!
//! This module also carries a reference server over any [`Model`], with an
//! optional fault script, used to exercise the client without an external
//! process.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::types::{TokenId, TokenSeq};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub op: String,
    pub version: u32,
    pub vocab_size: usize,
    pub mask_id: TokenId,
}

impl Hello {
    pub fn new(vocab_size: usize, mask_id: TokenId) -> Self {
        Self {
            op: "hello".to_string(),
            version: PROTOCOL_VERSION,
            vocab_size,
            mask_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub id: u64,
    pub op: String,
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl LogitsRequest {
    pub fn new(id: u64, seq: &TokenSeq) -> Self {
        Self {
            id,
            op: "logits".to_string(),
            tokens: seq.ids.clone(),
            prompt_len: seq.prompt_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub id: u64,
    pub logits: Vec<Vec<f32>>,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub id: Option<u64>,
    pub error: String,
}

/// Misbehaviour the reference server injects for a given request index
/// (0-based, counted per connection).
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    /// Emit only the first half of the response line.
    Truncate,
    /// Drop the last row of the logits matrix.
    WrongRows,
    /// Echo a different id.
    WrongId,
    /// Report a non-matching vocabulary size.
    WrongVocab,
    /// Emit a line that is not JSON.
    Garbage,
    /// Answer with an in-band error object.
    ErrorReply(String),
    /// Sleep before answering.
    Delay(Duration),
    /// Never answer this request.
    Silent,
    /// Close the connection instead of answering.
    Hangup,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultScript {
    faults: HashMap<u64, Fault>,
}

impl FaultScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(mut self, request_index: u64, fault: Fault) -> Self {
        self.faults.insert(request_index, fault);
        self
    }

    fn get(&self, index: u64) -> Option<&Fault> {
        self.faults.get(&index)
    }
}

/// Serves one connection until the reader is exhausted or a hangup fault
/// fires. Emission log entries (request id and the exact response line)
/// are pushed to `log` when supplied.
pub fn serve_connection<M: Model + ?Sized>(
    model: &M,
    reader: impl BufRead,
    writer: impl Write,
    script: &FaultScript,
    mut log: Option<&mut Vec<String>>,
) -> Result<()> {
    // one write per line, otherwise small segments stall on delayed acks
    let mut writer = BufWriter::new(writer);
    let vocab = model.vocab();
    let hello = serde_json::to_string(&Hello::new(vocab.size(), vocab.mask_id()))?;
    writeln!(writer, "{hello}")?;
    writer.flush()?;

    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = index as u64;
        let fault = script.get(index);
        if let Some(Fault::Delay(d)) = fault {
            thread::sleep(*d);
        }
        let reply = match serde_json::from_str::<LogitsRequest>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64));
                serde_json::to_string(&ErrorResponse {
                    id,
                    error: format!("malformed request: {e}"),
                })?
            }
            Ok(req) if req.op != "logits" => serde_json::to_string(&ErrorResponse {
                id: Some(req.id),
                error: format!("unknown op {:?}", req.op),
            })?,
            Ok(req) => respond(model, req, fault)?,
        };
        match fault {
            Some(Fault::Silent) => continue,
            Some(Fault::Hangup) => return Ok(()),
            Some(Fault::Truncate) => {
                let cut = reply.len() / 2;
                writeln!(writer, "{}", &reply[..cut])?;
            }
            Some(Fault::Garbage) => writeln!(writer, "this is not json")?,
            _ => writeln!(writer, "{reply}")?,
        }
        writer.flush()?;
        if let Some(log) = log.as_deref_mut() {
            log.push(reply);
        }
    }
    Ok(())
}

fn respond<M: Model + ?Sized>(model: &M, req: LogitsRequest, fault: Option<&Fault>) -> Result<String> {
    let vocab = model.vocab();
    if let Some(Fault::ErrorReply(msg)) = fault {
        return Ok(serde_json::to_string(&ErrorResponse {
            id: Some(req.id),
            error: msg.clone(),
        })?);
    }
    let seq = match TokenSeq::new(req.tokens, req.prompt_len).and_then(|s| {
        s.validate(vocab)?;
        Ok(s)
    }) {
        Ok(s) => s,
        Err(e) => {
            return Ok(serde_json::to_string(&ErrorResponse {
                id: Some(req.id),
                error: e.to_string(),
            })?)
        }
    };
    let mut logits = match model.logits(&seq) {
        Ok(m) => m.to_rows(),
        Err(e) => {
            return Ok(serde_json::to_string(&ErrorResponse {
                id: Some(req.id),
                error: e.to_string(),
            })?)
        }
    };
    let mut id = req.id;
    let mut vocab_size = vocab.size();
    match fault {
        Some(Fault::WrongRows) => {
            logits.pop();
        }
        Some(Fault::WrongId) => id = id.wrapping_add(1000),
        Some(Fault::WrongVocab) => vocab_size += 1,
        _ => {}
    }
    Ok(serde_json::to_string(&LogitsResponse { id, logits, vocab_size })?)
}

/// A TCP listener serving the reference protocol, one thread per
/// connection. Every connection runs the same fault script.
pub struct TcpTestServer {
    addr: SocketAddr,
    _accept: JoinHandle<()>,
}

impl TcpTestServer {
    pub fn spawn<M: Model + 'static>(model: Arc<M>, script: FaultScript) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let model = Arc::clone(&model);
                let script = script.clone();
                thread::spawn(move || {
                    let Ok(read_half) = stream.try_clone() else { return };
                    let _ = serve_connection(&*model, BufReader::new(read_half), stream, &script, None);
                });
            }
        });
        Ok(Self { addr, _accept: accept })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MockFallback, MockTableModel};
    use crate::types::Vocab;

    #[test]
    fn reference_server_answers_in_order() {
        let model = MockTableModel::new(Vocab::new(4, 3).unwrap(), MockFallback::Row(vec![0.0; 4]));
        let input = "{\"id\":7,\"op\":\"logits\",\"tokens\":[3],\"prompt_len\":0}\n\
                     not json\n\
                     {\"id\":8,\"op\":\"logits\",\"tokens\":[0,9],\"prompt_len\":0}\n";
        let mut out = Vec::new();
        serve_connection(&model, input.as_bytes(), &mut out, &FaultScript::new(), None).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["op"], "hello");
        assert_eq!(lines[0]["mask_id"], 3);
        assert_eq!(lines[1]["id"], 7);
        assert_eq!(lines[1]["logits"].as_array().unwrap().len(), 1);
        assert!(lines[2]["error"].is_string());
        assert_eq!(lines[3]["id"], 8);
        assert!(lines[3]["error"].as_str().unwrap().contains("outside vocabulary"));
    }
}
