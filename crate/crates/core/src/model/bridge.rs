//! Bridge protocol: newline-delimited JSON frames over a byte stream, used to
//! drive an external model host (child process stdio or TCP).
//!
//! Request frames, one object per line:
//!
//! ```text
//! {"op":"info"}                                 → {"layers":L,"dim":D,"name":S,"deterministic":B}
//! {"op":"encode","text":T}                      → {"vec":[f1,...,fD]}
//! {"op":"layer","l":K,"vec":[...D floats...]}   → {"vec":[...D floats...]}    (K is 1-based)
//! {"op":"logprobs","prompt":P,"continuation":C} → {"lp":[...per-token log probs...]}
//! {"op":"shutdown"}                             → {"ok":true}
//! ```
//!
//! A peer may answer any request with `{"error":"message"}`, which aborts the
//! pending call. Every frame is a single line ending in `\n`; no frame may
//! exceed 16 MiB. Floats are written as decimal strings with 9 significant
//! digits, which keeps frames debuggable and round-trips within the 1e-6
//! agreement contract between a peer and an in-process reference model.

use super::{LayerwiseModel, ModelError, ModelInfo};
use crate::numerics::Vector;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

/// Where a bridge peer lives: `tcp:HOST:PORT` or `cmd:PROGRAM ARGS...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Cmd(Vec<String>),
}

impl std::str::FromStr for Endpoint {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(ModelError::Connection("empty tcp address".into()));
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if parts.is_empty() {
                return Err(ModelError::Connection("empty command".into()));
            }
            return Ok(Endpoint::Cmd(parts));
        }
        Err(ModelError::Connection(format!(
            "unrecognized endpoint {s:?} (expected tcp:HOST:PORT or cmd:PROGRAM ...)"
        )))
    }
}

struct Conn {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    poisoned: bool,
}

/// A [`LayerwiseModel`] whose calls are serialized over the bridge protocol.
/// One request is in flight at a time; callers that want parallelism open
/// several connections.
pub struct BridgeModel {
    info: ModelInfo,
    deterministic: bool,
    conn: Mutex<Conn>,
}

impl BridgeModel {
    /// Connect to `tcp:HOST:PORT` or spawn `cmd:PROGRAM ARGS...`, then issue
    /// the `info` request.
    pub fn connect(endpoint: &str) -> Result<Self, ModelError> {
        let endpoint: Endpoint = endpoint.parse()?;
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(&addr)
                    .map_err(|e| ModelError::Connection(format!("tcp {addr}: {e}")))?;
                let read_half = stream
                    .try_clone()
                    .map_err(|e| ModelError::Connection(e.to_string()))?;
                Self::from_streams(Box::new(BufReader::new(read_half)), Box::new(stream), None)
            }
            Endpoint::Cmd(parts) => {
                let mut child = Command::new(&parts[0])
                    .args(&parts[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| ModelError::Connection(format!("spawn {:?}: {e}", parts[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Self::from_streams(
                    Box::new(BufReader::new(stdout)),
                    Box::new(stdin),
                    Some(child),
                )
            }
        }
    }

    /// Wrap an already-open byte stream pair and issue the `info` request.
    pub fn from_streams(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
    ) -> Result<Self, ModelError> {
        let mut conn = Conn {
            reader,
            writer,
            child,
            poisoned: false,
        };
        let reply = request(&mut conn, r#"{"op":"info"}"#)?;
        let layers = field_u64(&reply, "layers")? as usize;
        let dim = field_u64(&reply, "dim")? as usize;
        let name = reply
            .get("name")
            .and_then(|v| v.as_str())
            .unwrap_or("bridge")
            .to_string();
        let deterministic = reply
            .get("deterministic")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        let info = ModelInfo::new(layers, dim, name)
            .map_err(|e| ModelError::Protocol(format!("bad info frame: {e}")))?;
        Ok(Self {
            info,
            deterministic,
            conn: Mutex::new(conn),
        })
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    fn call(&self, frame: &str) -> Result<serde_json::Value, ModelError> {
        let mut conn = self.conn.lock().expect("bridge lock");
        if conn.poisoned {
            return Err(ModelError::Connection(
                "connection unusable after earlier transport error".into(),
            ));
        }
        let result = request(&mut conn, frame);
        if matches!(result, Err(ModelError::Connection(_))) {
            conn.poisoned = true;
        }
        result
    }

    fn expect_vec(&self, reply: &serde_json::Value) -> Result<Vector, ModelError> {
        let arr = reply
            .get("vec")
            .and_then(|v| v.as_array())
            .ok_or_else(|| ModelError::Protocol("reply missing \"vec\" array".into()))?;
        if arr.len() != self.info.hidden_dim {
            return Err(ModelError::Protocol(format!(
                "peer returned a {}-dim vector for a {}-dim model",
                arr.len(),
                self.info.hidden_dim
            )));
        }
        let values: Vec<f64> = arr
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| ModelError::Protocol("non-numeric vector entry".into()))
            })
            .collect::<Result<_, _>>()?;
        Vector::new(values).map_err(|e| ModelError::Protocol(format!("bad vector: {e}")))
    }

    /// Ask the peer to shut down. Also attempted on drop.
    pub fn shutdown(&self) -> Result<(), ModelError> {
        let reply = self.call(r#"{"op":"shutdown"}"#)?;
        match reply.get("ok").and_then(|v| v.as_bool()) {
            Some(true) => Ok(()),
            _ => Err(ModelError::Protocol("shutdown not acknowledged".into())),
        }
    }
}

impl LayerwiseModel for BridgeModel {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn encode(&self, text: &str) -> Result<Vector, ModelError> {
        let frame = format!(
            r#"{{"op":"encode","text":{}}}"#,
            serde_json::to_string(text).expect("string encodes")
        );
        let reply = self.call(&frame)?;
        self.expect_vec(&reply)
    }

    fn layer_forward(&self, layer: usize, activation: &Vector) -> Result<Vector, ModelError> {
        if activation.dim() != self.info.hidden_dim {
            return Err(ModelError::DimensionMismatch {
                got: activation.dim(),
                want: self.info.hidden_dim,
            });
        }
        let frame = format!(
            r#"{{"op":"layer","l":{},"vec":{}}}"#,
            layer,
            format_vector(activation.as_slice())
        );
        let reply = self.call(&frame)?;
        self.expect_vec(&reply)
    }

    fn token_logprobs(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>, ModelError> {
        let frame = format!(
            r#"{{"op":"logprobs","prompt":{},"continuation":{}}}"#,
            serde_json::to_string(prompt).expect("string encodes"),
            serde_json::to_string(continuation).expect("string encodes")
        );
        let reply = self.call(&frame)?;
        let arr = reply
            .get("lp")
            .and_then(|v| v.as_array())
            .ok_or_else(|| ModelError::Protocol("reply missing \"lp\" array".into()))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| ModelError::Protocol("non-numeric log prob".into()))
            })
            .collect()
    }
}

impl Drop for BridgeModel {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            if !conn.poisoned {
                let _ = conn.writer.write_all(b"{\"op\":\"shutdown\"}\n");
                let _ = conn.writer.flush();
                let _ = read_frame_line(&mut conn.reader);
            }
            if let Some(child) = conn.child.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

fn request(conn: &mut Conn, frame: &str) -> Result<serde_json::Value, ModelError> {
    conn.writer
        .write_all(frame.as_bytes())
        .and_then(|_| conn.writer.write_all(b"\n"))
        .and_then(|_| conn.writer.flush())
        .map_err(|e| ModelError::Connection(format!("write: {e}")))?;
    let line = read_frame_line(&mut conn.reader)?;
    let value: serde_json::Value = serde_json::from_str(&line)
        .map_err(|e| ModelError::Protocol(format!("malformed frame: {e}")))?;
    if let Some(msg) = value.get("error").and_then(|v| v.as_str()) {
        return Err(ModelError::Peer(msg.to_string()));
    }
    Ok(value)
}

/// Read one `\n`-terminated frame, enforcing the 16 MiB cap.
fn read_frame_line(reader: &mut (impl BufRead + ?Sized)) -> Result<String, ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    loop {
        let chunk = reader
            .fill_buf()
            .map_err(|e| ModelError::Connection(format!("read: {e}")))?;
        if chunk.is_empty() {
            return Err(ModelError::Connection(if buf.is_empty() {
                "peer closed the connection".into()
            } else {
                "peer closed the connection mid-frame".into()
            }));
        }
        if let Some(pos) = chunk.iter().position(|&b| b == b'\n') {
            buf.extend_from_slice(&chunk[..pos]);
            reader.consume(pos + 1);
            break;
        }
        buf.extend_from_slice(chunk);
        let consumed = chunk.len();
        reader.consume(consumed);
        if buf.len() > MAX_FRAME_BYTES {
            return Err(ModelError::Protocol("frame exceeds 16 MiB".into()));
        }
    }
    if buf.len() > MAX_FRAME_BYTES {
        return Err(ModelError::Protocol("frame exceeds 16 MiB".into()));
    }
    String::from_utf8(buf).map_err(|_| ModelError::Protocol("frame is not UTF-8".into()))
}

/// Decimal encoding used for all float payloads: 9 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.8e}")
}

fn format_vector(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16 + 2);
    s.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format_float(*v));
    }
    s.push(']');
    s
}

/// Serve a model over a byte stream pair until the peer sends `shutdown` or
/// closes the connection. Malformed or unsupported requests produce an error
/// frame; the connection keeps serving afterwards.
pub fn serve(
    model: &dyn LayerwiseModel,
    deterministic: bool,
    reader: &mut (impl BufRead + ?Sized),
    writer: &mut (impl Write + ?Sized),
) -> std::io::Result<()> {
    loop {
        let line = match read_frame_line(reader) {
            Ok(line) => line,
            Err(ModelError::Connection(_)) => return Ok(()), // peer went away
            Err(e) => {
                write_frame(writer, &error_frame(&e.to_string()))?;
                continue;
            }
        };
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                write_frame(writer, &error_frame(&format!("malformed frame: {e}")))?;
                continue;
            }
        };
        let op = value.get("op").and_then(|v| v.as_str()).unwrap_or("");
        match op {
            "info" => {
                let info = model.info();
                let frame = format!(
                    r#"{{"layers":{},"dim":{},"name":{},"deterministic":{}}}"#,
                    info.n_layers,
                    info.hidden_dim,
                    serde_json::to_string(&info.name).expect("string encodes"),
                    deterministic
                );
                write_frame(writer, &frame)?;
            }
            "encode" => {
                let reply = match value.get("text").and_then(|v| v.as_str()) {
                    Some(text) => match model.encode(text) {
                        Ok(vec) => format!(r#"{{"vec":{}}}"#, format_vector(vec.as_slice())),
                        Err(e) => error_frame(&e.to_string()),
                    },
                    None => error_frame("encode requires a \"text\" string"),
                };
                write_frame(writer, &reply)?;
            }
            "layer" => {
                let reply = handle_layer(model, &value);
                write_frame(writer, &reply)?;
            }
            "logprobs" => {
                let prompt = value.get("prompt").and_then(|v| v.as_str());
                let cont = value.get("continuation").and_then(|v| v.as_str());
                let reply = match (prompt, cont) {
                    (Some(p), Some(c)) => match model.token_logprobs(p, c) {
                        Ok(lp) => format!(r#"{{"lp":{}}}"#, format_vector(&lp)),
                        Err(e) => error_frame(&e.to_string()),
                    },
                    _ => error_frame("logprobs requires \"prompt\" and \"continuation\""),
                };
                write_frame(writer, &reply)?;
            }
            "shutdown" => {
                write_frame(writer, r#"{"ok":true}"#)?;
                return Ok(());
            }
            other => {
                write_frame(writer, &error_frame(&format!("unknown op {other:?}")))?;
            }
        }
    }
}

fn handle_layer(model: &dyn LayerwiseModel, value: &serde_json::Value) -> String {
    let layer = match value.get("l").and_then(|v| v.as_u64()) {
        Some(l) => l as usize,
        None => return error_frame("layer requires an integer \"l\""),
    };
    let arr = match value.get("vec").and_then(|v| v.as_array()) {
        Some(a) => a,
        None => return error_frame("layer requires a \"vec\" array"),
    };
    let want = model.info().hidden_dim;
    if arr.len() != want {
        return error_frame(&format!(
            "vector has dimension {}, model expects {want}",
            arr.len()
        ));
    }
    let values: Option<Vec<f64>> = arr.iter().map(|v| v.as_f64()).collect();
    let values = match values {
        Some(v) => v,
        None => return error_frame("non-numeric vector entry"),
    };
    let vec = match Vector::new(values) {
        Ok(v) => v,
        Err(e) => return error_frame(&e.to_string()),
    };
    match model.layer_forward(layer, &vec) {
        Ok(out) => format!(r#"{{"vec":{}}}"#, format_vector(out.as_slice())),
        Err(e) => error_frame(&e.to_string()),
    }
}

fn error_frame(msg: &str) -> String {
    format!(
        r#"{{"error":{}}}"#,
        serde_json::to_string(msg).expect("string encodes")
    )
}

fn write_frame(writer: &mut (impl Write + ?Sized), frame: &str) -> std::io::Result<()> {
    writer.write_all(frame.as_bytes())?;
    writer.write_all(b"\n")?;
    writer.flush()
}

fn field_u64(value: &serde_json::Value, key: &str) -> Result<u64, ModelError> {
    value
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ModelError::Protocol(format!("info frame missing integer \"{key}\"")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            "tcp:127.0.0.1:9000".parse::<Endpoint>().unwrap(),
            Endpoint::Tcp("127.0.0.1:9000".into())
        );
        assert_eq!(
            "cmd:python host.py --flag".parse::<Endpoint>().unwrap(),
            Endpoint::Cmd(vec!["python".into(), "host.py".into(), "--flag".into()])
        );
        assert!("ipc:whatever".parse::<Endpoint>().is_err());
        assert!("tcp:".parse::<Endpoint>().is_err());
        assert!("cmd: ".parse::<Endpoint>().is_err());
    }

    #[test]
    fn float_format_is_nine_significant_digits_and_json() {
        for &x in &[0.0, 1.0, -1.5, 1.0 / 3.0, 1e-12, -2.5e20] {
            let s = format_float(x);
            let parsed: f64 = serde_json::from_str(&s).expect("valid JSON number");
            if x != 0.0 {
                assert!(((parsed - x) / x).abs() < 5e-9, "{x} → {s} → {parsed}");
            }
            // Stable under one round trip: re-encoding the parsed value
            // reproduces the same string.
            assert_eq!(format_float(parsed), s);
        }
    }

    #[test]
    fn decimal_encoding_round_trips_exactly() {
        use proptest::prelude::*;
        // For any finite f64, format → parse → format reproduces the same
        // 9-significant-digit string.
        proptest!(|(x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO)| {
            let s = format_float(x);
            let parsed: f64 = s.parse().unwrap();
            prop_assert_eq!(format_float(parsed), s);
        });
    }

    #[test]
    fn read_frame_respects_cap() {
        let mut big = vec![b'x'; MAX_FRAME_BYTES + 10];
        big.push(b'\n');
        let mut cursor = std::io::Cursor::new(big);
        let err = read_frame_line(&mut cursor).unwrap_err();
        assert!(matches!(err, ModelError::Protocol(_)));
    }

    #[test]
    fn spawn_failure_is_connection_error() {
        match BridgeModel::connect("cmd:/nonexistent/biaslens-peer-binary") {
            Err(ModelError::Connection(_)) => {}
            Err(other) => panic!("expected connection error, got {other}"),
            Ok(_) => panic!("expected connection error"),
        }
    }
}
