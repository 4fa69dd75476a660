use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::debug;

use super::protocol::{Request, Response, PROTOCOL_VERSION};
use crate::error::{Error, Result};
use crate::model::ModelAdapter;
use crate::vocab::{TokenId, Vocabulary};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Where a remote model lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port` of a TCP server.
    Tcp(String),
    /// Shell command whose stdin/stdout speak the protocol.
    Spawn(String),
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    sessions: HashMap<String, String>,
}

/// A model served by another process, usable wherever a [`ModelAdapter`] is.
///
/// Requests are strictly one at a time per connection. One session is opened
/// per distinct conditioning string and kept until the adapter is dropped.
pub struct RemoteModel {
    name: String,
    label: String,
    vocab: Vocabulary,
    timeout: Duration,
    conn: Mutex<Connection>,
    child: Option<Child>,
}

fn spawn_reader(reader: impl BufRead + Send + 'static) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in reader.lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl RemoteModel {
    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        Self::connect_with_timeout(endpoint, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        let label = match endpoint {
            Endpoint::Tcp(addr) => format!("remote:{addr}"),
            Endpoint::Spawn(cmd) => format!("spawn:{cmd}"),
        };
        let io_err = |e: std::io::Error| Error::adapter(&label, e.to_string());
        let (writer, lines, child): (Box<dyn Write + Send>, _, _) = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(io_err)?;
                stream.set_nodelay(true).map_err(io_err)?;
                let read = stream.try_clone().map_err(io_err)?;
                (Box::new(stream), spawn_reader(BufReader::new(read)), None)
            }
            Endpoint::Spawn(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(io_err)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                (
                    Box::new(stdin),
                    spawn_reader(BufReader::new(stdout)),
                    Some(child),
                )
            }
        };
        let mut model = RemoteModel {
            name: label.clone(),
            label,
            vocab: Vocabulary::new(
                crate::vocab::Marker::None,
                vec![("</s>".into(), crate::vocab::PieceKind::Eos)],
            )?,
            timeout,
            conn: Mutex::new(Connection {
                writer,
                lines,
                next_id: 1,
                sessions: HashMap::new(),
            }),
            child,
        };
        match model.call(|id| Request::Hello {
            id,
            version: PROTOCOL_VERSION.into(),
        })? {
            Response::Hello { version, name, .. } if version == PROTOCOL_VERSION => {
                model.name = name
            }
            Response::Hello { version, .. } => {
                return Err(model.fail(format!(
                    "server speaks {version:?}, expected {PROTOCOL_VERSION:?}"
                )))
            }
            other => return Err(model.unexpected(&other)),
        }
        match model.call(|id| Request::Vocab { id })? {
            Response::Vocab { vocabulary, .. } => model.vocab = vocabulary,
            other => return Err(model.unexpected(&other)),
        }
        debug!(
            "connected to {} ({} pieces)",
            model.label,
            model.vocab.len()
        );
        Ok(model)
    }

    /// Endpoint description, e.g. `remote:127.0.0.1:7000`.
    pub fn label(&self) -> &str {
        &self.label
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::adapter(&self.label, message)
    }

    fn unexpected(&self, resp: &Response) -> Error {
        match resp {
            Response::Error { message, .. } => self.fail(format!("server error: {message}")),
            other => Error::Protocol(format!("{}: unexpected response {other:?}", self.label)),
        }
    }

    fn exchange(
        &self,
        conn: &mut Connection,
        make: impl FnOnce(u64) -> Request,
    ) -> Result<Response> {
        let id = conn.next_id;
        conn.next_id += 1;
        let mut line = serde_json::to_string(&make(id))?;
        line.push('\n');
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| self.fail(format!("send failed: {e}")))?;
        let reply = match conn.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(self.fail(format!("receive failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(self.fail(format!("no response within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => return Err(self.fail("connection closed")),
        };
        let resp: Response = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("{}: malformed response: {e}", self.label)))?;
        if resp.id() != Some(id) {
            if let Response::Error { id: None, .. } = resp {
                return Err(self.unexpected(&resp));
            }
            return Err(Error::Protocol(format!(
                "{}: response id {:?} does not match request {id}",
                self.label,
                resp.id()
            )));
        }
        Ok(resp)
    }

    fn call(&self, make: impl FnOnce(u64) -> Request) -> Result<Response> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| self.fail("connection poisoned"))?;
        self.exchange(&mut conn, make)
    }

    /// Runs `make` against the session for `conditioning`, opening it if needed.
    fn in_session(
        &self,
        conditioning: &str,
        make: impl FnOnce(u64, String) -> Request,
    ) -> Result<Response> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| self.fail("connection poisoned"))?;
        let session = match conn.sessions.get(conditioning) {
            Some(s) => s.clone(),
            None => {
                let resp = self.exchange(&mut conn, |id| Request::StartSession {
                    id,
                    conditioning: conditioning.to_string(),
                })?;
                let Response::StartSession { session, .. } = resp else {
                    return Err(self.unexpected(&resp));
                };
                conn.sessions
                    .insert(conditioning.to_string(), session.clone());
                session
            }
        };
        self.exchange(&mut conn, |id| make(id, session))
    }

    /// Closes the session opened for `conditioning`, if any.
    pub fn end_session(&self, conditioning: &str) -> Result<()> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| self.fail("connection poisoned"))?;
        let Some(session) = conn.sessions.remove(conditioning) else {
            return Ok(());
        };
        match self.exchange(&mut conn, |id| Request::EndSession { id, session })? {
            Response::EndSession { .. } => Ok(()),
            other => Err(self.unexpected(&other)),
        }
    }
}

impl ModelAdapter for RemoteModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, conditioning: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let resp = self.in_session(conditioning, |id, session| Request::Step {
            id,
            session,
            prefix: prefix.to_vec(),
        })?;
        let Response::Step { entries, .. } = resp else {
            return Err(self.unexpected(&resp));
        };
        let mut out = vec![f64::NAN; self.vocab.len()];
        for (token, lp) in entries {
            match usize::try_from(token).ok().and_then(|i| out.get_mut(i)) {
                Some(slot) if slot.is_nan() => *slot = lp.0,
                Some(_) => {
                    return Err(Error::Protocol(format!(
                        "{}: token {token} listed twice",
                        self.label
                    )))
                }
                None => return Err(self.fail(format!("token id {token} outside the vocabulary"))),
            }
        }
        if out.iter().any(|l| l.is_nan()) {
            return Err(Error::Protocol(format!(
                "{}: step response is not a full distribution",
                self.label
            )));
        }
        Ok(out)
    }

    fn sequence_score(&self, conditioning: &str, ids: &[TokenId]) -> Result<f64> {
        let resp = self.in_session(conditioning, |id, session| Request::Score {
            id,
            session,
            ids: ids.to_vec(),
        })?;
        match resp {
            Response::Score { logprob, .. } => Ok(logprob.0),
            other => Err(self.unexpected(&other)),
        }
    }
}

impl Drop for RemoteModel {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_endpoint_is_an_adapter_failure() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = RemoteModel::connect(&Endpoint::Tcp(addr.to_string()))
            .err()
            .unwrap();
        assert!(err.is_model_failure(), "{err}");
    }

    #[test]
    fn silent_server_times_out() {
        let err = RemoteModel::connect_with_timeout(
            &Endpoint::Spawn("sleep 5".into()),
            Duration::from_millis(100),
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("no response"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let cmd = r#"read line; echo '{"kind":"hello","id":1,"version":"abe/9","name":"x"}'"#;
        let err = RemoteModel::connect(&Endpoint::Spawn(cmd.into()))
            .err()
            .unwrap();
        assert!(err.to_string().contains("abe/9"), "{err}");
    }
}
