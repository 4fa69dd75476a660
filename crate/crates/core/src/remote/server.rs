use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use log::{debug, warn};

use super::protocol::{Request, Response, WireFloat, PROTOCOL_VERSION};
use crate::error::Result;
use crate::model::{self, ModelAdapter, ModelState};

/// Per-connection request handler. Sessions only remember their conditioning,
/// so results depend on nothing but `(conditioning, prefix)`.
pub struct Handler<'m> {
    model: &'m dyn ModelAdapter,
    sessions: HashMap<String, String>,
    next_session: u64,
}

impl<'m> Handler<'m> {
    pub fn new(model: &'m dyn ModelAdapter) -> Self {
        Self {
            model,
            sessions: HashMap::new(),
            next_session: 1,
        }
    }

    #[allow(clippy::result_large_err)]
    fn session(&self, id: u64, session: &str) -> Result<&str, Response> {
        self.sessions
            .get(session)
            .map(String::as_str)
            .ok_or_else(|| Response::Error {
                id: Some(id),
                message: format!("unknown session {session:?}"),
            })
    }

    pub fn handle(&mut self, req: Request) -> Response {
        let id = req.id();
        let fail = |e: crate::error::Error| Response::Error {
            id: Some(id),
            message: e.to_string(),
        };
        match req {
            Request::Hello { version, .. } => {
                if version != PROTOCOL_VERSION {
                    return Response::Error {
                        id: Some(id),
                        message: format!(
                            "unsupported version {version:?}, expected {PROTOCOL_VERSION:?}"
                        ),
                    };
                }
                Response::Hello {
                    id,
                    version: PROTOCOL_VERSION.into(),
                    name: self.model.name().into(),
                }
            }
            Request::Vocab { .. } => Response::Vocab {
                id,
                vocabulary: self.model.vocabulary().clone(),
            },
            Request::StartSession { conditioning, .. } => {
                let session = format!("s{}", self.next_session);
                self.next_session += 1;
                self.sessions.insert(session.clone(), conditioning);
                Response::StartSession { id, session }
            }
            Request::Step {
                session, prefix, ..
            } => {
                let cond = match self.session(id, &session) {
                    Ok(c) => c,
                    Err(r) => return r,
                };
                let vocab = self.model.vocabulary();
                let state = match ModelState::from_tokens(vocab, prefix, 0.0) {
                    Ok(s) => s,
                    Err(e) => return fail(e),
                };
                match model::step(self.model, cond, &state) {
                    Ok(step) => Response::Step {
                        id,
                        entries: step
                            .entries
                            .into_iter()
                            .map(|e| (e.token, WireFloat(e.score)))
                            .collect(),
                    },
                    Err(e) => fail(e),
                }
            }
            Request::Score { session, ids, .. } => {
                let cond = match self.session(id, &session) {
                    Ok(c) => c,
                    Err(r) => return r,
                };
                match model::sequence_score(self.model, cond, &ids) {
                    Ok(lp) => Response::Score {
                        id,
                        logprob: WireFloat(lp),
                    },
                    Err(e) => fail(e),
                }
            }
            Request::EndSession { session, .. } => {
                if self.sessions.remove(&session).is_none() {
                    return Response::Error {
                        id: Some(id),
                        message: format!("unknown session {session:?}"),
                    };
                }
                Response::EndSession { id }
            }
        }
    }
}

/// Serves one connection until the reader hits end of input.
pub fn serve_connection(
    model: &dyn ModelAdapter,
    reader: impl BufRead,
    writer: impl Write,
) -> Result<()> {
    let mut writer = BufWriter::new(writer);
    let mut handler = Handler::new(model);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                debug!("request {req:?}");
                handler.handle(req)
            }
            Err(e) => Response::Error {
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64())),
                message: format!("malformed request: {e}"),
            },
        };
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(model: Arc<dyn ModelAdapter>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let model = Arc::clone(&model);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let reader = match stream.try_clone() {
                Ok(s) => std::io::BufReader::new(s),
                Err(e) => {
                    warn!("connection {peer:?}: {e}");
                    return;
                }
            };
            if let Err(e) = serve_connection(model.as_ref(), reader, stream) {
                warn!("connection {peer:?} closed: {e}");
            }
        });
    }
    Ok(())
}

/// Serves the protocol on this process's standard input and output.
pub fn serve_stdio(model: &dyn ModelAdapter) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_connection(model, stdin.lock(), stdout.lock())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScenarioModel;
    use crate::vocab::{Marker, VocabBuilder};

    fn model() -> ScenarioModel {
        let v = VocabBuilder::new(Marker::None)
            .normal(["a", "b"])
            .eos("</s>")
            .build()
            .unwrap();
        ScenarioModel::from_probs(
            "m",
            v,
            vec![(vec![], vec![(0, 0.7), (1, 0.3)])],
            vec![(2, 1.0)],
        )
        .unwrap()
    }

    fn transcript(input: &str) -> Vec<Response> {
        let m = model();
        let mut out = Vec::new();
        serve_connection(&m, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn session_lifecycle() {
        let r = transcript(concat!(
            r#"{"kind":"hello","id":1,"version":"abe/1"}"#,
            "\n",
            r#"{"kind":"start_session","id":2,"conditioning":"x"}"#,
            "\n",
            r#"{"kind":"step","id":3,"session":"s1","prefix":[]}"#,
            "\n",
            r#"{"kind":"score","id":4,"session":"s1","ids":[0,2]}"#,
            "\n",
            r#"{"kind":"end_session","id":5,"session":"s1"}"#,
            "\n",
            r#"{"kind":"step","id":6,"session":"s1","prefix":[]}"#,
            "\n",
        ));
        assert_eq!(r.len(), 6);
        assert!(matches!(&r[0], Response::Hello { version, .. } if version == "abe/1"));
        match &r[2] {
            Response::Step { id: 3, entries } => {
                assert_eq!(entries[0], (0, WireFloat(0.7f64.ln())));
                assert_eq!(entries[1], (1, WireFloat(0.3f64.ln())));
                assert_eq!(entries[2], (2, WireFloat(f64::NEG_INFINITY)));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            r[3],
            Response::Score {
                id: 4,
                logprob: WireFloat(0.7f64.ln())
            }
        );
        assert_eq!(r[4], Response::EndSession { id: 5 });
        assert!(matches!(r[5], Response::Error { id: Some(6), .. }));
    }

    #[test]
    fn errors_are_responses() {
        let r = transcript(concat!(
            r#"{"kind":"hello","id":1,"version":"abe/0"}"#,
            "\n",
            r#"{"kind":"start_session","id":2,"conditioning":""}"#,
            "\n",
            r#"{"kind":"step","id":3,"session":"s1","prefix":[9]}"#,
            "\n",
            r#"{"kind":"bogus","id":4}"#,
            "\n",
            "not json\n",
        ));
        assert!(matches!(r[0], Response::Error { id: Some(1), .. }));
        assert!(matches!(r[2], Response::Error { id: Some(3), .. }));
        assert!(matches!(r[3], Response::Error { id: Some(4), .. }));
        assert!(matches!(r[4], Response::Error { id: None, .. }));
    }
}
