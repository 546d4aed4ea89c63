//! Line-oriented control protocol between the management side and a fleet.
//!
//! Every request and every response is one JSON document on one line.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Request {
    Exec { node: String, action: ActionRequest },
    Poll {
        node: String,
        #[serde(default = "default_probes")]
        probes: u32,
    },
    Advance { seconds: u64 },
    Inventory,
}

fn default_probes() -> u32 {
    DEFAULT_PROBE_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Ok(Value),
    Error { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("transport: {0}")]
    Transport(String),
}

impl ControlError {
    pub fn code(&self) -> &str {
        match self {
            ControlError::Remote { code, .. } => code,
            ControlError::Transport(_) => "TRANSPORT",
        }
    }
}

impl From<FleetError> for ControlError {
    fn from(e: FleetError) -> Self {
        ControlError::Remote {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

/// What the orchestrator and monitor need from a fleet.
pub trait FleetControl {
    fn inventory(&mut self) -> Result<Vec<crate::descript::InventoryNode>, ControlError>;
    fn poll(&mut self, node: &str, probes: u32) -> Result<NodeReport, ControlError>;
    fn exec(&mut self, node: &str, action: &ActionRequest) -> Result<ActionResult, ControlError>;
    fn advance(&mut self, seconds: u64) -> Result<Vec<ChurnEvent>, ControlError>;
}

fn dispatch(fleet: &mut Fleet, req: Request) -> Response {
    let out: Result<Value, FleetError> = match req {
        Request::Exec { node, action } => fleet.execute_action(&node, &action).map(to_value),
        Request::Poll { node, probes } => fleet.poll(&node, probes).map(to_value),
        Request::Advance { seconds } => Ok(to_value(fleet.advance(seconds))),
        Request::Inventory => Ok(to_value(fleet.inventory())),
    };
    match out {
        Ok(v) => Response::Ok(v),
        Err(e) => Response::Error {
            code: e.code().to_string(),
            message: e.to_string(),
        },
    }
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("protocol types serialize")
}

/// Handles one request line and returns the response line (no newline).
pub fn handle_line(fleet: &mut Fleet, line: &str) -> String {
    let resp = match serde_json::from_str::<Request>(line) {
        Ok(req) => dispatch(fleet, req),
        Err(e) => Response::Error {
            code: "BAD_REQUEST".into(),
            message: e.to_string(),
        },
    };
    serde_json::to_string(&resp).expect("responses serialize")
}

/// Serves requests until the reader reaches end of stream.
pub fn serve_connection(handle: FleetHandle, reader: impl BufRead, mut writer: impl Write) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(&mut handle.lock(), &line);
        writer.write_all(resp.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

impl FleetControl for FleetHandle {
    fn inventory(&mut self) -> Result<Vec<crate::descript::InventoryNode>, ControlError> {
        Ok(self.lock().inventory())
    }

    fn poll(&mut self, node: &str, probes: u32) -> Result<NodeReport, ControlError> {
        Ok(self.lock().poll(node, probes)?)
    }

    fn exec(&mut self, node: &str, action: &ActionRequest) -> Result<ActionResult, ControlError> {
        Ok(self.lock().execute_action(node, action)?)
    }

    fn advance(&mut self, seconds: u64) -> Result<Vec<ChurnEvent>, ControlError> {
        Ok(self.lock().advance(seconds))
    }
}

/// Client end of the protocol over any byte stream pair.
#[derive(Debug)]
pub struct ProtocolClient<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write> ProtocolClient<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }

    pub fn call(&mut self, req: &Request) -> Result<Value, ControlError> {
        let t = |e: io::Error| ControlError::Transport(e.to_string());
        let mut line = serde_json::to_string(req).expect("requests serialize");
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(t)?;
        self.writer.flush().map_err(t)?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf).map_err(t)? == 0 {
            return Err(ControlError::Transport("connection closed".into()));
        }
        match serde_json::from_str::<Response>(&buf) {
            Ok(Response::Ok(v)) => Ok(v),
            Ok(Response::Error { code, message }) => Err(ControlError::Remote { code, message }),
            Err(e) => Err(ControlError::Transport(format!("malformed response: {e}"))),
        }
    }

    fn typed<T: serde::de::DeserializeOwned>(&mut self, req: &Request) -> Result<T, ControlError> {
        let v = self.call(req)?;
        serde_json::from_value(v).map_err(|e| ControlError::Transport(format!("malformed body: {e}")))
    }
}

impl<R: BufRead, W: Write> FleetControl for ProtocolClient<R, W> {
    fn inventory(&mut self) -> Result<Vec<crate::descript::InventoryNode>, ControlError> {
        self.typed(&Request::Inventory)
    }

    fn poll(&mut self, node: &str, probes: u32) -> Result<NodeReport, ControlError> {
        self.typed(&Request::Poll {
            node: node.to_string(),
            probes,
        })
    }

    fn exec(&mut self, node: &str, action: &ActionRequest) -> Result<ActionResult, ControlError> {
        self.typed(&Request::Exec {
            node: node.to_string(),
            action: action.clone(),
        })
    }

    fn advance(&mut self, seconds: u64) -> Result<Vec<ChurnEvent>, ControlError> {
        self.typed(&Request::Advance { seconds })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;
    use std::os::unix::net::UnixStream;

    fn config() -> FleetConfig {
        let mut c = FleetConfig::new(6, 11);
        c.churn = Some(ChurnParams { mean_up_s: 400.0, mean_down_s: 60.0 });
        c
    }

    #[test]
    fn wire_format() {
        let r = Request::Poll { node: "n1".into(), probes: 10 };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"op":"POLL","node":"n1","probes":10}"#);
        assert_eq!(serde_json::to_string(&Request::Inventory).unwrap(), r#"{"op":"INVENTORY"}"#);
        let p: Request = serde_json::from_str(r#"{"op":"POLL","node":"n2"}"#).unwrap();
        assert_eq!(p, Request::Poll { node: "n2".into(), probes: 10 });
        let mut f = Fleet::spawn(config()).unwrap();
        let out = handle_line(&mut f, r#"{"op":"POLL","node":"n77"}"#);
        assert_eq!(
            out,
            r#"{"error":{"code":"UNKNOWN_NODE","message":"unknown node n77"}}"#
        );
        assert!(handle_line(&mut f, "not json").contains("BAD_REQUEST"));
        assert!(handle_line(&mut f, r#"{"op":"ADVANCE","seconds":0}"#) == r#"{"ok":[]}"#);
    }

    #[test]
    fn socket_client_matches_in_process() {
        let (a, b) = UnixStream::pair().unwrap();
        let remote = FleetHandle::spawn(config()).unwrap();
        let server = {
            let remote = remote.clone();
            std::thread::spawn(move || serve_connection(remote, BufReader::new(b.try_clone().unwrap()), b))
        };
        let mut client = ProtocolClient::new(BufReader::new(a.try_clone().unwrap()), a);
        let mut local = FleetHandle::spawn(config()).unwrap();
        assert_eq!(client.inventory().unwrap(), local.inventory().unwrap());
        for step in [100, 2000, 5000] {
            assert_eq!(client.advance(step).unwrap(), local.advance(step).unwrap());
            assert_eq!(client.poll("n3", 10).unwrap(), local.poll("n3", 10).unwrap());
            let act = ActionRequest::new("ping_flood", 60).param("dst", "n4").seed(step);
            assert_eq!(client.exec("n1", &act).unwrap(), local.exec("n1", &act).unwrap());
        }
        let err = client.exec("n1", &ActionRequest::new("launch", 5)).unwrap_err();
        assert_eq!(err.code(), "UNKNOWN_COMMAND");
        drop(client);
        server.join().unwrap().unwrap();
    }
}
