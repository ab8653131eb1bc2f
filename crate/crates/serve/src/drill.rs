//! Crash drill: drive a real `crs serve` process over TCP, kill it with
//! SIGKILL, restart it, and compare what the service reports.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{Result, ServeError};
use crate::store::{LabelStore, StoreState};

pub struct Node {
    child: Child,
    pub addr: SocketAddr,
}

impl Node {
    /// Starts `bin serve` on an ephemeral port and waits for it to listen.
    pub fn spawn(bin: &Path, config: &Path, data_dir: &Path) -> Result<Node> {
        let mut child = Command::new(bin)
            .arg("--config")
            .arg(config)
            .arg("--data-dir")
            .arg(data_dir)
            .args(["--port", "0", "serve"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(|l| l.ok()) {
                if let Some(a) = line.strip_prefix("listening on ") {
                    let _ = tx.send(a.trim().to_string());
                }
            }
        });
        match rx.recv_timeout(Duration::from_secs(120)) {
            Ok(a) => {
                let addr = a.parse().map_err(|e| ServeError::BadRequest(format!("address {a}: {e}")))?;
                Ok(Node { child, addr })
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(ServeError::BadRequest("service did not start listening".into()))
            }
        }
    }

    pub fn request(&self, method: &str, path: &str, token: Option<&str>, body: Option<&Value>) -> Result<(u16, Value)> {
        http_request(self.addr, method, path, token, body)
    }

    /// SIGKILL: no shutdown hooks run.
    pub fn kill(mut self) -> Result<()> {
        self.child.kill()?;
        self.child.wait()?;
        Ok(())
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn decode_chunked(mut body: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let Some(end) = body.windows(2).position(|w| w == b"\r\n") else { break };
        let size = usize::from_str_radix(std::str::from_utf8(&body[..end]).unwrap_or("0").trim(), 16).unwrap_or(0);
        if size == 0 || body.len() < end + 2 + size {
            break;
        }
        out.extend_from_slice(&body[end + 2..end + 2 + size]);
        body = &body[(end + 4 + size).min(body.len())..];
    }
    out
}

/// One HTTP/1.1 exchange with `Connection: close`.
pub fn http_request(addr: SocketAddr, method: &str, path: &str, token: Option<&str>, body: Option<&Value>) -> Result<(u16, Value)> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(60)))?;
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    let mut head = format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n");
    if let Some(t) = token {
        head += &format!("Authorization: Bearer {t}\r\n");
    }
    if body.is_some() {
        head += "Content-Type: application/json\r\n";
    }
    head += &format!("Content-Length: {}\r\n\r\n", payload.len());
    stream.write_all(head.as_bytes())?;
    stream.write_all(payload.as_bytes())?;
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw)?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or_else(|| ServeError::BadRequest("no header end".into()))?;
    let headers = String::from_utf8_lossy(&raw[..split]).to_ascii_lowercase();
    let status: u16 = headers.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut content = raw[split + 4..].to_vec();
    if headers.contains("transfer-encoding: chunked") {
        content = decode_chunked(&content);
    }
    let value = if content.is_empty() { Value::Null } else { serde_json::from_slice(&content)? };
    Ok((status, value))
}

#[derive(Debug)]
pub struct DrillOutcome {
    /// Labels, histories and sessions as served before the kill.
    pub before: Value,
    /// The same views served after the restart.
    pub after: Value,
    /// Events written before the kill.
    pub events: u64,
    /// Store state rebuilt from the log alone.
    pub replayed: StoreState,
    /// Store state from the snapshot plus the log tail.
    pub reopened: StoreState,
}

impl DrillOutcome {
    pub fn passed(&self) -> bool {
        self.before == self.after && self.replayed == self.reopened && self.replayed.seq == self.events
    }
}

fn views(node: &Node, raters: &[(String, String)], cases: &[String]) -> Result<Value> {
    let mut out = serde_json::Map::new();
    for (name, token) in raters {
        let (_, labels) = node.request("GET", "/labels", Some(token), None)?;
        let (_, session) = node.request("GET", &format!("/sessions/{name}"), Some(token), None)?;
        let mut histories = serde_json::Map::new();
        for c in cases {
            let (_, h) = node.request("GET", &format!("/labels?case_id={c}"), Some(token), None)?;
            histories.insert(c.clone(), h["history"].clone());
        }
        out.insert(name.clone(), json!({ "labels": labels, "session": session, "histories": histories }));
    }
    Ok(Value::Object(out))
}

/// Labels, revises and moves session cursors for every configured rater,
/// kills the service, restarts it and reads everything back.
pub fn kill_restart(bin: &Path, config: &Path, data_dir: &Path) -> Result<DrillOutcome> {
    let cfg = Config::load(config)?;
    let raters: Vec<(String, String)> = cfg.serve.raters.iter().map(|r| (r.name.clone(), r.token.clone())).collect();
    let (_, first_token) = raters.first().cloned().ok_or_else(|| ServeError::Config("drill needs a rater".into()))?;
    let node = Node::spawn(bin, config, data_dir)?;
    let (status, listing) = node.request("GET", "/cases", Some(&first_token), None)?;
    if status != 200 {
        return Err(ServeError::BadRequest(format!("/cases answered {status}")));
    }
    let cases: Vec<String> = listing["cases"]
        .as_array()
        .map(|a| a.iter().filter_map(|c| c["case_id"].as_str().map(str::to_string)).take(8).collect())
        .unwrap_or_default();
    if cases.len() < 4 {
        return Err(ServeError::BadRequest("drill needs at least four cases".into()));
    }
    let mut events = 0u64;
    for (r, (name, token)) in raters.iter().enumerate() {
        for (i, c) in cases.iter().enumerate() {
            let body = json!({ "case_id": c, "call": (i + r) % 2, "confidence": 1 + (i + 2 * r) % 5 });
            let (s, _) = node.request("POST", "/labels", Some(token), Some(&body))?;
            if s != 201 {
                return Err(ServeError::BadRequest(format!("label submit answered {s}")));
            }
            events += 1;
        }
        for c in cases.iter().take(1 + r % 3) {
            let body = json!({ "case_id": c, "call": 1, "confidence": 5 });
            node.request("POST", "/labels", Some(token), Some(&body))?;
            events += 1;
        }
        let body = json!({ "cursor": 3 + r, "case_id": cases[3] });
        node.request("PUT", &format!("/sessions/{name}"), Some(token), Some(&body))?;
        events += 1;
    }
    let before = views(&node, &raters, &cases)?;
    node.kill()?;

    let dir = data_dir.join("labels");
    let replayed = LabelStore::replay_from_empty(&dir)?;
    let reopened = LabelStore::open(&dir, cfg.serve.snapshot_every)?.state().clone();

    let node = Node::spawn(bin, config, data_dir)?;
    let after = views(&node, &raters, &cases)?;
    node.kill()?;
    Ok(DrillOutcome { before, after, events, replayed, reopened })
}
