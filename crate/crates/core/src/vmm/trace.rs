//! Interposition log. Every guest call and every control step is recorded with
//! its encoded arguments, which is enough to re-drive a fresh broker.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

pub const HEADER_PREFIX: &str = "# vfpga-trace v1";
pub const FOOTER_PREFIX: &str = "# end";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// A guest request.
    Call,
    /// Something the device or broker did on its own.
    Dev,
    /// Simulation control (advancing the clock).
    Ctl,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Self::Call => "call",
            Self::Dev => "dev",
            Self::Ctl => "ctl",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "call" => Some(Self::Call),
            "dev" => Some(Self::Dev),
            "ctl" => Some(Self::Ctl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub time: u64,
    pub src: Source,
    pub vm: Option<u32>,
    pub op: String,
    pub request_id: u32,
    pub outcome: String,
    /// First 8 bytes of SHA-256 over `args`, hex.
    pub digest: String,
    /// Hex-encoded request for calls and control steps; a short
    /// `key:value` list for device events.
    pub args: String,
}

impl TraceEvent {
    pub fn to_line(&self) -> String {
        let vm = self.vm.map_or_else(|| "-".to_string(), |v| v.to_string());
        let args = if self.args.is_empty() { "-" } else { &self.args };
        format!(
            "seq={} time={} src={} vm={} op={} rid={} outcome={} digest={} args={}",
            self.seq,
            self.time,
            self.src.name(),
            vm,
            self.op,
            self.request_id,
            self.outcome,
            self.digest,
            args
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut fields = line.split(' ');
        let mut next = |key: &str| {
            let f = fields.next()?;
            f.strip_prefix(key)?.strip_prefix('=')
        };
        let seq = next("seq")?.parse().ok()?;
        let time = next("time")?.parse().ok()?;
        let src = Source::parse(next("src")?)?;
        let vm = match next("vm")? {
            "-" => None,
            v => Some(v.parse().ok()?),
        };
        let op = next("op")?.to_string();
        let request_id = next("rid")?.parse().ok()?;
        let outcome = next("outcome")?.to_string();
        let digest = next("digest")?.to_string();
        let args = match next("args")? {
            "-" => String::new(),
            a => a.to_string(),
        };
        if fields.next().is_some() {
            return None;
        }
        Some(Self {
            seq,
            time,
            src,
            vm,
            op,
            request_id,
            outcome,
            digest,
            args,
        })
    }
}

pub fn arg_digest(args: &[u8]) -> String {
    hex::encode(&Sha256::digest(args)[..8])
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Opens a record with a pending outcome and returns its index. Events
    /// emitted while the call runs sort after it.
    pub fn begin(
        &mut self,
        time: u64,
        src: Source,
        vm: Option<u32>,
        op: &str,
        request_id: u32,
        args: &[u8],
    ) -> usize {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent {
            seq,
            time,
            src,
            vm,
            op: op.to_string(),
            request_id,
            outcome: "pending".to_string(),
            digest: arg_digest(args),
            args: hex::encode(args),
        });
        self.events.len() - 1
    }

    pub fn finish(&mut self, index: usize, outcome: &str) {
        self.events[index].outcome = outcome.to_string();
    }

    pub fn device(&mut self, time: u64, vm: Option<u32>, op: &str, detail: String) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent {
            seq,
            time,
            src: Source::Dev,
            vm,
            op: op.to_string(),
            request_id: 0,
            outcome: "ok".to_string(),
            digest: arg_digest(detail.as_bytes()),
            args: detail,
        });
    }

    pub fn export(&self, fingerprint: &str, now: u64, digest_hex: &str) -> String {
        let mut out = format!("{HEADER_PREFIX} fingerprint={fingerprint}\n");
        for e in &self.events {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        let _ = writeln!(out, "{FOOTER_PREFIX} time={now} digest={digest_hex}");
        out
    }
}

/// A parsed export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrace {
    pub fingerprint: String,
    pub events: Vec<TraceEvent>,
    pub end_time: u64,
    pub end_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed trace at line {line}")]
pub struct TraceParseError {
    pub line: usize,
}

pub fn parse_trace(text: &str) -> Result<ParsedTrace, TraceParseError> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize| TraceParseError { line: line + 1 };
    let (_, header) = lines.next().ok_or(err(0))?;
    let fingerprint = header
        .strip_prefix(HEADER_PREFIX)
        .and_then(|r| r.strip_prefix(" fingerprint="))
        .ok_or(err(0))?
        .to_string();
    let mut events = Vec::new();
    for (n, line) in lines {
        if let Some(rest) = line.strip_prefix(FOOTER_PREFIX) {
            let mut it = rest.trim().split(' ');
            let time = it
                .next()
                .and_then(|f| f.strip_prefix("time="))
                .and_then(|v| v.parse().ok())
                .ok_or(err(n))?;
            let digest = it
                .next()
                .and_then(|f| f.strip_prefix("digest="))
                .ok_or(err(n))?;
            return Ok(ParsedTrace {
                fingerprint,
                events,
                end_time: time,
                end_digest: digest.to_string(),
            });
        }
        events.push(TraceEvent::parse_line(line).ok_or(err(n))?);
    }
    Err(err(text.lines().count()))
}
