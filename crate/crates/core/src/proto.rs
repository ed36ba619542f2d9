//! Slot-to-segment wire protocol.
//!
//! Newline-delimited text frames over one TCP connection per slot/segment
//! pair. Requests: `BEGIN <txn-id> <table>`, CSV rows, `EOF`. Responses:
//! `READY <txn-id>`, `COMMITTED <txn-id> <row-count>`, `ERROR <txn-id> <reason>`.

use std::fmt;

use thiserror::Error;

/// Placeholder transaction id used in errors raised before any `BEGIN`.
pub const NO_TXN: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Begin { txn: String, table: String },
    Row(String),
    Eof,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ready { txn: String },
    Committed { txn: String, rows: u64 },
    Error { txn: String, reason: ErrorReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorReason {
    DuplicateTxn,
    UnknownTxn,
    ProtocolOrder,
    Malformed,
}

impl ErrorReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorReason::DuplicateTxn => "duplicate-txn",
            ErrorReason::UnknownTxn => "unknown-txn",
            ErrorReason::ProtocolOrder => "protocol-order",
            ErrorReason::Malformed => "malformed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "duplicate-txn" => ErrorReason::DuplicateTxn,
            "unknown-txn" => ErrorReason::UnknownTxn,
            "protocol-order" => ErrorReason::ProtocolOrder,
            "malformed" => ErrorReason::Malformed,
            _ => return None,
        })
    }
}

impl fmt::Display for ErrorReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("malformed frame: {0:?}")]
    Malformed(String),
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.contains(char::is_whitespace)
}

impl Request {
    pub fn parse(line: &str) -> Result<Self, FrameError> {
        let line = line.trim_end_matches(['\n', '\r']);
        if line == "EOF" {
            return Ok(Request::Eof);
        }
        if let Some(rest) = line.strip_prefix("BEGIN ") {
            let mut parts = rest.split(' ');
            return match (parts.next(), parts.next(), parts.next()) {
                (Some(txn), Some(table), None) if is_token(txn) && is_token(table) => {
                    Ok(Request::Begin {
                        txn: txn.to_string(),
                        table: table.to_string(),
                    })
                }
                _ => Err(FrameError::Malformed(line.to_string())),
            };
        }
        if line.is_empty() || line == "BEGIN" {
            return Err(FrameError::Malformed(line.to_string()));
        }
        Ok(Request::Row(line.to_string()))
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::Begin { txn, table } => writeln!(f, "BEGIN {txn} {table}"),
            Request::Row(row) => writeln!(f, "{row}"),
            Request::Eof => writeln!(f, "EOF"),
        }
    }
}

impl Response {
    pub fn parse(line: &str) -> Result<Self, FrameError> {
        let line = line.trim_end_matches(['\n', '\r']);
        let malformed = || FrameError::Malformed(line.to_string());
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["READY", txn] if is_token(txn) => Ok(Response::Ready {
                txn: txn.to_string(),
            }),
            ["COMMITTED", txn, rows] if is_token(txn) => Ok(Response::Committed {
                txn: txn.to_string(),
                rows: rows.parse().map_err(|_| malformed())?,
            }),
            ["ERROR", txn, reason] if is_token(txn) => Ok(Response::Error {
                txn: txn.to_string(),
                reason: ErrorReason::parse(reason).ok_or_else(malformed)?,
            }),
            _ => Err(malformed()),
        }
    }

    pub fn txn(&self) -> &str {
        match self {
            Response::Ready { txn } | Response::Committed { txn, .. } | Response::Error { txn, .. } => txn,
        }
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Ready { txn } => writeln!(f, "READY {txn}"),
            Response::Committed { txn, rows } => writeln!(f, "COMMITTED {txn} {rows}"),
            Response::Error { txn, reason } => writeln!(f, "ERROR {txn} {reason}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_encodings() {
        let begin = Request::Begin {
            txn: "t1".into(),
            table: "readings".into(),
        };
        assert_eq!(begin.to_string(), "BEGIN t1 readings\n");
        assert_eq!(Request::Eof.to_string(), "EOF\n");
        assert_eq!(Request::Row("d,1,2".into()).to_string(), "d,1,2\n");
        assert_eq!(Response::Ready { txn: "t1".into() }.to_string(), "READY t1\n");
        assert_eq!(
            Response::Committed { txn: "t1".into(), rows: 100 }.to_string(),
            "COMMITTED t1 100\n"
        );
        assert_eq!(
            Response::Error { txn: "t1".into(), reason: ErrorReason::DuplicateTxn }.to_string(),
            "ERROR t1 duplicate-txn\n"
        );
    }

    #[test]
    fn request_classification() {
        assert_eq!(Request::parse("EOF\n"), Ok(Request::Eof));
        assert!(matches!(Request::parse("BEGIN t1 readings"), Ok(Request::Begin { .. })));
        assert!(Request::parse("BEGIN t1").is_err());
        assert!(Request::parse("BEGIN t1 a b").is_err());
        assert!(Request::parse("").is_err());
        assert_eq!(Request::parse("EOFX,1,2"), Ok(Request::Row("EOFX,1,2".into())));
    }

    #[test]
    fn response_rejects_garbage() {
        assert!(Response::parse("COMMITTED t1 x").is_err());
        assert!(Response::parse("ERROR t1 nope").is_err());
        assert!(Response::parse("HELLO").is_err());
    }

    proptest! {
        #[test]
        fn frames_round_trip(txn in "[a-z0-9-]{1,12}", table in "[a-z_]{1,8}", rows in any::<u64>()) {
            let req = Request::Begin { txn: txn.clone(), table };
            prop_assert_eq!(Request::parse(&req.to_string()), Ok(req));
            for resp in [
                Response::Ready { txn: txn.clone() },
                Response::Committed { txn: txn.clone(), rows },
                Response::Error { txn: txn.clone(), reason: ErrorReason::ProtocolOrder },
            ] {
                prop_assert_eq!(Response::parse(&resp.to_string()), Ok(resp));
            }
        }
    }
}
