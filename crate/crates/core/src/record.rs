//! Time-series records and the CSV line format they arrive in.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of bytes of an offending line kept in an error log entry.
pub const MAX_RAW_LINE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Float,
    Int,
    String,
}

impl FromStr for ColumnType {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "float" | "float64" | "double" => Ok(ColumnType::Float),
            "int" | "int64" | "integer" => Ok(ColumnType::Int),
            "string" | "str" | "text" => Ok(ColumnType::String),
            other => Err(SchemaError::UnknownType(other.to_string())),
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Float => "float",
            ColumnType::Int => "int",
            ColumnType::String => "string",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("unknown column type `{0}`")]
    UnknownType(String),
    #[error("column spec `{0}` is not of the form name:type")]
    Malformed(String),
    #[error("schema has no columns")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
}

/// Ordered measurement columns following the device id and timestamp.
///
/// Serialized as a list of `name:type` strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Schema {
    columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self, SchemaError> {
        if columns.is_empty() {
            return Err(SchemaError::Empty);
        }
        Ok(Self { columns })
    }

    pub fn from_types(types: &[ColumnType]) -> Self {
        let columns = types
            .iter()
            .enumerate()
            .map(|(i, &ty)| Column {
                name: format!("c{i}"),
                ty,
            })
            .collect();
        Self { columns }
    }

    /// Parses `"name:type,name:type"`.
    pub fn parse(spec: &str) -> Result<Self, SchemaError> {
        let cols: Vec<String> = spec.split(',').map(str::to_string).collect();
        Self::try_from(cols)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

impl TryFrom<Vec<String>> for Schema {
    type Error = SchemaError;

    fn try_from(specs: Vec<String>) -> Result<Self, Self::Error> {
        let columns = specs
            .iter()
            .map(|spec| {
                let (name, ty) = spec
                    .split_once(':')
                    .ok_or_else(|| SchemaError::Malformed(spec.clone()))?;
                if name.trim().is_empty() {
                    return Err(SchemaError::Malformed(spec.clone()));
                }
                Ok(Column {
                    name: name.trim().to_string(),
                    ty: ty.parse()?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Schema::new(columns)
    }
}

impl From<Schema> for Vec<String> {
    fn from(schema: Schema) -> Self {
        schema
            .columns
            .iter()
            .map(|c| format!("{}:{}", c.name, c.ty))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Str(v) => f.write_str(v),
        }
    }
}

/// One parsed time-series row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub device_id: String,
    /// Epoch microseconds.
    pub timestamp: i64,
    pub values: Vec<Value>,
    /// Gateway-assigned audit sequence number; zero until accepted.
    pub seq: u64,
}

impl Record {
    pub fn to_csv_line(&self) -> String {
        let mut line = String::with_capacity(32 + self.values.len() * 8);
        self.write_csv(&mut line);
        line
    }

    /// Appends the CSV encoding (without newline) to `out`.
    pub fn write_csv(&self, out: &mut String) {
        use fmt::Write;
        let _ = write!(out, "{},{}", self.device_id, self.timestamp);
        for v in &self.values {
            let _ = write!(out, ",{v}");
        }
    }
}

/// Why a line was refused. Variants are listed in the order they are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Wrong number of comma-separated fields.
    Arity,
    EmptyDevice,
    /// Device id contains whitespace or starts with a wire-protocol keyword.
    InvalidDevice,
    BadTimestamp,
    /// A measurement does not parse as its column type.
    Type,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Arity => "arity",
            RejectReason::EmptyDevice => "empty_device",
            RejectReason::InvalidDevice => "invalid_device",
            RejectReason::BadTimestamp => "bad_timestamp",
            RejectReason::Type => "type",
        })
    }
}

/// Device id prefixes that would collide with segment control frames.
pub const RESERVED_DEVICE_PREFIXES: [&str; 2] = ["BEGIN", "EOF"];

/// Parses `device,timestamp,v1,...,vn` against `schema`.
///
/// The returned record has `seq == 0`.
pub fn parse_record(line: &str, schema: &Schema) -> Result<Record, RejectReason> {
    let line = line.trim_end_matches(['\n', '\r']);
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != schema.len() + 2 {
        return Err(RejectReason::Arity);
    }
    let device = fields[0];
    if device.is_empty() {
        return Err(RejectReason::EmptyDevice);
    }
    if device.chars().any(char::is_whitespace)
        || RESERVED_DEVICE_PREFIXES.iter().any(|p| device.starts_with(p))
    {
        return Err(RejectReason::InvalidDevice);
    }
    let timestamp: i64 = fields[1]
        .trim()
        .parse()
        .map_err(|_| RejectReason::BadTimestamp)?;
    let values = fields[2..]
        .iter()
        .zip(schema.columns())
        .map(|(raw, col)| parse_value(raw, col.ty))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Record {
        device_id: device.to_string(),
        timestamp,
        values,
        seq: 0,
    })
}

fn parse_value(raw: &str, ty: ColumnType) -> Result<Value, RejectReason> {
    match ty {
        ColumnType::Float => raw
            .trim()
            .parse::<f64>()
            .map(Value::Float)
            .map_err(|_| RejectReason::Type),
        ColumnType::Int => raw
            .trim()
            .parse::<i64>()
            .map(Value::Int)
            .map_err(|_| RejectReason::Type),
        ColumnType::String => Ok(Value::Str(raw.to_string())),
    }
}

/// Truncates to at most [`MAX_RAW_LINE`] bytes on a char boundary.
pub fn truncate_raw(line: &str) -> String {
    if line.len() <= MAX_RAW_LINE {
        return line.to_string();
    }
    let mut end = MAX_RAW_LINE;
    while !line.is_char_boundary(end) {
        end -= 1;
    }
    line[..end].to_string()
}
