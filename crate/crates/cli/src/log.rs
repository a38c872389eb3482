//! JSON-lines diagnostics on standard error.

use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy)]
pub enum Level {
    Info,
    Warn,
    Error,
}

impl Level {
    fn as_str(self) -> &'static str {
        match self {
            Level::Info => "info",
            Level::Warn => "warn",
            Level::Error => "error",
        }
    }
}

/// One record: `{"level", "event", ...fields}`. Non-object `fields` are
/// stored under `"data"`.
pub fn record(level: Level, event: &str, fields: Value) -> String {
    let mut obj = Map::new();
    obj.insert("level".into(), level.as_str().into());
    obj.insert("event".into(), event.into());
    match fields {
        Value::Object(m) => obj.extend(m),
        Value::Null => {}
        other => {
            obj.insert("data".into(), other);
        }
    }
    Value::Object(obj).to_string()
}

pub fn emit(level: Level, event: &str, fields: Value) {
    eprintln!("{}", record(level, event, fields));
}

pub fn info(event: &str, fields: Value) {
    emit(Level::Info, event, fields);
}

pub fn error(event: &str, fields: Value) {
    emit(Level::Error, event, fields);
}
