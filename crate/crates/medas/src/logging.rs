//! Structured run logging with fan-out to several sinks.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    /// Microseconds since the Unix epoch, strictly increasing per run.
    pub ts: u64,
    pub run_id: String,
    pub node_id: Option<String>,
    pub level: Level,
    pub message: String,
    #[serde(default)]
    pub fields: BTreeMap<String, serde_json::Value>,
}

pub trait LogSink: Send + Sync {
    fn write(&self, event: &LogEvent) -> std::io::Result<()>;
}

/// Appends one JSON object per line.
pub struct FileSink {
    file: Mutex<File>,
}

impl FileSink {
    pub fn append(path: &Path) -> std::io::Result<FileSink> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileSink { file: Mutex::new(file) })
    }
}

impl LogSink for FileSink {
    fn write(&self, event: &LogEvent) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("log file lock");
        f.write_all(&line)?;
        f.flush()
    }
}

/// Human-readable lines on stderr.
pub struct TerminalSink;

impl LogSink for TerminalSink {
    fn write(&self, e: &LogEvent) -> std::io::Result<()> {
        let node = e.node_id.as_deref().unwrap_or("-");
        eprintln!("[{:?}] {} {}: {}", e.level, e.run_id, node, e.message);
        Ok(())
    }
}

/// Keeps events in memory.
#[derive(Default, Clone)]
pub struct MemorySink {
    pub events: Arc<Mutex<Vec<LogEvent>>>,
}

impl LogSink for MemorySink {
    fn write(&self, event: &LogEvent) -> std::io::Result<()> {
        self.events.lock().expect("memory sink lock").push(event.clone());
        Ok(())
    }
}

/// Forwards to callbacks, e.g. a service broadcaster.
pub struct CallbackSink<F: Fn(&LogEvent) + Send + Sync>(pub F);

impl<F: Fn(&LogEvent) + Send + Sync> LogSink for CallbackSink<F> {
    fn write(&self, event: &LogEvent) -> std::io::Result<()> {
        (self.0)(event);
        Ok(())
    }
}

fn now_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

/// Per-run logger. Event order is total: timestamps are made strictly
/// increasing and every sink sees the same sequence.
pub struct Logger {
    run_id: String,
    sinks: Vec<Arc<dyn LogSink>>,
    last_ts: Mutex<u64>,
}

impl Logger {
    pub fn new(run_id: &str, sinks: Vec<Arc<dyn LogSink>>) -> Logger {
        Logger {
            run_id: run_id.into(),
            sinks,
            last_ts: Mutex::new(0),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn emit(
        &self,
        node_id: Option<&str>,
        level: Level,
        message: impl Into<String>,
        fields: BTreeMap<String, serde_json::Value>,
    ) {
        let mut last = self.last_ts.lock().expect("logger clock");
        let ts = now_micros().max(*last + 1);
        *last = ts;
        let event = LogEvent {
            ts,
            run_id: self.run_id.clone(),
            node_id: node_id.map(String::from),
            level,
            message: message.into(),
            fields,
        };
        for sink in &self.sinks {
            if let Err(err) = sink.write(&event) {
                let _ = TerminalSink.write(&event);
                eprintln!("log sink failed: {err}");
            }
        }
    }

    pub fn info(&self, node_id: Option<&str>, message: impl Into<String>) {
        self.emit(node_id, Level::Info, message, BTreeMap::new());
    }

    pub fn warn(&self, node_id: Option<&str>, message: impl Into<String>) {
        self.emit(node_id, Level::Warn, message, BTreeMap::new());
    }

    pub fn error(&self, node_id: Option<&str>, message: impl Into<String>) {
        self.emit(node_id, Level::Error, message, BTreeMap::new());
    }
}

/// Reads an ndjson log file.
pub fn read_log(path: &Path) -> std::io::Result<Vec<LogEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;
    impl LogSink for Broken {
        fn write(&self, _: &LogEvent) -> std::io::Result<()> {
            Err(std::io::Error::other("disk gone"))
        }
    }

    #[test]
    fn sinks_see_identical_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs.ndjson");
        let (a, b) = (MemorySink::default(), MemorySink::default());
        let logger = Logger::new(
            "r1",
            vec![
                Arc::new(a.clone()),
                Arc::new(FileSink::append(&path).unwrap()),
                Arc::new(b.clone()),
                Arc::new(Broken),
            ],
        );
        let fields = BTreeMap::from([("nested".to_string(), serde_json::json!({"k": [1, 2.5, "x"]}))]);
        logger.emit(Some("n"), Level::Debug, "one", fields.clone());
        logger.info(None, "two");
        logger.error(Some("n"), "three");
        let from_file = read_log(&path).unwrap();
        assert_eq!(*a.events.lock().unwrap(), from_file);
        assert_eq!(*b.events.lock().unwrap(), from_file);
        assert_eq!(from_file[0].fields, fields);
        assert!(from_file.windows(2).all(|w| w[0].ts < w[1].ts));
        let line = std::fs::read_to_string(&path).unwrap();
        let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(
            line.lines().next().unwrap(),
        )
        .unwrap()
        .keys()
        .cloned()
        .collect();
        assert_eq!(keys, ["fields", "level", "message", "node_id", "run_id", "ts"]);
    }
}
