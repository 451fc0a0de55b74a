//! Bounded record logger with a background writer.
//!
//! `log` never blocks on the sink: when the queue is full a record is dropped
//! according to the policy and counted. After `close` the queue is drained,
//! so `persisted + dropped + failed = offered`.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::model::ImageFrame;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    #[default]
    DropOldest,
    DropNewest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggerConfig {
    /// Where `frames.log` and `images/` go; `None` keeps records in memory.
    pub out_dir: Option<PathBuf>,
    pub queue_capacity: usize,
    pub drop_policy: DropPolicy,
    pub save_images: bool,
}

impl Default for LoggerConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            queue_capacity: 256,
            drop_policy: DropPolicy::DropOldest,
            save_images: false,
        }
    }
}

impl LoggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queue_capacity == 0 {
            return Err(Error::Config("log.queue_capacity must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogRecord {
    /// One line of `frames.log`.
    Line(String),
    /// Saved as `images/<image_id>_<camera>.ppm`.
    Image(Arc<ImageFrame>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoggerStats {
    pub offered: u64,
    pub dropped: u64,
    pub persisted: u64,
    /// Records the sink failed to write.
    pub failed: u64,
}

/// What a memory-backed logger kept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryLog {
    pub lines: Vec<String>,
    /// File names the images would have been saved under.
    pub images: Vec<String>,
}

#[derive(Debug)]
pub struct LoggerReport {
    pub stats: LoggerStats,
    pub memory: Option<MemoryLog>,
    /// First sink error, if any record failed.
    pub first_error: Option<String>,
}

struct State {
    queue: VecDeque<LogRecord>,
    paused: bool,
    closed: bool,
    stats: LoggerStats,
}

struct Shared {
    state: Mutex<State>,
    wake: Condvar,
    capacity: usize,
    policy: DropPolicy,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// What the writer thread hands back: the memory sink and the first error.
type WriterResult = (MemoryLog, Option<String>);

pub struct Logger {
    shared: Arc<Shared>,
    writer: Mutex<Option<JoinHandle<WriterResult>>>,
    memory: bool,
}

enum Sink {
    Dir { lines: BufWriter<File>, images: PathBuf },
    Memory(MemoryLog),
}

impl Sink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Sink::Memory(MemoryLog::default()));
        };
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let path = dir.join("frames.log");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Sink::Dir {
            lines: BufWriter::new(file),
            images,
        })
    }

    fn write(&mut self, rec: LogRecord) -> Result<()> {
        match (self, rec) {
            (Sink::Dir { lines, .. }, LogRecord::Line(l)) => {
                writeln!(lines, "{l}").map_err(|e| Error::io("frames.log", e))
            }
            (Sink::Dir { images, .. }, LogRecord::Image(f)) => {
                imageio::write_frame(&images.join(image_file_name(&f)), &f)
            }
            (Sink::Memory(m), LogRecord::Line(l)) => {
                m.lines.push(l);
                Ok(())
            }
            (Sink::Memory(m), LogRecord::Image(f)) => {
                m.images.push(image_file_name(&f));
                Ok(())
            }
        }
    }

    fn flush(&mut self) -> Result<()> {
        match self {
            Sink::Dir { lines, .. } => lines.flush().map_err(|e| Error::io("frames.log", e)),
            Sink::Memory(_) => Ok(()),
        }
    }
}

fn image_file_name(f: &ImageFrame) -> String {
    format!("{}_{}.ppm", f.image_id, f.camera)
}

impl Logger {
    pub fn start(cfg: &LoggerConfig) -> Result<Self> {
        Self::start_inner(cfg, false)
    }

    /// Start with the writer held back until `resume`, so a test can fill
    /// the queue deterministically.
    pub fn start_paused(cfg: &LoggerConfig) -> Result<Self> {
        Self::start_inner(cfg, true)
    }

    fn start_inner(cfg: &LoggerConfig, paused: bool) -> Result<Self> {
        cfg.validate()?;
        let sink = Sink::open(cfg.out_dir.as_deref())?;
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                queue: VecDeque::with_capacity(cfg.queue_capacity),
                paused,
                closed: false,
                stats: LoggerStats::default(),
            }),
            wake: Condvar::new(),
            capacity: cfg.queue_capacity,
            policy: cfg.drop_policy,
        });
        let worker = Arc::clone(&shared);
        let writer = std::thread::Builder::new()
            .name("kiwiflower-logger".into())
            .spawn(move || write_loop(&worker, sink))
            .map_err(|e| Error::io("logger thread", e))?;
        Ok(Self {
            shared,
            writer: Mutex::new(Some(writer)),
            memory: cfg.out_dir.is_none(),
        })
    }

    /// Enqueue a record. Returns whether this record was kept; under
    /// `DropOldest` it always is, at the expense of the oldest queued one.
    pub fn log(&self, rec: LogRecord) -> Result<bool> {
        let mut st = self.shared.lock();
        if st.closed {
            return Err(Error::LoggerClosed);
        }
        st.stats.offered += 1;
        let accepted = if st.queue.len() < self.shared.capacity {
            st.queue.push_back(rec);
            true
        } else {
            st.stats.dropped += 1;
            match self.shared.policy {
                DropPolicy::DropOldest => {
                    st.queue.pop_front();
                    st.queue.push_back(rec);
                    true
                }
                DropPolicy::DropNewest => false,
            }
        };
        drop(st);
        self.shared.wake.notify_one();
        Ok(accepted)
    }

    pub fn resume(&self) {
        self.shared.lock().paused = false;
        self.shared.wake.notify_one();
    }

    pub fn stats(&self) -> LoggerStats {
        self.shared.lock().stats
    }

    pub fn queued(&self) -> usize {
        self.shared.lock().queue.len()
    }

    /// Drain the queue (even when paused), stop the writer and report.
    /// Later calls to `log` fail with `LoggerClosed`; a second `close`
    /// reports the same counts without the memory contents.
    pub fn close(&self) -> LoggerReport {
        {
            let mut st = self.shared.lock();
            st.closed = true;
            st.paused = false;
        }
        self.shared.wake.notify_all();
        let handle = self.writer.lock().unwrap_or_else(|p| p.into_inner()).take();
        let joined = handle.is_some();
        let (memory, first_error) = handle
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| (MemoryLog::default(), Some("logger thread panicked".into())))
            })
            .unwrap_or_default();
        LoggerReport {
            stats: self.stats(),
            memory: (self.memory && joined).then_some(memory),
            first_error,
        }
    }
}

impl Drop for Logger {
    fn drop(&mut self) {
        self.close();
    }
}

fn write_loop(shared: &Shared, mut sink: Sink) -> WriterResult {
    let mut first_error: Option<String> = None;
    let mut batch = Vec::new();
    loop {
        {
            let mut st = shared.lock();
            while !st.closed && (st.paused || st.queue.is_empty()) {
                st = shared.wake.wait(st).unwrap_or_else(|p| p.into_inner());
            }
            if st.queue.is_empty() {
                break;
            }
            batch.extend(st.queue.drain(..));
        }
        let (mut ok, mut failed) = (0, 0);
        for rec in batch.drain(..) {
            match sink.write(rec) {
                Ok(()) => ok += 1,
                Err(e) => {
                    failed += 1;
                    first_error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        if let Err(e) = sink.flush() {
            first_error.get_or_insert_with(|| e.to_string());
        }
        let mut st = shared.lock();
        st.stats.persisted += ok;
        st.stats.failed += failed;
    }
    let memory = match sink {
        Sink::Memory(m) => m,
        Sink::Dir { .. } => MemoryLog::default(),
    };
    (memory, first_error)
}
