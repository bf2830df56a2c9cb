//! Analytic accounting of live tensor payload bytes.
//!
//! A [`Ledger`] is installed for the current thread with [`scope`]. Every
//! [`Tensor`](crate::Tensor) created while a ledger is installed registers its
//! payload (`numel * size_of::<T>()`) and releases it on drop, even when the
//! drop happens on another thread. Allocator overhead is never counted, which
//! keeps peak figures reproducible across machines.
//!
//! Allocations are tagged with the current phase (see [`phase`]) for
//! per-phase breakdowns. Combined with [`shape_only`], a run produces the same
//! ledger events without doing any arithmetic, because every allocation in
//! this crate is determined by shapes alone.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::context;
pub use crate::context::{phase, scope, shape_only};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, Serialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub tag: &'static str,
    pub bytes: u64,
    pub current_after: u64,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct PhaseUsage {
    pub name: String,
    /// Highest ledger total observed right after an allocation in this phase.
    pub peak_bytes: u64,
    pub allocated_bytes: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct LedgerReport {
    pub peak_bytes: u64,
    pub current_bytes: u64,
    pub allocations: u64,
    pub phases: Vec<PhaseUsage>,
}

#[derive(Debug, Default)]
pub struct Ledger {
    current: AtomicU64,
    peak: AtomicU64,
    seq: AtomicU64,
    allocations: AtomicU64,
    events: Mutex<Vec<Event>>,
    phases: Mutex<BTreeMap<&'static str, PhaseUsage>>,
    record_events: bool,
}

impl Ledger {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// A ledger that also keeps the full alloc/free event log.
    pub fn with_event_log() -> Arc<Self> {
        Arc::new(Self {
            record_events: true,
            ..Self::default()
        })
    }

    pub fn current_bytes(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }

    /// Resets the peak to the current value, so the next phase of a run can
    /// be measured on its own.
    pub fn reset_peak(&self) {
        self.peak.store(self.current_bytes(), Ordering::SeqCst);
    }

    pub(crate) fn alloc(&self, bytes: u64, tag: &'static str) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.allocations.fetch_add(1, Ordering::SeqCst);
        {
            let mut phases = self.phases.lock().unwrap();
            let usage = phases.entry(tag).or_insert_with(|| PhaseUsage {
                name: tag.to_string(),
                ..PhaseUsage::default()
            });
            usage.peak_bytes = usage.peak_bytes.max(now);
            usage.allocated_bytes += bytes;
        }
        self.log(EventKind::Alloc, tag, bytes, now);
    }

    pub(crate) fn free(&self, bytes: u64, tag: &'static str) {
        let prev = self.current.fetch_sub(bytes, Ordering::SeqCst);
        assert!(prev >= bytes, "ledger underflow: freeing {bytes} of {prev}");
        self.log(EventKind::Free, tag, bytes, prev - bytes);
    }

    fn log(&self, kind: EventKind, tag: &'static str, bytes: u64, current_after: u64) {
        if !self.record_events {
            return;
        }
        let mut events = self.events.lock().unwrap();
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        events.push(Event {
            seq,
            kind,
            tag,
            bytes,
            current_after,
        });
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }

    pub fn report(&self) -> LedgerReport {
        LedgerReport {
            peak_bytes: self.peak_bytes(),
            current_bytes: self.current_bytes(),
            allocations: self.allocations.load(Ordering::SeqCst),
            phases: self.phases.lock().unwrap().values().cloned().collect(),
        }
    }
}

/// Handle held by a tracked tensor; releases its bytes on drop.
#[derive(Debug)]
pub(crate) struct Tracker {
    ledger: Arc<Ledger>,
    bytes: u64,
    tag: &'static str,
}

impl Tracker {
    pub(crate) fn attach(bytes: u64) -> Option<Tracker> {
        let (ledger, tag) = context::current_ledger()?;
        ledger.alloc(bytes, tag);
        Some(Tracker { ledger, bytes, tag })
    }
}

impl Drop for Tracker {
    fn drop(&mut self) {
        self.ledger.free(self.bytes, self.tag);
    }
}
