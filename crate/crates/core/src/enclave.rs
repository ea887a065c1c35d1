//! Simulated secure memory with demand paging.
//!
//! Buffers live in an unbounded, page-aligned virtual space. Only residency is
//! constrained: touching a non-resident page faults it in (transfer, decrypt,
//! integrity check), and when the resident set is full the replacement policy
//! picks a victim, which costs an extra write-back when dirty. Data never
//! lives here; executors keep their numbers in ordinary memory and report
//! the byte ranges they touch.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::ops::Sub;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIB: u64 = 1 << 20;
pub const DEFAULT_PAGE_BYTES: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnclaveConfig {
    pub secure_bytes: u64,
    pub page_bytes: u64,
    /// Cost units per page faulted in.
    pub cost_fault: f64,
    /// Cost units per dirty page written back on eviction.
    pub cost_evict: f64,
    /// Decryption-link bandwidth in pages per cost unit.
    pub link_pages_per_unit: f64,
}

impl EnclaveConfig {
    pub fn new(secure_bytes: u64, page_bytes: u64) -> Self {
        EnclaveConfig {
            secure_bytes,
            page_bytes,
            cost_fault: 1.0,
            cost_evict: 1.0,
            link_pages_per_unit: 1.0,
        }
    }

    pub fn with_mib(mib: f64) -> Self {
        EnclaveConfig::new((mib * MIB as f64).round() as u64, DEFAULT_PAGE_BYTES)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.page_bytes.is_power_of_two() {
            return Err(Error::Config(format!(
                "page size {} is not a power of two",
                self.page_bytes
            )));
        }
        if self.secure_bytes < 2 * self.page_bytes {
            return Err(Error::Config(format!(
                "secure size {} holds fewer than two {}-byte pages",
                self.secure_bytes, self.page_bytes
            )));
        }
        let costs = [self.cost_fault, self.cost_evict, self.link_pages_per_unit];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) || self.link_pages_per_unit == 0.0 {
            return Err(Error::Config(
                "costs must be finite and non-negative, link rate positive".into(),
            ));
        }
        Ok(())
    }

    pub fn capacity_pages(&self) -> usize {
        (self.secure_bytes / self.page_bytes) as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PagingStats {
    pub faults: u64,
    pub evictions: u64,
    pub clean_evictions: u64,
    pub dirty_evictions: u64,
    pub resident_peak: u64,
    pub total_cost: f64,
}

impl Sub for PagingStats {
    type Output = PagingStats;

    /// Counter delta between two snapshots; `resident_peak` keeps the later value.
    fn sub(self, earlier: PagingStats) -> PagingStats {
        PagingStats {
            faults: self.faults - earlier.faults,
            evictions: self.evictions - earlier.evictions,
            clean_evictions: self.clean_evictions - earlier.clean_evictions,
            dirty_evictions: self.dirty_evictions - earlier.dirty_evictions,
            resident_peak: self.resident_peak,
            total_cost: self.total_cost - earlier.total_cost,
        }
    }
}

/// Per-buffer traffic counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub faults: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferHandle {
    id: usize,
    base: u64,
    len: usize,
}

impl BufferHandle {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// Something that executors report memory accesses to.
///
/// Executors allocate every buffer they touch through this interface and
/// describe each access as a byte range, so the same code path runs with or
/// without paging simulation.
pub trait Memory {
    fn alloc(&mut self, len: usize, label: &str) -> BufferHandle;

    fn access(&mut self, buf: &BufferHandle, offset: usize, len: usize, kind: AccessKind) -> Result<()>;

    /// False when accesses are discarded; executors may then skip
    /// per-element bookkeeping.
    fn is_traced(&self) -> bool;

    fn read(&mut self, buf: &BufferHandle, offset: usize, len: usize) -> Result<()> {
        self.access(buf, offset, len, AccessKind::Read)
    }

    fn write(&mut self, buf: &BufferHandle, offset: usize, len: usize) -> Result<()> {
        self.access(buf, offset, len, AccessKind::Write)
    }
}

/// Discards accesses; only bounds are checked.
#[derive(Debug, Default)]
pub struct Untraced {
    next_id: usize,
}

impl Memory for Untraced {
    fn alloc(&mut self, len: usize, _label: &str) -> BufferHandle {
        self.next_id += 1;
        BufferHandle {
            id: self.next_id - 1,
            base: 0,
            len,
        }
    }

    fn access(&mut self, buf: &BufferHandle, offset: usize, len: usize, _kind: AccessKind) -> Result<()> {
        if offset.checked_add(len).is_none_or(|end| end > buf.len) {
            return Err(Error::Bounds {
                label: format!("#{}", buf.id),
                offset,
                len,
                buffer_len: buf.len,
            });
        }
        Ok(())
    }

    fn is_traced(&self) -> bool {
        false
    }
}

/// Replacement policy over dense virtual page numbers.
pub trait ReplacementPolicy {
    /// `page` became resident.
    fn insert(&mut self, page: usize);
    /// A resident `page` was accessed.
    fn touch(&mut self, page: usize);
    /// Removes and returns the page to evict. Only called when non-empty.
    fn evict(&mut self) -> usize;
}

const NIL: u32 = u32::MAX;

/// Strict least-recently-used order as an intrusive doubly linked list
/// indexed by page number.
#[derive(Debug, Default)]
pub struct Lru {
    prev: Vec<u32>,
    next: Vec<u32>,
    // most recent
    head: u32,
    // least recent
    tail: u32,
    len: usize,
}

impl Lru {
    pub fn new() -> Self {
        Lru {
            head: NIL,
            tail: NIL,
            ..Default::default()
        }
    }

    fn ensure(&mut self, page: usize) {
        if page >= self.prev.len() {
            let n = (page + 1).max(self.prev.len() * 2);
            self.prev.resize(n, NIL);
            self.next.resize(n, NIL);
        }
    }

    fn unlink(&mut self, page: u32) {
        let (p, n) = (self.prev[page as usize], self.next[page as usize]);
        if p == NIL {
            self.head = n;
        } else {
            self.next[p as usize] = n;
        }
        if n == NIL {
            self.tail = p;
        } else {
            self.prev[n as usize] = p;
        }
        self.len -= 1;
    }

    fn push_front(&mut self, page: u32) {
        self.prev[page as usize] = NIL;
        self.next[page as usize] = self.head;
        if self.head != NIL {
            self.prev[self.head as usize] = page;
        }
        self.head = page;
        if self.tail == NIL {
            self.tail = page;
        }
        self.len += 1;
    }
}

impl ReplacementPolicy for Lru {
    fn insert(&mut self, page: usize) {
        self.ensure(page);
        self.push_front(page as u32);
    }

    fn touch(&mut self, page: usize) {
        let p = page as u32;
        if self.head != p {
            self.unlink(p);
            self.push_front(p);
        }
    }

    fn evict(&mut self) -> usize {
        let victim = self.tail;
        debug_assert!(victim != NIL && self.len > 0);
        self.unlink(victim);
        victim as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: AccessKind,
    pub page: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Residency {
    Absent,
    Clean,
    Dirty,
}

struct BufferInfo {
    label: String,
    first_page: usize,
    stats: BufferStats,
}

/// The simulated enclave. Single-threaded: accesses form a total order.
pub struct Enclave {
    config: EnclaveConfig,
    capacity: usize,
    policy: Box<dyn ReplacementPolicy>,
    state: Vec<Residency>,
    owner: Vec<u32>,
    resident: usize,
    next_page: usize,
    buffers: Vec<BufferInfo>,
    stats: PagingStats,
    trace: Option<Vec<TraceEvent>>,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("config", &self.config)
            .field("resident", &self.resident)
            .field("buffers", &self.buffers.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Enclave {
    pub fn new(config: EnclaveConfig) -> Result<Self> {
        Enclave::with_policy(config, Box::new(Lru::new()))
    }

    pub fn with_policy(config: EnclaveConfig, policy: Box<dyn ReplacementPolicy>) -> Result<Self> {
        config.validate()?;
        Ok(Enclave {
            capacity: config.capacity_pages(),
            config,
            policy,
            state: Vec::new(),
            owner: Vec::new(),
            resident: 0,
            next_page: 0,
            buffers: Vec::new(),
            stats: PagingStats::default(),
            trace: None,
        })
    }

    pub fn config(&self) -> &EnclaveConfig {
        &self.config
    }

    pub fn capacity_pages(&self) -> usize {
        self.capacity
    }

    pub fn page_bytes(&self) -> u64 {
        self.config.page_bytes
    }

    pub fn resident_pages(&self) -> usize {
        self.resident
    }

    pub fn stats(&self) -> PagingStats {
        self.stats
    }

    pub fn buffer_stats(&self, buf: &BufferHandle) -> BufferStats {
        self.buffers[buf.id].stats
    }

    pub fn buffer_label(&self, buf: &BufferHandle) -> &str {
        &self.buffers[buf.id].label
    }

    /// Pages spanned by a buffer.
    pub fn buffer_pages(&self, buf: &BufferHandle) -> usize {
        (buf.len as u64).div_ceil(self.config.page_bytes) as usize
    }

    /// Starts recording page-level accesses.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    /// Fills the resident set with dirty pages of a dead buffer, as if an
    /// earlier computation had just used all of secure memory.
    pub fn fill_with_residue(&mut self) -> Result<()> {
        let bytes = self.capacity * self.config.page_bytes as usize;
        let residue = Memory::alloc(self, bytes, "residue");
        self.write(&residue, 0, bytes)
    }

    fn touch(&mut self, page: usize, kind: AccessKind) {
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent {
                kind,
                page: page as u64,
            });
        }
        match self.state[page] {
            Residency::Absent => {
                self.stats.faults += 1;
                self.stats.total_cost += self.config.cost_fault;
                if let Some(b) = self.buffers.get_mut(self.owner[page] as usize) {
                    b.stats.faults += 1;
                }
                if self.resident == self.capacity {
                    let victim = self.policy.evict();
                    self.stats.evictions += 1;
                    if self.state[victim] == Residency::Dirty {
                        self.stats.dirty_evictions += 1;
                        self.stats.total_cost += self.config.cost_evict;
                    } else {
                        self.stats.clean_evictions += 1;
                    }
                    self.state[victim] = Residency::Absent;
                    self.resident -= 1;
                }
                self.policy.insert(page);
                self.resident += 1;
                self.stats.resident_peak = self.stats.resident_peak.max(self.resident as u64);
                self.state[page] = match kind {
                    AccessKind::Read => Residency::Clean,
                    AccessKind::Write => Residency::Dirty,
                };
            }
            _ => {
                self.policy.touch(page);
                if kind == AccessKind::Write {
                    self.state[page] = Residency::Dirty;
                }
            }
        }
    }

    fn grow_to(&mut self, pages: usize, owner: u32) {
        self.state.resize(pages, Residency::Absent);
        self.owner.resize(pages, owner);
    }
}

impl Memory for Enclave {
    fn alloc(&mut self, len: usize, label: &str) -> BufferHandle {
        let pages = (len as u64).div_ceil(self.config.page_bytes) as usize;
        let id = self.buffers.len();
        let first = self.next_page;
        self.next_page += pages;
        self.grow_to(self.next_page, id as u32);
        self.buffers.push(BufferInfo {
            label: label.to_string(),
            first_page: first,
            stats: BufferStats::default(),
        });
        BufferHandle {
            id,
            base: first as u64 * self.config.page_bytes,
            len,
        }
    }

    fn access(&mut self, buf: &BufferHandle, offset: usize, len: usize, kind: AccessKind) -> Result<()> {
        let info = self
            .buffers
            .get(buf.id)
            .filter(|b| b.first_page as u64 * self.config.page_bytes == buf.base)
            .ok_or_else(|| Error::Bounds {
                label: format!("foreign handle #{}", buf.id),
                offset,
                len,
                buffer_len: buf.len,
            })?;
        if offset.checked_add(len).is_none_or(|end| end > buf.len) {
            return Err(Error::Bounds {
                label: info.label.clone(),
                offset,
                len,
                buffer_len: buf.len,
            });
        }
        if len == 0 {
            return Ok(());
        }
        let stats = &mut self.buffers[buf.id].stats;
        match kind {
            AccessKind::Read => stats.read_bytes += len as u64,
            AccessKind::Write => stats.write_bytes += len as u64,
        }
        let pb = self.config.page_bytes;
        let first = ((buf.base + offset as u64) / pb) as usize;
        let last = ((buf.base + (offset + len) as u64 - 1) / pb) as usize;
        for page in first..=last {
            self.touch(page, kind);
        }
        Ok(())
    }

    fn is_traced(&self) -> bool {
        true
    }
}

/// Writes a trace as newline-delimited `R <page>` / `W <page>` records.
pub fn write_trace(mut out: impl Write, trace: &[TraceEvent]) -> io::Result<()> {
    for ev in trace {
        let k = match ev.kind {
            AccessKind::Read => 'R',
            AccessKind::Write => 'W',
        };
        writeln!(out, "{k} {}", ev.page)?;
    }
    Ok(())
}

pub fn read_trace(input: impl BufRead) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Parse(format!("trace line {}: '{line}'", n + 1));
        let (k, page) = line.split_once(' ').ok_or_else(bad)?;
        let kind = match k {
            "R" => AccessKind::Read,
            "W" => AccessKind::Write,
            _ => return Err(bad()),
        };
        let page = page.trim().parse().map_err(|_| bad())?;
        out.push(TraceEvent { kind, page });
    }
    Ok(out)
}

/// Replays a page trace against a fresh enclave.
pub fn replay(config: EnclaveConfig, trace: &[TraceEvent]) -> Result<PagingStats> {
    let mut enclave = Enclave::new(config)?;
    let pages = trace.iter().map(|e| e.page as usize + 1).max().unwrap_or(0);
    enclave.grow_to(pages, u32::MAX);
    enclave.next_page = pages;
    for ev in trace {
        enclave.touch(ev.page as usize, ev.kind);
    }
    Ok(enclave.stats())
}

/// Time to push `pages` through a decode pipeline feeding the decryption
/// link: `pages / min(link_rate, workers * decode_rate_per_worker)`.
pub fn link_time(pages: u64, workers: usize, decode_pages_per_unit_per_worker: f64, link_pages_per_unit: f64) -> f64 {
    assert!(
        decode_pages_per_unit_per_worker > 0.0 && link_pages_per_unit > 0.0 && workers > 0,
        "rates and worker count must be positive"
    );
    let throughput = link_pages_per_unit.min(workers as f64 * decode_pages_per_unit_per_worker);
    pages as f64 / throughput
}
