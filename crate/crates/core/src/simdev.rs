//! Simulated accelerator.
//!
//! A device owns ordered streams. Operations enqueued on a stream complete
//! in submission order; operations on different streams are independent.
//! Completion time is fixed at enqueue (`max(now, stream tail) + cost`)
//! and effects are applied when the clock is advanced past it, so the
//! same submissions always give the same completion log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::depsys::{AccessMode, AccessRegion};
use crate::error::{Error, Result};
use crate::time::VTime;

pub const F64_BYTES: u64 = 8;

/// Contiguous run of `f64` cells in the [`Arena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Buffer {
    offset: usize,
    len: usize,
}

impl Buffer {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Byte address of element `i`.
    pub fn addr(&self, i: usize) -> u64 {
        (self.offset + i) as u64 * F64_BYTES
    }

    pub fn slice(&self, range: Range<usize>) -> Buffer {
        assert!(range.start <= range.end && range.end <= self.len, "slice {range:?} out of {}", self.len);
        Buffer {
            offset: self.offset + range.start,
            len: range.end - range.start,
        }
    }

    /// Dependency region covering `range` of this buffer.
    pub fn region(&self, range: Range<usize>, mode: AccessMode) -> AccessRegion {
        assert!(range.start < range.end && range.end <= self.len, "region {range:?} out of {}", self.len);
        AccessRegion::new(self.addr(range.start), (range.end - range.start) as u64 * F64_BYTES, mode)
            .expect("non-empty buffer region")
    }

    pub fn whole(&self, mode: AccessMode) -> AccessRegion {
        self.region(0..self.len, mode)
    }

    pub fn bytes(&self) -> u64 {
        self.len as u64 * F64_BYTES
    }
}

/// Flat host-visible memory shared by host tasks and device kernels.
///
/// Cells are atomics so disjoint tasks on different threads can touch the
/// arena without locking; ordering between conflicting accesses comes
/// from the dependency graph.
#[derive(Debug)]
pub struct Arena {
    cells: Box<[AtomicU64]>,
    next: AtomicUsize,
}

impl Arena {
    pub fn new(capacity: usize) -> Self {
        Arena {
            cells: (0..capacity).map(|_| AtomicU64::new(0)).collect(),
            next: AtomicUsize::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.cells.len()
    }

    pub fn alloc(&self, len: usize) -> Result<Buffer> {
        if len == 0 {
            return Err(Error::invalid("zero-length allocation"));
        }
        let offset = self.next.fetch_add(len, Ordering::Relaxed);
        if offset + len > self.cells.len() {
            self.next.fetch_sub(len, Ordering::Relaxed);
            return Err(Error::invalid(format!(
                "arena exhausted: {len} cells requested, {} free",
                self.cells.len().saturating_sub(offset)
            )));
        }
        Ok(Buffer { offset, len })
    }

    pub fn alloc_from(&self, values: &[f64]) -> Result<Buffer> {
        let b = self.alloc(values.len())?;
        self.write(&b, values);
        Ok(b)
    }

    #[inline]
    pub fn get(&self, buf: &Buffer, i: usize) -> f64 {
        assert!(i < buf.len);
        f64::from_bits(self.cells[buf.offset + i].load(Ordering::Relaxed))
    }

    #[inline]
    pub fn set(&self, buf: &Buffer, i: usize, v: f64) {
        assert!(i < buf.len);
        self.cells[buf.offset + i].store(v.to_bits(), Ordering::Relaxed);
    }

    pub fn read(&self, buf: &Buffer) -> Vec<f64> {
        (0..buf.len).map(|i| self.get(buf, i)).collect()
    }

    pub fn write(&self, buf: &Buffer, values: &[f64]) {
        assert_eq!(values.len(), buf.len);
        for (i, v) in values.iter().enumerate() {
            self.set(buf, i, *v);
        }
    }

    /// FNV-1a over the bit patterns of the buffer.
    pub fn checksum(&self, buf: &Buffer) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for i in 0..buf.len {
            h ^= self.cells[buf.offset + i].load(Ordering::Relaxed);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KernelId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    CopyH2D,
    CopyD2H,
    Kernel,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::CopyH2D => "copy_h2d",
            OpKind::CopyD2H => "copy_d2h",
            OpKind::Kernel => "kernel",
        }
    }
}

/// Arguments handed to a kernel when it executes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KernelArgs {
    pub buffers: Vec<Buffer>,
    pub scalars: Vec<f64>,
    pub ints: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Copies only take time; the source may be checksummed at completion.
    Copy { source: Buffer, checksum: bool },
    Kernel { kernel: KernelId, args: KernelArgs },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceOp {
    pub kind: OpKind,
    pub payload: Payload,
    /// Explicit duration; `None` derives it from touched bytes.
    pub cost: Option<VTime>,
}

impl DeviceOp {
    pub fn copy_h2d(source: Buffer) -> Self {
        DeviceOp {
            kind: OpKind::CopyH2D,
            payload: Payload::Copy { source, checksum: false },
            cost: None,
        }
    }

    pub fn copy_d2h(source: Buffer) -> Self {
        DeviceOp {
            kind: OpKind::CopyD2H,
            payload: Payload::Copy { source, checksum: false },
            cost: None,
        }
    }

    pub fn kernel(kernel: KernelId, args: KernelArgs) -> Self {
        DeviceOp {
            kind: OpKind::Kernel,
            payload: Payload::Kernel { kernel, args },
            cost: None,
        }
    }

    pub fn with_cost(mut self, cost: VTime) -> Self {
        self.cost = Some(cost);
        self
    }

    pub fn with_checksum(mut self) -> Self {
        if let Payload::Copy { checksum, .. } = &mut self.payload {
            *checksum = true;
        }
        self
    }

    fn touched_bytes(&self) -> u64 {
        match &self.payload {
            Payload::Copy { source, .. } => source.bytes(),
            Payload::Kernel { args, .. } => args.buffers.iter().map(Buffer::bytes).sum(),
        }
    }
}

/// Converts touched bytes into device time and sets the host-side cost
/// of launching a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub bytes_per_unit: f64,
    pub launch_overhead: VTime,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            bytes_per_unit: 4096.0,
            launch_overhead: VTime::from_units(0.05),
        }
    }
}

impl CostModel {
    pub fn op_cost(&self, op: &DeviceOp) -> VTime {
        let cost = op
            .cost
            .unwrap_or_else(|| VTime::from_units(op.touched_bytes() as f64 / self.bytes_per_unit));
        // every op takes at least one tick
        VTime(cost.0.max(1))
    }
}

pub type KernelFn = Arc<dyn Fn(&Arena, &KernelArgs) + Send + Sync>;

#[derive(Clone, Default)]
pub struct KernelRegistry {
    kernels: Vec<(String, KernelFn)>,
}

impl KernelRegistry {
    pub fn register(&mut self, name: &str, f: KernelFn) -> KernelId {
        self.kernels.push((name.to_string(), f));
        KernelId(self.kernels.len() as u32 - 1)
    }

    pub fn get(&self, id: KernelId) -> Result<&KernelFn> {
        self.kernels
            .get(id.0 as usize)
            .map(|(_, f)| f)
            .ok_or(Error::Unknown { kind: "kernel", id: id.0 as u64 })
    }

    pub fn name(&self, id: KernelId) -> Option<&str> {
        self.kernels.get(id.0 as usize).map(|(n, _)| n.as_str())
    }

    pub fn lookup(&self, name: &str) -> Option<KernelId> {
        self.kernels.iter().position(|(n, _)| n == name).map(|i| KernelId(i as u32))
    }
}

impl std::fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.kernels.iter().map(|(n, _)| n)).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventState {
    Pending,
    Complete,
}

#[derive(Debug, Clone)]
struct EventRecord {
    stream: StreamId,
    kind: OpKind,
    state: EventState,
    completes_at: VTime,
    checksum: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceTransition {
    Enqueue,
    Complete,
}

/// One line of the completion log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRecord {
    pub time: VTime,
    pub stream: StreamId,
    pub event: EventId,
    pub kind: OpKind,
    pub transition: DeviceTransition,
}

pub const COMPLETION_LOG_HEADER: &str = "# time\tstream\tevent\tkind\ttransition";

pub fn format_completion_log(records: &[CompletionRecord]) -> String {
    let mut out = String::from(COMPLETION_LOG_HEADER);
    out.push('\n');
    for r in records {
        let tr = match r.transition {
            DeviceTransition::Enqueue => "enqueue",
            DeviceTransition::Complete => "complete",
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.time, r.stream.0, r.event.0, r.kind.as_str(), tr);
    }
    out
}

#[derive(Debug, Default, Clone)]
struct StreamState {
    tail: VTime,
    in_flight: usize,
    last_event: Option<EventId>,
}

/// Device state: streams, events, in-flight operations.
#[derive(Debug)]
pub struct Device {
    arena: Arc<Arena>,
    kernels: KernelRegistry,
    cost: CostModel,
    streams: Vec<StreamState>,
    events: Vec<EventRecord>,
    in_flight: BTreeMap<(VTime, u64), (EventId, Payload)>,
    processed_until: VTime,
    log: Vec<CompletionRecord>,
    kernel_runs: u64,
}

impl Device {
    pub fn new(arena: Arc<Arena>, kernels: KernelRegistry, cost: CostModel) -> Self {
        Device {
            arena,
            kernels,
            cost,
            streams: Vec::new(),
            events: Vec::new(),
            in_flight: BTreeMap::new(),
            processed_until: VTime::ZERO,
            log: Vec::new(),
            kernel_runs: 0,
        }
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    pub fn kernels(&self) -> &KernelRegistry {
        &self.kernels
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn create_stream(&mut self) -> StreamId {
        self.streams.push(StreamState::default());
        StreamId(self.streams.len() as u32 - 1)
    }

    pub fn stream_count(&self) -> usize {
        self.streams.len()
    }

    fn stream(&self, s: StreamId) -> Result<&StreamState> {
        self.streams.get(s.0 as usize).ok_or(Error::Unknown { kind: "stream", id: s.0 as u64 })
    }

    /// True when nothing is in flight on `s`.
    pub fn stream_idle(&self, s: StreamId) -> Result<bool> {
        Ok(self.stream(s)?.in_flight == 0)
    }

    /// Event of the most recent op enqueued on `s`, if any.
    pub fn last_event(&self, s: StreamId) -> Result<Option<EventId>> {
        Ok(self.stream(s)?.last_event)
    }

    /// Appends `op` to `stream` at time `now` without blocking.
    pub fn enqueue(&mut self, stream: StreamId, op: DeviceOp, now: VTime) -> Result<EventId> {
        self.stream(stream)?;
        if let Payload::Kernel { kernel, .. } = &op.payload {
            self.kernels.get(*kernel)?;
        }
        let cost = self.cost.op_cost(&op);
        let st = &mut self.streams[stream.0 as usize];
        let start = now.max(st.tail);
        let completes_at = start + cost;
        st.tail = completes_at;
        st.in_flight += 1;
        let event = EventId(self.events.len() as u64);
        st.last_event = Some(event);
        self.events.push(EventRecord {
            stream,
            kind: op.kind,
            state: EventState::Pending,
            completes_at,
            checksum: None,
        });
        self.in_flight.insert((completes_at, event.0), (event, op.payload));
        self.log.push(CompletionRecord {
            time: now,
            stream,
            event,
            kind: op.kind,
            transition: DeviceTransition::Enqueue,
        });
        Ok(event)
    }

    fn event(&self, e: EventId) -> Result<&EventRecord> {
        self.events.get(e.0 as usize).ok_or(Error::Unknown { kind: "event", id: e.0 })
    }

    pub fn query(&self, e: EventId) -> Result<EventState> {
        Ok(self.event(e)?.state)
    }

    pub fn completion_time(&self, e: EventId) -> Result<VTime> {
        Ok(self.event(e)?.completes_at)
    }

    pub fn checksum(&self, e: EventId) -> Result<Option<u64>> {
        Ok(self.event(e)?.checksum)
    }

    pub fn next_deadline(&self) -> Option<VTime> {
        self.in_flight.keys().next().map(|(t, _)| *t)
    }

    pub fn processed_until(&self) -> VTime {
        self.processed_until
    }

    /// Completes every op due at or before `t`, in completion-time order
    /// with enqueue order breaking ties. Returns the completed events.
    pub fn advance_to(&mut self, t: VTime) -> Vec<EventId> {
        let mut done = Vec::new();
        while let Some(entry) = self.in_flight.first_entry() {
            let (when, _) = *entry.key();
            if when > t {
                break;
            }
            let (event, payload) = entry.remove();
            let rec_checksum = match &payload {
                Payload::Copy { source, checksum } => checksum.then(|| self.arena.checksum(source)),
                Payload::Kernel { kernel, args } => {
                    let f = self.kernels.get(*kernel).expect("kernel checked at enqueue").clone();
                    f(&self.arena, args);
                    self.kernel_runs += 1;
                    None
                }
            };
            let rec = &mut self.events[event.0 as usize];
            rec.state = EventState::Complete;
            rec.checksum = rec_checksum;
            let (stream, kind) = (rec.stream, rec.kind);
            self.streams[stream.0 as usize].in_flight -= 1;
            self.log.push(CompletionRecord {
                time: when,
                stream,
                event,
                kind,
                transition: DeviceTransition::Complete,
            });
            done.push(event);
        }
        self.processed_until = self.processed_until.max(t);
        done
    }

    /// Applies a registered kernel immediately.
    pub fn run_kernel(&mut self, kernel: KernelId, args: &KernelArgs) -> Result<()> {
        let f = self.kernels.get(kernel)?.clone();
        f(&self.arena, args);
        self.kernel_runs += 1;
        Ok(())
    }

    pub fn kernel_runs(&self) -> u64 {
        self.kernel_runs
    }

    pub fn completion_log(&self) -> &[CompletionRecord] {
        &self.log
    }

    pub fn take_completion_log(&mut self) -> Vec<CompletionRecord> {
        std::mem::take(&mut self.log)
    }
}
