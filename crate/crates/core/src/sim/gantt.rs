//! Text timeline of slot phases.
//!
//! One row per slot, one character per time cell:
//!
//! ```text
//! c connect   w wait   S send   m commit   (blank) not alive
//! ```
//!
//! A cell shows the phase in effect at the cell's start time.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{SimTrace, Span};
use crate::slot::{SlotId, SlotPhase};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GanttOptions {
    pub cell_us: u64,
    pub from_us: u64,
    pub to_us: u64,
}

impl GanttOptions {
    /// A tenth of an interval per cell over the whole run.
    pub fn for_trace(trace: &SimTrace) -> Self {
        Self {
            cell_us: (trace.interval_us / 10).max(1),
            from_us: 0,
            to_us: trace.duration_us,
        }
    }
}

fn glyph(phase: SlotPhase) -> char {
    match phase {
        SlotPhase::Connect => 'c',
        SlotPhase::Wait => 'w',
        SlotPhase::Send => 'S',
        SlotPhase::Commit => 'm',
        SlotPhase::Retired => ' ',
    }
}

pub fn render_gantt(trace: &SimTrace) -> String {
    render_gantt_with(trace, GanttOptions::for_trace(trace))
}

pub fn render_gantt_with(trace: &SimTrace, opts: GanttOptions) -> String {
    let spans = trace.phase_spans();
    if spans.is_empty() || opts.cell_us == 0 || opts.to_us <= opts.from_us {
        return String::new();
    }
    let mut by_slot: BTreeMap<SlotId, Vec<Span>> = BTreeMap::new();
    for s in spans {
        by_slot.entry(s.slot).or_default().push(s);
    }
    let cells = (opts.to_us - opts.from_us).div_ceil(opts.cell_us) as usize;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# cell={}us from={}us to={}us  c=connect w=wait S=send m=commit",
        opts.cell_us, opts.from_us, opts.to_us
    );
    for (slot, spans) in by_slot {
        let mut row = vec![' '; cells];
        for s in &spans {
            let end = s.end_us.max(s.start_us + 1);
            for (i, cell) in row.iter_mut().enumerate() {
                let t = opts.from_us + i as u64 * opts.cell_us;
                if t >= s.start_us && t < end {
                    *cell = glyph(s.phase);
                }
            }
        }
        let line: String = row.into_iter().collect();
        if line.trim().is_empty() {
            continue;
        }
        let _ = writeln!(out, "slot {slot:>3} |{}|", line.trim_end());
    }
    out
}
