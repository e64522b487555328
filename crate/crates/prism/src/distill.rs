//! Progressive attention stitching: a frozen full-attention teacher, a
//! student whose layers flip to the linear kernel group by group on a fixed
//! step cadence, and the distillation step driving the student's hidden
//! states back toward the teacher's.

use crate::attention::{AttnKind, AttnLayout};
use crate::cascade::ModelState;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct StitchSchedule {
    /// Total transformer layers.
    pub layers: usize,
    /// Layers per group; the last layer of each group keeps full attention.
    pub group: usize,
    /// Steps between conversion events.
    pub period: u64,
}

impl StitchSchedule {
    pub fn new(layers: usize, group: usize, period: u64) -> Result<StitchSchedule> {
        if layers == 0 || group < 2 || layers % group != 0 || period == 0 {
            return Err(Error::Config(format!(
                "stitch schedule needs layers a positive multiple of group >= 2 and a nonzero period, got {layers}/{group}/{period}"
            )));
        }
        Ok(StitchSchedule { layers, group, period })
    }

    /// Number of conversion events: one per group.
    pub fn events(&self) -> u64 {
        (self.layers / self.group) as u64
    }

    /// Step at which the layout stops changing.
    pub fn final_step(&self) -> u64 {
        self.events() * self.period
    }

    /// Completed conversion events at `step`: event e fires at step
    /// e * period, e = 1..=events.
    fn events_done(&self, step: u64) -> u64 {
        (step / self.period).min(self.events())
    }

    /// The deterministic layout at a step. Event e converts the first
    /// `group - 1` layers of group e (in network order) to linear; the
    /// last layer of every group never converts.
    pub fn layout_at(&self, step: u64) -> AttnLayout {
        let mut layout = AttnLayout::all_full(self.layers);
        for e in 0..self.events_done(step) as usize {
            for i in 0..self.group - 1 {
                layout.0[e * self.group + i] = AttnKind::Linear;
            }
        }
        layout
    }

    /// Group-boundary layers whose activations are traced for distillation.
    pub fn trace_layers(&self) -> Vec<usize> {
        (0..self.layers).filter(|i| (i + 1) % self.group == 0).collect()
    }

    /// Audit text: one `step_event,group,converted_layers` row per event.
    pub fn audit(&self) -> String {
        let mut out = String::from("step_event,group,converted_layers\n");
        for e in 0..self.events() as usize {
            let layers: Vec<String> = (0..self.group - 1)
                .map(|i| (e * self.group + i).to_string())
                .collect();
            let _ = writeln!(out, "{},{},{}", (e as u64 + 1) * self.period, e, layers.join(" "));
        }
        out
    }
}

/// Byte hash over every parameter, order-independent by name sort.
pub fn param_hash<E: Scalar>(state: &ModelState<E>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, p) in state.params.iter() {
        h.update(name.as_bytes());
        h.update((p.data.len() as u64).to_le_bytes());
        let mut bytes = Vec::with_capacity(p.data.len() * E::BYTES);
        for v in &p.data {
            v.write_le(&mut bytes);
        }
        h.update(&bytes);
    }
    h.finalize().into()
}

/// Apply a new layout to the student. Only Full -> Linear flips are legal:
/// the kernel swap reuses every projection, so no parameter changes.
pub fn stitch<E: Scalar>(state: &mut ModelState<E>, layout: &AttnLayout) -> Result<()> {
    if layout.0.len() != state.layout.0.len() {
        return Err(Error::Schedule(format!(
            "layout length {} does not match model's {}",
            layout.0.len(),
            state.layout.0.len()
        )));
    }
    for (i, (old, new)) in state.layout.0.iter().zip(&layout.0).enumerate() {
        if *old == AttnKind::Linear && *new == AttnKind::Full {
            return Err(Error::Schedule(format!(
                "layer {i} cannot convert back from linear to full"
            )));
        }
    }
    state.layout = layout.clone();
    Ok(())
}
