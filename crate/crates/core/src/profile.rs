//! Activation histograms, step-wise sensitivity, spiking activity, operation
//! counts and the energy model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ForwardOptions, LayerGroup, Model, OpKind, OpRecord, Trace};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 64;

/// Histograms of one layer's LIF input, one per time step, on shared edges.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerHistogram {
    pub layer: String,
    pub group: LayerGroup,
    /// `bins + 1` edges; a constant input collapses to one bin `[v, v]`.
    pub edges: Vec<f64>,
    /// `masses[t][bin]`, each row summing to 1.
    pub masses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSet {
    pub layers: Vec<LayerHistogram>,
}

/// Normalized histogram of `values` on `bins` uniform bins over `[lo, hi]`.
/// Values at `hi` fall in the last bin.
pub fn histogram(values: &[f32], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0u64; bins];
    let width = hi - lo;
    for &v in values {
        let b = if width > 0.0 {
            (((v as f64 - lo) / width * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    let n = values.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Builds per-step histograms from a `[T, ...]` drive tensor.
pub fn layer_histogram(
    layer: &str,
    group: LayerGroup,
    drive: &Tensor,
    bins: usize,
) -> Result<LayerHistogram> {
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    let steps = drive.shape()[0];
    let data = drive.data();
    let lo = data.iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
    let hi = data.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let bins = if hi > lo { bins } else { 1 };
    let edges = (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect();
    let per = data.len() / steps;
    let masses = data
        .chunks(per)
        .map(|c| histogram(c, lo, hi, bins))
        .collect();
    Ok(LayerHistogram {
        layer: layer.to_string(),
        group,
        edges,
        masses,
    })
}

/// Records the input of every LIF layer over all `T_max` steps. Masks are
/// ignored so that every step carries real data.
pub fn collect_histograms(model: &Model, images: &Tensor, bins: usize) -> Result<HistogramSet> {
    if images.shape()[0] == 0 {
        return Err(Error::Argument("histogram sample is empty".into()));
    }
    let opts = ForwardOptions {
        train: false,
        skip_inactive: false,
        record: true,
        force_full_masks: true,
    };
    let mut g = Graph::new();
    let tr = model
        .forward(&mut g, images, opts)?
        .trace
        .expect("recorded");
    let layers = tr
        .units
        .iter()
        .map(|u| layer_histogram(&u.name, u.group, &u.drive, bins))
        .collect::<Result<_>>()?;
    Ok(HistogramSet { layers })
}

impl HistogramSet {
    pub fn layer(&self, name: &str) -> Result<&LayerHistogram> {
        self.layers
            .iter()
            .find(|l| l.layer == name)
            .ok_or_else(|| Error::Argument(format!("no histogram for layer `{name}`")))
    }

    /// `layer,step,bin_lo,bin_hi,mass`, steps numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,step,bin_lo,bin_hi,mass\n");
        for l in &self.layers {
            for (t, m) in l.masses.iter().enumerate() {
                for (b, mass) in m.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        l.layer,
                        t + 1,
                        l.edges[b],
                        l.edges[b + 1],
                        mass
                    );
                }
            }
        }
        s
    }
}

/// Cosine similarity of two mass vectors; 0 (with a warning) if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "histograms must share bins");
    if a == b && a.iter().any(|&v| v != 0.0) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero histogram is taken as 0");
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSensitivity {
    pub layer: String,
    pub group: LayerGroup,
    /// Similarity of steps 2..=T to step 1.
    pub similarities: Vec<f64>,
    /// `1 - min(similarities)`.
    pub score: f64,
}

pub fn sensitivity(h: &HistogramSet, layer: &str) -> Result<LayerSensitivity> {
    let l = h.layer(layer)?;
    if l.masses.len() < 2 {
        return Err(Error::Argument(format!(
            "layer `{layer}` has {} recorded step(s); sensitivity needs at least 2",
            l.masses.len()
        )));
    }
    let similarities: Vec<f64> = l.masses[1..]
        .iter()
        .map(|m| cosine(&l.masses[0], m))
        .collect();
    let min = similarities.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(LayerSensitivity {
        layer: l.layer.clone(),
        group: l.group,
        similarities,
        score: 1.0 - min,
    })
}

pub fn sensitivity_all(h: &HistogramSet) -> Result<Vec<LayerSensitivity>> {
    h.layers.iter().map(|l| sensitivity(h, &l.layer)).collect()
}

/// `layer,group,step,similarity` rows plus one `score` row per layer.
pub fn sensitivity_csv(rows: &[LayerSensitivity]) -> String {
    let mut s = String::from("layer,group,step,similarity\n");
    for r in rows {
        for (i, v) in r.similarities.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", r.layer, r.group, i + 2, v);
        }
        let _ = writeln!(s, "{},{},score,{}", r.layer, r.group, r.score);
    }
    s
}

/// Per-operation energies in picojoules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModel {
    pub e_ac: f64,
    pub e_mac: f64,
    pub e_check: f64,
    /// One membrane-potential or weight access.
    pub e_mem: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            e_ac: 1.8,
            e_mac: 13.32,
            e_check: 0.05,
            e_mem: 5.0,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("profile.e_ac", self.e_ac),
            ("profile.e_mac", self.e_mac),
            ("profile.e_check", self.e_check),
            ("profile.e_mem", self.e_mem),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "energy must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn mac_ac_ratio(&self) -> f64 {
        self.e_mac / self.e_ac
    }
}

/// Operation counts per inference (one sample, all steps).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpCounts {
    /// Dense multiply-accumulates per step, as if every input were nonzero.
    pub flops: f64,
    /// Accumulates triggered by nonzero inputs.
    pub sops: f64,
    pub macs: f64,
    pub checks: f64,
    pub weight_reads: f64,
}

/// Counts for one recorded op over `batch` samples.
///
/// The embedding runs dense. Every other op is gated by its operand: work is
/// `flops * density` per executed step, and each presented operand slot is
/// zero-checked once.
pub fn op_counts(op: &OpRecord, batch: usize) -> OpCounts {
    let flops = op.flops as f64;
    let steps = op.steps;
    if op.kind == OpKind::Embedding {
        let work = flops * steps as f64;
        return OpCounts {
            flops,
            sops: 0.0,
            macs: work,
            checks: 0.0,
            weight_reads: op.weights as f64 * steps as f64,
        };
    }
    let denom = (op.input_slots * batch as u64) as f64;
    let density: f64 = op
        .input_nonzero
        .iter()
        .take(steps)
        .map(|&nz| nz as f64 / denom)
        .sum();
    let gated = flops * density;
    let (sops, macs) = match op.kind {
        OpKind::Synaptic | OpKind::Residual => (gated, 0.0),
        _ => (0.0, gated),
    };
    OpCounts {
        flops,
        sops,
        macs,
        checks: op.input_slots as f64 * steps as f64,
        weight_reads: op.weights as f64 * density,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub layer: String,
    pub group: LayerGroup,
    pub neurons: u64,
    pub active_steps: usize,
    /// Spikes per neuron per inference, summed over active steps.
    pub spikes_per_neuron: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpProfile {
    pub name: String,
    pub kind: OpKind,
    pub counts: OpCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Energies {
    pub compute: f64,
    pub memory: f64,
    pub total: f64,
}

/// Per-inference profile of a model over a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub samples: usize,
    pub t_max: usize,
    pub t_avg: f64,
    pub sa_percent: f64,
    pub layers: Vec<LayerProfile>,
    pub ops: Vec<OpProfile>,
    pub totals: OpCounts,
    /// Membrane-potential reads plus writes.
    pub potential_accesses: f64,
    pub energy: Energies,
}

/// Energy of a set of counts.
pub fn energies(c: &OpCounts, potential_accesses: f64, em: &EnergyModel) -> Energies {
    let compute = c.macs * em.e_mac + c.sops * em.e_ac + c.checks * em.e_check;
    let memory = (potential_accesses + c.weight_reads) * em.e_mem;
    Energies {
        compute,
        memory,
        total: compute + memory,
    }
}

/// Builds a report from a recorded eval-mode trace.
pub fn report_from_trace(tr: &Trace, t_avg: f64, em: &EnergyModel) -> ProfileReport {
    let b = tr.batch as f64;
    let mut spikes = 0u64;
    let mut slots = 0u64;
    let mut potential_accesses = 0.0;
    let layers = tr
        .units
        .iter()
        .map(|u| {
            let s: u64 = u.spikes.iter().take(u.active_steps).sum();
            spikes += u.spikes.iter().sum::<u64>();
            slots += u.neurons * (tr.batch * tr.t_max) as u64;
            potential_accesses += 2.0 * u.neurons as f64 * u.active_steps as f64;
            LayerProfile {
                layer: u.name.clone(),
                group: u.group,
                neurons: u.neurons,
                active_steps: u.active_steps,
                spikes_per_neuron: s as f64 / (u.neurons as f64 * b),
            }
        })
        .collect();
    let mut totals = OpCounts::default();
    let ops: Vec<OpProfile> = tr
        .ops
        .iter()
        .map(|op| {
            let c = op_counts(op, tr.batch);
            totals.flops += c.flops;
            totals.sops += c.sops;
            totals.macs += c.macs;
            totals.checks += c.checks;
            totals.weight_reads += c.weight_reads;
            OpProfile {
                name: op.name.clone(),
                kind: op.kind,
                counts: c,
            }
        })
        .collect();
    ProfileReport {
        samples: tr.batch,
        t_max: tr.t_max,
        t_avg,
        sa_percent: if slots == 0 {
            0.0
        } else {
            100.0 * spikes as f64 / slots as f64
        },
        layers,
        ops,
        totals,
        potential_accesses,
        energy: energies(&totals, potential_accesses, em),
    }
}

/// Eval-mode profile with frozen masks over a sample.
pub fn profile(model: &Model, images: &Tensor, em: &EnergyModel) -> Result<ProfileReport> {
    em.validate()?;
    if images.shape()[0] == 0 {
        return Err(Error::Argument("profile sample is empty".into()));
    }
    let opts = ForwardOptions {
        record: true,
        ..ForwardOptions::eval()
    };
    let mut g = Graph::new();
    let tr = model
        .forward(&mut g, images, opts)?
        .trace
        .expect("recorded");
    Ok(report_from_trace(&tr, model.t_avg()?, em))
}

impl ProfileReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "section,name,kind,flops,sops,macs,checks,active_steps,spikes_per_neuron\n",
        );
        for o in &self.ops {
            let c = &o.counts;
            let _ = writeln!(
                s,
                "op,{},{:?},{},{},{},{},,",
                o.name, o.kind, c.flops, c.sops, c.macs, c.checks
            );
        }
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer,{},{},,,,,{},{}",
                l.layer, l.group, l.active_steps, l.spikes_per_neuron
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total,all,,{},{},{},{},,",
            t.flops, t.sops, t.macs, t.checks
        );
        let _ = writeln!(s, "summary,t_avg,,,,,,{},", self.t_avg);
        let _ = writeln!(s, "summary,sa_percent,,,,,,,{}", self.sa_percent);
        let e = &self.energy;
        let _ = writeln!(s, "energy_pj,compute,,{},,,,,", e.compute);
        let _ = writeln!(s, "energy_pj,memory,,{},,,,,", e.memory);
        let _ = writeln!(s, "energy_pj,total,,{},,,,,", e.total);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>6} {:>12}", "layer", "steps", "spikes/neuron");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<22} {:>6} {:>12.4}",
                l.layer, l.active_steps, l.spikes_per_neuron
            );
        }
        let t = &self.totals;
        let _ = writeln!(s, "T_avg            {:.4}", self.t_avg);
        let _ = writeln!(s, "SA (%)           {:.4}", self.sa_percent);
        let _ = writeln!(s, "FLOPs/step       {:.0}", t.flops);
        let _ = writeln!(s, "SOPs             {:.1}", t.sops);
        let _ = writeln!(s, "MACs             {:.1}", t.macs);
        let _ = writeln!(s, "compute (pJ)     {:.1}", self.energy.compute);
        let _ = writeln!(s, "memory (pJ)      {:.1}", self.energy.memory);
        let _ = writeln!(s, "total (pJ)       {:.1}", self.energy.total);
        s
    }
}

/// Energies of `a` normalized by the baseline `b`.
pub fn compare_energy(a: &ProfileReport, b: &ProfileReport) -> Result<Energies> {
    let (x, y) = (&a.energy, &b.energy);
    for (name, v) in [
        ("compute", y.compute),
        ("memory", y.memory),
        ("total", y.total),
    ] {
        if v == 0.0 {
            return Err(Error::UndefinedRatio(name));
        }
    }
    Ok(Energies {
        compute: x.compute / y.compute,
        memory: x.memory / y.memory,
        total: x.total / y.total,
    })
}
