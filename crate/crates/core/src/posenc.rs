//! Positional encodings: multi-group rotary embedding over recording
//! configurations, plus the baseline encodings selectable by the ablation
//! switch (standard rotary, sinusoidal, learned coordinate MLP).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// One rotary group: a named block of the per-head dimension rotated by one
/// position coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeGroup {
    pub name: String,
    /// Even number of dimensions assigned to this coordinate.
    pub dim: usize,
    /// Base frequency f: per-pair angle scale is f^(-2i/dim).
    pub base_frequency: f64,
}

/// Partition of the per-head dimension into rotary groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeGroupSpec {
    pub groups: Vec<RopeGroup>,
}

impl RopeGroupSpec {
    pub fn new(groups: Vec<RopeGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("rope spec needs at least one group".into()));
        }
        for g in &groups {
            if g.dim == 0 || g.dim % 2 != 0 {
                return Err(Error::Config(format!(
                    "rope group '{}' needs a positive even dim, got {}",
                    g.name, g.dim
                )));
            }
            if !(g.base_frequency > 0.0) {
                return Err(Error::Config(format!(
                    "rope group '{}' needs a positive base frequency",
                    g.name
                )));
            }
        }
        Ok(RopeGroupSpec { groups })
    }

    /// Spatial x/y at f=5000 plus time at f=10000, equal thirds of `dim`.
    pub fn preset_3d(dim: usize) -> Result<Self> {
        if dim % 6 != 0 {
            return Err(Error::Config(format!(
                "3d rope preset needs head dim divisible by 6, got {}",
                dim
            )));
        }
        let d = dim / 3;
        Self::new(vec![
            RopeGroup { name: "x".into(), dim: d, base_frequency: 5000.0 },
            RopeGroup { name: "y".into(), dim: d, base_frequency: 5000.0 },
            RopeGroup { name: "t".into(), dim: d, base_frequency: 10000.0 },
        ])
    }

    /// Task / subject / recording-time / temporal position at
    /// f = 10, 100, 1000, 10000, equal quarters of `dim`.
    pub fn preset_4d(dim: usize) -> Result<Self> {
        if dim % 8 != 0 {
            return Err(Error::Config(format!(
                "4d rope preset needs head dim divisible by 8, got {}",
                dim
            )));
        }
        let d = dim / 4;
        Self::new(vec![
            RopeGroup { name: "task".into(), dim: d, base_frequency: 10.0 },
            RopeGroup { name: "subject".into(), dim: d, base_frequency: 100.0 },
            RopeGroup { name: "recording_time".into(), dim: d, base_frequency: 1000.0 },
            RopeGroup { name: "t".into(), dim: d, base_frequency: 10000.0 },
        ])
    }

    /// Standard rotary embedding: one temporal group at f=10000 over all dims.
    pub fn preset_temporal(dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head dim, got {}", dim)));
        }
        Self::new(vec![RopeGroup { name: "t".into(), dim, base_frequency: 10000.0 }])
    }

    pub fn total_dim(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }
}

/// One real coordinate per rotary group, in group order.
pub type PositionVector = Vec<f64>;

/// Per-pair rotation angles for a position: for group m and pair
/// i in [0, d_m/2), angle = pos_m * f_m^(-2i/d_m), concatenated in group order.
pub fn rope_angles(spec: &RopeGroupSpec, pos: &[f64]) -> Result<Vec<f64>> {
    if pos.len() != spec.groups.len() {
        return Err(Error::Config(format!(
            "position has {} coordinates, spec has {} groups",
            pos.len(),
            spec.groups.len()
        )));
    }
    if let Some(c) = pos.iter().find(|c| !c.is_finite()) {
        return Err(Error::Config(format!("non-finite position coordinate {}", c)));
    }
    let mut angles = Vec::with_capacity(spec.total_dim() / 2);
    for (g, &p) in spec.groups.iter().zip(pos) {
        let half = g.dim / 2;
        for i in 0..half {
            let theta = g.base_frequency.powf(-2.0 * i as f64 / g.dim as f64);
            angles.push(p * theta);
        }
    }
    Ok(angles)
}

/// Cos/sin tables for a list of positions, shaped `[len, total_dim/2]`,
/// ready for [`Tape::rope_rotate`].
pub fn rope_tables(spec: &RopeGroupSpec, positions: &[PositionVector]) -> Result<(Tensor, Tensor)> {
    let half = spec.total_dim() / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for pos in positions {
        for a in rope_angles(spec, pos)? {
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    Ok((
        Tensor::new(vec![positions.len(), half], cos)?,
        Tensor::new(vec![positions.len(), half], sin)?,
    ))
}

/// Rotate a value vector in place of the attention path; interleaved pairs
/// within each group, never materializing a dense rotation matrix.
pub fn apply_mrope(v: &Tensor, spec: &RopeGroupSpec, pos: &[f64]) -> Result<Tensor> {
    let d = *v
        .shape
        .last()
        .ok_or_else(|| Error::Config("apply_mrope needs rank >= 1".into()))?;
    if d != spec.total_dim() {
        return Err(Error::Config(format!(
            "vector dim {} does not match rope spec total dim {}",
            d,
            spec.total_dim()
        )));
    }
    let angles = rope_angles(spec, pos)?;
    let mut out = v.clone();
    for chunk in out.data.chunks_mut(d) {
        for (i, &a) in angles.iter().enumerate() {
            let (c, s) = (a.cos(), a.sin());
            let x0 = chunk[2 * i];
            let x1 = chunk[2 * i + 1];
            chunk[2 * i] = c * x0 - s * x1;
            chunk[2 * i + 1] = s * x0 + c * x1;
        }
    }
    Ok(out)
}

/// Attention score between two rotated vectors; test-only probe of the
/// relative-position property.
pub fn relative_score(
    q: &Tensor,
    k: &Tensor,
    spec: &RopeGroupSpec,
    pos_i: &[f64],
    pos_j: &[f64],
) -> Result<f64> {
    let qr = apply_mrope(q, spec, pos_i)?;
    let kr = apply_mrope(k, spec, pos_j)?;
    Ok(qr.data.iter().zip(&kr.data).map(|(a, b)| a * b).sum())
}

/// Positional-encoding flavor for the ablation switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    /// Multi-group rotary on Q/K (the default).
    Mrope,
    /// Standard rotary: a single temporal group at f=10000.
    Rope,
    /// Sinusoidal added to embeddings.
    Sinusoidal,
    /// Learned coordinate MLP added to embeddings.
    Learnable,
}

impl std::str::FromStr for PeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrope" => Ok(PeKind::Mrope),
            "rope" => Ok(PeKind::Rope),
            "sinusoidal" => Ok(PeKind::Sinusoidal),
            "learnable" => Ok(PeKind::Learnable),
            other => Err(Error::Config(format!(
                "unknown positional encoding '{}' (expected mrope|rope|sinusoidal|learnable)",
                other
            ))),
        }
    }
}

/// Standard sinusoidal embedding of a scalar position: even slots sin,
/// odd slots cos, frequencies 10000^(-2i/d).
pub fn sinusoidal_pe(t: f64, d: usize) -> Tensor {
    let mut data = vec![0.0; d];
    for i in 0..d / 2 {
        let theta = 10000f64.powf(-2.0 * i as f64 / d as f64);
        data[2 * i] = (t * theta).sin();
        data[2 * i + 1] = (t * theta).cos();
    }
    if d % 2 == 1 {
        let i = d / 2;
        let theta = 10000f64.powf(-2.0 * i as f64 / d as f64);
        data[d - 1] = (t * theta).sin();
    }
    Tensor { shape: vec![d], data, requires_grad: false, grad: None }
}

/// Learned coordinate MLP: `MLP([c_0*alpha, .., c_{M-2}*alpha, t])` with one
/// GELU hidden layer; applied on the tape so its parameters train.
pub struct LearnablePe {
    pub alpha: f64,
}

impl LearnablePe {
    /// Scale the non-temporal coordinates and run the bound MLP.
    /// `coords` is `[len, n_coords]` (temporal coordinate last).
    pub fn forward(
        &self,
        tape: &mut Tape,
        w1: TensorId,
        b1: TensorId,
        w2: TensorId,
        b2: TensorId,
        coords: &Tensor,
    ) -> Result<TensorId> {
        let n_coords = *coords.shape.last().unwrap();
        let mut scaled = coords.clone();
        for row in scaled.data.chunks_mut(n_coords) {
            for c in row.iter_mut().take(n_coords - 1) {
                *c *= self.alpha;
            }
        }
        let x = tape.constant(&scaled);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, w2)?;
        tape.add(y, b2)
    }
}

/// Bijective mapping between metadata strings and discrete rotary coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataCodec {
    /// Alphabetical task vocabulary, e.g. ["CO", "RT"] -> codes 0, 1.
    pub tasks: Vec<String>,
    /// Alphabetical subject vocabulary, e.g. ["c","j","m","t"] -> 0..=3.
    pub subjects: Vec<String>,
    /// Min/max recording times (days) for min-max normalization to [0,1].
    pub time_min: f64,
    pub time_max: f64,
}

impl MetadataCodec {
    pub fn new(mut tasks: Vec<String>, mut subjects: Vec<String>, time_min: f64, time_max: f64) -> Result<Self> {
        tasks.sort();
        tasks.dedup();
        subjects.sort();
        subjects.dedup();
        if !(time_max > time_min) {
            return Err(Error::Config("recording time range must be nonempty".into()));
        }
        Ok(MetadataCodec { tasks, subjects, time_min, time_max })
    }

    pub fn encode_task(&self, task: &str) -> Result<f64> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .map(|i| i as f64)
            .ok_or_else(|| Error::Config(format!("unknown task '{}'", task)))
    }

    pub fn decode_task(&self, code: f64) -> Result<&str> {
        self.tasks
            .get(code as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("task code {} out of range", code)))
    }

    pub fn encode_subject(&self, subject: &str) -> Result<f64> {
        self.subjects
            .iter()
            .position(|s| s == subject)
            .map(|i| i as f64)
            .ok_or_else(|| Error::Config(format!("unknown subject '{}'", subject)))
    }

    pub fn decode_subject(&self, code: f64) -> Result<&str> {
        self.subjects
            .get(code as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("subject code {} out of range", code)))
    }

    pub fn normalize_time(&self, time: f64) -> f64 {
        ((time - self.time_min) / (self.time_max - self.time_min)).clamp(0.0, 1.0)
    }
}
