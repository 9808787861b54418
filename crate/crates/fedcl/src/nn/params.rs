//! Flat parameter storage for sequential models.
//!
//! All learnable parameters and batch-norm running statistics of a model
//! live in one `Vec<f64>`. A [`Layout`] maps (layer, parameter kind) to a
//! slice of that vector. Keeping everything flat makes federated averaging
//! a weighted mean of vectors and makes optimizer state a parallel vector.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelSpec};
use crate::rng::Stream;

/// Role of one parameter block within its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Affine or convolution weight.
    Weight,
    /// Affine or convolution bias.
    Bias,
    /// Batch-norm scale.
    Gamma,
    /// Batch-norm shift.
    Beta,
    /// Batch-norm running mean (updated by stat tracking, not the optimizer).
    RunningMean,
    /// Batch-norm running variance (updated by stat tracking, not the optimizer).
    RunningVar,
}

impl ParamKind {
    /// Whether the optimizer may update this block. Running statistics are
    /// maintained by the forward-pass bookkeeping only.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Gamma => 2,
            ParamKind::Beta => 3,
            ParamKind::RunningMean => 4,
            ParamKind::RunningVar => 5,
        }
    }

    fn from_tag(tag: u8) -> Option<ParamKind> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Gamma,
            3 => ParamKind::Beta,
            4 => ParamKind::RunningMean,
            5 => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

/// One contiguous parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    /// Index of the owning layer in the model spec.
    pub layer: usize,
    pub kind: ParamKind,
    /// Logical shape of the block (e.g. `[out, in, k, k]` for conv weights).
    pub shape: Vec<usize>,
    /// Offset into the flat value vector.
    pub offset: usize,
    /// Fan-in used for initialization (0 for blocks that are not weights).
    pub fan_in: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Mapping from (layer, kind) to slices of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl Layout {
    /// Build the layout for a model. Entry order follows layer order, and
    /// within a layer: weight, bias (affine/conv) or gamma, beta, running
    /// mean, running variance (batch norm).
    pub fn of(spec: &ModelSpec) -> Result<Layout> {
        // Validate the stack once up front so layout and forward agree.
        spec.activation_shapes()?;
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let push = |layer: usize, kind: ParamKind, shape: Vec<usize>, fan_in: usize,
                    offset: &mut usize,
                    entries: &mut Vec<ParamEntry>| {
            let entry = ParamEntry { layer, kind, shape, offset: *offset, fan_in };
            *offset += entry.len();
            entries.push(entry);
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Affine { inputs, outputs } => {
                    push(i, ParamKind::Weight, vec![outputs, inputs], inputs, &mut offset, &mut entries);
                    push(i, ParamKind::Bias, vec![outputs], 0, &mut offset, &mut entries);
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    push(
                        i,
                        ParamKind::Weight,
                        vec![out_channels, in_channels, kernel, kernel],
                        fan_in,
                        &mut offset,
                        &mut entries,
                    );
                    push(i, ParamKind::Bias, vec![out_channels], 0, &mut offset, &mut entries);
                }
                LayerSpec::BatchNorm { channels } => {
                    push(i, ParamKind::Gamma, vec![channels], 0, &mut offset, &mut entries);
                    push(i, ParamKind::Beta, vec![channels], 0, &mut offset, &mut entries);
                    push(i, ParamKind::RunningMean, vec![channels], 0, &mut offset, &mut entries);
                    push(i, ParamKind::RunningVar, vec![channels], 0, &mut offset, &mut entries);
                }
                _ => {}
            }
        }
        Ok(Layout { entries, total: offset })
    }

    /// Find the entry for (layer, kind), if that layer owns one.
    pub fn entry(&self, layer: usize, kind: ParamKind) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.kind == kind)
    }

    /// `true` for every index the optimizer may touch, `false` for
    /// running-statistic slots.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in &self.entries {
            if e.kind.is_trainable() {
                mask[e.range()].fill(true);
            }
        }
        mask
    }
}

/// The parameters of one model as a flat vector of f64 values.
///
/// Arithmetic on whole vectors (weighted means, scaled additions) is the
/// basis of federated aggregation and regularized losses, so those helpers
/// live here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
}

const MAGIC: &[u8; 6] = b"FCLPV\x01";

impl ParameterVector {
    pub fn zeros(layout: &Layout) -> ParameterVector {
        ParameterVector { values: vec![0.0; layout.total] }
    }

    /// Initialize parameters: Kaiming-uniform weights (bound `sqrt(6/fan_in)`),
    /// zero biases, batch-norm scale 1 / shift 0, running mean 0 / variance 1.
    pub fn init(layout: &Layout, rng: &mut Stream) -> ParameterVector {
        let mut values = vec![0.0; layout.total];
        for e in &layout.entries {
            match e.kind {
                ParamKind::Weight => {
                    let bound = (6.0 / e.fan_in.max(1) as f64).sqrt();
                    for v in &mut values[e.range()] {
                        *v = bound * (2.0 * rng.random::<f64>() - 1.0);
                    }
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => {}
                ParamKind::Gamma | ParamKind::RunningVar => {
                    values[e.range()].fill(1.0);
                }
            }
        }
        ParameterVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, entry: &ParamEntry) -> &[f64] {
        &self.values[entry.range()]
    }

    pub fn slice_mut(&mut self, entry: &ParamEntry) -> &mut [f64] {
        &mut self.values[entry.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParameterVector, scale: f64) {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    /// Weighted mean of parameter vectors; weights are normalized to sum 1.
    ///
    /// All entries participate, including batch-norm running statistics, so
    /// an aggregated model carries the weighted average of client statistics.
    pub fn weighted_mean(vectors: &[&ParameterVector], weights: &[f64]) -> Result<ParameterVector> {
        if vectors.is_empty() || vectors.len() != weights.len() {
            return Err(Error::InvalidArg(
                "weighted_mean needs one positive weight per vector".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArg(
                "weights must be non-negative with positive sum".into(),
            ));
        }
        let len = vectors[0].len();
        if vectors.iter().any(|v| v.len() != len) {
            return Err(Error::Layout("cannot average vectors of different lengths".into()));
        }
        let mut out = vec![0.0; len];
        for (vec, &w) in vectors.iter().zip(weights) {
            let scale = w / total;
            for (o, v) in out.iter_mut().zip(&vec.values) {
                *o += scale * v;
            }
        }
        Ok(ParameterVector { values: out })
    }

    /// Write to `path`: magic/version, layout header (entry count, then per
    /// entry layer/kind/shape), then values as little-endian f32.
    pub fn save(&self, layout: &Layout, path: &Path) -> Result<()> {
        if self.len() != layout.total {
            return Err(Error::Layout(format!(
                "vector has {} values but layout expects {}",
                self.len(),
                layout.total
            )));
        }
        let mut buf: Vec<u8> = Vec::with_capacity(64 + 4 * self.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(layout.entries.len() as u32).to_le_bytes());
        for e in &layout.entries {
            buf.extend_from_slice(&(e.layer as u32).to_le_bytes());
            buf.push(e.kind.tag());
            buf.push(e.shape.len() as u8);
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Read a vector previously written by [`save`](Self::save), verifying
    /// the header against `layout`.
    pub fn load(layout: &Layout, path: &Path) -> Result<ParameterVector> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::BadModelFile(format!(
                    "{}: truncated at byte {pos}",
                    path.display()
                )));
            }
            let slice = &bytes[pos..pos + n];
            pos += n;
            Ok(slice)
        };
        if take(MAGIC.len())? != MAGIC {
            return Err(Error::BadModelFile(format!(
                "{}: unrecognized magic bytes",
                path.display()
            )));
        }
        let n_entries = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if n_entries != layout.entries.len() {
            return Err(Error::BadModelFile(format!(
                "{}: file has {n_entries} parameter blocks, model has {}",
                path.display(),
                layout.entries.len()
            )));
        }
        for e in &layout.entries {
            let layer = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let kind = ParamKind::from_tag(take(1)?[0]);
            let ndim = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            if layer != e.layer || kind != Some(e.kind) || shape != e.shape {
                return Err(Error::BadModelFile(format!(
                    "{}: parameter block mismatch at layer {layer}",
                    path.display()
                )));
            }
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if count != layout.total {
            return Err(Error::BadModelFile(format!(
                "{}: file has {count} values, model has {}",
                path.display(),
                layout.total
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
        }
        Ok(ParameterVector { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small_spec() -> ModelSpec {
        ModelSpec::conv_classifier(1, 16, 4, 3)
    }

    #[test]
    fn layout_counts_match_hand_arithmetic() {
        let layout = Layout::of(&small_spec()).unwrap();
        // conv1: 4*1*3*3 + 4; bn1: 4*4; conv2: 8*4*3*3 + 8; bn2: 4*8;
        // affine: 3*(8*4*4) + 3
        let expected = (4 * 9 + 4) + 16 + (8 * 4 * 9 + 8) + 32 + (3 * 128 + 3);
        assert_eq!(layout.total, expected);
        let mask = layout.trainable_mask();
        let frozen = mask.iter().filter(|&&m| !m).count();
        // Two BN layers contribute mean+var slots: 2*4 + 2*8.
        assert_eq!(frozen, 24);
    }

    #[test]
    fn init_respects_kind_defaults() {
        let layout = Layout::of(&small_spec()).unwrap();
        let mut rng = stream(11, "init");
        let params = ParameterVector::init(&layout, &mut rng);
        for e in &layout.entries {
            let s = params.slice(e);
            match e.kind {
                ParamKind::Weight => {
                    let bound = (6.0 / e.fan_in as f64).sqrt();
                    assert!(s.iter().all(|&v| v.abs() <= bound));
                    assert!(s.iter().any(|&v| v != 0.0));
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => {
                    assert!(s.iter().all(|&v| v == 0.0));
                }
                ParamKind::Gamma | ParamKind::RunningVar => {
                    assert!(s.iter().all(|&v| v == 1.0));
                }
            }
        }
    }

    #[test]
    fn weighted_mean_matches_hand_value() {
        // mean of [1, 10] and [4, 0] with weights 3 and 1 -> [1.75, 7.5]
        let a = ParameterVector { values: vec![1.0, 10.0] };
        let b = ParameterVector { values: vec![4.0, 0.0] };
        let m = ParameterVector::weighted_mean(&[&a, &b], &[3.0, 1.0]).unwrap();
        assert_eq!(m.values, vec![1.75, 7.5]);
    }

    #[test]
    fn weighted_mean_rejects_bad_weights() {
        let a = ParameterVector { values: vec![1.0] };
        assert!(ParameterVector::weighted_mean(&[&a], &[0.0]).is_err());
        assert!(ParameterVector::weighted_mean(&[&a], &[-1.0, 2.0]).is_err());
        assert!(ParameterVector::weighted_mean(&[], &[]).is_err());
    }

    #[test]
    fn save_load_round_trips_at_f32_precision() {
        let layout = Layout::of(&small_spec()).unwrap();
        let mut rng = stream(5, "init");
        let params = ParameterVector::init(&layout, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fpv");
        params.save(&layout, &path).unwrap();
        let loaded = ParameterVector::load(&layout, &path).unwrap();
        assert_eq!(loaded.len(), params.len());
        for (a, b) in params.values.iter().zip(&loaded.values) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() <= a.abs() * 1e-6 + 1e-9);
        }
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let layout = Layout::of(&small_spec()).unwrap();
        let mut rng = stream(5, "init");
        let params = ParameterVector::init(&layout, &mut rng);
        let dir = tempfile::tempdir().unwrap();

        let bad_magic = dir.path().join("bad_magic.fpv");
        params.save(&layout, &bad_magic).unwrap();
        let mut bytes = std::fs::read(&bad_magic).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(
            ParameterVector::load(&layout, &bad_magic),
            Err(Error::BadModelFile(_))
        ));

        let truncated = dir.path().join("trunc.fpv");
        params.save(&layout, &truncated).unwrap();
        let bytes = std::fs::read(&truncated).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            ParameterVector::load(&layout, &truncated),
            Err(Error::BadModelFile(_))
        ));

        // A file for a different architecture must be rejected.
        let other_layout = Layout::of(&ModelSpec::conv_classifier(1, 16, 8, 3)).unwrap();
        let other = dir.path().join("other.fpv");
        ParameterVector::init(&other_layout, &mut rng)
            .save(&other_layout, &other)
            .unwrap();
        assert!(ParameterVector::load(&layout, &other).is_err());
    }
}
