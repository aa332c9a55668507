//! Deformable-convolution forward pass and the two alignment variants used
//! by the pipeline: plain alignment (offsets predicted from scratch, used in
//! flow completion) and flow-guided alignment (completed flow as the base
//! offset plus a learned residue, used in feature propagation).
//!
//! Sampling follows the grid convention: bilinear with border clamping, so a
//! single-tap kernel with a constant offset is exactly a backward warp. With
//! zero offsets and unit modulation the operator matches zero-padded
//! convolution away from the border band, where clamping never engages.

use crate::error::{Error, Result};
use crate::flow::{warp_backward, ValidMap};
use crate::grid::{bilinear_sample_channel, conv2d, Grid, Kernel};
use crate::util;

/// Per-pixel, per-tap sampling displacements, channel order `(dx, dy)`.
#[derive(Debug, Clone)]
pub struct OffsetField {
    height: usize,
    width: usize,
    taps: usize,
    data: Vec<f32>,
}

impl OffsetField {
    pub fn zeros(height: usize, width: usize, taps: usize) -> OffsetField {
        OffsetField { height, width, taps, data: vec![0.0; height * width * taps * 2] }
    }

    pub fn constant(height: usize, width: usize, taps: usize, dx: f32, dy: f32) -> OffsetField {
        let mut f = OffsetField::zeros(height, width, taps);
        for i in 0..height * width * taps {
            f.data[i * 2] = dx;
            f.data[i * 2 + 1] = dy;
        }
        f
    }

    /// Reinterpret a `2*taps`-channel grid (tap-major `[dx, dy]` pairs).
    pub fn from_grid(g: &Grid, taps: usize) -> Result<OffsetField> {
        if g.channels() != 2 * taps {
            return Err(Error::DimensionMismatch(format!(
                "offset field needs {} channels for {} taps, got {}",
                2 * taps,
                taps,
                g.channels()
            )));
        }
        Ok(OffsetField {
            height: g.height(),
            width: g.width(),
            taps,
            data: g.data().to_vec(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, tap: usize) -> (f32, f32) {
        let i = ((y * self.width + x) * self.taps + tap) * 2;
        (self.data[i], self.data[i + 1])
    }

    /// Add a 2-channel flow to every tap (flow-as-base-offset).
    pub fn add_flow(&mut self, flow: &Grid) -> Result<()> {
        if flow.channels() != 2 || flow.height() != self.height || flow.width() != self.width {
            return Err(Error::DimensionMismatch("add_flow: flow dims differ".into()));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let d = flow.pixel(y, x);
                for tap in 0..self.taps {
                    let i = ((y * self.width + x) * self.taps + tap) * 2;
                    self.data[i] += d[0];
                    self.data[i + 1] += d[1];
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel, per-tap modulation scalars in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ModulationField {
    height: usize,
    width: usize,
    taps: usize,
    data: Vec<f32>,
}

impl ModulationField {
    pub fn ones(height: usize, width: usize, taps: usize) -> ModulationField {
        ModulationField { height, width, taps, data: vec![1.0; height * width * taps] }
    }

    pub fn new(height: usize, width: usize, taps: usize, data: Vec<f32>) -> Result<ModulationField> {
        if data.len() != height * width * taps {
            return Err(Error::DimensionMismatch("modulation field length mismatch".into()));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("modulation values must lie in [0,1]".into()));
        }
        Ok(ModulationField { height, width, taps, data })
    }

    /// Squash raw logits (a `taps`-channel grid) through the logistic
    /// function; the output cannot leave `[0, 1]`.
    pub fn from_logits(g: &Grid) -> ModulationField {
        ModulationField {
            height: g.height(),
            width: g.width(),
            taps: g.channels(),
            data: g.data().iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, tap: usize) -> f32 {
        self.data[(y * self.width + x) * self.taps + tap]
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// Deformable convolution, stride 1, output dims equal input dims.
///
/// `out(p, oc) = bias_oc + sum_{tap, ic} w[oc, ic, tap] * m(p, tap) *
/// sample(x, p + base_tap + offset(p, tap))[ic]` where `base_tap` walks the
/// regular `kh x kw` neighborhood around `p`.
pub fn dcn_forward(
    x: &Grid,
    offsets: &OffsetField,
    modulation: &ModulationField,
    k: &Kernel,
) -> Result<Grid> {
    let (h, w) = (x.height(), x.width());
    let taps = k.taps();
    if k.in_channels != x.channels() {
        return Err(Error::DimensionMismatch(format!(
            "dcn_forward: kernel expects {} channels, input has {}",
            k.in_channels,
            x.channels()
        )));
    }
    if offsets.height() != h || offsets.width() != w || offsets.taps() != taps {
        return Err(Error::DimensionMismatch("dcn_forward: offset field dims differ".into()));
    }
    if modulation.height != h || modulation.width != w || modulation.taps() != taps {
        return Err(Error::DimensionMismatch("dcn_forward: modulation dims differ".into()));
    }
    let cy = (k.kh - 1) as f32 * 0.5;
    let cx = (k.kw - 1) as f32 * 0.5;
    let in_c = k.in_channels;
    let out_c = k.out_channels;

    let mut out = Grid::new(h, w, out_c);
    util::for_each_row(out.data_mut(), w * out_c, |y, row| {
        let mut sampled = vec![0.0f32; in_c];
        for px in 0..w {
            let acc = &mut row[px * out_c..(px + 1) * out_c];
            for (oc, a) in acc.iter_mut().enumerate() {
                *a = k.bias.as_ref().map_or(0.0, |b| b[oc]);
            }
            for ky in 0..k.kh {
                for kx in 0..k.kw {
                    let tap = ky * k.kw + kx;
                    let (dx, dy) = offsets.at(y, px, tap);
                    let m = modulation.at(y, px, tap);
                    let sx = px as f32 + kx as f32 - cx + dx;
                    let sy = y as f32 + ky as f32 - cy + dy;
                    for (ic, s) in sampled.iter_mut().enumerate() {
                        *s = bilinear_sample_channel(x, sx, sy, ic) * m;
                    }
                    for oc in 0..out_c {
                        let mut sum = 0.0f64;
                        for ic in 0..in_c {
                            sum += k.weight(oc, ic, ky, kx) as f64 * sampled[ic] as f64;
                        }
                        acc[oc] += sum as f32;
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Weights for one alignment direction: the offset-prediction stack, the
/// deformable kernel, and the fusion stack.
#[derive(Debug, Clone)]
pub struct AlignmentWeights {
    /// Stride-1 conv stack; ReLU between layers, linear final layer emitting
    /// `2*taps` offset channels followed by `taps` modulation logits.
    pub offset_net: Vec<Kernel>,
    /// Deformable convolution kernel, `feat -> feat` channels.
    pub dcn: Kernel,
    /// Fusion stack over `concat(aligned, current)`; ReLU between layers,
    /// linear final layer back to `feat` channels.
    pub fusion: Vec<Kernel>,
}

/// Run a stride-1, same-padding conv stack with ReLU between layers and a
/// linear final layer.
pub(crate) fn conv_stack(input: &Grid, layers: &[Kernel]) -> Result<Grid> {
    if layers.is_empty() {
        return Err(Error::WeightShape("empty convolution stack".into()));
    }
    let mut cur = input.clone();
    for (i, k) in layers.iter().enumerate() {
        cur = conv2d(&cur, k, 1, (k.kh - 1) / 2)?;
        if i + 1 < layers.len() {
            for v in cur.data_mut() {
                *v = relu(*v);
            }
        }
    }
    Ok(cur)
}

impl AlignmentWeights {
    /// Seeded random weights: a 3-layer 3x3 offset net over `cond_channels`
    /// conditions, a 3x3 deformable kernel, and a 2-layer fusion stack. The
    /// offset net's final layer is scaled down so initial offsets stay small.
    pub fn seeded<R: rand::Rng>(feat: usize, cond_channels: usize, rng: &mut R) -> AlignmentWeights {
        use crate::weights::rand_kernel;
        let taps = 9;
        let mut last = rand_kernel(rng, 3 * taps, feat, 3, 3);
        for w in last.weights.iter_mut() {
            *w *= 0.1;
        }
        AlignmentWeights {
            offset_net: vec![
                rand_kernel(rng, feat, cond_channels, 3, 3),
                rand_kernel(rng, feat, feat, 3, 3),
                last,
            ],
            dcn: rand_kernel(rng, feat, feat, 3, 3),
            fusion: vec![
                rand_kernel(rng, feat, 2 * feat, 3, 3),
                rand_kernel(rng, feat, feat, 3, 3),
            ],
        }
    }

    /// Check shape consistency against the feature width and the condition
    /// stack width the offset net will see.
    pub fn validate(&self, feat: usize, cond_channels: usize) -> Result<()> {
        let first = self.offset_net.first().ok_or_else(|| {
            Error::WeightShape("alignment offset net is empty".into())
        })?;
        if first.in_channels != cond_channels {
            return Err(Error::WeightShape(format!(
                "offset net expects {} condition channels, got {}",
                first.in_channels, cond_channels
            )));
        }
        let last = self.offset_net.last().unwrap();
        if last.out_channels != 3 * self.dcn.taps() {
            return Err(Error::WeightShape(format!(
                "offset net must emit {} channels (2+1 per tap), emits {}",
                3 * self.dcn.taps(),
                last.out_channels
            )));
        }
        if self.dcn.in_channels != feat || self.dcn.out_channels != feat {
            return Err(Error::WeightShape(format!(
                "dcn kernel is {}->{}, features are {}",
                self.dcn.in_channels, self.dcn.out_channels, feat
            )));
        }
        let ffirst = self.fusion.first().ok_or_else(|| {
            Error::WeightShape("alignment fusion stack is empty".into())
        })?;
        if ffirst.in_channels != 2 * feat {
            return Err(Error::WeightShape(format!(
                "fusion expects {} channels, got {}",
                2 * feat,
                ffirst.in_channels
            )));
        }
        if self.fusion.last().unwrap().out_channels != feat {
            return Err(Error::WeightShape("fusion must map back to feature width".into()));
        }
        Ok(())
    }

    fn predict(&self, conditions: &Grid) -> Result<(OffsetField, ModulationField)> {
        let raw = conv_stack(conditions, &self.offset_net)?;
        let taps = self.dcn.taps();
        let offsets = OffsetField::from_grid(&raw.slice_channels(0, 2 * taps)?, taps)?;
        let modulation = ModulationField::from_logits(&raw.slice_channels(2 * taps, taps)?);
        Ok((offsets, modulation))
    }

    fn fuse(&self, aligned: &Grid, current: &Grid) -> Result<Grid> {
        conv_stack(&Grid::concat_channels(&[aligned, current])?, &self.fusion)
    }
}

/// Plain deformable alignment: offsets predicted from the concatenation of
/// the current feature and the neighbor's propagation feature, then the
/// neighbor is deformably aligned and fused with the current feature.
pub fn align_plain(f_t: &Grid, prop_next: &Grid, w: &AlignmentWeights) -> Result<Grid> {
    if !f_t.same_shape(prop_next) {
        return Err(Error::DimensionMismatch("align_plain: feature dims differ".into()));
    }
    w.validate(f_t.channels(), 2 * f_t.channels())?;
    let cond = Grid::concat_channels(&[f_t, prop_next])?;
    let (offsets, modulation) = w.predict(&cond)?;
    let aligned = dcn_forward(prop_next, &offsets, &modulation, &w.dcn)?;
    w.fuse(&aligned, f_t)
}

/// Flow-guided deformable alignment: the completed flow is the base offset
/// of every tap and the offset net predicts only a residue, conditioned on
/// the current feature, the flow-warped neighbor, the flow itself, the flow
/// valid map, and the original and updated masks.
pub fn align_flow_guided(
    e_t: &Grid,
    prop_next: &Grid,
    flow_ds: &Grid,
    v: &ValidMap,
    m_orig: &Grid,
    m_updated: &Grid,
    w: &AlignmentWeights,
) -> Result<Grid> {
    if !e_t.same_shape(prop_next) {
        return Err(Error::DimensionMismatch("align_flow_guided: feature dims differ".into()));
    }
    for (g, what) in [
        (flow_ds, "flow"),
        (v.as_grid(), "valid map"),
        (m_orig, "original mask"),
        (m_updated, "updated mask"),
    ] {
        if !g.same_spatial(e_t) {
            return Err(Error::DimensionMismatch(format!(
                "align_flow_guided: {what} dims differ from features"
            )));
        }
    }
    let feat = e_t.channels();
    w.validate(feat, 2 * feat + 5)?;
    let warped = warp_backward(prop_next, flow_ds)?;
    let cond =
        Grid::concat_channels(&[e_t, &warped, flow_ds, v.as_grid(), m_orig, m_updated])?;
    let (mut offsets, modulation) = w.predict(&cond)?;
    offsets.add_flow(flow_ds)?;
    let aligned = dcn_forward(prop_next, &offsets, &modulation, &w.dcn)?;
    w.fuse(&aligned, e_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Grid {
        Grid::from_fn(h, w, c, |y, x, ch| ((y * 31 + x * 7 + ch * 3) % 13) as f32 * 0.11 - 0.5)
    }

    #[test]
    fn dcn_zero_offsets_matches_conv_in_interior() {
        let x = ramp(7, 9, 2);
        let k = Kernel::new(
            3,
            2,
            3,
            3,
            (0..54).map(|i| ((i * 17 % 23) as f32 - 11.0) * 0.07).collect(),
            Some(vec![0.1, -0.2, 0.3]),
        )
        .unwrap();
        let dcn = dcn_forward(&x, &OffsetField::zeros(7, 9, 9), &ModulationField::ones(7, 9, 9), &k)
            .unwrap();
        let conv = conv2d(&x, &k, 1, 1).unwrap();
        for y in 1..6 {
            for xx in 1..8 {
                for c in 0..3 {
                    assert!(
                        (dcn.at(y, xx, c) - conv.at(y, xx, c)).abs() < 1e-5,
                        "({y},{xx},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn dcn_single_tap_is_backward_warp() {
        let x = ramp(6, 8, 3);
        let k = Kernel::new(3, 3, 1, 1, Kernel::identity(3).weights, None).unwrap();
        let (dx, dy) = (1.5f32, -0.75f32);
        let offsets = OffsetField::constant(6, 8, 1, dx, dy);
        let dcn = dcn_forward(&x, &offsets, &ModulationField::ones(6, 8, 1), &k).unwrap();
        let flow = Grid::from_fn(6, 8, 2, |_, _, c| if c == 0 { dx } else { dy });
        let warped = warp_backward(&x, &flow).unwrap();
        for (a, b) in dcn.data().iter().zip(warped.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dcn_linear_in_input() {
        let a = ramp(5, 5, 2);
        let b = a.map(|v| v * -0.3 + 0.2);
        let sum = Grid::from_fn(5, 5, 2, |y, x, c| a.at(y, x, c) + b.at(y, x, c));
        let k = Kernel::new(2, 2, 3, 3, (0..36).map(|i| (i as f32 * 0.03) - 0.5).collect(), None)
            .unwrap();
        let off = OffsetField::constant(5, 5, 9, 0.3, -0.6);
        let mut modl = vec![0.0f32; 5 * 5 * 9];
        for (i, v) in modl.iter_mut().enumerate() {
            *v = ((i * 7) % 10) as f32 / 10.0;
        }
        let m = ModulationField::new(5, 5, 9, modl).unwrap();
        let fa = dcn_forward(&a, &off, &m, &k).unwrap();
        let fb = dcn_forward(&b, &off, &m, &k).unwrap();
        let fsum = dcn_forward(&sum, &off, &m, &k).unwrap();
        for i in 0..fa.data().len() {
            assert!((fsum.data()[i] - fa.data()[i] - fb.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn modulation_validation() {
        assert!(ModulationField::new(1, 1, 1, vec![1.2]).is_err());
        assert!(ModulationField::new(1, 1, 1, vec![-0.1]).is_err());
        let logits = Grid::from_vec(1, 1, 2, vec![1000.0, -1000.0]).unwrap();
        let m = ModulationField::from_logits(&logits);
        assert_eq!(m.at(0, 0, 0), 1.0);
        assert_eq!(m.at(0, 0, 1), 0.0);
    }

    /// Offset net emitting zeros with a saturated modulation logit, center-tap
    /// dcn kernel, and a fusion layer that passes its second input through.
    fn engineered_identity(feat: usize, cond: usize) -> AlignmentWeights {
        let taps = 9;
        let mut last = Kernel::new(3 * taps, cond, 1, 1, vec![0.0; 3 * taps * cond], None).unwrap();
        let mut bias = vec![0.0; 3 * taps];
        for b in bias.iter_mut().skip(2 * taps) {
            *b = 1000.0; // sigmoid saturates to exactly 1.0 in f32
        }
        last.bias = Some(bias);
        let mut dcn_w = vec![0.0; feat * feat * 9];
        for c in 0..feat {
            dcn_w[(c * feat + c) * 9 + 4] = 1.0; // center tap
        }
        AlignmentWeights {
            offset_net: vec![last],
            dcn: Kernel::new(feat, feat, 3, 3, dcn_w, None).unwrap(),
            fusion: vec![Kernel::channel_select(2 * feat, feat, feat)],
        }
    }

    #[test]
    fn align_plain_identity_configuration() {
        let feat = 4;
        let f_t = ramp(8, 8, feat);
        let prop = ramp(8, 8, feat).map(|v| v * 0.5 + 0.1);
        let w = engineered_identity(feat, 2 * feat);
        let out = align_plain(&f_t, &prop, &w).unwrap();
        for (a, b) in out.data().iter().zip(f_t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn align_flow_guided_degenerates_to_warp() {
        let feat = 3;
        let e_t = ramp(8, 10, feat);
        let prop = ramp(8, 10, feat).map(|v| 0.25 * v - 0.05);
        let flow = Grid::from_fn(8, 10, 2, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        let v = ValidMap::all_valid(8, 10);
        let m0 = Grid::new(8, 10, 1);
        let m1 = Grid::new(8, 10, 1);
        let mut w = engineered_identity(feat, 2 * feat + 5);
        // Pass the first fusion input (the dcn output) through instead.
        w.fusion = vec![Kernel::channel_select(2 * feat, 0, feat)];
        let out = align_flow_guided(&e_t, &prop, &flow, &v, &m0, &m1, &w).unwrap();
        let warped = warp_backward(&prop, &flow).unwrap();
        for (a, b) in out.data().iter().zip(warped.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        // Zero flow: output is the neighbor feature itself.
        let zero = Grid::new(8, 10, 2);
        let out = align_flow_guided(&e_t, &prop, &zero, &v, &m0, &m1, &w).unwrap();
        for (a, b) in out.data().iter().zip(prop.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_inputs_give_constant_interior() {
        let feat = 2;
        let f_t = Grid::constant(9, 9, feat, 0.4);
        let prop = Grid::constant(9, 9, feat, -0.2);
        let w = engineered_identity(feat, 2 * feat);
        let out = align_plain(&f_t, &prop, &w).unwrap();
        for y in 2..7 {
            for x in 2..7 {
                for c in 0..feat {
                    assert!((out.at(y, x, c) - out.at(4, 4, c)).abs() < 1e-6);
                }
            }
        }
    }
}
