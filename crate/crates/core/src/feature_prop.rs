//! Local feature-domain propagation: a stride-4 mask-aware frame encoder,
//! bidirectional flow-guided deformable propagation over a clip, and the
//! decoder back to full-resolution frames.

use crate::align::{align_flow_guided, relu, AlignmentWeights};
use crate::error::{Error, Result};
use crate::flow::{consistency_error, valid_map, ValidMap};
use crate::grid::{conv2d, resize, resize_flow_to, Grid, Kernel, ResizeMode};
use crate::util;

/// A window of consecutive frames with everything feature propagation needs:
/// partially filled frames, original and updated masks, and the completed
/// flow pair.
#[derive(Debug, Clone)]
pub struct LocalClip {
    pub frames: Vec<Grid>,
    pub masks_orig: Vec<Grid>,
    pub masks_updated: Vec<Grid>,
    pub flows_fwd: Vec<Grid>,
    pub flows_bwd: Vec<Grid>,
}

impl LocalClip {
    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t < 2 {
            return Err(Error::InvalidArgument("clip needs at least 2 frames".into()));
        }
        if self.masks_orig.len() != t || self.masks_updated.len() != t {
            return Err(Error::DimensionMismatch("clip mask counts differ".into()));
        }
        if self.flows_fwd.len() != t - 1 || self.flows_bwd.len() != t - 1 {
            return Err(Error::DimensionMismatch("clip flow counts differ".into()));
        }
        let (h, w) = (self.frames[0].height(), self.frames[0].width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "clip dims {h}x{w} must be divisible by 4"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Stride-4 encoder: two stride-2 convolutions and a refining stride-1
/// layer, ReLU after all but the last. Input is RGB plus the updated mask.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub layers: Vec<Kernel>,
}

impl EncoderWeights {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 3 {
            return Err(Error::WeightShape("encoder must have 3 layers".into()));
        }
        if self.layers[0].in_channels != 4 {
            return Err(Error::WeightShape(
                "encoder input must be 4 channels (frame + updated mask)".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map(|k| k.out_channels).unwrap_or(0)
    }

    fn strides(&self) -> [usize; 3] {
        [2, 2, 1]
    }
}

/// Decoder: two upsample+conv stages back to full resolution and a linear
/// output layer to RGB, clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DecoderWeights {
    pub layers: Vec<Kernel>,
}

impl DecoderWeights {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 3 {
            return Err(Error::WeightShape("decoder must have 3 layers".into()));
        }
        if self.layers.last().unwrap().out_channels != 3 {
            return Err(Error::WeightShape("decoder must emit 3 channels".into()));
        }
        Ok(())
    }
}

/// Encode every clip frame to `H/4 x W/4 x C` features.
pub fn encode_frames(clip: &LocalClip, w: &EncoderWeights) -> Result<Vec<Grid>> {
    clip.validate()?;
    w.validate()?;
    let strides = w.strides();
    util::try_map_indexed(&clip.frames, |t, frame| {
        let mut cur = Grid::concat_channels(&[frame, &clip.masks_updated[t]])?;
        for (i, k) in w.layers.iter().enumerate() {
            cur = conv2d(&cur, k, strides[i], (k.kh - 1) / 2)?;
            if i + 1 < w.layers.len() {
                for v in cur.data_mut() {
                    *v = relu(*v);
                }
            }
        }
        Ok(cur)
    })
}

/// Flow, validity, and mask conditions resampled to feature resolution.
/// Flows shrink via flow-aware bilinear resampling, masks and valid maps via
/// nearest-neighbor.
#[derive(Debug, Clone)]
pub struct PropagationConditions {
    pub flows_fwd_ds: Vec<Grid>,
    pub flows_bwd_ds: Vec<Grid>,
    /// Validity of step `t -> t+1`; consumed by the backward pass.
    pub valid_fwd_ds: Vec<ValidMap>,
    /// Validity of step `t+1 -> t`; consumed by the forward pass.
    pub valid_bwd_ds: Vec<ValidMap>,
    pub masks_orig_ds: Vec<Grid>,
    pub masks_upd_ds: Vec<Grid>,
}

impl PropagationConditions {
    pub fn from_clip(clip: &LocalClip, epsilon: f32) -> Result<PropagationConditions> {
        clip.validate()?;
        let fh = clip.frames[0].height() / 4;
        let fw = clip.frames[0].width() / 4;
        let ds_mask = |m: &Grid| resize(m, 1, 4, ResizeMode::Nearest);
        let ds_valid = |v: &ValidMap| -> Result<ValidMap> {
            let g = resize(v.as_grid(), 1, 4, ResizeMode::Nearest)?;
            Ok(ValidMap::from_binary_grid(g))
        };
        let mut out = PropagationConditions {
            flows_fwd_ds: Vec::new(),
            flows_bwd_ds: Vec::new(),
            valid_fwd_ds: Vec::new(),
            valid_bwd_ds: Vec::new(),
            masks_orig_ds: Vec::new(),
            masks_upd_ds: Vec::new(),
        };
        for t in 0..clip.len() - 1 {
            let f = &clip.flows_fwd[t];
            let b = &clip.flows_bwd[t];
            out.flows_fwd_ds.push(resize_flow_to(f, fh, fw)?);
            out.flows_bwd_ds.push(resize_flow_to(b, fh, fw)?);
            out.valid_fwd_ds.push(ds_valid(&valid_map(&consistency_error(f, b)?, epsilon))?);
            out.valid_bwd_ds.push(ds_valid(&valid_map(&consistency_error(b, f)?, epsilon))?);
        }
        for t in 0..clip.len() {
            out.masks_orig_ds.push(ds_mask(&clip.masks_orig[t])?);
            out.masks_upd_ds.push(ds_mask(&clip.masks_updated[t])?);
        }
        Ok(out)
    }

    fn validate_for(&self, t_len: usize) -> Result<()> {
        if self.flows_fwd_ds.len() != t_len - 1
            || self.flows_bwd_ds.len() != t_len - 1
            || self.valid_fwd_ds.len() != t_len - 1
            || self.valid_bwd_ds.len() != t_len - 1
            || self.masks_orig_ds.len() != t_len
            || self.masks_upd_ds.len() != t_len
        {
            return Err(Error::DimensionMismatch(
                "propagation conditions do not match clip length".into(),
            ));
        }
        Ok(())
    }
}

/// Alignment weights for both temporal directions plus the 1x1 fusion.
#[derive(Debug, Clone)]
pub struct FeaturePropWeights {
    pub align_bwd: AlignmentWeights,
    pub align_fwd: AlignmentWeights,
    pub fuse: Kernel,
}

/// Bidirectional flow-guided feature propagation over a clip.
///
/// The backward pass aligns each frame's feature to its successor's
/// propagation feature guided by the forward flow; the forward pass mirrors
/// it with backward flows; a 1x1 convolution fuses the two directions.
pub fn feature_propagate_bidir(
    e: &[Grid],
    cond: &PropagationConditions,
    w: &FeaturePropWeights,
) -> Result<Vec<Grid>> {
    let t_len = e.len();
    if t_len < 2 {
        return Err(Error::InvalidArgument("feature propagation needs >= 2 frames".into()));
    }
    cond.validate_for(t_len)?;
    let feat = e[0].channels();
    if w.fuse.in_channels != 2 * feat || w.fuse.out_channels != feat {
        return Err(Error::WeightShape("feature fusion kernel must map 2C -> C".into()));
    }

    let mut bwd: Vec<Grid> = vec![Grid::new(0, 0, 0); t_len];
    bwd[t_len - 1] = e[t_len - 1].clone();
    for t in (0..t_len - 1).rev() {
        bwd[t] = align_flow_guided(
            &e[t],
            &bwd[t + 1],
            &cond.flows_fwd_ds[t],
            &cond.valid_fwd_ds[t],
            &cond.masks_orig_ds[t],
            &cond.masks_upd_ds[t],
            &w.align_bwd,
        )?;
    }
    let mut fwd: Vec<Grid> = vec![Grid::new(0, 0, 0); t_len];
    fwd[0] = e[0].clone();
    for t in 1..t_len {
        fwd[t] = align_flow_guided(
            &e[t],
            &fwd[t - 1],
            &cond.flows_bwd_ds[t - 1],
            &cond.valid_bwd_ds[t - 1],
            &cond.masks_orig_ds[t],
            &cond.masks_upd_ds[t],
            &w.align_fwd,
        )?;
    }
    (0..t_len)
        .map(|t| conv2d(&Grid::concat_channels(&[&bwd[t], &fwd[t]])?, &w.fuse, 1, 0))
        .collect()
}

/// Decode features back to full-resolution RGB frames in `[0, 1]`.
pub fn decode_features(feats: &[Grid], w: &DecoderWeights) -> Result<Vec<Grid>> {
    w.validate()?;
    util::try_map_indexed(feats, |_, feat| {
        let mut cur = feat.clone();
        for (i, k) in w.layers.iter().enumerate() {
            if i + 1 < w.layers.len() {
                cur = resize(&cur, 2, 1, ResizeMode::Bilinear)?;
            }
            cur = conv2d(&cur, k, 1, (k.kh - 1) / 2)?;
            if i + 1 < w.layers.len() {
                for v in cur.data_mut() {
                    *v = relu(*v);
                }
            }
        }
        Ok(cur.map(|v| v.clamp(0.0, 1.0)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_encoder(c: usize, rng: &mut ChaCha8Rng) -> EncoderWeights {
        EncoderWeights {
            layers: vec![
                weights::rand_kernel(rng, c, 4, 3, 3),
                weights::rand_kernel(rng, c, c, 3, 3),
                weights::rand_kernel(rng, c, c, 3, 3),
            ],
        }
    }

    fn seeded_decoder(c: usize, rng: &mut ChaCha8Rng) -> DecoderWeights {
        DecoderWeights {
            layers: vec![
                weights::rand_kernel(rng, c, c, 3, 3),
                weights::rand_kernel(rng, c, c, 3, 3),
                weights::rand_kernel(rng, 3, c, 3, 3),
            ],
        }
    }

    fn tiny_clip(t: usize, h: usize, w: usize) -> LocalClip {
        let frames = (0..t)
            .map(|i| Grid::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 3 + c + i) % 9) as f32 / 9.0))
            .collect::<Vec<_>>();
        LocalClip {
            masks_orig: vec![Grid::new(h, w, 1); t],
            masks_updated: vec![Grid::new(h, w, 1); t],
            flows_fwd: vec![Grid::new(h, w, 2); t - 1],
            flows_bwd: vec![Grid::new(h, w, 2); t - 1],
            frames,
        }
    }

    #[test]
    fn encoder_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = seeded_encoder(8, &mut rng);
        let clip = tiny_clip(3, 16, 24);
        let feats = encode_frames(&clip, &w).unwrap();
        assert_eq!(feats.len(), 3);
        assert_eq!((feats[0].height(), feats[0].width(), feats[0].channels()), (4, 6, 8));
    }

    #[test]
    fn encoder_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = seeded_encoder(6, &mut rng);
        let clip = tiny_clip(2, 8, 8);
        let a = encode_frames(&clip, &w).unwrap();
        let b = encode_frames(&clip, &w).unwrap();
        assert_eq!(a, b);
        // Identical frames encode identically.
        let mut clip2 = tiny_clip(2, 8, 8);
        clip2.frames[1] = clip2.frames[0].clone();
        let f = encode_frames(&clip2, &w).unwrap();
        assert_eq!(f[0], f[1]);
    }

    #[test]
    fn encoder_rejects_indivisible_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = seeded_encoder(4, &mut rng);
        let mut clip = tiny_clip(2, 8, 8);
        clip.frames = vec![Grid::new(9, 8, 3); 2];
        clip.masks_orig = vec![Grid::new(9, 8, 1); 2];
        clip.masks_updated = vec![Grid::new(9, 8, 1); 2];
        clip.flows_fwd = vec![Grid::new(9, 8, 2); 1];
        clip.flows_bwd = vec![Grid::new(9, 8, 2); 1];
        assert!(encode_frames(&clip, &w).is_err());
    }

    #[test]
    fn decoder_shape_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = seeded_decoder(8, &mut rng);
        // Bias the output layer hard so pre-activations leave [0,1].
        w.layers[2].bias = Some(vec![5.0, -5.0, 0.0]);
        let feats = vec![Grid::constant(4, 6, 8, 0.5)];
        let out = decode_features(&feats, &w).unwrap();
        assert_eq!((out[0].height(), out[0].width(), out[0].channels()), (16, 24, 3));
        for y in 0..16 {
            for x in 0..24 {
                assert_eq!(out[0].at(y, x, 0), 1.0);
                assert_eq!(out[0].at(y, x, 1), 0.0);
            }
        }
    }

    #[test]
    fn minimal_two_frame_clip_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feat = 4;
        let w = FeaturePropWeights {
            align_bwd: AlignmentWeights::seeded(feat, 2 * feat + 5, &mut rng),
            align_fwd: AlignmentWeights::seeded(feat, 2 * feat + 5, &mut rng),
            fuse: weights::rand_kernel(&mut rng, feat, 2 * feat, 1, 1),
        };
        let clip = tiny_clip(2, 16, 16);
        let cond = PropagationConditions::from_clip(&clip, 5.0).unwrap();
        let e: Vec<Grid> = (0..2)
            .map(|i| Grid::from_fn(4, 4, feat, |y, x, c| ((y + x + c + i) % 5) as f32 * 0.2))
            .collect();
        let out = feature_propagate_bidir(&e, &cond, &w).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].channels(), feat);
        assert!(out.iter().all(|g| g.all_finite()));
        // Deterministic.
        let again = feature_propagate_bidir(&e, &cond, &w).unwrap();
        assert_eq!(out, again);
    }
}
