//! Flow-centric algorithms: backward warping, forward/backward consistency,
//! validity maps, and the flow metrics and losses.
//!
//! Flow fields are 2-channel grids, channel order `(dx, dy)`. The forward
//! flow of frame `t` maps a pixel of frame `t` to its position in frame
//! `t+1`; backward warping pulls frame `t+1` content into frame `t`.

use crate::error::{Error, Result};
use crate::grid::{bilinear_sample_channel, bilinear_sample_into, Grid};
use crate::util;

/// Per-pixel forward/backward consistency error, in squared pixels.
#[derive(Debug, Clone)]
pub struct ConsistencyMap(Grid);

impl ConsistencyMap {
    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.0.at(y, x, 0)
    }
}

/// Per-pixel binary map: 1 where the flow pair is consistent under the
/// threshold, 0 elsewhere.
#[derive(Debug, Clone)]
pub struct ValidMap(Grid);

impl ValidMap {
    /// All-ones map, for callers with no consistency information.
    pub fn all_valid(height: usize, width: usize) -> ValidMap {
        ValidMap(Grid::constant(height, width, 1, 1.0))
    }

    /// Wrap an existing single-channel binary grid (nonzero = valid).
    pub fn from_binary_grid(g: Grid) -> ValidMap {
        ValidMap(g.map(|v| if v != 0.0 { 1.0 } else { 0.0 }))
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.0.at(y, x, 0) != 0.0
    }
}

fn check_flow(f: &Grid, what: &str) -> Result<()> {
    if f.channels() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "{what}: flow must have 2 channels, got {}",
            f.channels()
        )));
    }
    Ok(())
}

/// Pull `src` toward the flow's frame: `out(p) = src(p + flow(p))`, sampled
/// bilinearly with border clamping.
pub fn warp_backward(src: &Grid, flow: &Grid) -> Result<Grid> {
    check_flow(flow, "warp_backward")?;
    if !src.same_spatial(flow) {
        return Err(Error::DimensionMismatch(format!(
            "warp_backward: src {}x{} vs flow {}x{}",
            src.height(),
            src.width(),
            flow.height(),
            flow.width()
        )));
    }
    let (h, w, c) = (src.height(), src.width(), src.channels());
    let mut out = Grid::new(h, w, c);
    util::for_each_row(out.data_mut(), w * c, |y, row| {
        for x in 0..w {
            let d = flow.pixel(y, x);
            let sx = x as f32 + d[0];
            let sy = y as f32 + d[1];
            bilinear_sample_into(src, sx, sy, &mut row[x * c..(x + 1) * c]);
        }
    });
    Ok(out)
}

/// Forward/backward consistency error:
/// `E(p) = || f_fwd(p) + f_bwd(p + f_fwd(p)) ||^2`.
pub fn consistency_error(f_fwd: &Grid, f_bwd: &Grid) -> Result<ConsistencyMap> {
    check_flow(f_fwd, "consistency_error")?;
    check_flow(f_bwd, "consistency_error")?;
    if !f_fwd.same_spatial(f_bwd) {
        return Err(Error::DimensionMismatch(
            "consistency_error: flow pair dims differ".into(),
        ));
    }
    let (h, w) = (f_fwd.height(), f_fwd.width());
    let mut out = Grid::new(h, w, 1);
    util::for_each_row(out.data_mut(), w, |y, row| {
        for (x, e) in row.iter_mut().enumerate() {
            let d = f_fwd.pixel(y, x);
            let sx = x as f32 + d[0];
            let sy = y as f32 + d[1];
            let bx = bilinear_sample_channel(f_bwd, sx, sy, 0);
            let by = bilinear_sample_channel(f_bwd, sx, sy, 1);
            let rx = d[0] + bx;
            let ry = d[1] + by;
            *e = rx * rx + ry * ry;
        }
    });
    Ok(ConsistencyMap(out))
}

/// Threshold a consistency map: valid iff `E(p) < epsilon` (strict).
pub fn valid_map(e: &ConsistencyMap, epsilon: f32) -> ValidMap {
    ValidMap(e.as_grid().map(|v| if v < epsilon { 1.0 } else { 0.0 }))
}

/// Mean endpoint error between two flow fields, optionally restricted to a
/// binary region mask.
pub fn endpoint_error(f_hat: &Grid, f_gt: &Grid, region: Option<&Grid>) -> Result<f64> {
    check_flow(f_hat, "endpoint_error")?;
    check_flow(f_gt, "endpoint_error")?;
    if !f_hat.same_shape(f_gt) {
        return Err(Error::DimensionMismatch("endpoint_error: flow dims differ".into()));
    }
    if let Some(r) = region {
        if !r.same_spatial(f_hat) || r.channels() != 1 {
            return Err(Error::DimensionMismatch("endpoint_error: region dims differ".into()));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for y in 0..f_hat.height() {
        for x in 0..f_hat.width() {
            if let Some(r) = region {
                if r.at(y, x, 0) == 0.0 {
                    continue;
                }
            }
            let a = f_hat.pixel(y, x);
            let b = f_gt.pixel(y, x);
            let du = (a[0] - b[0]) as f64;
            let dv = (a[1] - b[1]) as f64;
            sum += (du * du + dv * dv).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// How [`warping_error`] selected the pixels it averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpPixelSelection {
    /// Backward flows were available; inconsistent pixels were excluded.
    ConsistencyMasked,
    /// No backward flows; every pixel contributed.
    AllPixels,
}

#[derive(Debug, Clone)]
pub struct WarpingErrorReport {
    /// Mean squared difference, raw units (multiply by 1e3 for reports).
    pub value: f64,
    pub selection: WarpPixelSelection,
    pub pixels_used: u64,
}

/// Temporal warping error of a frame sequence under the given forward flows:
/// mean over all `(t, p)` of `|| frame_t(p) - warp(frame_{t+1}, flow_t)(p) ||^2`.
///
/// When backward flows are provided, pixels failing the consistency check at
/// `epsilon` are excluded from the mean, and the report says so.
pub fn warping_error(
    frames: &[Grid],
    flows_fwd: &[Grid],
    flows_bwd: Option<&[Grid]>,
    epsilon: f32,
) -> Result<WarpingErrorReport> {
    if frames.len() < 2 || flows_fwd.len() != frames.len() - 1 {
        return Err(Error::DimensionMismatch(format!(
            "warping_error: {} frames need {} flows, got {}",
            frames.len(),
            frames.len().saturating_sub(1),
            flows_fwd.len()
        )));
    }
    if let Some(b) = flows_bwd {
        if b.len() != flows_fwd.len() {
            return Err(Error::DimensionMismatch(
                "warping_error: forward/backward flow counts differ".into(),
            ));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for t in 0..flows_fwd.len() {
        let warped = warp_backward(&frames[t + 1], &flows_fwd[t])?;
        let valid = match flows_bwd {
            Some(b) => Some(valid_map(&consistency_error(&flows_fwd[t], &b[t])?, epsilon)),
            None => None,
        };
        let cur = &frames[t];
        for y in 0..cur.height() {
            for x in 0..cur.width() {
                if let Some(v) = &valid {
                    if !v.is_valid(y, x) {
                        continue;
                    }
                }
                let a = cur.pixel(y, x);
                let b = warped.pixel(y, x);
                let mut d2 = 0.0f64;
                for c in 0..cur.channels() {
                    let d = (a[c] - b[c]) as f64;
                    d2 += d * d;
                }
                sum += d2;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(WarpingErrorReport {
        value: sum / count as f64,
        selection: if flows_bwd.is_some() {
            WarpPixelSelection::ConsistencyMasked
        } else {
            WarpPixelSelection::AllPixels
        },
        pixels_used: count,
    })
}

/// Flow reconstruction loss: masked and unmasked L1 terms, each normalized
/// by its own pixel count:
/// `||M (f_hat - f_gt)||_1 / ||M||_1 + ||(1-M)(f_hat - f_gt)||_1 / ||1-M||_1`.
pub fn flow_rec_loss(f_hat: &Grid, f_gt: &Grid, mask: &Grid) -> Result<f64> {
    check_flow(f_hat, "flow_rec_loss")?;
    check_flow(f_gt, "flow_rec_loss")?;
    if !f_hat.same_shape(f_gt) || !mask.same_spatial(f_hat) || mask.channels() != 1 {
        return Err(Error::DimensionMismatch("flow_rec_loss: input dims differ".into()));
    }
    let mut masked_sum = 0.0f64;
    let mut unmasked_sum = 0.0f64;
    let mut masked_px = 0u64;
    let mut unmasked_px = 0u64;
    for y in 0..f_hat.height() {
        for x in 0..f_hat.width() {
            let a = f_hat.pixel(y, x);
            let b = f_gt.pixel(y, x);
            let l1 = (a[0] - b[0]).abs() as f64 + (a[1] - b[1]).abs() as f64;
            if mask.at(y, x, 0) != 0.0 {
                masked_sum += l1;
                masked_px += 1;
            } else {
                unmasked_sum += l1;
                unmasked_px += 1;
            }
        }
    }
    if masked_px == 0 || unmasked_px == 0 {
        return Err(Error::InvalidArgument(
            "flow_rec_loss: mask must contain both masked and unmasked pixels".into(),
        ));
    }
    Ok(masked_sum / masked_px as f64 + unmasked_sum / unmasked_px as f64)
}

/// Second-order smoothness: mean L1 of the 5-point discrete Laplacian per
/// flow channel over interior pixels.
pub fn flow_smooth_loss(f: &Grid) -> Result<f64> {
    check_flow(f, "flow_smooth_loss")?;
    let (h, w) = (f.height(), f.width());
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument(format!(
            "flow_smooth_loss: grid {}x{} too small for the interior stencil",
            h, w
        )));
    }
    let mut sum = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..2 {
                let lap = f.at(y, x - 1, c) as f64
                    + f.at(y, x + 1, c) as f64
                    + f.at(y - 1, x, c) as f64
                    + f.at(y + 1, x, c) as f64
                    - 4.0 * f.at(y, x, c) as f64;
                sum += lap.abs();
            }
        }
    }
    Ok(sum / ((h - 2) as f64 * (w - 2) as f64 * 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_flow(h: usize, w: usize, dx: f32, dy: f32) -> Grid {
        Grid::from_fn(h, w, 2, |_, _, c| if c == 0 { dx } else { dy })
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let src = Grid::from_fn(5, 4, 3, |y, x, c| (y * 13 + x * 7 + c) as f32 * 0.01);
        let out = warp_backward(&src, &Grid::new(5, 4, 2)).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn warp_integer_translation_exact_in_interior() {
        // src is the same image shifted right by one pixel.
        let base = Grid::from_fn(6, 8, 1, |y, x, _| ((y * 31 + x * 17) % 11) as f32 * 0.09);
        let shifted = Grid::from_fn(6, 8, 1, |y, x, _| {
            if x == 0 {
                0.0
            } else {
                base.at(y, x - 1, 0)
            }
        });
        let out = warp_backward(&shifted, &constant_flow(6, 8, 1.0, 0.0)).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(out.at(y, x, 0), base.at(y, x, 0));
            }
        }
    }

    #[test]
    fn consistency_exact_inverse_is_zero() {
        let e = consistency_error(&constant_flow(4, 4, 2.0, 0.0), &constant_flow(4, 4, -2.0, 0.0))
            .unwrap();
        assert!(e.as_grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn consistency_unit_error() {
        let e = consistency_error(&constant_flow(4, 4, 1.0, 0.0), &Grid::new(4, 4, 2)).unwrap();
        assert!(e.as_grid().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn valid_map_strict_threshold() {
        let mut g = Grid::new(1, 3, 1);
        g.set(0, 0, 0, 0.0);
        g.set(0, 1, 0, 4.9);
        g.set(0, 2, 0, 5.1);
        let e = ConsistencyMap(g.clone());
        let v = valid_map(&e, 5.0);
        assert_eq!(v.as_grid().data(), &[1.0, 1.0, 0.0]);

        let exact = ConsistencyMap(Grid::constant(2, 2, 1, 5.0));
        let v = valid_map(&exact, 5.0);
        assert!(v.as_grid().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn epe_known_offset() {
        let gt = constant_flow(3, 3, 0.5, -0.25);
        let hat = constant_flow(3, 3, 3.5, 3.75);
        assert!((endpoint_error(&hat, &gt, None).unwrap() - 5.0).abs() < 1e-6);
        assert_eq!(endpoint_error(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn epe_empty_region_rejected() {
        let f = constant_flow(2, 2, 0.0, 0.0);
        let empty = Grid::new(2, 2, 1);
        assert!(matches!(endpoint_error(&f, &f, Some(&empty)), Err(Error::EmptyRegion)));
    }

    #[test]
    fn warping_error_static_video_zero_flow() {
        let frame = Grid::from_fn(4, 4, 3, |y, x, c| ((y + x + c) % 3) as f32 * 0.3);
        let frames = vec![frame.clone(), frame.clone(), frame];
        let flows = vec![Grid::new(4, 4, 2), Grid::new(4, 4, 2)];
        let r = warping_error(&frames, &flows, None, 5.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.selection, WarpPixelSelection::AllPixels);
    }

    #[test]
    fn flow_rec_loss_uniform_offset() {
        let gt = constant_flow(4, 4, 0.0, 0.0);
        let hat = constant_flow(4, 4, 1.0, 1.0);
        let mut m = Grid::new(4, 4, 1);
        m.set(0, 0, 0, 1.0);
        m.set(2, 3, 0, 1.0);
        assert!((flow_rec_loss(&hat, &gt, &m).unwrap() - 4.0).abs() < 1e-9);
        assert_eq!(flow_rec_loss(&gt, &gt, &m).unwrap(), 0.0);
    }

    #[test]
    fn flow_rec_loss_rejects_degenerate_masks() {
        let f = constant_flow(2, 2, 0.0, 0.0);
        assert!(flow_rec_loss(&f, &f, &Grid::new(2, 2, 1)).is_err());
        assert!(flow_rec_loss(&f, &f, &Grid::constant(2, 2, 1, 1.0)).is_err());
    }

    #[test]
    fn smooth_loss_zero_for_constant_and_affine() {
        assert_eq!(flow_smooth_loss(&constant_flow(5, 5, 3.0, -2.0)).unwrap(), 0.0);
        // Dyadic coefficients: every sampled value is exact in f32, so the
        // second differences cancel exactly.
        let affine = Grid::from_fn(8, 9, 2, |y, x, c| {
            let (a, b, d) = if c == 0 { (0.25, 0.5, 1.0) } else { (-0.125, 0.75, 2.0) };
            a * x as f32 + b * y as f32 + d
        });
        assert_eq!(flow_smooth_loss(&affine).unwrap(), 0.0);
    }

    #[test]
    fn smooth_loss_spike_matches_stencil() {
        let mut f = Grid::new(5, 5, 2);
        f.set(2, 2, 0, 1.0);
        // Laplacian magnitude: 4 at the spike, 1 at each of its 4 interior
        // neighbors; 9x9 interior pixels, 2 channels.
        let expected = (4.0 + 4.0) / (3.0 * 3.0 * 2.0);
        assert!((flow_smooth_loss(&f).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn smooth_loss_needs_interior() {
        assert!(flow_smooth_loss(&Grid::new(2, 5, 2)).is_err());
    }
}
