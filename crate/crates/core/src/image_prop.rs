//! Global, reliability-checked image-domain propagation.
//!
//! A masked pixel of frame `t` is filled from a neighbor frame only when all
//! three gates hold: the flow pair is forward/backward consistent at the
//! pixel (C1), the pixel is actually masked (C2), and the warped source
//! location is unmasked (C3). Filled pixels immediately become unmasked, so
//! content chains across the whole sequence within one sweep.

use crate::error::{Error, Result};
use crate::flow::{consistency_error, warp_backward, ConsistencyMap};
use crate::grid::Grid;

/// Binary map of pixels that will be filled this step. By construction a
/// subset of the current frame's mask.
#[derive(Debug, Clone)]
pub struct ReliableArea(Grid);

impl ReliableArea {
    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    #[inline]
    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.0.at(y, x, 0) != 0.0
    }

    pub fn count(&self) -> u64 {
        self.0.data().iter().filter(|&&v| v != 0.0).count() as u64
    }
}

fn check_binary_mask(m: &Grid, what: &str) -> Result<()> {
    if m.channels() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "{what}: mask must be single-channel"
        )));
    }
    Ok(())
}

/// C3 with sub-pixel targets: the warped location must lie inside the frame
/// and every source pixel with nonzero bilinear weight must be unmasked.
/// Masked values can then never bleed into a fill through interpolation.
fn target_unmasked(m_next: &Grid, qx: f32, qy: f32) -> bool {
    let (h, w) = (m_next.height(), m_next.width());
    if !(0.0..=(w - 1) as f32).contains(&qx) || !(0.0..=(h - 1) as f32).contains(&qy) {
        return false;
    }
    let x0 = qx.floor() as usize;
    let y0 = qy.floor() as usize;
    let x1 = if qx - x0 as f32 > 0.0 { x0 + 1 } else { x0 };
    let y1 = if qy - y0 as f32 > 0.0 { y0 + 1 } else { y0 };
    m_next.at(y0, x0, 0) == 0.0
        && m_next.at(y0, x1, 0) == 0.0
        && m_next.at(y1, x0, 0) == 0.0
        && m_next.at(y1, x1, 0) == 0.0
}

/// The reliable propagation area for one step pulling content along `f_fwd`
/// (current frame -> source frame), gated by the consistency of the
/// `(f_fwd, f_bwd)` pair at `epsilon`.
pub fn reliable_area(
    m_t: &Grid,
    m_next: &Grid,
    f_fwd: &Grid,
    f_bwd: &Grid,
    epsilon: f32,
) -> Result<ReliableArea> {
    let (area, _) = reliable_area_with_error(m_t, m_next, f_fwd, f_bwd, epsilon)?;
    Ok(area)
}

fn reliable_area_with_error(
    m_t: &Grid,
    m_next: &Grid,
    f_fwd: &Grid,
    f_bwd: &Grid,
    epsilon: f32,
) -> Result<(ReliableArea, ConsistencyMap)> {
    check_binary_mask(m_t, "reliable_area")?;
    check_binary_mask(m_next, "reliable_area")?;
    if !m_t.same_spatial(m_next) || !m_t.same_spatial(f_fwd) || !m_t.same_spatial(f_bwd) {
        return Err(Error::DimensionMismatch("reliable_area: input dims differ".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("reliable_area: epsilon must be positive".into()));
    }
    let err = consistency_error(f_fwd, f_bwd)?;
    let (h, w) = (m_t.height(), m_t.width());
    let mut area = Grid::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            if m_t.at(y, x, 0) == 0.0 {
                continue; // C2
            }
            if err.at(y, x) >= epsilon {
                continue; // C1, strict
            }
            let d = f_fwd.pixel(y, x);
            if target_unmasked(m_next, x as f32 + d[0], y as f32 + d[1]) {
                area.set(y, x, 0, 1.0); // C3
            }
        }
    }
    Ok((ReliableArea(area), err))
}

/// One propagation step: fill the reliable area of frame `t` from the
/// neighbor frame, and clear those pixels from the mask.
///
/// Returns `(filled frame, updated mask)`. Unmasked pixels are returned
/// bit-exactly; the mask update is a logical AND-NOT so it stays binary.
pub fn propagate_step(
    x_t: &Grid,
    x_next: &Grid,
    m_t: &Grid,
    m_next: &Grid,
    f_fwd: &Grid,
    f_bwd: &Grid,
    epsilon: f32,
) -> Result<(Grid, Grid)> {
    let (frame, mask, _, _) = propagate_step_full(x_t, x_next, m_t, m_next, f_fwd, f_bwd, epsilon)?;
    Ok((frame, mask))
}

/// [`propagate_step`] plus the reliable area and consistency map it used.
pub fn propagate_step_full(
    x_t: &Grid,
    x_next: &Grid,
    m_t: &Grid,
    m_next: &Grid,
    f_fwd: &Grid,
    f_bwd: &Grid,
    epsilon: f32,
) -> Result<(Grid, Grid, ReliableArea, ConsistencyMap)> {
    if !x_t.same_shape(x_next) || !x_t.same_spatial(m_t) {
        return Err(Error::DimensionMismatch("propagate_step: input dims differ".into()));
    }
    let (area, err) = reliable_area_with_error(m_t, m_next, f_fwd, f_bwd, epsilon)?;
    let warped = warp_backward(x_next, f_fwd)?;
    let (h, w, c) = (x_t.height(), x_t.width(), x_t.channels());
    let mut frame = x_t.clone();
    let mut mask = m_t.clone();
    for y in 0..h {
        for x in 0..w {
            if area.is_set(y, x) {
                frame.pixel_mut(y, x).copy_from_slice(&warped.pixel(y, x)[..c]);
                mask.set(y, x, 0, 0.0);
            }
        }
    }
    Ok((frame, mask, area, err))
}

/// One recorded fill: which pixel was filled on which pass, and the
/// consistency error the gate saw at fill time.
#[derive(Debug, Clone, Copy)]
pub struct FillEvent {
    pub frame: usize,
    pub y: u32,
    pub x: u32,
    pub pass: u32,
    pub error: f32,
}

/// Result of global propagation.
#[derive(Debug, Clone)]
pub struct PropagationState {
    pub frames: Vec<Grid>,
    pub masks: Vec<Grid>,
    /// Passes actually run (a pass is one backward plus one forward sweep).
    pub pass_count: usize,
    /// Total masked pixels remaining after each pass; non-increasing.
    pub mask_pixels_per_pass: Vec<u64>,
    pub fill_log: Vec<FillEvent>,
}

impl PropagationState {
    pub fn masked_pixels(&self) -> u64 {
        self.masks
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v != 0.0).count() as u64)
            .sum()
    }
}

/// Bidirectional multi-pass image propagation.
///
/// Each pass runs a backward sweep (frame `t` pulls from `t+1` along the
/// forward flow, `t` descending so fills chain) followed by the symmetric
/// forward sweep, updating masks promptly. Stops when a pass fills nothing
/// or after `max_passes`.
pub fn propagate_global(
    x: &[Grid],
    m: &[Grid],
    flows_fwd: &[Grid],
    flows_bwd: &[Grid],
    epsilon: f32,
    max_passes: usize,
) -> Result<PropagationState> {
    let t_len = x.len();
    if m.len() != t_len {
        return Err(Error::DimensionMismatch("propagate_global: mask count differs".into()));
    }
    if t_len == 0 {
        return Err(Error::InvalidArgument("propagate_global: empty sequence".into()));
    }
    if flows_fwd.len() + 1 != t_len || flows_bwd.len() + 1 != t_len {
        return Err(Error::DimensionMismatch(format!(
            "propagate_global: {} frames need {} flows, got {}/{}",
            t_len,
            t_len - 1,
            flows_fwd.len(),
            flows_bwd.len()
        )));
    }
    let mut frames = x.to_vec();
    let mut masks = m.to_vec();
    let mut state = PropagationState {
        frames: Vec::new(),
        masks: Vec::new(),
        pass_count: 0,
        mask_pixels_per_pass: Vec::new(),
        fill_log: Vec::new(),
    };

    for pass in 1..=max_passes.max(1) {
        let mut filled_this_pass = 0u64;
        let mut run_step = |frames: &mut Vec<Grid>,
                            masks: &mut Vec<Grid>,
                            dst: usize,
                            src: usize,
                            flow: &Grid,
                            rflow: &Grid,
                            log: &mut Vec<FillEvent>|
         -> Result<u64> {
            let (frame, mask, area, err) = propagate_step_full(
                &frames[dst], &frames[src], &masks[dst], &masks[src], flow, rflow, epsilon,
            )?;
            let mut filled = 0;
            for y in 0..area.as_grid().height() {
                for xx in 0..area.as_grid().width() {
                    if area.is_set(y, xx) {
                        filled += 1;
                        log.push(FillEvent {
                            frame: dst,
                            y: y as u32,
                            x: xx as u32,
                            pass: pass as u32,
                            error: err.at(y, xx),
                        });
                    }
                }
            }
            frames[dst] = frame;
            masks[dst] = mask;
            Ok(filled)
        };

        // Backward sweep: descending so frame t+1 is already updated.
        for t in (0..t_len.saturating_sub(1)).rev() {
            filled_this_pass += run_step(
                &mut frames,
                &mut masks,
                t,
                t + 1,
                &flows_fwd[t],
                &flows_bwd[t],
                &mut state.fill_log,
            )?;
        }
        // Forward sweep: ascending, pulling from t-1 along the backward flow.
        for t in 1..t_len {
            filled_this_pass += run_step(
                &mut frames,
                &mut masks,
                t,
                t - 1,
                &flows_bwd[t - 1],
                &flows_fwd[t - 1],
                &mut state.fill_log,
            )?;
        }

        state.pass_count = pass;
        state.mask_pixels_per_pass.push(
            masks
                .iter()
                .map(|mk| mk.data().iter().filter(|&&v| v != 0.0).count() as u64)
                .sum(),
        );
        if filled_this_pass == 0 {
            break;
        }
    }
    state.frames = frames;
    state.masks = masks;
    Ok(state)
}
