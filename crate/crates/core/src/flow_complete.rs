//! Completing corrupted flow fields.
//!
//! Two routes: a deterministic Laplacian baseline that solves the discrete
//! Laplace equation on the masked region (no learning, exact for harmonic
//! fields, which includes every affine flow), and the recurrent completion
//! network as a forward pass over seeded or loaded weights.

use crate::align::{align_plain, conv_stack, relu, AlignmentWeights};
use crate::error::{Error, Result};
use crate::grid::{conv2d, resize, Grid, Kernel, ResizeMode};
use crate::util;

/// Solve the discrete Laplace equation per channel on the masked region,
/// with Dirichlet boundary values taken from unmasked pixels. Unmasked
/// pixels are returned unchanged.
///
/// The linear system uses the 4-neighbor stencil; pixels on the grid border
/// use their in-grid neighbors only. Conjugate gradients run in `f64` until
/// the max-norm residual drops below 1e-8, warm-started from the current
/// grid content so re-solving a solved system is a no-op.
pub fn laplace_fill(g: &Grid, mask: &Grid) -> Result<Grid> {
    if !mask.same_spatial(g) || mask.channels() != 1 {
        return Err(Error::DimensionMismatch("laplace_fill: mask dims differ".into()));
    }
    let (h, w) = (g.height(), g.width());
    let mut unknown_id = vec![-1i64; h * w];
    let mut unknowns: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.at(y, x, 0) != 0.0 {
                unknown_id[y * w + x] = unknowns.len() as i64;
                unknowns.push((y, x));
            }
        }
    }
    if unknowns.is_empty() {
        return Ok(g.clone());
    }
    if unknowns.len() == h * w {
        return Err(Error::FullyMasked);
    }

    let n = unknowns.len();
    let neighbors = |y: usize, x: usize| {
        let mut out = [(0usize, 0usize); 4];
        let mut count = 0;
        if y > 0 {
            out[count] = (y - 1, x);
            count += 1;
        }
        if y + 1 < h {
            out[count] = (y + 1, x);
            count += 1;
        }
        if x > 0 {
            out[count] = (y, x - 1);
            count += 1;
        }
        if x + 1 < w {
            out[count] = (y, x + 1);
            count += 1;
        }
        (out, count)
    };

    let apply = |v: &[f64], out: &mut [f64]| {
        for (i, &(y, x)) in unknowns.iter().enumerate() {
            let (nb, count) = neighbors(y, x);
            let mut acc = count as f64 * v[i];
            for &(ny, nx) in &nb[..count] {
                let j = unknown_id[ny * w + nx];
                if j >= 0 {
                    acc -= v[j as usize];
                }
            }
            out[i] = acc;
        }
    };

    let mut out = g.clone();
    let channel_solutions = util::map_indexed(
        &(0..g.channels()).collect::<Vec<_>>(),
        |_, &c| -> Vec<f64> {
            let mut b = vec![0.0f64; n];
            for (i, &(y, x)) in unknowns.iter().enumerate() {
                let (nb, count) = neighbors(y, x);
                for &(ny, nx) in &nb[..count] {
                    if unknown_id[ny * w + nx] < 0 {
                        b[i] += g.at(ny, nx, c) as f64;
                    }
                }
            }
            let mut x0: Vec<f64> =
                unknowns.iter().map(|&(y, x)| g.at(y, x, c) as f64).collect();
            conjugate_gradient(&apply, &b, &mut x0, 1e-8, 8 * n + 200);
            x0
        },
    );
    for (c, sol) in channel_solutions.iter().enumerate() {
        for (i, &(y, x)) in unknowns.iter().enumerate() {
            out.set(y, x, c, sol[i] as f32);
        }
    }
    Ok(out)
}

/// Unpreconditioned CG on an SPD operator, stopping on max-norm residual.
fn conjugate_gradient<F: Fn(&[f64], &mut [f64])>(
    apply: &F,
    b: &[f64],
    x: &mut [f64],
    tol_inf: f64,
    max_iters: usize,
) {
    let n = b.len();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..max_iters {
        if r.iter().all(|v| v.abs() <= tol_inf) {
            return;
        }
        apply(&p, &mut ax);
        let pap: f64 = p.iter().zip(&ax).map(|(pi, ai)| pi * ai).sum();
        if pap <= 0.0 {
            return;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ax[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
}

/// Laplacian flow completion: harmonic interpolation of the two displacement
/// channels across the masked region. If the whole frame is masked, the
/// `neighbor` field is copied instead.
pub fn complete_flow_laplacian(
    f: &Grid,
    mask: &Grid,
    neighbor: Option<&Grid>,
) -> Result<Grid> {
    if f.channels() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "complete_flow_laplacian: flow has {} channels",
            f.channels()
        )));
    }
    match laplace_fill(f, mask) {
        Err(Error::FullyMasked) => match neighbor {
            Some(nb) if nb.same_shape(f) => Ok(nb.clone()),
            Some(_) => Err(Error::DimensionMismatch(
                "complete_flow_laplacian: neighbor dims differ".into(),
            )),
            None => Err(Error::FullyMasked),
        },
        other => other,
    }
}

/// Weights of the recurrent flow-completion network.
///
/// The encoder is a chain of stride-2 convolutions (ReLU after each) taking
/// `(flow dx, flow dy, mask)` down to 1/8 resolution. Bidirectional plain
/// deformable alignment propagates features along time; the two directions
/// are fused by a 1x1 convolution, and the decoder upsamples back to full
/// resolution with a final linear layer emitting the two flow channels.
#[derive(Debug, Clone)]
pub struct RfcWeights {
    pub encoder: Vec<Kernel>,
    pub align_fwd: AlignmentWeights,
    pub align_bwd: AlignmentWeights,
    pub fuse: Kernel,
    pub decoder: Vec<Kernel>,
}

impl RfcWeights {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() != 3 {
            return Err(Error::WeightShape(format!(
                "rfc encoder must have 3 stride-2 layers for the x8 chain, has {}",
                self.encoder.len()
            )));
        }
        if self.encoder[0].in_channels != 3 {
            return Err(Error::WeightShape(
                "rfc encoder input must be 3 channels (flow + mask)".into(),
            ));
        }
        let feat = self.encoder.last().unwrap().out_channels;
        self.align_fwd.validate(feat, 2 * feat)?;
        self.align_bwd.validate(feat, 2 * feat)?;
        if self.fuse.in_channels != 2 * feat || self.fuse.out_channels != feat {
            return Err(Error::WeightShape("rfc fuse kernel must map 2C -> C".into()));
        }
        if self.decoder.len() != 4 {
            return Err(Error::WeightShape(
                "rfc decoder must have 3 upsample layers plus the output layer".into(),
            ));
        }
        if self.decoder.last().unwrap().out_channels != 2 {
            return Err(Error::WeightShape("rfc decoder must emit 2 flow channels".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.last().map(|k| k.out_channels).unwrap_or(0)
    }
}

fn encode_flow(flow: &Grid, mask: &Grid, encoder: &[Kernel]) -> Result<Grid> {
    let mut cur = Grid::concat_channels(&[flow, mask])?;
    for k in encoder {
        cur = conv2d(&cur, k, 2, (k.kh - 1) / 2)?;
        for v in cur.data_mut() {
            *v = relu(*v);
        }
    }
    Ok(cur)
}

fn decode_flow(feat: &Grid, decoder: &[Kernel]) -> Result<Grid> {
    let mut cur = feat.clone();
    let n = decoder.len();
    for (i, k) in decoder.iter().enumerate() {
        if i + 1 < n {
            cur = resize(&cur, 2, 1, ResizeMode::Bilinear)?;
        }
        cur = conv2d(&cur, k, 1, (k.kh - 1) / 2)?;
        if i + 1 < n {
            for v in cur.data_mut() {
                *v = relu(*v);
            }
        }
    }
    Ok(cur)
}

/// Recurrent flow completion over one temporal direction's flow list.
///
/// Masked flow regions are expected to be zeroed on input. Output flow
/// outside the masks is the input flow unchanged (hard compositing); only
/// masked pixels take the decoded values.
pub fn rfc_forward(flows: &[Grid], masks: &[Grid], w: &RfcWeights) -> Result<Vec<Grid>> {
    w.validate()?;
    if flows.len() < 2 {
        return Err(Error::InvalidArgument(
            "rfc_forward: need at least 2 flow fields".into(),
        ));
    }
    if masks.len() != flows.len() {
        return Err(Error::DimensionMismatch(format!(
            "rfc_forward: {} masks for {} flows",
            masks.len(),
            flows.len()
        )));
    }
    let (h, wd) = (flows[0].height(), flows[0].width());
    if h % 8 != 0 || wd % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "rfc_forward: dims {h}x{wd} must be divisible by 8"
        )));
    }
    for (f, m) in flows.iter().zip(masks) {
        if f.height() != h || f.width() != wd || f.channels() != 2 {
            return Err(Error::DimensionMismatch("rfc_forward: flow dims differ".into()));
        }
        if !m.same_spatial(f) || m.channels() != 1 {
            return Err(Error::DimensionMismatch("rfc_forward: mask dims differ".into()));
        }
    }

    let feats = util::try_map_indexed(flows, |t, f| encode_flow(f, &masks[t], &w.encoder))?;
    let t_len = feats.len();

    let mut bwd: Vec<Option<Grid>> = vec![None; t_len];
    bwd[t_len - 1] = Some(feats[t_len - 1].clone());
    for t in (0..t_len - 1).rev() {
        let prev = bwd[t + 1].take().unwrap();
        let aligned = align_plain(&feats[t], &prev, &w.align_bwd)?;
        bwd[t + 1] = Some(prev);
        bwd[t] = Some(aligned);
    }
    let mut fwd: Vec<Option<Grid>> = vec![None; t_len];
    fwd[0] = Some(feats[0].clone());
    for t in 1..t_len {
        let prev = fwd[t - 1].take().unwrap();
        let aligned = align_plain(&feats[t], &prev, &w.align_fwd)?;
        fwd[t - 1] = Some(prev);
        fwd[t] = Some(aligned);
    }

    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let fused = conv2d(
            &Grid::concat_channels(&[bwd[t].as_ref().unwrap(), fwd[t].as_ref().unwrap()])?,
            &w.fuse,
            1,
            0,
        )?;
        let decoded = decode_flow(&fused, &w.decoder)?;
        // Hard compositing: known flow survives exactly.
        let mask = &masks[t];
        out.push(Grid::from_fn(h, wd, 2, |y, x, c| {
            if mask.at(y, x, 0) != 0.0 {
                decoded.at(y, x, c)
            } else {
                flows[t].at(y, x, c)
            }
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center_mask(h: usize, w: usize, half: usize) -> Grid {
        Grid::from_fn(h, w, 1, |y, x, _| {
            let dy = y as isize - h as isize / 2;
            let dx = x as isize - w as isize / 2;
            if dy.unsigned_abs() < half && dx.unsigned_abs() < half {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn constant_flow_recovered_exactly() {
        let f = Grid::from_fn(16, 16, 2, |_, _, c| if c == 0 { 2.5 } else { -1.0 });
        let m = center_mask(16, 16, 4);
        let out = complete_flow_laplacian(&f, &m, None).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_flow_recovered() {
        let f = Grid::from_fn(24, 20, 2, |y, x, c| {
            if c == 0 {
                0.1 * x as f32 + 0.2 * y as f32 + 1.0
            } else {
                -0.05 * x as f32 + 2.0
            }
        });
        let m = center_mask(24, 20, 6);
        let out = complete_flow_laplacian(&f, &m, None).unwrap();
        let mut max_err = 0.0f32;
        for (a, b) in out.data().iter().zip(f.data()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err < 1e-4, "max err {max_err}");
    }

    #[test]
    fn empty_mask_is_identity() {
        let f = Grid::from_fn(8, 8, 2, |y, x, c| (y * 8 + x + c) as f32 * 0.3);
        let out = complete_flow_laplacian(&f, &Grid::new(8, 8, 1), None).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn fully_masked_copies_neighbor() {
        let f = Grid::new(6, 6, 2);
        let nb = Grid::constant(6, 6, 2, 3.0);
        let full = Grid::constant(6, 6, 1, 1.0);
        let out = complete_flow_laplacian(&f, &full, Some(&nb)).unwrap();
        assert_eq!(out, nb);
        assert!(matches!(
            complete_flow_laplacian(&f, &full, None),
            Err(Error::FullyMasked)
        ));
    }

    #[test]
    fn mean_value_property_inside_mask() {
        let f = Grid::from_fn(20, 20, 2, |y, x, c| {
            ((y * 7 + x * 13 + c * 3) % 17) as f32 * 0.21 - 1.0
        });
        let m = center_mask(20, 20, 5);
        let out = laplace_fill(&f, &m).unwrap();
        for y in 1..19 {
            for x in 1..19 {
                if m.at(y, x, 0) == 0.0 {
                    continue;
                }
                for c in 0..2 {
                    let avg = 0.25
                        * (out.at(y - 1, x, c)
                            + out.at(y + 1, x, c)
                            + out.at(y, x - 1, c)
                            + out.at(y, x + 1, c));
                    assert!((out.at(y, x, c) - avg).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn completion_is_idempotent() {
        let f = Grid::from_fn(18, 14, 2, |y, x, c| ((y ^ x) + c) as f32 * 0.17 - 0.8);
        let m = center_mask(18, 14, 4);
        let once = laplace_fill(&f, &m).unwrap();
        let twice = laplace_fill(&once, &m).unwrap();
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
