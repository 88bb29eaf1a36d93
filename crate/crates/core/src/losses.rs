//! Training losses and image-quality metrics.
//!
//! Reconstruction is scored by mean squared error, representations by an
//! InfoNCE contrastive loss, and the total objective is their sum. PSNR and
//! MS-SSIM are evaluation-only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Default InfoNCE temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

pub fn mse_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    let n = x.len() as f64;
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Adds `mean((a - b)^2)` to the graph.
pub fn mse_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// One anchor scored against a candidate set that contains its positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchor: Tensor,
    pub candidates: Vec<Tensor>,
    /// Index of the positive within `candidates`.
    pub positive: usize,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Contrastive("temperature must be > 0".into()));
        }
        if self.positive >= self.candidates.len() {
            return Err(Error::Contrastive(format!(
                "positive index {} not among {} candidates",
                self.positive,
                self.candidates.len()
            )));
        }
        if let Some(c) = self
            .candidates
            .iter()
            .find(|c| c.len() != self.anchor.len())
        {
            return Err(Error::Contrastive(format!(
                "candidate dimension {} differs from anchor dimension {}",
                c.len(),
                self.anchor.len()
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(exp(<a,p>/t) / sum_i exp(<a,c_i>/t))`, the denominator running over
/// every candidate including the positive.
pub fn infonce_loss(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let logits: Vec<f64> = batch
        .candidates
        .iter()
        .map(|c| dot(batch.anchor.data(), c.data()) / batch.temperature)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + math::ln(logits.iter().map(|&l| math::exp(l - m)).sum::<f64>());
    // Rounding can leave a tiny negative when the positive dominates.
    Ok((lse - logits[batch.positive]).max(0.0))
}

/// Row-wise L2 normalization of a `[B, D]` node.
pub fn l2_normalize_rows(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(
            "l2_normalize_rows",
            format!("expected [B, D], got {shape:?}"),
        ));
    }
    let sq = g.square(x);
    let ss = g.sum_last(sq)?;
    let ss = g.offset(ss, 1e-12);
    let norm = g.sqrt(ss);
    let norm = g.reshape(norm, &[shape[0], 1])?;
    let norm = g.broadcast(norm, &shape)?;
    g.div(x, norm)
}

/// Batched InfoNCE: anchor `i` takes `positives[i]` as its positive and every
/// row of `positives` as a candidate. Returns the mean over anchors.
pub fn infonce_node(
    g: &mut Graph,
    anchors: NodeId,
    positives: NodeId,
    temperature: f64,
    normalize: bool,
) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::Contrastive("temperature must be > 0".into()));
    }
    if g.shape(anchors) != g.shape(positives) || g.shape(anchors).len() != 2 {
        return Err(Error::shape(
            "infonce",
            format!(
                "anchors {:?}, positives {:?}",
                g.shape(anchors),
                g.shape(positives)
            ),
        ));
    }
    let (a, p) = if normalize {
        (
            l2_normalize_rows(g, anchors)?,
            l2_normalize_rows(g, positives)?,
        )
    } else {
        (anchors, positives)
    };
    let pt = g.transpose(p)?;
    let sims = g.matmul(a, pt)?;
    let logits = g.scale(sims, 1.0 / temperature);
    let lse = g.logsumexp_last(logits)?;
    let ap = g.mul(a, p)?;
    let pos = g.sum_last(ap)?;
    let pos = g.scale(pos, 1.0 / temperature);
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean(per_anchor))
}

/// Unweighted sum of reconstruction and contrastive losses.
pub fn total_loss(mse: f64, cl: f64) -> f64 {
    mse + cl
}

/// `10 log10(1 / mse)` for signals with unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * math::log10(1.0 / mse)).min(PSNR_CAP_DB)
}

pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse_loss(x, x_hat)?))
}

/// Standard per-scale weights of MS-SSIM, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// MS-SSIM settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MsSsimConfig {
    pub scales: usize,
    pub window: usize,
    pub sigma: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl MsSsimConfig {
    /// Largest scale count whose coarsest level still fits the window.
    pub fn max_scales(&self, height: usize, width: usize) -> usize {
        let (mut h, mut w, mut n) = (height, width, 0);
        while h >= self.window && w >= self.window && n < MS_SSIM_WEIGHTS.len() {
            n += 1;
            h /= 2;
            w /= 2;
        }
        n
    }

    /// Same settings with the scale count reduced to what `height x width`
    /// supports. Images smaller than the window get a single scale with the
    /// largest odd window that fits.
    pub fn fitted(&self, height: usize, width: usize) -> Self {
        let side = height.min(width).max(1);
        let window = if side < self.window {
            side - (1 - side % 2)
        } else {
            self.window
        };
        let shrunk = Self { window, ..*self };
        Self {
            scales: self.scales.min(shrunk.max_scales(height, width)).max(1),
            ..shrunk
        }
    }

    fn weights(&self) -> Vec<f64> {
        let w = &MS_SSIM_WEIGHTS[..self.scales];
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }

    fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                math::exp(-d * d / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

fn avg_pool2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = 0.25
                * (plane[2 * y * w + 2 * x]
                    + plane[2 * y * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, ho, wo)
}

/// `(mean contrast-structure, mean SSIM)` of one plane pair.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> (f64, f64) {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, ho, wo) = filter_valid(a, h, w, k);
    let (mu_b, ..) = filter_valid(b, h, w, k);
    let (e_aa, ..) = filter_valid(&aa, h, w, k);
    let (e_bb, ..) = filter_valid(&bb, h, w, k);
    let (e_ab, ..) = filter_valid(&ab, h, w, k);
    let n = (ho * wo) as f64;
    let (mut cs_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (cs_sum / n, ssim_sum / n)
}

/// Multi-scale structural similarity of two `[C, H, W]` images with values in
/// `[0, 1]`, averaged over channels.
pub fn ms_ssim(x: &Tensor, y: &Tensor, config: &MsSsimConfig) -> Result<f64> {
    if x.shape() != y.shape() || x.shape().len() != 3 {
        return Err(Error::shape(
            "ms_ssim",
            format!(
                "expected equal [C, H, W] shapes, got {:?} and {:?}",
                x.shape(),
                y.shape()
            ),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let max_feasible = config.max_scales(h, w);
    if config.scales == 0 || config.scales > max_feasible {
        return Err(Error::TooFewPixels {
            height: h,
            width: w,
            requested: config.scales,
            max_feasible,
        });
    }
    let k = config.kernel();
    let weights = config.weights();
    let mut total = 0.0;
    for ch in 0..c {
        let mut a = x.data()[ch * h * w..(ch + 1) * h * w].to_vec();
        let mut b = y.data()[ch * h * w..(ch + 1) * h * w].to_vec();
        let (mut hh, mut ww) = (h, w);
        let mut value = 1.0;
        for (j, &wj) in weights.iter().enumerate() {
            let (cs, ssim) = ssim_terms(&a, &b, hh, ww, &k);
            let term = if j + 1 == weights.len() { ssim } else { cs };
            value *= math::powf(term.max(0.0), wj);
            if j + 1 < weights.len() {
                let (pa, h2, w2) = avg_pool2(&a, hh, ww);
                let (pb, ..) = avg_pool2(&b, hh, ww);
                a = pa;
                b = pb;
                hh = h2;
                ww = w2;
            }
        }
        total += value;
    }
    Ok((total / c as f64).clamp(0.0, 1.0))
}
