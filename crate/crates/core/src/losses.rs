//! Training losses on `[N, 1, D, H, W]` batches: MAE, three-plane SSIM,
//! three-plane Sobel edge MAE, the IMBV ratio loss and their weighted sum.
//!
//! SSIM and Sobel treat every slice along each of the three axes as an
//! independent 2D image. Orientation 0 slices along D (H x W planes),
//! orientation 1 along H (D x W planes), orientation 2 along W (D x H planes).

use crate::autodiff::Var;
use crate::error::{PvcError, Result};
use crate::tensor::{shape5, Tensor};
use crate::volume::{Label, TemplateSet, Volume};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 0.8,
            lambda_b: 0.1,
            lambda_c: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_a, self.lambda_b, self.lambda_c]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(PvcError::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square uniform window.
    pub window: usize,
    /// Dynamic range R; `C1 = (0.01 R)^2`, `C2 = (0.03 R)^2`.
    pub range: f64,
    /// Skip orientations whose planes are smaller than the window instead of
    /// failing (a warning is logged). At least one orientation must remain.
    pub skip_thin: bool,
}

impl SsimParams {
    pub fn with_range(range: f64) -> Self {
        SsimParams {
            window: 11,
            range,
            skip_thin: false,
        }
    }

    /// Range taken as the maximum of the reference batch (1 if it is not positive).
    pub fn for_reference(y: &Tensor) -> Self {
        let m = y.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::with_range(if m > 0.0 && m.is_finite() { m } else { 1.0 })
    }

    pub fn lenient(mut self) -> Self {
        self.skip_thin = true;
        self
    }

    pub fn c1(&self) -> f64 {
        (0.01 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.range).powi(2)
    }
}

/// Mean absolute error over all voxels of the batch.
pub fn mae_loss<'t>(y: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    Ok(x.sub(y)?.abs().mean())
}

/// Slices of a `[D, H, W]` volume along one axis, addressed as
/// `p * sp + r * sr + c * sc`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Planes {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    sp: usize,
    sr: usize,
    sc: usize,
}

pub(crate) const ORIENTATIONS: [&str; 3] = ["transverse", "coronal", "sagittal"];

impl Planes {
    pub fn new(dims: [usize; 3], orientation: usize) -> Planes {
        let [d, h, w] = dims;
        let (count, rows, cols, sp, sr, sc) = match orientation {
            0 => (d, h, w, h * w, w, 1),
            1 => (h, d, w, w, h * w, 1),
            _ => (w, d, h, 1, h * w, w),
        };
        Planes { count, rows, cols, sp, sr, sc }
    }

    pub fn gather(&self, vol: &[f64], p: usize, out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(vol[p * self.sp + r * self.sr + c * self.sc]);
            }
        }
    }

    pub fn scatter_add(&self, vol: &mut [f64], p: usize, plane: &[f64], scale: f64) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                vol[p * self.sp + r * self.sr + c * self.sc] += scale * plane[r * self.cols + c];
            }
        }
    }
}

/// Valid 1D box sums of width `k` over `len` strided samples.
fn box1(src: &[f64], len: usize, k: usize) -> Vec<f64> {
    let n = len + 1 - k;
    let mut out = Vec::with_capacity(n);
    let mut acc: f64 = src[..k].iter().sum();
    out.push(acc);
    for i in 1..n {
        acc += src[i + k - 1] - src[i - 1];
        out.push(acc);
    }
    out
}

/// Valid `k x k` box sums of a `rows x cols` image.
pub(crate) fn box2(img: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let (orows, ocols) = (rows + 1 - k, cols + 1 - k);
    let mut horiz = Vec::with_capacity(rows * ocols);
    for r in 0..rows {
        horiz.extend(box1(&img[r * cols..(r + 1) * cols], cols, k));
    }
    let mut out = vec![0.0; orows * ocols];
    let mut col = vec![0.0; rows];
    for c in 0..ocols {
        for r in 0..rows {
            col[r] = horiz[r * ocols + c];
        }
        for (r, v) in box1(&col, rows, k).into_iter().enumerate() {
            out[r * ocols + c] = v;
        }
    }
    out
}

/// Adjoint of a valid 1D box sum: `out[u] = sum of g[i]` over windows `i`
/// covering `u`.
fn box1_adjoint(g: &[f64], len: usize, k: usize) -> Vec<f64> {
    let n = g.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + g[i];
    }
    (0..len)
        .map(|u| {
            let lo = u.saturating_sub(k - 1);
            let hi = u.min(n - 1);
            if lo > hi {
                0.0
            } else {
                prefix[hi + 1] - prefix[lo]
            }
        })
        .collect()
}

pub(crate) fn box2_adjoint(m: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let (orows, ocols) = (rows + 1 - k, cols + 1 - k);
    let mut tall = vec![0.0; rows * ocols];
    let mut col = vec![0.0; orows];
    for c in 0..ocols {
        for r in 0..orows {
            col[r] = m[r * ocols + c];
        }
        for (r, v) in box1_adjoint(&col, rows, k).into_iter().enumerate() {
            tall[r * ocols + c] = v;
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend(box1_adjoint(&tall[r * ocols..(r + 1) * ocols], cols, k));
    }
    out
}

struct PlaneSsim {
    sum: f64,
    windows: usize,
    grad_x: Vec<f64>,
    grad_y: Vec<f64>,
}

/// Sum of window SSIMs over one plane plus the gradients of that sum.
fn plane_ssim(x: &[f64], y: &[f64], rows: usize, cols: usize, p: &SsimParams) -> PlaneSsim {
    let k = p.window;
    let n = (k * k) as f64;
    let (c1, c2) = (p.c1(), p.c2());
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let sx = box2(x, rows, cols, k);
    let sy = box2(y, rows, cols, k);
    let sxx = box2(&sq(x, x), rows, cols, k);
    let syy = box2(&sq(y, y), rows, cols, k);
    let sxy = box2(&sq(x, y), rows, cols, k);
    let nw = sx.len();
    let mut sum = 0.0;
    let mut coef = [vec![0.0; nw], vec![0.0; nw], vec![0.0; nw], vec![0.0; nw]];
    for i in 0..nw {
        let (mx, my) = (sx[i] / n, sy[i] / n);
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        let a = 2.0 * mx * my + c1;
        let b = 2.0 * cxy + c2;
        let c = mx * mx + my * my + c1;
        let d = vx + vy + c2;
        let s = a * b / (c * d);
        sum += s;
        let ds_dmx = 2.0 * my * b / (c * d) - s * 2.0 * mx / c;
        let ds_dmy = 2.0 * mx * b / (c * d) - s * 2.0 * my / c;
        let ds_dv = -s / d;
        let ds_dc = 2.0 * a / (c * d);
        // d/dx_j = (alpha_x + beta * x_j + gamma * y_j) / n, and symmetrically for y
        coef[0][i] = ds_dmx - 2.0 * mx * ds_dv - my * ds_dc;
        coef[1][i] = ds_dmy - 2.0 * my * ds_dv - mx * ds_dc;
        coef[2][i] = 2.0 * ds_dv;
        coef[3][i] = ds_dc;
    }
    let [ax, ay, beta, gamma] = coef.map(|m| box2_adjoint(&m, rows, cols, k));
    let grad_x = (0..rows * cols).map(|j| (ax[j] + beta[j] * x[j] + gamma[j] * y[j]) / n).collect();
    let grad_y = (0..rows * cols).map(|j| (ay[j] + beta[j] * y[j] + gamma[j] * x[j]) / n).collect();
    PlaneSsim {
        sum,
        windows: nw,
        grad_x,
        grad_y,
    }
}

/// Orientations usable with `p`'s window, or a window error.
fn usable_orientations(dims: [usize; 3], p: &SsimParams) -> Result<Vec<usize>> {
    if p.window == 0 {
        return Err(PvcError::Window("window must be positive".into()));
    }
    let mut keep = Vec::new();
    for o in 0..3 {
        let pl = Planes::new(dims, o);
        if pl.rows < p.window || pl.cols < p.window {
            let msg = format!(
                "{} planes are {}x{}, smaller than the {}x{} window",
                ORIENTATIONS[o], pl.rows, pl.cols, p.window, p.window
            );
            if !p.skip_thin {
                return Err(PvcError::Window(msg));
            }
            log::warn!("ssim: skipping {msg}");
        } else {
            keep.push(o);
        }
    }
    if keep.is_empty() {
        return Err(PvcError::Window(format!("no orientation of {dims:?} fits the window")));
    }
    Ok(keep)
}

/// Mean window SSIM per orientation, averaged over orientations, plus the
/// gradients of that value w.r.t. both inputs.
pub(crate) fn ssim_forward(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if x.shape() != y.shape() {
        return Err(PvcError::dim("ssim", format!("shapes differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let [n, c, d, h, w] = shape5("ssim", x.shape())?;
    let dims = [d, h, w];
    let orients = usable_orientations(dims, p)?;
    let vol = d * h * w;
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; x.len()];
    let mut total = 0.0;
    let (mut xp, mut yp) = (Vec::new(), Vec::new());
    for &o in &orients {
        let pl = Planes::new(dims, o);
        let windows = (pl.rows + 1 - p.window) * (pl.cols + 1 - p.window) * pl.count * n * c;
        let scale = 1.0 / (windows as f64 * orients.len() as f64);
        let mut sum = 0.0;
        for item in 0..n * c {
            let xs = &x.data()[item * vol..(item + 1) * vol];
            let ys = &y.data()[item * vol..(item + 1) * vol];
            for plane in 0..pl.count {
                pl.gather(xs, plane, &mut xp);
                pl.gather(ys, plane, &mut yp);
                let r = plane_ssim(&xp, &yp, pl.rows, pl.cols, p);
                debug_assert!(r.windows > 0);
                sum += r.sum;
                pl.scatter_add(&mut gx[item * vol..(item + 1) * vol], plane, &r.grad_x, scale);
                pl.scatter_add(&mut gy[item * vol..(item + 1) * vol], plane, &r.grad_y, scale);
            }
        }
        total += sum / windows as f64;
    }
    Ok((total / orients.len() as f64, gx, gy))
}

/// Three-plane SSIM of `x` against reference `y` (a scalar in `[-1, 1]`).
pub fn ssim_3plane<'t>(y: Var<'t>, x: Var<'t>, p: &SsimParams) -> Result<Var<'t>> {
    let (xv, yv) = (x.rc(), y.rc());
    let (s, gx, gy) = ssim_forward(&xv, &yv, p)?;
    let shape = xv.shape().to_vec();
    Ok(x.tape.record(
        "ssim_3plane",
        Tensor::scalar(s),
        &[y, x],
        Box::new(move |g, needs| {
            let g = g.data()[0];
            let grad = |src: &Vec<f64>| Tensor::from_parts(shape.clone(), src.iter().map(|v| g * v).collect());
            vec![needs[0].then(|| grad(&gy)), needs[1].then(|| grad(&gx))]
        }),
    ))
}

/// `1 - ssim_3plane(y, x)`.
pub fn ssim_loss<'t>(y: Var<'t>, x: Var<'t>, p: &SsimParams) -> Result<Var<'t>> {
    Ok(ssim_3plane(y, x, p)?.scalar_mul(-1.0).add_scalar(1.0))
}

const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
const DIFF: [f64; 3] = [-1.0, 0.0, 1.0];

/// Axis pairs (row, column) of the three plane orientations.
const PLANE_AXES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

fn axis_walk(dims: [usize; 3], axis: usize) -> (usize, usize, usize) {
    // (length, stride, number of independent lines)
    let strides = [dims[1] * dims[2], dims[2], 1];
    (dims[axis], strides[axis], dims.iter().product::<usize>() / dims[axis])
}

/// 3-tap cross-correlation along `axis` with edge-duplicating borders.
fn filter_axis(src: &[f64], dims: [usize; 3], axis: usize, taps: [f64; 3], adjoint: bool) -> Vec<f64> {
    let (len, stride, _) = axis_walk(dims, axis);
    let mut out = vec![0.0; src.len()];
    for base in 0..src.len() {
        if (base / stride) % len != 0 {
            continue;
        }
        for i in 0..len {
            let nb = [i.saturating_sub(1), i, (i + 1).min(len - 1)];
            for (t, &j) in taps.iter().zip(&nb) {
                if adjoint {
                    out[base + j * stride] += t * src[base + i * stride];
                } else {
                    out[base + i * stride] += t * src[base + j * stride];
                }
            }
        }
    }
    out
}

/// The six Sobel maps (x then y component for each orientation) of every
/// channel volume, each as `(row taps, column taps)`.
fn sobel_filters() -> Vec<(usize, usize, [f64; 3], [f64; 3])> {
    let mut f = Vec::new();
    for (ar, ac) in PLANE_AXES {
        f.push((ar, ac, SMOOTH, DIFF));
        f.push((ar, ac, DIFF, SMOOTH));
    }
    f
}

impl<'t> Var<'t> {
    /// `[N, C, D, H, W] -> [N, 6C, D, H, W]`: Sobel responses of every
    /// channel for the three plane orientations, x and y component each.
    pub fn sobel_maps(self) -> Result<Var<'t>> {
        let x = self.rc();
        let [n, c, d, h, w] = shape5("sobel", x.shape())?;
        let dims = [d, h, w];
        let vol = d * h * w;
        let filters = sobel_filters();
        let mut out = Vec::with_capacity(n * c * filters.len() * vol);
        for item in x.data().chunks(vol) {
            for &(ar, ac, tr, tc) in &filters {
                let once = filter_axis(item, dims, ac, tc, false);
                out.extend(filter_axis(&once, dims, ar, tr, false));
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(
            "sobel_maps",
            Tensor::from_parts(vec![n, c * filters.len(), d, h, w], out),
            &[self],
            Box::new(move |g, _| {
                let mut grad = Vec::with_capacity(n * c * vol);
                for item in g.data().chunks(filters.len() * vol) {
                    let mut acc = vec![0.0; vol];
                    for (m, &(ar, ac, tr, tc)) in item.chunks(vol).zip(&filters) {
                        let back = filter_axis(m, dims, ar, tr, true);
                        for (a, v) in acc.iter_mut().zip(filter_axis(&back, dims, ac, tc, true)) {
                            *a += v;
                        }
                    }
                    grad.extend(acc);
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), grad))]
            }),
        ))
    }
}

/// Mean over orientations of `(mean|Gx(X) - Gx(Y)| + mean|Gy(X) - Gy(Y)|) / 2`.
pub fn sobel_loss<'t>(y: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    Ok(x.sub(y)?.sobel_maps()?.abs().mean())
}

/// Myocardium / blood-pool ratio of mean activities.
pub fn imbv(volume: &Volume, t: &TemplateSet) -> Result<f64> {
    t.check_matches(volume)?;
    let mean = |label: Label| -> Result<f64> {
        let (mut s, mut k) = (0.0, 0usize);
        for (v, &l) in volume.data.iter().zip(&t.labels) {
            if l == label {
                s += v;
                k += 1;
            }
        }
        if k == 0 {
            return Err(PvcError::DegenerateRegion(format!("{} region is empty", label.name())));
        }
        Ok(s / k as f64)
    };
    let myo = mean(Label::Myocardium)?;
    let bp = mean(Label::BloodPool)?;
    if bp == 0.0 {
        return Err(PvcError::DegenerateRegion("blood pool mean is zero".into()));
    }
    Ok(myo / bp)
}

/// Per-item myocardium and blood-pool voxel lists for a batch.
#[derive(Clone, Debug)]
pub struct ImbvMasks {
    pub myocardium: Vec<Vec<usize>>,
    pub blood_pool: Vec<Vec<usize>>,
}

impl ImbvMasks {
    pub fn new(templates: &[&TemplateSet]) -> Result<Self> {
        let mut m = ImbvMasks {
            myocardium: Vec::new(),
            blood_pool: Vec::new(),
        };
        for (i, t) in templates.iter().enumerate() {
            let (myo, bp) = (t.mask(Label::Myocardium), t.mask(Label::BloodPool));
            if myo.is_empty() || bp.is_empty() {
                return Err(PvcError::DegenerateRegion(format!(
                    "templates of batch item {i} lack myocardium or blood pool"
                )));
            }
            m.myocardium.push(myo);
            m.blood_pool.push(bp);
        }
        Ok(m)
    }
}

/// Differentiable per-item IMBV of a `[N, 1, D, H, W]` batch, shape `[N]`.
pub fn imbv_batch<'t>(x: Var<'t>, masks: &ImbvMasks) -> Result<Var<'t>> {
    let myo = x.masked_mean(&masks.myocardium)?;
    let bp = x.masked_mean(&masks.blood_pool)?;
    if let Some(i) = bp.value().data().iter().position(|&v| v == 0.0) {
        return Err(PvcError::DegenerateRegion(format!("blood pool mean is zero for batch item {i}")));
    }
    myo.div(bp)
}

/// Batch mean of `|IMBV(X) - IMBV(Y)|`.
pub fn imbv_loss<'t>(y: Var<'t>, x: Var<'t>, masks: &ImbvMasks) -> Result<Var<'t>> {
    Ok(imbv_batch(x, masks)?.sub(imbv_batch(y, masks)?)?.abs().mean())
}

/// Composite loss and the value of each component.
#[derive(Clone, Debug)]
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub mae: f64,
    pub ssim: f64,
    pub sobel: f64,
    /// `None` when the IMBV weight is zero (term not evaluated).
    pub imbv: Option<f64>,
}

/// `MAE + la * (1 - SSIM) + lb * Sobel + lc * IMBV`. The IMBV term is skipped
/// entirely when `lc == 0`, so `masks` may then be `None`.
pub fn composite_loss<'t>(
    y: Var<'t>,
    x: Var<'t>,
    masks: Option<&ImbvMasks>,
    w: &LossWeights,
    p: &SsimParams,
) -> Result<LossBreakdown<'t>> {
    w.validate()?;
    let mae = mae_loss(y, x)?;
    let ssim = ssim_loss(y, x, p)?;
    let sobel = sobel_loss(y, x)?;
    let mut total = mae
        .add(ssim.scalar_mul(w.lambda_a))?
        .add(sobel.scalar_mul(w.lambda_b))?;
    let mut imbv_value = None;
    if w.lambda_c != 0.0 {
        let masks = masks.ok_or_else(|| PvcError::Contract("IMBV weight is non-zero but no templates were given".into()))?;
        let l = imbv_loss(y, x, masks)?;
        imbv_value = Some(l.item()?);
        total = total.add(l.scalar_mul(w.lambda_c))?;
    }
    Ok(LossBreakdown {
        total,
        mae: mae.item()?,
        ssim: ssim.item()?,
        sobel: sobel.item()?,
        imbv: imbv_value,
    })
}
