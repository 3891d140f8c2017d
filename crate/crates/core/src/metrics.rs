//! Evaluation: per-frame quality (PSNR, SSIM), temporal consistency scores,
//! the number-of-coordinates ablation, and whole-dataset reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::align::{fit_flow_staged, warp_error, FlowFitConfig, FlowParams};
use crate::dataseq::{bicubic_upscale, SequencePair};
use crate::error::{ensure_shape, Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::generator::{upscale_sequence, Generator};
use crate::align::AlignNet;
use crate::losses::eval;
use crate::resample::{multi_warp, FlowStack};
use crate::tensor::{Shape, Tensor};

/// Score reported for a zero error.
pub const DB_CAP: f64 = 99.0;
/// Border excluded from metrics that involve warping.
pub const WARP_CROP: usize = 4;

/// `−20·log₁₀(loss)`, capped at [`DB_CAP`].
pub fn loss_to_db(loss: f64) -> f64 {
    if loss <= 0.0 {
        DB_CAP
    } else {
        (-20.0 * loss.log10()).min(DB_CAP)
    }
}

fn frame_f64(f: &Frame) -> Tensor<f64> {
    f.to_tensor().cast()
}

fn check_dims(op: &'static str, a: &Frame, b: &Frame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(
            op,
            format!("{}×{} vs {}×{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// PSNR of `[1, c, h, w]` tensors over an interior window, peak 1.
pub fn psnr_tensor(a: &Tensor<f64>, b: &Tensor<f64>, crop: usize) -> Result<f64> {
    ensure_shape("psnr", a.shape(), b.shape())?;
    let s = a.shape();
    if 2 * crop >= s.h || 2 * crop >= s.w {
        return Err(Error::invalid("psnr", format!("crop {crop} leaves nothing of {s}")));
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in crop..s.h - crop {
                for x in crop..s.w - crop {
                    let d = a.at(n, c, y, x).clamp(0.0, 1.0) - b.at(n, c, y, x).clamp(0.0, 1.0);
                    se += d * d;
                    count += 1;
                }
            }
        }
    }
    let mse = se / count as f64;
    Ok(if mse <= 0.0 { DB_CAP } else { (10.0 * (1.0 / mse).log10()).min(DB_CAP) })
}

pub fn psnr(x_hat: &Frame, x: &Frame) -> Result<f64> {
    check_dims("psnr", x_hat, x)?;
    psnr_tensor(&frame_f64(x_hat), &frame_f64(x), 0)
}

/// PSNR ignoring a `crop`-pixel border.
pub fn psnr_cropped(x_hat: &Frame, x: &Frame, crop: usize) -> Result<f64> {
    check_dims("psnr", x_hat, x)?;
    psnr_tensor(&frame_f64(x_hat), &frame_f64(x), crop)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of one `h×w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// channels and all valid window positions.
pub fn ssim(x_hat: &Frame, x: &Frame) -> Result<f64> {
    check_dims("ssim", x_hat, x)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("{h}×{w} is smaller than the 11×11 window")));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let a: Vec<f64> = x_hat.plane(c).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = x.plane(c).iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
        let [ma, mb, saa, sbb, sab] = [&a, &b, &aa, &bb, &ab].map(|p| filter_valid(p, h, w, &g));
        for i in 0..ma.len() {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let va = saa[i] - mu_a * mu_a;
            let vb = sbb[i] - mu_b * mu_b;
            let cov = sab[i] - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn check_sequences(op: &'static str, est: &FrameSequence, gt: &FrameSequence) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::invalid(op, format!("{} estimated vs {} ground-truth frames", est.len(), gt.len())));
    }
    if est.len() < 2 {
        return Err(Error::invalid(op, "needs at least 2 frames"));
    }
    if est.dims() != gt.dims() {
        return Err(Error::invalid(op, "estimated and ground-truth frame sizes differ"));
    }
    Ok(())
}

/// Mean over consecutive pairs of the masked static loss, masks from `gt`.
pub fn static_loss(est: &FrameSequence, gt: &FrameSequence, alpha: f64) -> Result<f64> {
    check_sequences("static_metric", est, gt)?;
    let e: Vec<_> = est.iter().map(frame_f64).collect();
    let g: Vec<_> = gt.iter().map(frame_f64).collect();
    let mut acc = 0.0;
    for t in 1..e.len() {
        let m = eval::static_mask(&g[t], &g[t - 1], alpha)?;
        acc += eval::static_temporal(&e[t], &e[t - 1], &m)?;
    }
    Ok(acc / (e.len() - 1) as f64)
}

/// Log-scale static consistency score; higher is better.
pub fn static_metric(est: &FrameSequence, gt: &FrameSequence, alpha: f64) -> Result<f64> {
    Ok(loss_to_db(static_loss(est, gt, alpha)?))
}

/// Log-scale distance between temporal variance maps; higher is better.
pub fn variance_distance_metric(est: &FrameSequence, gt: &FrameSequence) -> Result<f64> {
    check_sequences("variance_distance_metric", est, gt)?;
    let e: Vec<_> = est.iter().map(frame_f64).collect();
    let g: Vec<_> = gt.iter().map(frame_f64).collect();
    Ok(loss_to_db(eval::temporal_statistics(&e, &g)?))
}

/// Mean PSNR between each frame and its predecessor warped by `flows[t − 1]`
/// (single-coordinate flows, one per consecutive pair), excluding a 4-pixel border.
pub fn warping_error_metric(est: &FrameSequence, flows: &[FlowStack<f64>]) -> Result<f64> {
    if est.len() < 2 {
        return Err(Error::invalid("warping_error_metric", "needs at least 2 frames"));
    }
    if flows.len() < est.len() - 1 {
        return Err(Error::invalid(
            "warping_error_metric",
            format!("missing flow for pair {} → {}", flows.len(), flows.len() + 1),
        ));
    }
    let frames: Vec<_> = est.iter().map(frame_f64).collect();
    let mut acc = 0.0;
    for t in 1..frames.len() {
        let warped = multi_warp(&frames[t - 1], &flows[t - 1])?;
        acc += psnr_tensor(&frames[t], &warped, WARP_CROP)?;
    }
    Ok(acc / (frames.len() - 1) as f64)
}

/// Distance between two frames, e.g. a perceptual metric.
pub trait PairDistance {
    fn distance(&self, a: &Frame, b: &Frame) -> Result<f64>;
}

/// Mean squared error.
#[derive(Clone, Copy, Debug, Default)]
pub struct MseDistance;

impl PairDistance for MseDistance {
    fn distance(&self, a: &Frame, b: &Frame) -> Result<f64> {
        check_dims("mse", a, b)?;
        Ok(a.data().iter().zip(b.data()).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / a.data().len() as f64)
    }
}

/// Mean over consecutive pairs of `|Λ(est pair) − Λ(gt pair)|`.
pub fn temporal_perceptual_metric(d: &dyn PairDistance, est: &FrameSequence, gt: &FrameSequence) -> Result<f64> {
    check_sequences("temporal_perceptual_metric", est, gt)?;
    let (e, g) = (est.frames(), gt.frames());
    let mut acc = 0.0;
    for t in 1..e.len() {
        acc += (d.distance(&e[t - 1], &e[t])? - d.distance(&g[t - 1], &g[t])?).abs();
    }
    Ok(acc / (e.len() - 1) as f64)
}

/// Reads a flow file: `u32 h, u32 w`, then `h·w` u values and `h·w` v values,
/// all little-endian (floats as f32).
pub fn read_flow_file(path: &Path) -> Result<FlowStack<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Frame {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    if bytes.len() < 8 {
        return Err(bad("flow file shorter than its header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * h * w {
        return Err(bad("flow file length does not match its header"));
    }
    let vals: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let s = Shape::new(1, 1, h, w);
    FlowStack::single(
        Tensor::from_vec(s, vals[..h * w].to_vec())?,
        Tensor::from_vec(s, vals[h * w..].to_vec())?,
    )
}

pub fn write_flow_file(path: &Path, u: &[f32], v: &[f32], h: usize, w: usize) -> Result<()> {
    if u.len() != h * w || v.len() != h * w {
        return Err(Error::invalid("write_flow_file", "flow length does not match dims"));
    }
    let mut out = Vec::with_capacity(8 + 8 * h * w);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for x in u.iter().chain(v) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Name of the flow file for the pair `(t − 1, t)`.
pub fn flow_file_name(t: usize) -> String {
    format!("flow_{t:06}.bin")
}

/// Reads the flows of a sequence (`flow_000001.bin` … for `frames − 1` pairs).
pub fn read_flow_dir(dir: &Path, frames: usize) -> Result<Vec<FlowStack<f64>>> {
    (1..frames).map(|t| read_flow_file(&dir.join(flow_file_name(t)))).collect()
}

/// One row of an ablation over the number of coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub n: usize,
    pub psnr: f64,
}

/// Fits `n` coordinates directly for each requested `n` (same seed and step
/// count) and reports the warp-error PSNR, border excluded.
pub fn ablate_n(frames: &FrameSequence, n_values: &[usize], steps: usize, seed: u64) -> Result<Vec<AblationRow>> {
    if frames.len() < 2 {
        return Err(Error::invalid("ablate_n", "needs a pair of frames"));
    }
    if steps < 2 {
        return Err(Error::invalid("ablate_n", "steps must be at least 2"));
    }
    if n_values.is_empty() || n_values.contains(&0) {
        return Err(Error::invalid("ablate_n", "n values must be at least 1"));
    }
    let prev = frame_f64(&frames.frames()[0]);
    let target = frame_f64(&frames.frames()[1]);
    n_values
        .iter()
        .map(|&n| {
            let fitted = fit_flow_staged(&prev, &target, n, FlowFitConfig { steps, ..Default::default() }, seed)?;
            let warped = multi_warp(&prev, &fitted.to_flow())?;
            Ok(AblationRow {
                n,
                psnr: psnr_tensor(&target, &warped, WARP_CROP)?,
            })
        })
        .collect()
}

/// Warp-error PSNR of a set of raw flow parameters.
pub fn flow_params_psnr(prev: &Frame, target: &Frame, params: &FlowParams<f64>) -> Result<f64> {
    let p = frame_f64(prev);
    let t = frame_f64(target);
    let _ = warp_error(&p, &t, params)?;
    psnr_tensor(&t, &multi_warp(&p, &params.to_flow())?, WARP_CROP)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("n,psnr_db\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6}", r.n, r.psnr);
    }
    s
}

/// Anything that maps an LR sequence to an HR sequence.
pub trait Upscaler {
    fn upscale(&self, lr: &FrameSequence) -> Result<FrameSequence>;
}

/// Trained recurrent model.
pub struct Model {
    pub gen: Generator<f32>,
    pub align: AlignNet<f32>,
}

impl Upscaler for Model {
    fn upscale(&self, lr: &FrameSequence) -> Result<FrameSequence> {
        upscale_sequence(&self.gen, &self.align, lr)
    }
}

/// Per-frame bicubic upscaling.
#[derive(Clone, Copy, Debug)]
pub struct BicubicBaseline {
    pub scale: usize,
}

impl Upscaler for BicubicBaseline {
    fn upscale(&self, lr: &FrameSequence) -> Result<FrameSequence> {
        bicubic_upscale(lr, self.scale)
    }
}

/// A test sequence with optional ground-truth flows.
#[derive(Clone, Debug)]
pub struct EvalSequence {
    pub pair: SequencePair,
    pub flows: Option<Vec<FlowStack<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub static_db: f64,
    pub var_dist_db: f64,
    pub warp_err_db: Option<f64>,
    pub t_perceptual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub sequences: Vec<SequenceMetrics>,
    pub aggregate: SequenceMetrics,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,psnr_db,ssim,static_db,var_dist_db,warp_err_db,t_perceptual\n");
        for r in self.sequences.iter().chain(std::iter::once(&self.aggregate)) {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.name,
                r.psnr,
                r.ssim,
                r.static_db,
                r.var_dist_db,
                fmt_opt(r.warp_err_db),
                fmt_opt(r.t_perceptual)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let a = &self.aggregate;
        let mut s = format!("{} sequences\n", self.sequences.len());
        let _ = writeln!(s, "PSNR        {:.3} dB", a.psnr);
        let _ = writeln!(s, "SSIM        {:.4}", a.ssim);
        let _ = writeln!(s, "static      {:.3} dB", a.static_db);
        let _ = writeln!(s, "var. dist.  {:.3} dB", a.var_dist_db);
        let _ = writeln!(s, "warp err.   {}", a.warp_err_db.map(|v| format!("{v:.3} dB")).unwrap_or_else(|| "absent (no flows)".into()));
        let _ = writeln!(
            s,
            "tPerceptual {}",
            a.t_perceptual.map(|v| format!("{v:.6}")).unwrap_or_else(|| "absent (no distance plugin)".into())
        );
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("metrics.txt");
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Settings for [`evaluate`].
pub struct EvalOptions<'a> {
    pub alpha: f64,
    pub distance: Option<&'a dyn PairDistance>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            alpha: 100.0,
            distance: None,
        }
    }
}

/// Metrics of one estimated sequence against its ground truth.
pub fn sequence_metrics(
    name: &str,
    est: &FrameSequence,
    gt: &FrameSequence,
    flows: Option<&[FlowStack<f64>]>,
    opts: &EvalOptions<'_>,
) -> Result<SequenceMetrics> {
    check_sequences("evaluate", est, gt)?;
    let mut p = 0.0;
    let mut q = 0.0;
    for (e, g) in est.iter().zip(gt) {
        p += psnr(e, g)?;
        q += ssim(e, g)?;
    }
    let frames = est.len() as f64;
    Ok(SequenceMetrics {
        name: name.to_owned(),
        psnr: p / frames,
        ssim: q / frames,
        static_db: static_metric(est, gt, opts.alpha)?,
        var_dist_db: variance_distance_metric(est, gt)?,
        warp_err_db: flows.map(|f| warping_error_metric(est, f)).transpose()?,
        t_perceptual: opts.distance.map(|d| temporal_perceptual_metric(d, est, gt)).transpose()?,
    })
}

/// Upscales every sequence and aggregates the metrics (ordered by name).
pub fn evaluate(model: &dyn Upscaler, data: &[EvalSequence], opts: &EvalOptions<'_>) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut rows = Vec::with_capacity(data.len());
    for s in data {
        let est = model.upscale(&s.pair.lr)?;
        rows.push(sequence_metrics(&s.pair.name, &est, &s.pair.hr, s.flows.as_deref(), opts)?);
    }
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    let mean = |f: &dyn Fn(&SequenceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let opt_mean = |f: &dyn Fn(&SequenceMetrics) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let aggregate = SequenceMetrics {
        name: "mean".into(),
        psnr: mean(&|r| r.psnr),
        ssim: mean(&|r| r.ssim),
        static_db: mean(&|r| r.static_db),
        var_dist_db: mean(&|r| r.var_dist_db),
        warp_err_db: opt_mean(&|r| r.warp_err_db),
        t_perceptual: opt_mean(&|r| r.t_perceptual),
    };
    Ok(MetricsReport {
        sequences: rows,
        aggregate,
    })
}
