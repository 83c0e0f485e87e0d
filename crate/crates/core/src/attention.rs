//! Layer-customized attention kernels.
//!
//! Three kernels operate on latent planes laid out `[frames, rows, cols, channels]`:
//!
//! * guided spatial cross-attention: pixel queries against prompt tokens, with
//!   pixel/token pairs that disagree about the box masked out and a Gaussian
//!   additive boost on in-box pixels attending to foreground tokens;
//! * oriented attention-sharing: per frame and pixel, the foreground and
//!   background latents form a two-token sequence whose attention map is
//!   scaled elementwise inside the box;
//! * attention isolation: temporal self-attention run separately per plane.
//!
//! Rows are reduced in a fixed order so every kernel is bitwise deterministic.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene::{scale_to_latent_grid, BBoxTrack, CellRange};

/// Guidance strengths and the fraction of the schedule each guidance is active for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct GuidanceConfig<T> {
    /// Influence of the additive Gaussian mask in cross-attention.
    pub lambda: T,
    /// Additive-mask amplification on key-frames.
    pub gamma_key: T,
    /// Within-plane weight inside the box for attention-sharing.
    pub mu1: T,
    /// Cross-plane weight inside the box for attention-sharing.
    pub mu2: T,
    /// Switch point of the two-stage conditioning, as a fraction of the step count.
    pub t_eps_fraction: T,
    pub cross_attn_window: T,
    pub oas_window: T,
}

impl<T: Real> Default for GuidanceConfig<T> {
    fn default() -> Self {
        GuidanceConfig {
            lambda: T::lit(2.5),
            gamma_key: T::lit(1.2),
            mu1: T::lit(1.5),
            mu2: T::lit(2.0),
            t_eps_fraction: T::lit(0.5),
            cross_attn_window: T::lit(0.10),
            oas_window: T::lit(0.50),
        }
    }
}

impl<T: Real> GuidanceConfig<T> {
    /// All guidance terms neutral: `λ = 0`, `γ_key = 1`, `μ1 = μ2 = 1`.
    pub fn neutral() -> Self {
        GuidanceConfig {
            lambda: T::zero(),
            gamma_key: T::one(),
            mu1: T::one(),
            mu2: T::one(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: T, ok: bool| {
            if v.is_finite() && ok {
                Ok(())
            } else {
                Err(Error::Invalid(format!("guidance.{name}: {v} out of range")))
            }
        };
        let unit = |v: T| v >= T::zero() && v <= T::one();
        check("lambda", self.lambda, self.lambda >= T::zero())?;
        check("gamma_key", self.gamma_key, self.gamma_key >= T::one())?;
        check("mu1", self.mu1, self.mu1 >= T::one())?;
        check("mu2", self.mu2, self.mu2 >= T::one())?;
        check("t_eps_fraction", self.t_eps_fraction, unit(self.t_eps_fraction))?;
        check("cross_attn_window", self.cross_attn_window, unit(self.cross_attn_window))?;
        check("oas_window", self.oas_window, unit(self.oas_window))?;
        Ok(())
    }

    /// Number of leading steps (counted from `t = T` downward) with guided cross-attention.
    pub fn cross_attn_steps(&self, total_steps: usize) -> usize {
        fraction_of(self.cross_attn_window, total_steps)
    }

    pub fn oas_steps(&self, total_steps: usize) -> usize {
        fraction_of(self.oas_window, total_steps)
    }

    /// Timestep at and below which the second conditioning stage applies.
    pub fn t_eps(&self, total_steps: usize) -> usize {
        fraction_of(self.t_eps_fraction, total_steps)
    }

    pub fn cross_attn_active(&self, t: usize, total_steps: usize) -> bool {
        step_number(t, total_steps) <= self.cross_attn_steps(total_steps)
    }

    pub fn oas_active(&self, t: usize, total_steps: usize) -> bool {
        step_number(t, total_steps) <= self.oas_steps(total_steps)
    }

    /// `γ(f0)`: `γ_key` on key-frames, 1 elsewhere.
    pub fn frame_gamma(&self, is_key: bool) -> T {
        if is_key {
            self.gamma_key
        } else {
            T::one()
        }
    }
}

fn fraction_of<T: Real>(fraction: T, total_steps: usize) -> usize {
    let n = (fraction * T::lit(total_steps as f64)).round();
    n.to_usize().unwrap_or(0).min(total_steps)
}

/// 1-based position of timestep `t` in the run `T, T-1, ..., 1`.
fn step_number(t: usize, total_steps: usize) -> usize {
    total_steps + 1 - t
}

/// Prompt token embeddings and the positions belonging to the foreground prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding<T> {
    /// `[n_tokens, d_text]`
    pub tokens: Array2<T>,
    pub fg_token_indices: BTreeSet<usize>,
}

impl<T: Real> PromptEmbedding<T> {
    pub fn new(tokens: Array2<T>, fg_token_indices: BTreeSet<usize>) -> Result<Self> {
        let n = tokens.nrows();
        if tokens.ncols() == 0 {
            return Err(Error::Shape("prompt embedding width must be >= 1".into()));
        }
        if let Some(&bad) = fg_token_indices.iter().find(|&&i| i >= n) {
            return Err(Error::Range(format!(
                "foreground token index {bad} outside [0, {n})"
            )));
        }
        Ok(PromptEmbedding {
            tokens,
            fg_token_indices,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Foreground and background latent planes, each `[frames, rows, cols, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPlanes<T> {
    pub fg: Array4<T>,
    pub bg: Array4<T>,
}

impl<T: Real> AttentionPlanes<T> {
    pub fn new(fg: Array4<T>, bg: Array4<T>) -> Result<Self> {
        if fg.shape() != bg.shape() {
            return Err(Error::Shape(format!(
                "planes differ: fg {:?} vs bg {:?}",
                fg.shape(),
                bg.shape()
            )));
        }
        Ok(AttentionPlanes { fg, bg })
    }
}

/// Query/key/value projection matrices of a single-head attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections<T> {
    /// `[d_query_in, d]`
    pub query: Array2<T>,
    /// `[d_kv_in, d]`
    pub key: Array2<T>,
    /// `[d_kv_in, d_v]`
    pub value: Array2<T>,
}

impl<T: Real> Projections<T> {
    pub fn head_dim(&self) -> usize {
        self.query.ncols()
    }

    fn check(&self) -> Result<()> {
        if self.key.ncols() != self.query.ncols() || self.key.nrows() != self.value.nrows() {
            return Err(Error::Shape(format!(
                "projection mismatch: q {:?}, k {:?}, v {:?}",
                self.query.shape(),
                self.key.shape(),
                self.value.shape()
            )));
        }
        Ok(())
    }
}

/// A box mapped onto a `height × width` latent grid, addressed by flattened
/// pixel index `row * width + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub cells: CellRange,
    pub height: usize,
    pub width: usize,
}

impl BoxRegion {
    pub fn new(cells: CellRange, height: usize, width: usize) -> Result<Self> {
        if cells.is_empty() || cells.row1 > height || cells.col1 > width {
            return Err(Error::Range(format!(
                "cell range {cells:?} not a non-empty subset of {height}x{width}"
            )));
        }
        Ok(BoxRegion {
            cells,
            height,
            width,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn contains_pixel(&self, i: usize) -> bool {
        self.cells.contains(i / self.width, i % self.width)
    }
}

/// Membership class of a (pixel, token) pair: how many of "pixel in box" and
/// "token in the foreground prompt" hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairClass {
    /// Neither holds.
    Outside,
    /// Exactly one holds; masked out of cross-attention.
    Mismatched,
    /// Both hold; receives the additive boost.
    Matched,
}

impl PairClass {
    #[inline]
    fn classify(in_box: bool, fg_token: bool) -> PairClass {
        match (in_box, fg_token) {
            (true, true) => PairClass::Matched,
            (false, false) => PairClass::Outside,
            _ => PairClass::Mismatched,
        }
    }
}

/// Labels every (pixel, token) pair. Returns `[n_pixels, n_tokens]`.
pub fn classify_pairs(
    region: &BoxRegion,
    fg_token_indices: &BTreeSet<usize>,
    n_tokens: usize,
) -> Array2<PairClass> {
    let fg: Vec<bool> = (0..n_tokens)
        .map(|j| fg_token_indices.contains(&j))
        .collect();
    Array2::from_shape_fn((region.n_pixels(), n_tokens), |(i, j)| {
        PairClass::classify(region.contains_pixel(i), fg[j])
    })
}

/// Gaussian weight of one in-box cell.
///
/// Separable, centered on the middle of the cell range, with `σ = extent / 4`
/// per axis where `extent` is the distance between the outermost cell centers.
/// The peak is 1.0 (reached exactly when the extent is even, i.e. the cell count
/// is odd) and the outermost cells along an axis sit at `exp(-2)` on that axis.
pub fn gaussian_weight<T: Real>(cells: &CellRange, row: usize, col: usize) -> T {
    let axis = |pos: usize, lo: usize, hi: usize| -> T {
        let extent = T::lit((hi - lo - 1) as f64);
        if extent == T::zero() {
            return T::zero();
        }
        let center = T::lit(lo as f64) + extent * T::lit(0.5);
        let sigma = extent / T::lit(4.0);
        let d = T::lit(pos as f64) - center;
        d * d / (T::lit(2.0) * sigma * sigma)
    };
    let e = axis(row, cells.row0, cells.row1) + axis(col, cells.col0, cells.col1);
    (-e).exp()
}

/// [`gaussian_weight`] over the in-box cells, shaped `[cells.height(), cells.width()]`.
pub fn gaussian_weight_map<T: Real>(cells: &CellRange) -> Array2<T> {
    Array2::from_shape_fn((cells.height(), cells.width()), |(r, c)| {
        gaussian_weight(cells, cells.row0 + r, cells.col0 + c)
    })
}

/// Row-wise softmax. A row whose every entry is masked gets zero weight.
fn softmax_rows_in_place<T: Real>(logits: &mut Array2<T>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if max <= T::MASKED_LOGIT {
            row.fill(T::zero());
            continue;
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn scaled_logits<T: Real>(q: ArrayView2<T>, k: ArrayView2<T>) -> Result<Array2<T>> {
    if q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "query width {} != key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() == 0 {
        return Err(Error::Shape("cross-attention needs at least one token".into()));
    }
    let scale = T::one() / T::lit(q.ncols() as f64).sqrt();
    Ok(q.dot(&k.t()) * scale)
}

/// Plain softmax attention weights `softmax(QKᵀ/√d)`.
pub fn cross_attention_weights<T: Real>(q: ArrayView2<T>, k: ArrayView2<T>) -> Result<Array2<T>> {
    let mut a = scaled_logits(q, k)?;
    softmax_rows_in_place(&mut a);
    Ok(a)
}

/// Softmax weights with every mismatched pair masked out.
pub fn masked_cross_attention_weights<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    region: &BoxRegion,
    fg_token_indices: &BTreeSet<usize>,
) -> Result<Array2<T>> {
    let mut a = scaled_logits(q, k)?;
    check_region(&a, region)?;
    mask_mismatched_pairs(&mut a, region, fg_token_indices);
    softmax_rows_in_place(&mut a);
    Ok(a)
}

fn check_region<T>(a: &Array2<T>, region: &BoxRegion) -> Result<()> {
    if a.nrows() != region.n_pixels() {
        return Err(Error::Shape(format!(
            "{} query rows for a {}x{} grid",
            a.nrows(),
            region.height,
            region.width
        )));
    }
    Ok(())
}

fn mask_mismatched_pairs<T: Real>(a: &mut Array2<T>, region: &BoxRegion, fg: &BTreeSet<usize>) {
    let fg_col: Vec<bool> = (0..a.ncols()).map(|j| fg.contains(&j)).collect();
    for (i, mut row) in a.rows_mut().into_iter().enumerate() {
        let in_box = region.contains_pixel(i);
        for (j, v) in row.iter_mut().enumerate() {
            if in_box != fg_col[j] {
                *v = T::MASKED_LOGIT;
            }
        }
    }
}

/// Weights of guided cross-attention: `softmax(A) + λ·M`, not renormalized.
///
/// `A` is `QKᵀ/√d` with mismatched pairs masked; `M[i,j]` is the box Gaussian at
/// pixel `i` times `γ` on matched pairs and 0 elsewhere. `gamma` is the frame's amplification (`γ_key` on key-frames).
pub fn guided_cross_attention_weights<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    region: &BoxRegion,
    fg_token_indices: &BTreeSet<usize>,
    lambda: T,
    gamma: T,
) -> Result<Array2<T>> {
    let mut w = masked_cross_attention_weights(q, k, region, fg_token_indices)?;
    let cells = region.cells;
    for row in cells.row0..cells.row1 {
        for col in cells.col0..cells.col1 {
            let boost = lambda * gaussian_weight::<T>(&cells, row, col) * gamma;
            let i = row * region.width + col;
            for &j in fg_token_indices {
                w[[i, j]] += boost;
            }
        }
    }
    Ok(w)
}

/// Guided cross-attention output `(softmax(A) + λM)·V`, shaped `[n_pixels, d_v]`.
pub fn guided_cross_attention<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    region: &BoxRegion,
    fg_token_indices: &BTreeSet<usize>,
    lambda: T,
    gamma: T,
) -> Result<Array2<T>> {
    check_values(&k, &v)?;
    let w = guided_cross_attention_weights(q, k, region, fg_token_indices, lambda, gamma)?;
    Ok(w.dot(&v))
}

/// Softmax attention output with mismatched pairs masked, the unguided counterpart of
/// [`guided_cross_attention`].
pub fn masked_cross_attention<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    region: &BoxRegion,
    fg_token_indices: &BTreeSet<usize>,
) -> Result<Array2<T>> {
    check_values(&k, &v)?;
    let w = masked_cross_attention_weights(q, k, region, fg_token_indices)?;
    Ok(w.dot(&v))
}

pub fn cross_attention<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
) -> Result<Array2<T>> {
    check_values(&k, &v)?;
    Ok(cross_attention_weights(q, k)?.dot(&v))
}

fn check_values<T>(k: &ArrayView2<T>, v: &ArrayView2<T>) -> Result<()> {
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    Ok(())
}

/// Projects every channel vector of a plane: `[f, h, w, c] · [c, d] -> [f, h, w, d]`.
pub(crate) fn project<T: Real>(plane: &Array4<T>, weight: &Array2<T>) -> Array4<T> {
    let (f, h, w, c) = plane.dim();
    let flat = plane
        .to_shape((f * h * w, c))
        .expect("plane is contiguous");
    flat.dot(weight)
        .into_shape_with_order((f, h, w, weight.ncols()))
        .expect("row-major product")
}

fn dot<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Oriented weighting for one frame: the box on the latent grid and `(μ1, μ2)`.
#[derive(Debug, Clone, Copy)]
struct Orientation<T> {
    cells: CellRange,
    mu1: T,
    mu2: T,
}

fn sharing_kernel<T: Real>(
    planes: &AttentionPlanes<T>,
    proj: &Projections<T>,
    orientation: impl Fn(usize) -> Option<Orientation<T>> + Sync,
) -> Result<AttentionPlanes<T>> {
    proj.check()?;
    let qf = project(&planes.fg, &proj.query);
    let kf = project(&planes.fg, &proj.key);
    let vf = project(&planes.fg, &proj.value);
    let qb = project(&planes.bg, &proj.query);
    let kb = project(&planes.bg, &proj.key);
    let vb = project(&planes.bg, &proj.value);
    let (f, h, w, _) = planes.fg.dim();
    let dv = proj.value.ncols();
    let scale = T::one() / T::lit(proj.head_dim() as f64).sqrt();

    let mut out_fg = Array4::<T>::zeros((f, h, w, dv));
    let mut out_bg = Array4::<T>::zeros((f, h, w, dv));
    out_fg
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(out_bg.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(fi, (mut ofg, mut obg))| {
            let orient = orientation(fi);
            for r in 0..h {
                for c in 0..w {
                    let q = [qf.slice(s![fi, r, c, ..]), qb.slice(s![fi, r, c, ..])];
                    let k = [kf.slice(s![fi, r, c, ..]), kb.slice(s![fi, r, c, ..])];
                    let v = [vf.slice(s![fi, r, c, ..]), vb.slice(s![fi, r, c, ..])];
                    let weight = match orient {
                        Some(o) if o.cells.contains(r, c) => Some((o.mu1, o.mu2)),
                        _ => None,
                    };
                    for (token, out) in [&mut ofg, &mut obg].into_iter().enumerate() {
                        let mut logits = [dot(q[token], k[0]) * scale, dot(q[token], k[1]) * scale];
                        let max = logits[0].max(logits[1]);
                        logits[0] = (logits[0] - max).exp();
                        logits[1] = (logits[1] - max).exp();
                        let sum = logits[0] + logits[1];
                        let mut a = [logits[0] / sum, logits[1] / sum];
                        if let Some((mu1, mu2)) = weight {
                            // diagonal: same plane, off-diagonal: other plane
                            a[token] *= mu1;
                            a[1 - token] *= mu2;
                        }
                        let mut o = out.slice_mut(s![r, c, ..]);
                        for (d, slot) in o.iter_mut().enumerate() {
                            *slot = a[0] * v[0][d] + a[1] * v[1][d];
                        }
                    }
                }
            }
        });
    Ok(AttentionPlanes {
        fg: out_fg,
        bg: out_bg,
    })
}

/// Unweighted attention-sharing: per frame and pixel, self-attention over the
/// two-token sequence `[x_fg, x_bg]`.
pub fn attention_sharing<T: Real>(
    planes: &AttentionPlanes<T>,
    proj: &Projections<T>,
) -> Result<AttentionPlanes<T>> {
    sharing_kernel(planes, proj, |_| None)
}

/// Oriented attention-sharing: as [`attention_sharing`], with the 2×2 attention
/// map scaled by `[[μ1, μ2], [μ2, μ1]]` at pixels inside the frame's box.
/// Outside the box the result is bitwise equal to the unweighted kernel.
pub fn oriented_attention_sharing<T: Real>(
    planes: &AttentionPlanes<T>,
    track: &BBoxTrack<T>,
    mu1: T,
    mu2: T,
    proj: &Projections<T>,
) -> Result<AttentionPlanes<T>> {
    let (f, h, w, _) = planes.fg.dim();
    if track.frames() != f {
        return Err(Error::Shape(format!(
            "track has {} frames, planes have {f}",
            track.frames()
        )));
    }
    let cells: Vec<CellRange> = track
        .boxes
        .iter()
        .map(|b| scale_to_latent_grid(b, h, w))
        .collect();
    sharing_kernel(planes, proj, |fi| {
        Some(Orientation {
            cells: cells[fi],
            mu1,
            mu2,
        })
    })
}

/// Temporal self-attention of one plane: at each pixel the `f` frames form the sequence.
pub fn temporal_self_attention<T: Real>(
    plane: &Array4<T>,
    proj: &Projections<T>,
) -> Result<Array4<T>> {
    proj.check()?;
    let q = project(plane, &proj.query);
    let k = project(plane, &proj.key);
    let v = project(plane, &proj.value);
    let (f, h, w, _) = plane.dim();
    let dv = proj.value.ncols();
    let scale = T::one() / T::lit(proj.head_dim() as f64).sqrt();
    let mut out = Array4::<T>::zeros((f, h, w, dv));
    // Parallel over rows; each pixel's sequence is reduced serially.
    let mut by_row: Vec<Array2<T>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut row_out = Array2::<T>::zeros((w * f, dv));
            for c in 0..w {
                let qs = q.slice(s![.., r, c, ..]);
                let ks = k.slice(s![.., r, c, ..]);
                let vs = v.slice(s![.., r, c, ..]);
                let mut a = qs.dot(&ks.t()) * scale;
                softmax_rows_in_place(&mut a);
                let o = a.dot(&vs);
                row_out.slice_mut(s![c * f..(c + 1) * f, ..]).assign(&o);
            }
            row_out
        })
        .collect();
    for (r, row_out) in by_row.drain(..).enumerate() {
        for c in 0..w {
            out.slice_mut(s![.., r, c, ..])
                .assign(&row_out.slice(s![c * f..(c + 1) * f, ..]));
        }
    }
    Ok(out)
}

/// Attention isolation: temporal self-attention run on each plane independently.
pub fn isolated_temporal_attention<T: Real>(
    planes: &AttentionPlanes<T>,
    proj: &Projections<T>,
) -> Result<AttentionPlanes<T>> {
    Ok(AttentionPlanes {
        fg: temporal_self_attention(&planes.fg, proj)?,
        bg: temporal_self_attention(&planes.bg, proj)?,
    })
}

#[derive(Serialize)]
struct WeightDump<'a, T> {
    shape: &'a [usize],
    data: Vec<T>,
}

/// Writes an attention-weight matrix as JSON `{shape, data}` (row-major) for inspection.
pub fn dump_weights<T: Real>(path: &Path, weights: &Array2<T>) -> Result<()> {
    let dump = WeightDump {
        shape: weights.shape(),
        data: weights.iter().copied().collect(),
    };
    let text = serde_json::to_string(&dump)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
