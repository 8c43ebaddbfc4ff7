//! Label fusion: majority voting, LNCC ranking, multi-label STAPLE,
//! consensus ROI and mean-field MRF regularization (the STEPS stack).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AtlasPair, ImageGrid, LabelMap, RoiBox, NUM_LABELS};
use crate::par;
use crate::registration::lncc_map;

const L: usize = NUM_LABELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lncc_sigma: f64,
    pub top_fraction: f64,
    /// Raters per pixel in local mode; `None` means `max(2, floor(M / 3))`.
    pub local_n: Option<usize>,
    pub mrf_beta: f64,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub mrf_iters: usize,
    /// Smallest number of atlases kept by the global selection.
    pub min_selected: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lncc_sigma: 2.0,
            top_fraction: 0.10,
            local_n: None,
            mrf_beta: 0.5,
            em_max_iters: 50,
            em_tol: 1e-4,
            mrf_iters: 5,
            min_selected: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lncc_sigma > 0.0
            && self.top_fraction > 0.0
            && self.top_fraction <= 1.0
            && self.mrf_beta >= 0.0
            && self.em_tol >= 0.0
            && self.local_n.is_none_or(|n| n >= 1);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid fusion configuration {self:?}"
            )));
        }
        Ok(())
    }

    pub fn local_n_for(&self, atlases: usize) -> usize {
        self.local_n.unwrap_or((atlases / 3).max(2)).min(atlases)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Rank whole atlases, keep the top fraction (rough segmentation).
    GlobalTop,
    /// Rank atlases per pixel, keep the N best at each pixel (refinement).
    LocalN,
}

/// Per-rater `θ[true][observed]`, rows sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[f64; L]; L]);

impl ConfusionMatrix {
    pub fn initial() -> Self {
        let mut m = [[0.05; L]; L];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 0.9;
        }
        Self(m)
    }

    pub fn diagonal(&self) -> [f64; L] {
        [self.0[0][0], self.0[1][1], self.0[2][2]]
    }
}

/// Per-pixel probabilities over the labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub width: usize,
    pub height: usize,
    pub spacing: [f64; 2],
    pub probs: Vec<[f64; L]>,
}

impl Posterior {
    pub fn one_hot(labels: &LabelMap) -> Self {
        let probs = labels
            .data()
            .iter()
            .map(|&l| {
                let mut p = [0.0; L];
                p[l as usize] = 1.0;
                p
            })
            .collect();
        Self {
            width: labels.width(),
            height: labels.height(),
            spacing: labels.spacing(),
            probs,
        }
    }

    /// Most probable label per pixel; ties go to the smaller label.
    pub fn argmax(&self) -> LabelMap {
        let data = self.probs.iter().map(|p| argmax(p) as u8).collect();
        LabelMap::new(self.width, self.height, self.spacing, data).expect("labels in range")
    }
}

fn argmax(p: &[f64; L]) -> usize {
    let mut best = 0;
    for l in 1..L {
        if p[l] > p[best] {
            best = l;
        }
    }
    best
}

fn check_stack(stack: &[LabelMap]) -> Result<()> {
    let first = stack
        .first()
        .ok_or_else(|| Error::TooFew("empty label stack".into()))?;
    for (i, m) in stack.iter().enumerate().skip(1) {
        first.require_geometry(m, &format!("label stack member {i}"))?;
    }
    Ok(())
}

/// Per-pixel modal label; ties go to the smallest label.
pub fn majority_vote(stack: &[LabelMap]) -> Result<LabelMap> {
    check_stack(stack)?;
    let first = &stack[0];
    let mut data = vec![0u8; first.len()];
    par::fill_rows(&mut data, first.width(), |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let i = y * first.width() + x;
            let mut counts = [0usize; L];
            for m in stack {
                counts[m.data()[i] as usize] += 1;
            }
            let mut best = 0;
            for l in 1..L {
                if counts[l] > counts[best] {
                    best = l;
                }
            }
            *out = best as u8;
        }
    });
    LabelMap::new(first.width(), first.height(), first.spacing(), data)
}

/// Mean LNCC between `target` and every warped atlas over `roi`, sorted by
/// descending score; equal scores keep manifest order.
pub fn rank_global(
    target: &ImageGrid,
    warped: &[AtlasPair],
    roi: RoiBox,
    sigma: f64,
) -> Result<Vec<(usize, f64)>> {
    if !roi.fits(target) {
        return Err(Error::OutOfBounds(format!(
            "ranking roi {roi:?} outside the target"
        )));
    }
    if roi.width() == 0 || roi.height() == 0 {
        return Err(Error::EmptyMask("ranking roi is empty".into()));
    }
    let scores = par::map_slice(warped, |a| -> Result<f64> {
        let map = lncc_map(target, &a.intensity, sigma)?;
        let mut sum = 0.0;
        for y in roi.y0..roi.y1 {
            for x in roi.x0..roi.x1 {
                sum += map[y * target.width() + x];
            }
        }
        Ok(sum / (roi.width() * roi.height()) as f64)
    });
    let mut ranking = scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.map(|s| (i, s)))
        .collect::<Result<Vec<_>>>()?;
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranking)
}

/// The first `max(minimum, ceil(fraction · M))` ranked indices.
pub fn select_top_fraction(ranking: &[(usize, f64)], fraction: f64, minimum: usize) -> Vec<usize> {
    let m = ranking.len();
    // guard against 0.1 * 30 = 3.0000000000000004
    let by_fraction = (fraction * m as f64 - 1e-9).ceil().max(0.0) as usize;
    let n = by_fraction.max(minimum).min(m);
    ranking[..n].iter().map(|&(i, _)| i).collect()
}

/// Pixels where the raters do not all agree.
pub fn consensus_roi(stack: &[LabelMap]) -> Result<Vec<bool>> {
    check_stack(stack)?;
    let first = stack[0].data();
    Ok((0..first.len())
        .map(|i| stack.iter().any(|m| m.data()[i] != first[i]))
        .collect())
}

/// Per-pixel mean of the raters' one-hot votes, floored at 0.01 and
/// renormalized. `active` (pixel-major, one flag per rater) restricts the
/// voters at each pixel.
pub fn vote_prior(stack: &[LabelMap], active: Option<&[bool]>) -> Result<Posterior> {
    check_stack(stack)?;
    let m = stack.len();
    let first = &stack[0];
    let probs = par::map_range(first.len(), |i| {
        let mut p = [0.0f64; L];
        let mut n = 0.0f64;
        for (r, map) in stack.iter().enumerate() {
            if active.is_none_or(|a| a[i * m + r]) {
                p[map.data()[i] as usize] += 1.0;
                n += 1.0;
            }
        }
        let mut sum = 0.0;
        for v in p.iter_mut() {
            *v = (*v / n.max(1.0)).max(0.01);
            sum += *v;
        }
        p.map(|v| v / sum)
    });
    Ok(Posterior {
        width: first.width(),
        height: first.height(),
        spacing: first.spacing(),
        probs,
    })
}

#[derive(Clone, Debug)]
pub struct StapleResult {
    pub posterior: Posterior,
    pub confusion: Vec<ConfusionMatrix>,
    pub iterations: usize,
}

/// Multi-label STAPLE.
///
/// The E-step runs on `roi` pixels; elsewhere the posterior is the
/// unanimous label. The M-step re-estimates each rater's confusion matrix
/// from all pixels it votes on, so fixed consensus pixels count as
/// certain evidence.
pub fn staple_multilabel(
    stack: &[LabelMap],
    roi: &[bool],
    prior: &Posterior,
    config: &FusionConfig,
) -> Result<StapleResult> {
    staple_masked(stack, roi, prior, None, config)
}

fn staple_masked(
    stack: &[LabelMap],
    roi: &[bool],
    prior: &Posterior,
    active: Option<&[bool]>,
    config: &FusionConfig,
) -> Result<StapleResult> {
    check_stack(stack)?;
    if stack.len() < 2 {
        return Err(Error::TooFew(format!(
            "STAPLE needs >= 2 raters, got {}",
            stack.len()
        )));
    }
    let m = stack.len();
    let n = stack[0].len();
    if roi.len() != n || prior.probs.len() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            actual: roi.len().min(prior.probs.len()),
        });
    }
    if prior
        .probs
        .iter()
        .any(|p| (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= 0.0)))
    {
        return Err(Error::InvalidArgument(
            "prior rows must be probability vectors".into(),
        ));
    }
    let is_active = |i: usize, r: usize| active.is_none_or(|a| a[i * m + r]);
    let obs = |r: usize, i: usize| stack[r].data()[i] as usize;

    // fixed part of the posterior: the label the active raters agree on
    let fixed: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if roi[i] {
                return None;
            }
            let l = (0..m)
                .find(|&r| is_active(i, r))
                .map(|r| obs(r, i))
                .unwrap_or(obs(0, i));
            Some(l)
        })
        .collect();

    let mut theta = vec![ConfusionMatrix::initial(); m];
    let mut post: Vec<[f64; L]> = (0..n)
        .map(|i| match fixed[i] {
            Some(l) => {
                let mut p = [0.0; L];
                p[l] = 1.0;
                p
            }
            None => prior.probs[i],
        })
        .collect();
    let mut iterations = 0;
    for _ in 0..config.em_max_iters {
        iterations += 1;
        // E-step in log space; a zero prior keeps its label impossible
        let logs: Vec<[[f64; L]; L]> = theta
            .iter()
            .map(|t| t.0.map(|row| row.map(|v: f64| v.max(1e-300).ln())))
            .collect();
        let updated = par::map_range(n, |i| {
            if fixed[i].is_some() {
                return post[i];
            }
            let mut lp = [0.0; L];
            for (l, v) in lp.iter_mut().enumerate() {
                let pr = prior.probs[i][l];
                *v = if pr > 0.0 { pr.ln() } else { f64::NEG_INFINITY };
                for r in 0..m {
                    if is_active(i, r) {
                        *v += logs[r][l][obs(r, i)];
                    }
                }
            }
            let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return prior.probs[i];
            }
            let e = lp.map(|v| (v - top).exp());
            let s: f64 = e.iter().sum();
            e.map(|v| v / s)
        });
        post = updated;
        // M-step, each rater summed over pixels in index order
        let next = par::map_range(m, |r| {
            let mut num = [[0.0; L]; L];
            let mut den = [0.0; L];
            for i in 0..n {
                if !is_active(i, r) {
                    continue;
                }
                let o = obs(r, i);
                for l in 0..L {
                    num[l][o] += post[i][l];
                    den[l] += post[i][l];
                }
            }
            let mut t = theta[r];
            for l in 0..L {
                if den[l] > 1e-12 {
                    for o in 0..L {
                        t.0[l][o] = num[l][o] / den[l];
                    }
                }
            }
            t
        });
        let delta = next
            .iter()
            .zip(&theta)
            .flat_map(|(a, b)| {
                a.0.iter()
                    .flatten()
                    .zip(b.0.iter().flatten())
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max);
        theta = next;
        if delta < config.em_tol {
            break;
        }
    }
    let g = &stack[0];
    Ok(StapleResult {
        posterior: Posterior {
            width: g.width(),
            height: g.height(),
            spacing: g.spacing(),
            probs: post,
        },
        confusion: theta,
        iterations,
    })
}

/// Jacobi mean-field smoothing: every sweep sets
/// `p'(l) ∝ p0(l) · exp(beta · Σ_4-neighbours q(l))` from the previous sweep.
pub fn mrf_regularize(posterior: &Posterior, beta: f64, iters: usize) -> Posterior {
    if beta == 0.0 || iters == 0 {
        return posterior.clone();
    }
    let (w, h) = (posterior.width, posterior.height);
    let p0 = &posterior.probs;
    let mut q = p0.clone();
    for _ in 0..iters {
        let prev = q;
        let mut next = vec![[0.0; L]; w * h];
        par::fill_rows(&mut next, w, |y, row| {
            for (x, out) in row.iter_mut().enumerate() {
                let mut field = [0.0; L];
                let mut add = |nx: usize, ny: usize| {
                    let nb = &prev[ny * w + nx];
                    for l in 0..L {
                        field[l] += nb[l];
                    }
                };
                if x > 0 {
                    add(x - 1, y);
                }
                if x + 1 < w {
                    add(x + 1, y);
                }
                if y > 0 {
                    add(x, y - 1);
                }
                if y + 1 < h {
                    add(x, y + 1);
                }
                let data = &p0[y * w + x];
                let top = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut v = [0.0; L];
                for l in 0..L {
                    v[l] = data[l] * (beta * (field[l] - top)).exp();
                }
                let s: f64 = v.iter().sum();
                *out = if s > 0.0 { v.map(|x| x / s) } else { *data };
            }
        });
        q = next;
    }
    Posterior {
        probs: q,
        ..posterior.clone()
    }
}

/// Diagnostics of one [`steps_fuse`] call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionReport {
    pub mode: FusionMode,
    /// `(atlas id, mean LNCC)` in rank order (global mode).
    pub ranking: Vec<(String, f64)>,
    pub selected: Vec<String>,
    pub raters_per_pixel: usize,
    pub em_iterations: usize,
    pub confusion: Vec<ConfusionMatrix>,
}

impl FusionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode {:?}", self.mode);
        for (id, score) in &self.ranking {
            let _ = writeln!(s, "rank {id} {score:.6}");
        }
        let _ = writeln!(s, "selected {}", self.selected.join(" "));
        let _ = writeln!(s, "raters_per_pixel {}", self.raters_per_pixel);
        let _ = writeln!(s, "em_iterations {}", self.em_iterations);
        for (id, c) in self.selected.iter().zip(&self.confusion) {
            let rows: Vec<String> =
                c.0.iter()
                    .map(|r| format!("{:.4} {:.4} {:.4}", r[0], r[1], r[2]))
                    .collect();
            let _ = writeln!(s, "confusion {id} [{}]", rows.join("; "));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutcome {
    pub labels: LabelMap,
    pub posterior: Posterior,
    pub report: FusionReport,
}

/// STEPS fusion of atlases already warped onto `target`.
pub fn steps_fuse(
    target: &ImageGrid,
    warped: &[AtlasPair],
    config: &FusionConfig,
    mode: FusionMode,
) -> Result<FusionOutcome> {
    config.validate()?;
    if warped.len() < 2 {
        return Err(Error::TooFew(format!(
            "STEPS needs >= 2 atlases, got {}",
            warped.len()
        )));
    }
    for a in warped {
        target.require_geometry(&a.intensity, "warped atlas")?;
        target.require_geometry(&a.labels, "warped atlas labels")?;
    }
    match mode {
        FusionMode::GlobalTop => {
            let ranking = rank_global(target, warped, RoiBox::full(target), config.lncc_sigma)?;
            let selected = select_top_fraction(&ranking, config.top_fraction, config.min_selected);
            if selected.len() < 2 {
                return Err(Error::TooFew(format!(
                    "{} atlas(es) survive selection",
                    selected.len()
                )));
            }
            let stack: Vec<LabelMap> = selected.iter().map(|&i| warped[i].labels.clone()).collect();
            let roi = consensus_roi(&stack)?;
            let prior = vote_prior(&stack, None)?;
            let st = staple_multilabel(&stack, &roi, &prior, config)?;
            let posterior = mrf_regularize(&st.posterior, config.mrf_beta, config.mrf_iters);
            Ok(FusionOutcome {
                labels: posterior.argmax(),
                posterior,
                report: FusionReport {
                    mode,
                    ranking: ranking
                        .iter()
                        .map(|&(i, s)| (warped[i].id.clone(), s))
                        .collect(),
                    selected: selected.iter().map(|&i| warped[i].id.clone()).collect(),
                    raters_per_pixel: stack.len(),
                    em_iterations: st.iterations,
                    confusion: st.confusion,
                },
            })
        }
        FusionMode::LocalN => {
            let m = warped.len();
            let n_local = config.local_n_for(m);
            if n_local < 2 {
                return Err(Error::TooFew(format!(
                    "local fusion keeps {n_local} rater(s) per pixel"
                )));
            }
            let maps = par::map_slice(warped, |a| {
                lncc_map(target, &a.intensity, config.lncc_sigma)
            });
            let maps = maps.into_iter().collect::<Result<Vec<_>>>()?;
            let npix = target.len();
            let active: Vec<bool> = par::map_range(npix, |i| {
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| maps[b][i].total_cmp(&maps[a][i]).then(a.cmp(&b)));
                let mut flags = vec![false; m];
                for &r in &order[..n_local] {
                    flags[r] = true;
                }
                flags
            })
            .into_iter()
            .flatten()
            .collect();
            let stack: Vec<LabelMap> = warped.iter().map(|a| a.labels.clone()).collect();
            let roi: Vec<bool> = (0..npix)
                .map(|i| {
                    let mut seen = None;
                    for r in 0..m {
                        if active[i * m + r] {
                            let l = stack[r].data()[i];
                            match seen {
                                None => seen = Some(l),
                                Some(s) if s != l => return true,
                                _ => {}
                            }
                        }
                    }
                    false
                })
                .collect();
            let prior = vote_prior(&stack, Some(&active))?;
            let st = staple_masked(&stack, &roi, &prior, Some(&active), config)?;
            let posterior = mrf_regularize(&st.posterior, config.mrf_beta, config.mrf_iters);
            Ok(FusionOutcome {
                labels: posterior.argmax(),
                posterior,
                report: FusionReport {
                    mode,
                    ranking: Vec::new(),
                    selected: warped.iter().map(|a| a.id.clone()).collect(),
                    raters_per_pixel: n_local,
                    em_iterations: st.iterations,
                    confusion: st.confusion,
                },
            })
        }
    }
}
