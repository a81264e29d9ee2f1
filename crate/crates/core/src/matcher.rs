//! Query-to-label assignment and the set-prediction loss.

use thiserror::Error;

use crate::config::{Config, MatchClassCost};
use crate::depth::{depth_map_loss, pow_gamma, DepthMapTarget};
use crate::heads::{encode_heading, giou, recover_box2d, side_targets, GroundTruthObject, HeadOutputs, QueryPrediction, GIOU_EPS};
use crate::nn::Graph;
use crate::numerics::{NumericsError, Var};

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooManyRows { rows: usize, cols: usize },
    #[error("cost matrix is ragged or empty")]
    Shape,
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("loss term {term} is not finite")]
    NonFiniteLoss { term: &'static str },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Pairs `(gt, query)` sorted by GT index, and their summed cost.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Weights and image geometry the matching cost needs.
#[derive(Clone, Copy, Debug)]
pub struct CostWeights {
    pub class: f64,
    pub center: f64,
    pub lrtb: f64,
    pub giou: f64,
    pub class_cost: MatchClassCost,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub image_size: (f64, f64),
}

impl CostWeights {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            class: cfg.lambda_class,
            center: cfg.lambda_center,
            lrtb: cfg.lambda_lrtb,
            giou: cfg.lambda_giou,
            class_cost: cfg.match_class_cost,
            focal_gamma: cfg.focal_gamma,
            focal_alpha: cfg.focal_alpha,
            image_size: (cfg.image_width as f64, cfg.image_height as f64),
        }
    }
}

/// Cost of assigning `pred` to `gt`.
pub fn matching_cost(pred: &QueryPrediction, gt: &GroundTruthObject, w: &CostWeights) -> f64 {
    let p = pred.class_probs[gt.class_id];
    let class = match w.class_cost {
        MatchClassCost::Prob => -p,
        MatchClassCost::Focal => {
            let (a, gm) = (w.focal_alpha, w.focal_gamma);
            let pos = a * (1.0 - p).powf(gm) * -(p + 1e-8).ln();
            let neg = (1.0 - a) * p.powf(gm) * -(1.0 - p + 1e-8).ln();
            pos - neg
        }
    };
    let (iw, ih) = w.image_size;
    let center: f64 = pred.center3d.iter().zip(&gt.center3d_norm).map(|(a, b)| (a - b).abs()).sum();
    let sides = side_targets(gt, iw, ih);
    let lrtb: f64 = pred.sides.iter().zip(&sides).map(|(a, b)| (a - b).abs()).sum();
    let giou_loss = 1.0 - giou(recover_box2d(pred.center3d, pred.sides, iw, ih), gt.box2d);
    w.class * class + w.center * center + w.lrtb * lrtb + w.giou * giou_loss
}

/// Rows are ground-truth objects, columns queries.
pub fn cost_matrix(preds: &[QueryPrediction], gts: &[GroundTruthObject], w: &CostWeights) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|gt| preds.iter().map(|p| matching_cost(p, gt, w)).collect())
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column. Among optimal
/// assignments the lexicographically smallest column sequence wins.
pub fn hungarian(costs: &[Vec<f64>]) -> Result<MatchAssignment, MatcherError> {
    let rows = costs.len();
    if rows == 0 {
        return Ok(MatchAssignment { pairs: Vec::new(), total_cost: 0.0 });
    }
    let cols = costs[0].len();
    if cols == 0 || costs.iter().any(|r| r.len() != cols) {
        return Err(MatcherError::Shape);
    }
    if rows > cols {
        return Err(MatcherError::TooManyRows { rows, cols });
    }
    for (i, r) in costs.iter().enumerate() {
        if let Some(j) = r.iter().position(|c| !c.is_finite()) {
            return Err(MatcherError::NonFiniteCost { row: i, col: j });
        }
    }

    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let best = row_sum(costs, &solve(costs, &all_rows, &all_cols));
    let tol = 1e-10 * best.abs().max(1.0);

    // fix rows in order, each to the smallest column that keeps the optimum
    let mut free: Vec<usize> = all_cols;
    let mut fixed = 0.0;
    let mut pairs = Vec::with_capacity(rows);
    for i in 0..rows {
        let rest: Vec<usize> = (i + 1..rows).collect();
        let mut chosen = None;
        for (slot, &j) in free.iter().enumerate() {
            let mut others = free.clone();
            others.remove(slot);
            let sub = solve(costs, &rest, &others);
            let sub_cost: f64 = sub.iter().zip(&rest).map(|(&c, &r)| costs[r][c]).sum();
            if fixed + costs[i][j] + sub_cost <= best + tol {
                chosen = Some(slot);
                break;
            }
        }
        let slot = chosen.expect("an optimal completion always exists");
        let j = free.remove(slot);
        fixed += costs[i][j];
        pairs.push((i, j));
    }
    let total_cost = pairs.iter().map(|&(i, j)| costs[i][j]).sum();
    Ok(MatchAssignment { pairs, total_cost })
}

fn row_sum(costs: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| costs[i][j]).sum()
}

/// Shortest augmenting path with potentials on the sub-matrix
/// `rows × cols`; returns the column chosen for each listed row.
fn solve(costs: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return Vec::new();
    }
    let a = |i: usize, j: usize| costs[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

pub const TERM_NAMES: [&str; 9] = ["L_class", "L_C3D", "L_lrtb", "L_GIoU", "L_dim", "L_orien", "L_depth", "L_dmap", "total"];

/// Unweighted loss terms (already divided by the GT count) and the weighted
/// total, in `TERM_NAMES` order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown(pub [f64; 9]);

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.0[8]
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a += b;
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.0.iter_mut().for_each(|v| *v *= s);
        self
    }
}

/// Head outputs of one decoder block together with its ensemble depth `[N]`.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutputs {
    pub heads: HeadOutputs,
    pub depth: Var,
}

/// Set loss for one image: every supervised block contributes its matched and
/// unmatched terms divided by the GT count; the depth-map loss is added once.
/// Returns the scalar total on the tape and the per-term values.
pub fn overall_loss(
    g: &mut Graph<'_>,
    blocks: &[(BlockOutputs, MatchAssignment)],
    gts: &[GroundTruthObject],
    depth_logits: Var,
    depth_target: &DepthMapTarget,
    cfg: &Config,
) -> Result<(Var, LossBreakdown), MatcherError> {
    let lambdas = [
        cfg.lambda_class,
        cfg.lambda_center,
        cfg.lambda_lrtb,
        cfg.lambda_giou,
        cfg.lambda_dim,
        cfg.lambda_orien,
        cfg.lambda_depth,
    ];
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut breakdown = LossBreakdown::default();
    let mut weighted = Vec::new();
    for (out, assignment) in blocks {
        let terms = block_terms(g, out, assignment, gts, cfg)?;
        for (t, (&var, &lambda)) in terms.iter().zip(&lambdas).enumerate() {
            let Some(var) = var else { continue };
            let value = g.item(var) * norm;
            check(value, TERM_NAMES[t])?;
            breakdown.0[t] += value;
            if lambda != 0.0 {
                weighted.push(g.scale(var, lambda * norm)?);
            }
        }
    }
    let dmap = depth_map_loss(g, depth_logits, depth_target, cfg.dmap_gamma).map_err(|e| tag(e, "L_dmap"))?;
    check(g.item(dmap), "L_dmap")?;
    breakdown.0[7] = g.item(dmap);
    weighted.push(g.scale(dmap, cfg.lambda_dmap)?);

    let mut total = weighted[0];
    for &w in &weighted[1..] {
        total = g.add(total, w)?;
    }
    breakdown.0[8] = g.item(total);
    check(breakdown.0[8], "total")?;
    Ok((total, breakdown))
}

fn check(v: f64, term: &'static str) -> Result<(), MatcherError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(MatcherError::NonFiniteLoss { term })
    }
}

fn tag(e: NumericsError, term: &'static str) -> MatcherError {
    match e {
        NumericsError::NonFinite { .. } => MatcherError::NonFiniteLoss { term },
        other => MatcherError::Numerics(other),
    }
}

/// Unscaled sums over queries for the seven attribute terms; the matched
/// terms are `None` when nothing is matched.
fn block_terms(
    g: &mut Graph<'_>,
    out: &BlockOutputs,
    assignment: &MatchAssignment,
    gts: &[GroundTruthObject],
    cfg: &Config,
) -> Result<[Option<Var>; 7], MatcherError> {
    let h = &out.heads;
    let (n, k) = (g.shape(h.class_logits)[0], g.shape(h.class_logits)[1]);
    let mut targets = vec![0.0; n * k];
    for &(gi, qi) in &assignment.pairs {
        targets[qi * k + gts[gi].class_id] = 1.0;
    }
    let class = sigmoid_focal_sum(g, h.class_logits, &targets, cfg.focal_gamma, cfg.focal_alpha)
        .map_err(|e| tag(e, "L_class"))?;
    let mut terms = [Some(class), None, None, None, None, None, None];
    if assignment.pairs.is_empty() {
        return Ok(terms);
    }

    let q: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
    let matched: Vec<&GroundTruthObject> = assignment.pairs.iter().map(|p| &gts[p.0]).collect();
    let m = q.len();
    let (iw, ih) = (cfg.image_width as f64, cfg.image_height as f64);

    let center = g.gather_rows(h.center, &q)?;
    let sides = g.gather_rows(h.sides, &q)?;
    terms[1] = Some(
        l1_to(g, center, matched.iter().flat_map(|o| o.center3d_norm).collect(), &[m, 2])
            .map_err(|e| tag(e, "L_C3D"))?,
    );
    terms[2] = Some(
        l1_to(g, sides, matched.iter().flat_map(|o| side_targets(o, iw, ih)).collect(), &[m, 4])
            .map_err(|e| tag(e, "L_lrtb"))?,
    );
    terms[3] = Some(giou_loss(g, center, sides, &matched, iw, ih).map_err(|e| tag(e, "L_GIoU"))?);

    terms[4] = Some(
        (|| {
            let dims = g.gather_rows(h.dims, &q)?;
            let gt: Vec<f64> = matched.iter().flat_map(|o| o.dims).collect();
            let inv: Vec<f64> = gt.iter().map(|d| 1.0 / d).collect();
            let t = g.constant_from(&[m, 3], gt)?;
            let inv = g.constant_from(&[m, 3], inv)?;
            let diff = g.sub(dims, t)?;
            let diff = g.abs(diff)?;
            let rel = g.mul(diff, inv)?;
            g.sum(rel)
        })()
        .map_err(|e| tag(e, "L_dim"))?,
    );

    terms[5] = Some(
        (|| {
            let bins = g.shape(h.orient_logits)[1];
            let encoded: Vec<(usize, f64)> = matched.iter().map(|o| encode_heading(o.heading, bins)).collect();
            let idx: Vec<usize> = encoded.iter().enumerate().map(|(r, &(b, _))| r * bins + b).collect();
            let logits = g.gather_rows(h.orient_logits, &q)?;
            let logp = g.log_softmax(logits, 1)?;
            let picked = g.gather_flat(logp, &idx)?;
            let ce = g.sum(picked)?;
            let ce = g.neg(ce)?;
            let res = g.gather_rows(h.orient_residuals, &q)?;
            let res = g.gather_flat(res, &idx)?;
            let res = l1_to(g, res, encoded.iter().map(|e| e.1).collect(), &[m])?;
            g.add(ce, res)
        })()
        .map_err(|e| tag(e, "L_orien"))?,
    );

    terms[6] = Some(
        (|| {
            let d = g.gather_flat(out.depth, &q)?;
            let ls = g.gather_flat(h.log_sigma, &q)?;
            let t = g.constant_from(&[m], matched.iter().map(|o| o.depth).collect())?;
            let err = g.sub(d, t)?;
            let err = g.abs(err)?;
            let neg = g.neg(ls)?;
            let inv_sigma = g.exp(neg)?;
            let scaled = g.mul(err, inv_sigma)?;
            let scaled = g.scale(scaled, std::f64::consts::SQRT_2)?;
            let per = g.add(scaled, ls)?;
            g.sum(per)
        })()
        .map_err(|e| tag(e, "L_depth"))?,
    );
    Ok(terms)
}

fn l1_to(g: &mut Graph<'_>, x: Var, target: Vec<f64>, shape: &[usize]) -> Result<Var, NumericsError> {
    let t = g.constant_from(shape, target)?;
    let d = g.sub(x, t)?;
    let d = g.abs(d)?;
    g.sum(d)
}

/// Sigmoid focal loss summed over all entries of `logits` against fixed
/// binary targets.
pub fn sigmoid_focal_sum(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[f64],
    gamma: f64,
    alpha: f64,
) -> Result<Var, NumericsError> {
    let shape = g.shape(logits).to_vec();
    let p = g.sigmoid(logits)?;
    // cross-entropy softplus(x) - t·x
    let sp = g.softplus(logits)?;
    let t = g.constant_from(&shape, targets.to_vec())?;
    let tx = g.mul(t, logits)?;
    let ce = g.sub(sp, tx)?;
    // 1 - p_t = t + (1 - 2t)·p
    let flip = g.constant_from(&shape, targets.iter().map(|t| 1.0 - 2.0 * t).collect())?;
    let one_minus = g.mul(flip, p)?;
    let one_minus = g.add(one_minus, t)?;
    let modulator = pow_gamma(g, one_minus, gamma)?;
    let at = g.constant_from(&shape, targets.iter().map(|t| alpha * t + (1.0 - alpha) * (1.0 - t)).collect())?;
    let w = g.mul(at, modulator)?;
    let l = g.mul(w, ce)?;
    g.sum(l)
}

/// `Σ (1 − GIoU)` between recovered boxes of `center: [M,2]`, `sides: [M,4]`
/// and the GT boxes.
fn giou_loss(
    g: &mut Graph<'_>,
    center: Var,
    sides: Var,
    gts: &[&GroundTruthObject],
    iw: f64,
    ih: f64,
) -> Result<Var, NumericsError> {
    let m = gts.len();
    let col = |g: &mut Graph<'_>, v: Var, c: usize| g.slice_cols(v, c, 1);
    let (cx, cy) = (col(g, center, 0)?, col(g, center, 1)?);
    let (l, r, t, b) = (col(g, sides, 0)?, col(g, sides, 1)?, col(g, sides, 2)?, col(g, sides, 3)?);
    let edge = |g: &mut Graph<'_>, c: Var, s: Var, sign: f64, extent: f64| -> Result<Var, NumericsError> {
        let s = g.scale(s, sign)?;
        let e = g.add(c, s)?;
        let e = g.scale(e, extent)?;
        g.clamp(e, 0.0, extent)
    };
    let px1 = edge(g, cx, l, -1.0, iw)?;
    let px2 = edge(g, cx, r, 1.0, iw)?;
    let py1 = edge(g, cy, t, -1.0, ih)?;
    let py2 = edge(g, cy, b, 1.0, ih)?;
    let gcol = |g: &mut Graph<'_>, i: usize| g.constant_from(&[m, 1], gts.iter().map(|o| o.box2d[i]).collect());
    let (gx1, gy1, gx2, gy2) = (gcol(g, 0)?, gcol(g, 1)?, gcol(g, 2)?, gcol(g, 3)?);

    // min(a, c) = a − relu(a − c), max(a, c) = c + relu(a − c)
    let min = |g: &mut Graph<'_>, a: Var, c: Var| -> Result<Var, NumericsError> {
        let d = g.sub(a, c)?;
        let d = g.relu(d)?;
        g.sub(a, d)
    };
    let max = |g: &mut Graph<'_>, a: Var, c: Var| -> Result<Var, NumericsError> {
        let d = g.sub(a, c)?;
        let d = g.relu(d)?;
        g.add(c, d)
    };
    let span = |g: &mut Graph<'_>, lo: Var, hi: Var| g.sub(hi, lo);

    let iw_ = {
        let hi = min(g, px2, gx2)?;
        let lo = max(g, px1, gx1)?;
        let s = span(g, lo, hi)?;
        g.relu(s)?
    };
    let ih_ = {
        let hi = min(g, py2, gy2)?;
        let lo = max(g, py1, gy1)?;
        let s = span(g, lo, hi)?;
        g.relu(s)?
    };
    let inter = g.mul(iw_, ih_)?;
    let pw = span(g, px1, px2)?;
    let ph = span(g, py1, py2)?;
    let parea = g.mul(pw, ph)?;
    let garea = g.constant_from(
        &[m, 1],
        gts.iter().map(|o| (o.box2d[2] - o.box2d[0]) * (o.box2d[3] - o.box2d[1])).collect(),
    )?;
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    let hw = {
        let hi = max(g, px2, gx2)?;
        let lo = min(g, px1, gx1)?;
        span(g, lo, hi)?
    };
    let hh = {
        let hi = max(g, py2, gy2)?;
        let lo = min(g, py1, gy1)?;
        span(g, lo, hi)?
    };
    let hull = g.mul(hw, hh)?;
    let union_eps = g.add_scalar(union, GIOU_EPS)?;
    let iou = g.div(inter, union_eps)?;
    let gap = g.sub(hull, union)?;
    let hull_eps = g.add_scalar(hull, GIOU_EPS)?;
    let gap = g.div(gap, hull_eps)?;
    let gi = g.sub(iou, gap)?;
    let loss = g.rsub_scalar(1.0, gi)?;
    g.sum(loss)
}
