//! ROC/AUC evaluation, a distributional quality metric, and memorization
//! metrics.
//!
//! AUC is computed on doubled integer rank sums, so the rank formulation
//! agrees with brute-force pair counting bit for bit, ties counted half.

use serde::{Deserialize, Serialize};

use crate::attacks::{secmi_score, AttackScores, Orientation};
use crate::dataset::LabeledSample;
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// ROC summary for one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub auc: f64,
    pub tpr_at_1pct_fpr: f64,
    pub roc_points: Vec<(f64, f64)>,
    pub n_member: usize,
    pub n_nonmember: usize,
}

impl RocReport {
    /// Structural invariants: points climb monotonically from (0,0) to
    /// (1,1) and the trapezoidal area reproduces the rank AUC.
    pub fn check(&self) -> Result<()> {
        let pts = &self.roc_points;
        if pts.first() != Some(&(0.0, 0.0)) || pts.last() != Some(&(1.0, 1.0)) {
            return Err(Error::Config("roc points must span (0,0) to (1,1)".into()));
        }
        for w in pts.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::Config(format!(
                    "roc points not monotone: {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        let area: f64 = pts
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum();
        if (area - self.auc).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "trapezoid area {area} disagrees with auc {}",
                self.auc
            )));
        }
        Ok(())
    }

    /// CSV rendering of the ROC points, one `fpr,tpr` row per point.
    pub fn points_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.roc_points {
            out.push_str(&format!("{f},{t}\n"));
        }
        out
    }
}

/// Doubled member-win count and doubled pair count for the declared
/// orientation. Every tie contributes one half, so doubling keeps both
/// quantities in exact integer arithmetic.
fn doubled_member_wins(scores: &AttackScores) -> Result<(u64, u64)> {
    scores.check()?;
    let nm = scores.member_scores.len();
    let nn = scores.nonmember_scores.len();
    let mut pool: Vec<(f64, bool)> = scores
        .member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of doubled average ranks over members, tie groups sharing the
    // doubled mean rank (2i + g + 1 for a group of g starting at offset i).
    let mut r2: u64 = 0;
    let mut i = 0;
    while i < pool.len() {
        let mut j = i + 1;
        while j < pool.len() && pool[j].0 == pool[i].0 {
            j += 1;
        }
        let doubled_rank = (2 * i + (j - i) + 1) as u64;
        let members_here = pool[i..j].iter().filter(|&&(_, m)| m).count() as u64;
        r2 += members_here * doubled_rank;
        i = j;
    }

    // Mann-Whitney: 2U = R2 - nm(nm+1) counts pairs where the member score
    // is strictly higher, plus one per tie.
    let u2_high = r2 - (nm as u64) * (nm as u64 + 1);
    let pairs2 = 2 * (nm as u64) * (nn as u64);
    let wins2 = match scores.orientation {
        Orientation::HigherMeansMember => u2_high,
        Orientation::LowerMeansMember => pairs2 - u2_high,
    };
    Ok((wins2, pairs2))
}

/// Probability that a random member outranks a random nonmember under the
/// declared orientation, ties counted half.
pub fn auc(scores: &AttackScores) -> Result<f64> {
    let (wins2, pairs2) = doubled_member_wins(scores)?;
    Ok(wins2 as f64 / pairs2 as f64)
}

/// Scores mapped so that smaller always means "classified member",
/// regardless of the declared orientation. Negation is exact.
fn canonical_scores(scores: &AttackScores) -> (Vec<f64>, Vec<f64>) {
    let fix = |v: &[f64]| -> Vec<f64> {
        match scores.orientation {
            Orientation::LowerMeansMember => v.to_vec(),
            Orientation::HigherMeansMember => v.iter().map(|s| -s).collect(),
        }
    };
    (fix(&scores.member_scores), fix(&scores.nonmember_scores))
}

/// Maximum true-positive rate over thresholds whose empirical false-positive
/// rate stays at or below `fpr_cap` (step-function ROC, no interpolation).
pub fn tpr_at_fpr(scores: &AttackScores, fpr_cap: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_cap) {
        return Err(Error::Config(format!("fpr_cap {fpr_cap} outside [0, 1]")));
    }
    scores.check()?;
    let (mut members, mut nonmembers) = canonical_scores(scores);
    members.sort_by(f64::total_cmp);
    nonmembers.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> =
        members.iter().chain(nonmembers.iter()).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nm, nn) = (members.len(), nonmembers.len());
    let (mut ti, mut fi) = (0usize, 0usize);
    let mut best = 0.0f64;
    for &theta in &thresholds {
        while ti < nm && members[ti] <= theta {
            ti += 1;
        }
        while fi < nn && nonmembers[fi] <= theta {
            fi += 1;
        }
        if fi as f64 / nn as f64 <= fpr_cap {
            best = best.max(ti as f64 / nm as f64);
        }
    }
    Ok(best)
}

/// Full ROC sweep: one point per distinct threshold in the canonical
/// orientation, anchored at (0,0).
pub fn roc_report(scores: &AttackScores) -> Result<RocReport> {
    let auc_value = auc(scores)?;
    let (mut members, mut nonmembers) = canonical_scores(scores);
    members.sort_by(f64::total_cmp);
    nonmembers.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> =
        members.iter().chain(nonmembers.iter()).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nm, nn) = (members.len(), nonmembers.len());
    let mut points = vec![(0.0, 0.0)];
    let (mut ti, mut fi) = (0usize, 0usize);
    for &theta in &thresholds {
        while ti < nm && members[ti] <= theta {
            ti += 1;
        }
        while fi < nn && nonmembers[fi] <= theta {
            fi += 1;
        }
        points.push((fi as f64 / nn as f64, ti as f64 / nm as f64));
    }
    let report = RocReport {
        auc: auc_value,
        tpr_at_1pct_fpr: tpr_at_fpr(scores, 0.01)?,
        roc_points: points,
        n_member: nm,
        n_nonmember: nn,
    };
    report.check()?;
    Ok(report)
}

/// Mean pairwise Euclidean distance over the full index grid, diagonal
/// included (V-statistic convention).
fn mean_pairwise_dist(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += x.sq_dist(y)?.sqrt();
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// Deterministic total order on batches (length, then shape, then f32 bit
/// patterns); used to canonicalize argument order.
fn batch_le(a: &[Tensor], b: &[Tensor]) -> bool {
    use std::cmp::Ordering;
    match a.len().cmp(&b.len()) {
        Ordering::Less => return true,
        Ordering::Greater => return false,
        Ordering::Equal => {}
    }
    for (x, y) in a.iter().zip(b) {
        match x.shape().cmp(y.shape()) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
        let xb = x.data().iter().map(|v| v.to_bits());
        let yb = y.data().iter().map(|v| v.to_bits());
        match xb.cmp(yb) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    true
}

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` over all pairs.
///
/// Arguments are reordered canonically before any arithmetic, so swapping
/// them cannot change a single floating-point operation: the statistic is
/// exactly symmetric, and exactly zero when both batches have equal content.
pub fn energy_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("energy distance needs two nonempty batches".into()));
    }
    let (x, y) = if batch_le(a, b) { (a, b) } else { (b, a) };
    let cross = mean_pairwise_dist(x, y)?;
    let within_x = mean_pairwise_dist(x, x)?;
    let within_y = mean_pairwise_dist(y, y)?;
    Ok(2.0 * cross - within_x - within_y)
}

/// Fraction of generated samples whose nearest training point lies within
/// `eps` (Euclidean).
pub fn memorization_fraction(generated: &[Tensor], train: &[Tensor], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("memorization eps {eps} must be > 0")));
    }
    if generated.is_empty() || train.is_empty() {
        return Err(Error::EmptyInput("memorization fraction needs both sets nonempty".into()));
    }
    let mut hits = 0usize;
    for g in generated {
        let mut nearest = f64::INFINITY;
        for t in train {
            nearest = nearest.min(g.sq_dist(t)?.sqrt());
        }
        if nearest <= eps {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Median nearest-neighbor distance over the distinct points of a dataset.
/// Exact duplicates collapse first, so a heavily duplicated sample cannot
/// drag the median to zero.
pub fn median_nn_distance(points: &[Tensor]) -> Result<f64> {
    let mut distinct: Vec<&Tensor> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| q.data() == p.data() && q.shape() == p.shape()) {
            distinct.push(p);
        }
    }
    if distinct.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "median nearest-neighbor distance needs >= 2 distinct points, got {}",
            distinct.len()
        )));
    }
    let mut nn_dists = Vec::with_capacity(distinct.len());
    for (i, p) in distinct.iter().enumerate() {
        let mut nearest = f64::INFINITY;
        for (j, q) in distinct.iter().enumerate() {
            if i != j {
                nearest = nearest.min(p.sq_dist(q)?.sqrt());
            }
        }
        nn_dists.push(nearest);
    }
    nn_dists.sort_by(f64::total_cmp);
    let n = nn_dists.len();
    Ok(if n % 2 == 1 {
        nn_dists[n / 2]
    } else {
        (nn_dists[n / 2 - 1] + nn_dists[n / 2]) / 2.0
    })
}

/// Default memorization radius: 10% of the dataset's median
/// nearest-neighbor distance.
pub fn default_memorization_eps(points: &[Tensor]) -> Result<f64> {
    Ok(0.1 * median_nn_distance(points)?)
}

/// Scores both sets with the SecMI t-error (stride 1) and reports the ROC
/// separating memorized from clean samples.
pub fn memorization_detection(
    model: &impl NoisePredictor,
    memorized: &[&LabeledSample],
    clean: &[&LabeledSample],
    sched: &NoiseSchedule,
    t_sec: usize,
    conditional: bool,
) -> Result<RocReport> {
    if memorized.is_empty() || clean.is_empty() {
        return Err(Error::EmptyInput("memorization detection needs both sets nonempty".into()));
    }
    let score_set = |set: &[&LabeledSample]| -> Result<Vec<f64>> {
        set.iter()
            .map(|s| {
                let cond = if conditional { s.tokens.first().copied() } else { None };
                secmi_score(model, &s.x0, cond, sched, t_sec, 1)
            })
            .collect()
    };
    let scores = AttackScores {
        attack: "secmi-memorization".into(),
        orientation: Orientation::LowerMeansMember,
        params: serde_json::json!({ "t_sec": t_sec, "stride": 1 }),
        member_scores: score_set(memorized)?,
        nonmember_scores: score_set(clean)?,
    };
    roc_report(&scores)
}
