//! Exhaustive check, on finite supports, that a representation independent of
//! the sensitive attribute yields zero DP/EO/EOpp for every classifier, and
//! that DP never exceeds the total variation distance between the
//! group-conditional representation distributions.

use std::fmt::Write as _;

use rand::Rng as _;
use thiserror::Error;

use crate::rng::{self, Rng, Stream};

/// Largest support enumerated exhaustively (2^8 acceptance sets).
pub const MAX_SUPPORT: usize = 8;
pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LemmaError {
    #[error("support size {0} outside 1..={MAX_SUPPORT}")]
    Support(usize),
    #[error("table needs {expected} entries, got {got}")]
    Len { expected: usize, got: usize },
    #[error("entry {0} is negative or non-finite")]
    Entry(usize),
    #[error("entries sum to {0}, not 1")]
    Mass(f64),
    #[error("sensitive group {0} has zero probability")]
    ZeroMass(usize),
}

/// Joint table over `(z, s, y)` with `s, y ∈ {0, 1}`, stored `[z][s][y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    support: usize,
    table: Vec<f64>,
}

/// Acceptance set `A ⊆ support(Z)` as a bit mask: bit `z` set means `Ŷ=1` at `z`.
pub type AcceptanceSet = u32;

/// Gaps of one classifier; `None` where a conditioning cell has no mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaps {
    pub dp: Option<f64>,
    pub eo: Option<f64>,
    pub eopp: Option<f64>,
}

impl DiscreteJoint {
    pub fn new(support: usize, table: Vec<f64>) -> Result<Self, LemmaError> {
        if support == 0 || support > MAX_SUPPORT {
            return Err(LemmaError::Support(support));
        }
        if table.len() != 4 * support {
            return Err(LemmaError::Len {
                expected: 4 * support,
                got: table.len(),
            });
        }
        if let Some(i) = table.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(LemmaError::Entry(i));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > TOLERANCE {
            return Err(LemmaError::Mass(total));
        }
        Ok(Self { support, table })
    }

    /// `p(z) · p(s) · p(y|z)`: independent of `S` by construction.
    pub fn independent(p_z: &[f64], p_s1: f64, p_y1_given_z: &[f64]) -> Result<Self, LemmaError> {
        let mut table = Vec::with_capacity(4 * p_z.len());
        for (z, &pz) in p_z.iter().enumerate() {
            for ps in [1.0 - p_s1, p_s1] {
                let py1 = p_y1_given_z[z];
                table.push(pz * ps * (1.0 - py1));
                table.push(pz * ps * py1);
            }
        }
        Self::new(p_z.len(), table)
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn p(&self, z: usize, s: usize, y: usize) -> f64 {
        self.table[4 * z + 2 * s + y]
    }

    fn mass(&self, accept: impl Fn(usize) -> bool, s: usize, y: Option<usize>) -> f64 {
        (0..self.support)
            .filter(|&z| accept(z))
            .map(|z| match y {
                Some(y) => self.p(z, s, y),
                None => self.p(z, s, 0) + self.p(z, s, 1),
            })
            .sum()
    }

    fn group_mass(&self, s: usize) -> f64 {
        self.mass(|_| true, s, None)
    }

    /// `P(Z=z | S=s)` for every `z`.
    pub fn conditional(&self, s: usize) -> Result<Vec<f64>, LemmaError> {
        let m = self.group_mass(s);
        if m <= 0.0 {
            return Err(LemmaError::ZeroMass(s));
        }
        Ok((0..self.support)
            .map(|z| (self.p(z, s, 0) + self.p(z, s, 1)) / m)
            .collect())
    }

    /// `½ Σ_z |P(z) − Q(z)|` between `Z|S=0` and `Z|S=1`.
    pub fn tv_distance(&self) -> Result<f64, LemmaError> {
        let p = self.conditional(0)?;
        let q = self.conditional(1)?;
        Ok(0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    /// `{z : P(z) > Q(z)}`, where the supremum defining the TV distance is attained.
    pub fn tv_maximizer(&self) -> Result<AcceptanceSet, LemmaError> {
        let p = self.conditional(0)?;
        let q = self.conditional(1)?;
        Ok((0..self.support).filter(|&z| p[z] > q[z]).fold(0, |m, z| m | (1 << z)))
    }

    /// Exact gaps of the classifier accepting `set`.
    pub fn gaps(&self, set: AcceptanceSet) -> Gaps {
        let accept = |z: usize| set & (1 << z) != 0;
        let rate = |s: usize, y: Option<usize>| {
            let denom = self.mass(|_| true, s, y);
            (denom > 0.0).then(|| self.mass(accept, s, y) / denom)
        };
        let gap = |y: Option<usize>| Some((rate(0, y)? - rate(1, y)?).abs());
        let eopp = gap(Some(1));
        let eo = gap(Some(0)).zip(eopp).map(|(a, b)| 0.5 * (a + b));
        Gaps {
            dp: gap(None),
            eo,
            eopp,
        }
    }

    pub fn all_sets(&self) -> impl Iterator<Item = AcceptanceSet> {
        0..(1u32 << self.support)
    }
}

/// Result of checking one joint.
#[derive(Debug, Clone, PartialEq)]
pub enum Check {
    Passed { tv: f64, max_dp: f64 },
    Violated(String),
    Skipped(String),
}

/// Independence case: every defined gap of every classifier is zero.
pub fn check_independent(joint: &DiscreteJoint) -> Check {
    if let Some(s) = (0..2).find(|&s| joint.group_mass(s) <= 0.0) {
        return Check::Skipped(format!("sensitive group {s} has zero mass"));
    }
    let mut max_dp: f64 = 0.0;
    for set in joint.all_sets() {
        let g = joint.gaps(set);
        for (name, v) in [("dp", g.dp), ("eo", g.eo), ("eopp", g.eopp)] {
            if let Some(v) = v {
                if v > TOLERANCE {
                    return Check::Violated(format!("{name}={v:e} for acceptance set {set:#b}"));
                }
            }
        }
        max_dp = max_dp.max(g.dp.unwrap_or(0.0));
    }
    Check::Passed {
        tv: joint.tv_distance().unwrap_or(0.0),
        max_dp,
    }
}

/// General case: DP ≤ TV for all sets, with equality at the TV maximizer.
pub fn check_bound(joint: &DiscreteJoint) -> Check {
    let tv = match joint.tv_distance() {
        Ok(tv) => tv,
        Err(e) => return Check::Skipped(e.to_string()),
    };
    let mut max_dp: f64 = 0.0;
    for set in joint.all_sets() {
        let dp = joint.gaps(set).dp.expect("both groups have mass");
        if dp > tv + TOLERANCE {
            return Check::Violated(format!("dp={dp} exceeds tv={tv} for acceptance set {set:#b}"));
        }
        max_dp = max_dp.max(dp);
    }
    let star = joint.tv_maximizer().expect("both groups have mass");
    let at_star = joint.gaps(star).dp.expect("both groups have mass");
    if (at_star - tv).abs() > TOLERANCE || (max_dp - tv).abs() > TOLERANCE {
        return Check::Violated(format!(
            "sup not attained: tv={tv}, max dp={max_dp}, dp at maximizer={at_star}"
        ));
    }
    Check::Passed { tv, max_dp }
}

fn simplex(rng: &mut Rng, n: usize, sparsity: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < sparsity {
                    0.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let total: f64 = v.iter().sum();
        if total > 0.0 {
            return v.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Random joint with product structure `p(z)p(s)p(y|z)`.
pub fn random_independent(rng: &mut Rng) -> DiscreteJoint {
    let support = rng.random_range(1..=MAX_SUPPORT);
    let p_z = simplex(rng, support, 0.2);
    let p_s1 = rng.random_range(0.05..0.95);
    let p_y: Vec<f64> = (0..support).map(|_| rng.random::<f64>()).collect();
    DiscreteJoint::independent(&p_z, p_s1, &p_y).expect("valid by construction")
}

/// Random joint with no structure; a fifth of the cells are zeroed.
pub fn random_joint(rng: &mut Rng) -> DiscreteJoint {
    let support = rng.random_range(1..=MAX_SUPPORT);
    let mut table = simplex(rng, 4 * support, 0.2);
    // renormalize so the sum is 1 to within rounding of a single division
    let total: f64 = table.iter().sum();
    table.iter_mut().for_each(|p| *p /= total);
    DiscreteJoint::new(support, table).expect("valid by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub kind: &'static str,
    pub support: usize,
    pub tv: f64,
    pub max_dp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub trial: usize,
    pub kind: &'static str,
    pub detail: String,
    pub joint: DiscreteJoint,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LemmaReport {
    pub trials: usize,
    pub rows: Vec<TrialRow>,
    pub violations: Vec<Violation>,
    pub skipped: Vec<String>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn checked(&self, kind: &str) -> usize {
        self.rows.iter().filter(|r| r.kind == kind).count()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "trials={} independent_checked={} bound_checked={} skipped={} violations={}",
            self.trials,
            self.checked("independent"),
            self.checked("bound"),
            self.skipped.len(),
            self.violations.len()
        );
        for note in &self.skipped {
            let _ = writeln!(out, "skipped: {note}");
        }
        for v in &self.violations {
            let _ = writeln!(
                out,
                "violation: trial {} ({}): {}; joint[z][s][y] = {:?}",
                v.trial,
                v.kind,
                v.detail,
                v.joint.table()
            );
        }
        out.push_str(if self.passed() { "PASS\n" } else { "FAIL\n" });
        out
    }

    /// `trial,kind,support,tv,max_dp`
    pub fn csv(&self) -> String {
        let mut out = String::from("trial,kind,support,tv,max_dp\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.17e},{:.17e}",
                r.trial, r.kind, r.support, r.tv, r.max_dp
            );
        }
        out
    }
}

/// Each trial draws one independent joint and one unstructured joint from
/// its own stream and checks both exhaustively over all acceptance sets.
pub fn verify_lemma(trials: usize, seed: u64) -> LemmaReport {
    let mut report = LemmaReport {
        trials,
        ..Default::default()
    };
    for trial in 0..trials {
        let mut rng = rng::stream(seed, Stream::LemmaTrials, trial as u32);
        let cases = [
            (
                "independent",
                random_independent(&mut rng),
                check_independent as fn(&DiscreteJoint) -> Check,
            ),
            ("bound", random_joint(&mut rng), check_bound),
        ];
        for (kind, joint, check) in cases {
            match check(&joint) {
                Check::Passed { tv, max_dp } => report.rows.push(TrialRow {
                    trial,
                    kind,
                    support: joint.support(),
                    tv,
                    max_dp,
                }),
                Check::Skipped(why) => report.skipped.push(format!("trial {trial} ({kind}): {why}")),
                Check::Violated(detail) => report.violations.push(Violation {
                    trial,
                    kind,
                    detail,
                    joint,
                }),
            }
        }
    }
    report
}
