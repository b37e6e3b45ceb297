//! Envelopes for sequences squeezed between two discrete growth recursions
//!
//! `a₁ + b₁ Σ_{s<t} f(u_s) ≤ u_t ≤ a₂ + b₂ Σ_{s<t} f(u_s)`
//!
//! with `f(u) = u^{p−1}` (Grönwall for p = 2, Bihari–LaSalle for p ≥ 3) or
//! `f(u) = u(1 − u)` (logistic).
//!
//! The Bihari–LaSalle envelopes carry a factor `(p−2)` in front of `b a^{p−2} t`,
//! which is what the comparison with `u̇ = b u^{p−1}` gives; without it the upper
//! envelope fails for p ≥ 4.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack when comparing a sequence against a bound.
pub const REL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceBoundSpec {
    pub p: u32,
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
}

impl SequenceBoundSpec {
    pub fn new(p: u32, a1: f64, a2: f64, b1: f64, b2: f64) -> Result<Self> {
        let s = Self { p, a1, a2, b1, b2 };
        s.validate()?;
        Ok(s)
    }

    /// Same offset and rate on both sides.
    pub fn exact(p: u32, a: f64, b: f64) -> Result<Self> {
        Self::new(p, a, a, b, b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidParams(format!("p must be ≥ 2, got {}", self.p)));
        }
        if !(self.a1 > 0.0 && self.a1 <= self.a2 && self.a2.is_finite()) {
            return Err(Error::InvalidParams(format!("need 0 < a₁ ≤ a₂, got {} and {}", self.a1, self.a2)));
        }
        if !(self.b1 >= 0.0 && self.b1 <= self.b2 && self.b2.is_finite()) {
            return Err(Error::InvalidParams(format!("need 0 ≤ b₁ ≤ b₂, got {} and {}", self.b1, self.b2)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeKind {
    Gronwall,
    Bihari,
    Logistic,
}

impl std::str::FromStr for EnvelopeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gronwall" => Ok(EnvelopeKind::Gronwall),
            "bihari" => Ok(EnvelopeKind::Bihari),
            "logistic" => Ok(EnvelopeKind::Logistic),
            other => Err(Error::Config(format!("unknown envelope kind `{other}`"))),
        }
    }
}

impl EnvelopeKind {
    fn increment(self, p: u32, u: f64) -> f64 {
        match self {
            EnvelopeKind::Gronwall | EnvelopeKind::Bihari => u.powi(p as i32 - 1),
            EnvelopeKind::Logistic => u * (1.0 - u),
        }
    }
}

/// `(a₁(1 + b₁)^t, a₂(1 + b₂)^t)`.
pub fn gronwall_envelope(spec: &SequenceBoundSpec, t: f64) -> Result<(f64, f64)> {
    if spec.p != 2 {
        return Err(Error::InvalidParams(format!("the linear envelope needs p = 2, got {}", spec.p)));
    }
    let f = |a: f64, b: f64| (a.ln() + t * b.ln_1p()).exp();
    Ok((f(spec.a1, spec.b1), f(spec.a2, spec.b2)))
}

/// Blow-up time `1 / ((p−2) b a^{p−2})` of `a(1 − (p−2) b a^{p−2} t)^{−1/(p−2)}`.
pub fn bihari_blowup_time(p: u32, a: f64, b: f64) -> f64 {
    1.0 / ((p as f64 - 2.0) * b * a.powi(p as i32 - 2))
}

fn bihari_curve(p: u32, a: f64, b: f64, t: f64) -> Result<f64> {
    let q = p as f64 - 2.0;
    let base = 1.0 - q * b * a.powf(q) * t;
    if base <= 0.0 {
        return Err(Error::BlowUp { t_star: bihari_blowup_time(p, a, b) });
    }
    Ok((a.ln() - base.ln() / q).exp())
}

/// `(a₁(1 − (p−2) b₁' a₁^{p−2} t)^{−1/(p−2)}, a₂(1 − (p−2) b₂ a₂^{p−2} t)^{−1/(p−2)})`.
///
/// With `u_prev = Some(u_{t−1})` the lower rate is `b₁' = b₁/(1 + b₁u_{t−1}^{p−2})^{p−1}`,
/// which holds for any sequence satisfying the recursion. With `None`, `b₁' = b₁`,
/// the simplified nonnegative-sequence form; that one is not a valid lower bound
/// in general (it already exceeds the extremal sequence at t = 1).
pub fn bihari_lasalle_envelope(spec: &SequenceBoundSpec, t: f64, u_prev: Option<f64>) -> Result<(f64, f64)> {
    if spec.p < 3 {
        return Err(Error::InvalidParams(format!("the polynomial envelope needs p ≥ 3, got {}", spec.p)));
    }
    let upper = bihari_curve(spec.p, spec.a2, spec.b2, t)?;
    let b_low = match u_prev {
        Some(u) => spec.b1 / (1.0 + spec.b1 * u.powi(spec.p as i32 - 2)).powi(spec.p as i32 - 1),
        None => spec.b1,
    };
    let lower = bihari_curve(spec.p, spec.a1, b_low, t)?;
    Ok((lower, upper))
}

/// Locates the blow-up of the upper envelope by bisection on t.
pub fn bihari_blowup_by_bisection(spec: &SequenceBoundSpec) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    while bihari_curve(spec.p, spec.a2, spec.b2, hi).is_ok() {
        hi *= 2.0;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return hi;
        }
        if bihari_curve(spec.p, spec.a2, spec.b2, mid).is_ok() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

fn logistic_curve(a: f64, rate: f64, t: f64) -> f64 {
    // a e^{ct}/(1 − a + a e^{ct}) as a sigmoid of the log-odds
    let z = (a / (1.0 - a)).ln() + rate * t;
    1.0 / (1.0 + (-z).exp())
}

/// Lower curve has rate `b₁/(1 + b₁)`, upper curve rate `b₂`, both started
/// from their offsets. Meaningful up to the first t with `u_t ≥ ½`.
pub fn logistic_envelope(spec: &SequenceBoundSpec, t: f64) -> Result<(f64, f64)> {
    if !(spec.a1 < 1.0 && spec.a2 < 1.0) {
        return Err(Error::InvalidParams(format!("offsets must lie in (0, 1), got {} and {}", spec.a1, spec.a2)));
    }
    Ok((logistic_curve(spec.a1, spec.b1 / (1.0 + spec.b1), t), logistic_curve(spec.a2, spec.b2, t)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationKind {
    RecursionLower,
    RecursionUpper,
    EnvelopeLower,
    EnvelopeUpper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: usize,
    pub kind: ViolationKind,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub kind: EnvelopeKind,
    /// Indices at which the envelope was compared.
    pub envelope_checked: usize,
    pub violation: Option<Violation>,
}

impl SandwichReport {
    pub fn ok(&self) -> bool {
        self.violation.is_none()
    }
}

/// Which lower Bihari–LaSalle envelope [`verify_sandwich`] checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BihariLower {
    Refined,
    Simplified,
}

fn below(value: f64, bound: f64) -> bool {
    value < bound - REL_TOL * bound.abs().max(f64::MIN_POSITIVE)
}

/// Checks that `u` satisfies the two-sided recursion of `kind` and lies inside
/// its envelope, returning the first failure.
///
/// The envelope is compared for every t before blow-up (Bihari–LaSalle) or,
/// for the logistic kind, for t before the first `u_t ≥ ½` and, for the lower
/// curve only, at that index as well.
pub fn verify_sandwich(u: &[f64], spec: &SequenceBoundSpec, kind: EnvelopeKind, lower_form: BihariLower) -> Result<SandwichReport> {
    spec.validate()?;
    match kind {
        EnvelopeKind::Gronwall if spec.p != 2 => return Err(Error::InvalidParams("the linear envelope needs p = 2".into())),
        EnvelopeKind::Bihari if spec.p < 3 => return Err(Error::InvalidParams("the polynomial envelope needs p ≥ 3".into())),
        _ => {}
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "sequence", step: 0 });
    }
    let report = |checked, violation| Ok(SandwichReport { kind, envelope_checked: checked, violation });

    let mut sum = 0.0;
    for (t, &ut) in u.iter().enumerate() {
        let lo = spec.a1 + spec.b1 * sum;
        let hi = spec.a2 + spec.b2 * sum;
        if below(ut, lo) {
            return report(0, Some(Violation { t, kind: ViolationKind::RecursionLower, value: ut, bound: lo }));
        }
        if below(hi, ut) {
            return report(0, Some(Violation { t, kind: ViolationKind::RecursionUpper, value: ut, bound: hi }));
        }
        sum += kind.increment(spec.p, ut);
    }

    let mut checked = 0;
    let t_half = u.iter().position(|&x| x >= 0.5);
    for (t, &ut) in u.iter().enumerate() {
        let tf = t as f64;
        let (lo, hi, check_upper) = match kind {
            EnvelopeKind::Gronwall => {
                let (lo, hi) = gronwall_envelope(spec, tf)?;
                (lo, hi, true)
            }
            EnvelopeKind::Bihari => {
                let prev = match lower_form {
                    BihariLower::Refined => Some(if t == 0 { 0.0 } else { u[t - 1] }),
                    BihariLower::Simplified => None,
                };
                match bihari_lasalle_envelope(spec, tf, prev) {
                    Ok((lo, hi)) => (lo, hi, true),
                    Err(Error::BlowUp { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
            EnvelopeKind::Logistic => {
                if t_half.is_some_and(|h| t > h) {
                    break;
                }
                let (lo, hi) = logistic_envelope(spec, tf)?;
                (lo, hi, t_half != Some(t))
            }
        };
        checked += 1;
        if below(ut, lo) {
            return report(checked, Some(Violation { t, kind: ViolationKind::EnvelopeLower, value: ut, bound: lo }));
        }
        if check_upper && below(hi, ut) {
            return report(checked, Some(Violation { t, kind: ViolationKind::EnvelopeUpper, value: ut, bound: hi }));
        }
    }
    report(checked, None)
}

/// Iterates `u_t = a + b Σ_{s<t} f(u_s)` for up to `len` terms, stopping on overflow.
pub fn extremal_sequence(kind: EnvelopeKind, p: u32, a: f64, b: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut sum = 0.0;
    for _ in 0..len {
        let u = a + b * sum;
        if !u.is_finite() {
            break;
        }
        out.push(u);
        sum += kind.increment(p, u);
    }
    out
}

/// A sequence satisfying the two-sided recursion: each term is
/// `a_t + b_t Σ_{s<t} f(u_s)` with `a_t ∈ [a₁, a₂]`, `b_t ∈ [b₁, b₂]` drawn
/// uniformly. Stops early at `stop_at` (inclusive) or on overflow.
pub fn random_sequence<R: Rng + ?Sized>(spec: &SequenceBoundSpec, kind: EnvelopeKind, len: usize, stop_at: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut sum = 0.0;
    for _ in 0..len {
        let a = spec.a1 + (spec.a2 - spec.a1) * rng.random::<f64>();
        let b = spec.b1 + (spec.b2 - spec.b1) * rng.random::<f64>();
        let u = a + b * sum;
        if !u.is_finite() {
            break;
        }
        out.push(u);
        if u >= stop_at {
            break;
        }
        sum += kind.increment(spec.p, u);
    }
    out
}

/// Outcome of [`randomized_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub kind: EnvelopeKind,
    pub trials: usize,
    pub passed: usize,
    /// Total number of indices compared against the envelope.
    pub envelope_checked: usize,
    pub first_failure: Option<(SequenceBoundSpec, Violation)>,
}

/// Draws `trials` random specs with `a₁ ∈ [0.01, 0.2)`, `b₁ ∈ [0.01, 0.5)` and
/// upper coefficients up to twice the lower ones, builds one random sequence
/// per spec and checks it with [`verify_sandwich`]. Bihari specs use
/// `p ∈ {3, 4, 5}`; logistic sequences stop at the first term ≥ ½.
pub fn randomized_suite<R: Rng + ?Sized>(kind: EnvelopeKind, trials: usize, rng: &mut R) -> Result<SuiteReport> {
    let mut rep = SuiteReport { kind, trials, passed: 0, envelope_checked: 0, first_failure: None };
    for _ in 0..trials {
        let a1 = rng.random_range(0.01..0.2);
        let b1 = rng.random_range(0.01..0.5);
        let p = match kind {
            EnvelopeKind::Bihari => 3 + rng.random_range(0..3),
            _ => 2,
        };
        let spec = SequenceBoundSpec::new(p, a1, a1 * rng.random_range(1.0..2.0), b1, b1 * rng.random_range(1.0..2.0))?;
        let u = match kind {
            EnvelopeKind::Gronwall => random_sequence(&spec, kind, 200, f64::INFINITY, rng),
            EnvelopeKind::Bihari => random_sequence(&spec, kind, 5000, f64::INFINITY, rng),
            EnvelopeKind::Logistic => random_sequence(&spec, kind, 100_000, 0.5, rng),
        };
        let r = verify_sandwich(&u, &spec, kind, BihariLower::Refined)?;
        rep.envelope_checked += r.envelope_checked;
        match r.violation {
            None => rep.passed += 1,
            Some(v) if rep.first_failure.is_none() => rep.first_failure = Some((spec, v)),
            Some(_) => {}
        }
    }
    Ok(rep)
}
