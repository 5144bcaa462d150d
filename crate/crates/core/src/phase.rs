//! Learning-phase classification from layer-wise steepness profiles,
//! debounced phase-transition detection, and grokking detection from
//! accuracy traces.
//!
//! Phase labels follow the layer-ordering of the steepness profile: steeper
//! early layers (phase I), steeper deep layers (phase II), or near-constant
//! steepness across layers (phase III). The ordering test is ordinal, so
//! Spearman rank correlation is used rather than a fitted slope.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhaseError {
    #[error("need at least 3 layers after exclusion, got {0}")]
    TooFewLayers(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseLabel {
    PhaseI,
    PhaseII,
    PhaseIII,
    Indeterminate,
}

impl PhaseLabel {
    pub fn name(self) -> &'static str {
        match self {
            PhaseLabel::PhaseI => "I",
            PhaseLabel::PhaseII => "II",
            PhaseLabel::PhaseIII => "III",
            PhaseLabel::Indeterminate => "indeterminate",
        }
    }
}

/// A classification with its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct PhaseReading {
    pub label: PhaseLabel,
    /// Spearman rank correlation of steepness against layer index.
    pub rho: f64,
    /// Relative spread (max - min) / mean of the steepness profile.
    pub spread: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PhaseOptions {
    /// Relative spread below which the profile counts as flat (phase III).
    pub tau_flat: f64,
    /// |rho| at or above which the ordering counts as monotone.
    pub tau_rho: f64,
    /// Trailing layers dropped before classification; the last couple of
    /// layers sit next to the readout and follow their own schedule.
    pub exclude_last: usize,
}

impl Default for PhaseOptions {
    fn default() -> Self {
        PhaseOptions { tau_flat: 0.15, tau_rho: 0.6, exclude_last: 2 }
    }
}

/// Average-rank Spearman correlation (ties get averaged ranks).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        0.0
    } else {
        num / (dx * dy).sqrt()
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then_with(|| a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Classify an already-trimmed steepness profile (earliest hidden layer
/// first). Flatness is checked before ordering.
pub fn classify_phase(steepness: &[f64], opts: &PhaseOptions) -> Result<PhaseReading, PhaseError> {
    if steepness.len() < 3 {
        return Err(PhaseError::TooFewLayers(steepness.len()));
    }
    let max = steepness.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = steepness.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = steepness.iter().sum::<f64>() / steepness.len() as f64;
    let spread = if mean == 0.0 { 0.0 } else { (max - min) / mean };
    let idx: Vec<f64> = (0..steepness.len()).map(|i| i as f64).collect();
    let rho = spearman_rho(steepness, &idx);
    let label = if spread < opts.tau_flat {
        PhaseLabel::PhaseIII
    } else if rho <= -opts.tau_rho {
        PhaseLabel::PhaseI
    } else if rho >= opts.tau_rho {
        PhaseLabel::PhaseII
    } else {
        PhaseLabel::Indeterminate
    };
    Ok(PhaseReading { label, rho, spread })
}

/// Classify a full layer profile, dropping the trailing `exclude_last`
/// layers first.
pub fn classify_phase_profile(all_layers: &[f64], opts: &PhaseOptions) -> Result<PhaseReading, PhaseError> {
    let keep = all_layers.len().saturating_sub(opts.exclude_last);
    classify_phase(&all_layers[..keep], opts)
}

/// Emit a transition whenever the label changes and the new label persists
/// for at least `debounce` consecutive snapshots (the transition step is the
/// first snapshot of the new run).
pub fn detect_transition(
    trace: &[(usize, PhaseLabel)],
    debounce: usize,
) -> Vec<(usize, PhaseLabel, PhaseLabel)> {
    let d = debounce.max(1);
    let mut out = Vec::new();
    if trace.is_empty() {
        return out;
    }
    let mut current = trace[0].1;
    let mut i = 1;
    while i < trace.len() {
        let candidate = trace[i].1;
        if candidate != current {
            let run_len = trace[i..].iter().take_while(|(_, l)| *l == candidate).count();
            if run_len >= d {
                out.push((trace[i].0, current, candidate));
                current = candidate;
                i += run_len;
                continue;
            } else {
                i += run_len;
                continue;
            }
        }
        i += 1;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct GrokkingParams {
    /// Random-guess accuracy level (0.1 for ten balanced classes).
    pub chance: f64,
    /// Training accuracy that counts as memorized.
    pub theta_train: f64,
    /// Minimum test-accuracy rise that counts as the jump.
    pub theta_jump: f64,
    /// Minimum plateau length in snapshots.
    pub window: usize,
}

impl Default for GrokkingParams {
    fn default() -> Self {
        GrokkingParams { chance: 0.1, theta_train: 0.95, theta_jump: 0.3, window: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct GrokkingReport {
    pub detected: bool,
    /// First snapshot step at which test accuracy leaves the chance band.
    pub onset_step: Option<usize>,
    /// Index range (into the trace) of the detected plateau.
    pub plateau: Option<(usize, usize)>,
    /// Test-accuracy rise from the plateau level to the post-onset maximum.
    pub jump: f64,
}

/// Detect delayed generalization: a plateau of at least `window` snapshots
/// with train accuracy >= theta_train while test accuracy stays within half
/// a jump of chance, followed by a test-accuracy rise of at least
/// theta_jump above the plateau level.
pub fn detect_grokking(
    train_acc: &[(usize, f64)],
    test_acc: &[(usize, f64)],
    params: &GrokkingParams,
) -> GrokkingReport {
    assert_eq!(train_acc.len(), test_acc.len(), "traces must align");
    let n = train_acc.len();
    let band = params.chance + params.theta_jump / 2.0;
    let not_detected = GrokkingReport { detected: false, onset_step: None, plateau: None, jump: 0.0 };
    if n == 0 {
        return not_detected;
    }
    let plateau_ok = |i: usize| train_acc[i].1 >= params.theta_train && test_acc[i].1 <= band;

    let mut start = 0;
    while start + params.window <= n {
        if !(start..start + params.window).all(plateau_ok) {
            start += 1;
            continue;
        }
        // Extend the plateau as far as it holds.
        let mut end = start + params.window - 1;
        while end + 1 < n && plateau_ok(end + 1) {
            end += 1;
        }
        let plateau_level =
            test_acc[start..=end].iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
        // Onset: first later snapshot out of the chance band.
        let onset_idx = (end + 1..n).find(|&i| test_acc[i].1 > band);
        if let Some(oi) = onset_idx {
            let post_max = test_acc[oi..].iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
            let jump = post_max - plateau_level;
            if jump >= params.theta_jump {
                return GrokkingReport {
                    detected: true,
                    onset_step: Some(test_acc[oi].0),
                    plateau: Some((start, end)),
                    jump,
                };
            }
        }
        start = end + 1;
    }
    not_detected
}
