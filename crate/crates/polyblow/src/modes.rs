//! Mode coordinates of the deviation from the blowup profile.
//!
//! The deviation q = w - varphi is split into tracked eigen-coefficients
//! q_0..q_M, a polynomially weighted remainder, and an outer part living
//! beyond the profile scale |y| ~ K s^(1/2m). On top of the split sit the
//! trapped-set membership test, seed data for the shooting argument, the
//! shooting search itself, and the blowup readout in unscaled variables.

use crate::constants::ModelParams;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::kernel::KernelTable;
use crate::num::{dense_solve, trapezoid_prod, Accum};
use crate::profile::Profile;
use crate::solver::{InitialData, Solver, SolverConfig, SolverState};
use crate::spectral::{self, EigenPolynomial};

/// Outcome of a single raw projection.
#[derive(Clone, Copy, Debug)]
pub struct ModeProjection {
    pub value: f64,
    /// True when the dual row still carries weight at the grid edge, so the
    /// pairing is truncated there and the value is only good to roughly the
    /// edge magnitude times the edge tail width.
    pub tail_truncated: bool,
}

/// <q, psi*_k> by the trapezoid rule on the grid of `q`. The dual row is
/// interpolated from the table and taken as zero beyond the table edge;
/// `tail_truncated` flags grids narrower than the table that cut the dual
/// off while its stored values still exceed 1e-12 of the peak. A grid that
/// covers the whole table sees everything the table knows, so it is never
/// flagged; the table's own tail budget is covered by its mass check.
pub fn project_mode(q: &Field, k: usize, table: &KernelTable) -> Result<ModeProjection> {
    let dual = sample_dual(table, k, q)?;
    let peak = dual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edge = dual[0].abs().max(dual[dual.len() - 1].abs());
    Ok(ModeProjection {
        value: trapezoid_prod(q.spacing(), q.values(), &dual),
        tail_truncated: q.half_width() < table.half_width() && edge > 1e-12 * peak,
    })
}

/// Dual row psi*_k sampled on the grid of `like`, zero beyond the table.
fn sample_dual(table: &KernelTable, k: usize, like: &Field) -> Result<Vec<f64>> {
    (0..like.len())
        .map(|i| {
            let y = like.y(i);
            if y.abs() > table.half_width() {
                Ok(0.0)
            } else {
                table.psi_star_interp(k, y)
            }
        })
        .collect()
}

/// The deviation q at one instant, split into tracked coefficients, the
/// in-span remainder, and the outer part.
#[derive(Clone, Debug)]
pub struct ModeDecomposition {
    pub s: f64,
    /// Tracked coefficients q_0..q_M.
    pub q: Vec<f64>,
    /// q minus the tracked span; pairs to zero against every tracked dual
    /// on the grid, so the coefficients absorb all the span content.
    pub q_bot: Field,
    /// (1 - chi(y, s)) q with chi cut at |y| = K s^(1/2m).
    pub q_e: Field,
    /// sup |q_bot| / (1 + |y|^(M+1)).
    pub weighted_bot_norm: f64,
    /// sup |q_e|.
    pub qe_norm: f64,
}

impl ModeDecomposition {
    /// Largest grid pairing of q_bot against a tracked dual, the quantity
    /// the split drives to zero.
    pub fn orthogonality_defect(&self, projector: &ModeProjector) -> f64 {
        (0..self.q.len())
            .map(|k| projector.raw_pairing(self.q_bot.values(), k).abs())
            .fold(0.0, f64::max)
    }
}

/// Projector onto the tracked modes for one fixed grid.
///
/// Raw grid pairings of the sampled basis against the sampled duals drift
/// from delta_jk once the grid truncates a dual tail, which for m = 3
/// happens well inside the tracked range on any affordable domain. The
/// projector therefore solves the small Gram system, so its coefficients
/// are exactly biorthogonal to the sampled basis on the grid and the
/// remainder it returns re-pairs to zero regardless of that truncation.
pub struct ModeProjector<'a> {
    table: &'a KernelTable,
    params: ModelParams,
    grid: Field,
    /// Sampled eigen-polynomials psi_0..psi_M.
    psis: Vec<Vec<f64>>,
    /// Sampled dual rows psi*_0..psi*_M.
    duals: Vec<Vec<f64>>,
    /// gram[k][j] = <psi_j, psi*_k> on the grid.
    gram: Vec<Vec<f64>>,
}

impl<'a> ModeProjector<'a> {
    pub fn new(table: &'a KernelTable, params: ModelParams, l: f64, n: usize) -> Result<Self> {
        if table.m != params.m {
            return Err(Error::Config(format!(
                "projector for m = {} cannot use an m = {} kernel table",
                params.m, table.m
            )));
        }
        let m_cut = params.mode_cutoff;
        if table.j_max < m_cut {
            return Err(Error::ModeOutOfRange {
                k: m_cut,
                max: table.j_max,
            });
        }
        let grid = Field::zeros(l, n)?;
        let mut psis: Vec<Vec<f64>> = Vec::with_capacity(m_cut + 1);
        let mut duals: Vec<Vec<f64>> = Vec::with_capacity(m_cut + 1);
        for k in 0..=m_cut {
            let poly = spectral::eigenfunction(params.m, k)?;
            psis.push((0..n).map(|i| spectral::eval(&poly, grid.y(i))).collect());
            duals.push(sample_dual(table, k, &grid)?);
        }
        let h = grid.spacing();
        let gram: Vec<Vec<f64>> = duals
            .iter()
            .map(|dual| {
                psis.iter()
                    .map(|psi| trapezoid_prod(h, psi, dual))
                    .collect()
            })
            .collect();
        Ok(Self {
            table,
            params,
            grid,
            psis,
            duals,
            gram,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn table(&self) -> &KernelTable {
        self.table
    }

    /// Number of tracked modes, M + 1.
    pub fn mode_count(&self) -> usize {
        self.psis.len()
    }

    /// Trapezoid pairing of grid values against the sampled dual k.
    pub fn raw_pairing(&self, values: &[f64], k: usize) -> f64 {
        trapezoid_prod(self.grid.spacing(), values, &self.duals[k])
    }

    /// Split q at time s with outer cut at |y| = k_const s^(1/2m).
    pub fn decompose(&self, q: &Field, s: f64, k_const: f64) -> Result<ModeDecomposition> {
        if q.len() != self.grid.len()
            || (q.half_width() - self.grid.half_width()).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "field grid ({} points, half width {}) does not match the projector grid \
                 ({} points, half width {})",
                q.len(),
                q.half_width(),
                self.grid.len(),
                self.grid.half_width()
            )));
        }
        if s <= 1.0 {
            return Err(Error::Config(format!(
                "decomposition needs s > 1, got s = {s}"
            )));
        }
        if k_const <= 0.0 {
            return Err(Error::Config(format!(
                "outer cut constant must be positive, got {k_const}"
            )));
        }
        let count = self.mode_count();
        let b: Vec<f64> = (0..count).map(|k| self.raw_pairing(q.values(), k)).collect();

        // Column-equilibrated copy of the Gram system; partial pivoting alone
        // mixes badly scaled columns once the high-mode pairings drift.
        let scale: Vec<f64> = (0..count)
            .map(|j| {
                let c = (0..count).map(|k| self.gram[k][j].abs()).fold(0.0, f64::max);
                if c > 0.0 {
                    c
                } else {
                    1.0
                }
            })
            .collect();
        let mut a: Vec<Vec<f64>> = (0..count)
            .map(|k| (0..count).map(|j| self.gram[k][j] / scale[j]).collect())
            .collect();
        let mut coeffs = b.clone();
        dense_solve(&mut a, &mut coeffs)?;
        for (c, sc) in coeffs.iter_mut().zip(&scale) {
            *c /= sc;
        }

        let n = q.len();
        let mut bot = vec![0.0; n];
        for (i, slot) in bot.iter_mut().enumerate() {
            let mut acc = Accum::new();
            acc.add(q.values()[i]);
            for (c, psi) in coeffs.iter().zip(&self.psis) {
                acc.add_prod(-*c, psi[i]);
            }
            *slot = acc.value();
        }
        let q_bot = Field::new(q.half_width(), bot)?;

        let root = s.powf(1.0 / (2.0 * self.params.m as f64));
        let cut = k_const * root;
        let mut outer = vec![0.0; n];
        for (i, slot) in outer.iter_mut().enumerate() {
            *slot = (1.0 - Profile::chi0(q.y(i).abs() / cut)) * q.values()[i];
        }
        let q_e = Field::new(q.half_width(), outer)?;

        let wexp = (self.params.mode_cutoff + 1) as i32;
        let weighted_bot_norm = (0..n)
            .map(|i| q_bot.values()[i].abs() / (1.0 + q.y(i).abs().powi(wexp)))
            .fold(0.0, f64::max);
        Ok(ModeDecomposition {
            s,
            q: coeffs,
            q_bot,
            qe_norm: q_e.sup_norm(),
            q_e,
            weighted_bot_norm,
        })
    }
}

/// One bound of the trapped set, with how much room is left under it.
#[derive(Clone, Debug)]
pub struct BoundCheck {
    pub name: String,
    /// Mode index when the bound constrains a single coefficient.
    pub mode: Option<usize>,
    pub value: f64,
    pub bound: f64,
    /// 1 - value / bound: nonnegative inside, more positive means more room.
    pub margin: f64,
}

/// Verdict of the trapped-set membership test at one instant.
#[derive(Clone, Debug)]
pub struct ShrinkingVerdict {
    pub a: f64,
    pub checks: Vec<BoundCheck>,
    /// Every margin nonnegative.
    pub inside: bool,
    /// Name of the smallest margin.
    pub binding: String,
}

impl ShrinkingVerdict {
    /// Mode index of the binding bound, when it constrains a single mode.
    pub fn binding_mode(&self) -> Option<usize> {
        self.checks
            .iter()
            .find(|c| c.name == self.binding)
            .and_then(|c| c.mode)
    }
}

/// Membership test for the trapped set at amplitude A: unstable and
/// neutral coefficients within A/s^2 and A^2 log s / s^2, decaying
/// coefficients within A^k s^(-(k+1)/2m), and the two remainders within
/// their polynomially loose envelopes.
pub fn check_shrinking(
    dec: &ModeDecomposition,
    a: f64,
    params: &ModelParams,
) -> Result<ShrinkingVerdict> {
    if a < 1.0 {
        return Err(Error::Config(format!(
            "trapped-set amplitude must satisfy A >= 1, got {a}"
        )));
    }
    if dec.s <= 1.0 {
        return Err(Error::Config(format!(
            "trapped-set bounds need s > 1, got s = {}",
            dec.s
        )));
    }
    let two_m = 2 * params.m as usize;
    let m_cut = params.mode_cutoff;
    if dec.q.len() != m_cut + 1 {
        return Err(Error::Config(format!(
            "decomposition carries {} coefficients, the model tracks {}",
            dec.q.len(),
            m_cut + 1
        )));
    }
    let s = dec.s;
    let inv = 1.0 / (2.0 * params.m as f64);
    let mut checks = Vec::with_capacity(m_cut + 3);
    let mut push = |name: String, mode: Option<usize>, value: f64, bound: f64| {
        checks.push(BoundCheck {
            name,
            mode,
            value,
            bound,
            margin: 1.0 - value / bound,
        });
    };
    for (k, qk) in dec.q.iter().enumerate().take(two_m) {
        push(format!("mode{k}"), Some(k), qk.abs(), a / (s * s));
    }
    push(
        "neutral".to_string(),
        Some(two_m),
        dec.q[two_m].abs(),
        a * a * s.ln() / (s * s),
    );
    for (k, qk) in dec.q.iter().enumerate().skip(two_m + 1) {
        push(
            format!("mode{k}"),
            Some(k),
            qk.abs(),
            a.powi(k as i32) * s.powf(-((k + 1) as f64) * inv),
        );
    }
    push(
        "remainder".to_string(),
        None,
        dec.weighted_bot_norm,
        a.powi(m_cut as i32 + 1) * s.powf(-((m_cut + 2) as f64) * inv),
    );
    push(
        "outer".to_string(),
        None,
        dec.qe_norm,
        a.powi(m_cut as i32 + 2) * s.powf(-inv),
    );
    let inside = checks.iter().all(|c| c.margin >= 0.0);
    let binding = checks
        .iter()
        .min_by(|x, y| x.margin.total_cmp(&y.margin))
        .map(|c| c.name.clone())
        .unwrap_or_default();
    Ok(ShrinkingVerdict {
        a,
        checks,
        inside,
        binding,
    })
}

/// Seed deviation (A/s0^2) chi(2y, s0) sum_k d_k psi_k over the unstable
/// modes k < 2m. The doubled cutoff argument keeps the support inside
/// |y| <= K s0^(1/2m).
pub fn build_initial_data(
    a: f64,
    s0: f64,
    d: &[f64],
    params: &ModelParams,
    k_const: f64,
    l: f64,
    n: usize,
) -> Result<Field> {
    if s0 < std::f64::consts::E {
        return Err(Error::Config(format!(
            "seed time must satisfy s0 >= e, got {s0}"
        )));
    }
    let two_m = 2 * params.m as usize;
    if d.len() != two_m {
        return Err(Error::Config(format!(
            "seed needs {} coefficients (one per unstable mode), got {}",
            two_m,
            d.len()
        )));
    }
    if let Some(bad) = d.iter().find(|v| v.abs() > a) {
        return Err(Error::Config(format!(
            "seed coefficient {bad} outside the box |d_k| <= A = {a}"
        )));
    }
    if k_const <= 0.0 {
        return Err(Error::Config(format!(
            "outer cut constant must be positive, got {k_const}"
        )));
    }
    let polys: Vec<EigenPolynomial> = (0..two_m)
        .map(|k| spectral::eigenfunction(params.m, k))
        .collect::<Result<_>>()?;
    let amp = a / (s0 * s0);
    let cut = k_const * s0.powf(1.0 / (2.0 * params.m as f64));
    Field::sample(l, n, |y| {
        let chi = Profile::chi0(2.0 * y.abs() / cut);
        if chi == 0.0 {
            return 0.0;
        }
        let mut sum = Accum::new();
        for (dk, poly) in d.iter().zip(&polys) {
            sum.add_prod(*dk, spectral::eval(poly, y));
        }
        amp * chi * sum.value()
    })
}

/// One recorded instant of a tracked trajectory.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub s: f64,
    pub dec: ModeDecomposition,
    pub verdict: ShrinkingVerdict,
}

/// Time-ordered sequence of decompositions along one run.
#[derive(Clone, Debug, Default)]
pub struct ModeTrace {
    entries: Vec<TraceEntry>,
}

impl ModeTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append one instant; s must strictly increase along the trace.
    pub fn push(&mut self, entry: TraceEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.s <= last.s {
                return Err(Error::Config(format!(
                    "trace times must strictly increase: {} after {}",
                    entry.s, last.s
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First recorded instant outside the trapped set.
    pub fn first_outside(&self) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| !e.verdict.inside)
    }

    /// Exit time of the trace: the first instant outside the trapped set,
    /// or the final recorded time when the whole trace stays inside.
    pub fn s_star(&self) -> Option<f64> {
        self.first_outside()
            .map(|e| e.s)
            .or_else(|| self.entries.last().map(|e| e.s))
    }
}

/// Finite-difference audit of the mode evolution laws along a trace.
#[derive(Clone, Debug)]
pub struct OdeReport {
    /// sup of s^2 |q_k' - (1 - k/2m) q_k| over interior snapshots, k < 2m.
    pub low_sup: Vec<f64>,
    /// sup of s^3 |q_2m' + (2/s) q_2m|; bounded when the neutral mode
    /// follows its self-interaction drift, growing linearly when it does not.
    pub neutral_sup: f64,
    /// Least-squares slope of log |q_k| against log s for 2m < k <= M;
    /// NaN for modes that sit at roundoff.
    pub fast_slopes: Vec<f64>,
}

/// Check the tracked coefficients against their evolution laws by central
/// differences on the snapshot grid.
pub fn ode_residuals(trace: &ModeTrace, params: &ModelParams) -> Result<OdeReport> {
    let entries = trace.entries();
    if entries.len() < 5 {
        return Err(Error::Config(format!(
            "mode law audit needs at least 5 snapshots, got {}",
            entries.len()
        )));
    }
    let two_m = 2 * params.m as usize;
    let m_cut = params.mode_cutoff;
    let lam = |k: usize| 1.0 - k as f64 / (2.0 * params.m as f64);
    let mut low_sup = vec![0.0f64; two_m];
    let mut neutral_sup = 0.0f64;
    for i in 1..entries.len() - 1 {
        let s = entries[i].s;
        let span = entries[i + 1].s - entries[i - 1].s;
        for (k, sup) in low_sup.iter_mut().enumerate() {
            let dq = (entries[i + 1].dec.q[k] - entries[i - 1].dec.q[k]) / span;
            let r = dq - lam(k) * entries[i].dec.q[k];
            *sup = sup.max(s * s * r.abs());
        }
        let dq = (entries[i + 1].dec.q[two_m] - entries[i - 1].dec.q[two_m]) / span;
        let r = dq + (2.0 / s) * entries[i].dec.q[two_m];
        neutral_sup = neutral_sup.max(s * s * s * r.abs());
    }
    let mut fast_slopes = Vec::with_capacity(m_cut.saturating_sub(two_m));
    for k in two_m + 1..=m_cut {
        let pts: Vec<(f64, f64)> = entries
            .iter()
            .filter(|e| e.dec.q[k].abs() > 1e-290)
            .map(|e| (e.s.ln(), e.dec.q[k].abs().ln()))
            .collect();
        fast_slopes.push(if pts.len() < 3 {
            f64::NAN
        } else {
            least_squares_slope(&pts)
        });
    }
    Ok(OdeReport {
        low_sup,
        neutral_sup,
        fast_slopes,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}

/// Knobs of the shooting search.
#[derive(Clone, Copy, Debug)]
pub struct ShootSettings {
    /// Trapping target: converged means inside the trapped set up to here.
    pub s_end: f64,
    /// Half width of the seed coordinate box.
    pub box_half: f64,
    /// Bisection depth per tuned coordinate.
    pub max_iter: usize,
    /// Rescaled time between re-tuning checkpoints. One double of tuning
    /// granularity buys roughly |ln eps| / lambda_0 ~ 36 units of trapping,
    /// so checkpoints must come faster than that.
    pub segment: f64,
    /// Probe horizon past the next checkpoint.
    pub lookahead: f64,
    /// Rescaled time between recorded decompositions.
    pub snap: f64,
}

impl ShootSettings {
    pub fn new(s_end: f64) -> Self {
        Self {
            s_end,
            box_half: 1.0,
            max_iter: 54,
            segment: 25.0,
            lookahead: 8.0,
            snap: 0.5,
        }
    }
}

/// One recorded crossing of the trapped-set boundary.
#[derive(Clone, Debug)]
pub struct ExitRecord {
    pub s_exit: f64,
    /// Name of the bound crossed first.
    pub binding: String,
    /// Mode index when that bound constrains a single coefficient.
    pub mode: Option<usize>,
    /// Binding coefficient at the exit snapshot and its one-sided rate.
    pub q_k: f64,
    pub dq_k: f64,
}

impl ExitRecord {
    /// A mode exit is transversal when the coefficient is still moving
    /// outward as it crosses: same sign for value and rate. None for exits
    /// through compound bounds or with no rate sample.
    pub fn transversal(&self) -> Option<bool> {
        self.mode.and_then(|_| {
            if self.q_k.is_finite() && self.dq_k.is_finite() {
                Some(self.q_k * self.dq_k > 0.0)
            } else {
                None
            }
        })
    }
}

/// Solution snapshots of the committed trajectory, for the readout in
/// unscaled variables.
#[derive(Clone, Debug, Default)]
pub struct SnapshotStore {
    pub s: Vec<f64>,
    pub w: Vec<Field>,
}

impl SnapshotStore {
    fn push(&mut self, s: f64, w: Field) {
        self.s.push(s);
        self.w.push(w);
    }
}

/// Result of the shooting search.
#[derive(Clone, Debug)]
pub struct ShootOutcome {
    /// Tuned seed coordinates.
    pub d_star: Vec<f64>,
    /// Exit time of the committed trajectory.
    pub s_star: f64,
    /// True when the committed trajectory stays inside through s_end.
    pub converged: bool,
    /// Total probe trajectories run.
    pub iterations: usize,
    /// True when some coordinate bracket had no sign change and the search
    /// fell back to scanning the box.
    pub grid_fallback: bool,
    pub trace: ModeTrace,
    pub snapshots: SnapshotStore,
    /// Boundary crossings seen by the probes, the transversality sample.
    pub exits: Vec<ExitRecord>,
}

struct ShootRig<'a> {
    solver: Solver,
    projector: ModeProjector<'a>,
    a: f64,
    k_const: f64,
    snap: f64,
    iterations: usize,
    exits: Vec<ExitRecord>,
}

/// What a probe saw at its stopping point.
struct ProbeStop {
    /// Watched coefficient at the stop.
    q_watch: f64,
    /// Time reached.
    s: f64,
    exited: bool,
}

impl ShootRig<'_> {
    fn deviation(&self, state: &SolverState) -> Result<Field> {
        let profile = self.solver.profile();
        let n = state.w.len();
        let mut q = vec![0.0; n];
        for (i, slot) in q.iter_mut().enumerate() {
            let y = state.w.y(i);
            *slot = state.w.values()[i] - profile.varphi(y, state.s);
        }
        Field::new(state.w.half_width(), q)
    }

    fn assess(&self, state: &SolverState) -> Result<(ModeDecomposition, ShrinkingVerdict)> {
        let q = self.deviation(state)?;
        let dec = self.projector.decompose(&q, state.s, self.k_const)?;
        let verdict = check_shrinking(&dec, self.a, self.projector.params())?;
        Ok((dec, verdict))
    }

    /// Advance until the verdict leaves the trapped set or s reaches s_stop,
    /// assessing every `snap`. Exits are recorded; an optional sink receives
    /// every assessed instant. Returns the exit, if any, and the last
    /// assessed decomposition.
    fn evolve(
        &mut self,
        state: &mut SolverState,
        s_stop: f64,
        mut sink: Option<(&mut ModeTrace, &mut SnapshotStore)>,
        skip_entry: bool,
    ) -> Result<(Option<ExitRecord>, ModeDecomposition)> {
        let ds = self.solver.config().ds;
        let per = (self.snap / ds).round().max(1.0) as u64;
        let mut prev: Option<(f64, Vec<f64>)> = None;
        let mut first = true;
        loop {
            let (dec, verdict) = self.assess(state)?;
            if !verdict.inside {
                let mode = verdict.binding_mode();
                let (q_k, dq_k) = match (mode, &prev) {
                    (Some(k), Some((sp, qp))) => {
                        (dec.q[k], (dec.q[k] - qp[k]) / (dec.s - sp))
                    }
                    (Some(k), None) => (dec.q[k], f64::NAN),
                    _ => (f64::NAN, f64::NAN),
                };
                let record = ExitRecord {
                    s_exit: dec.s,
                    binding: verdict.binding.clone(),
                    mode,
                    q_k,
                    dq_k,
                };
                self.exits.push(record.clone());
                if let Some((trace, store)) = sink.as_mut() {
                    store.push(state.s, state.w.clone());
                    trace.push(TraceEntry {
                        s: dec.s,
                        dec: dec.clone(),
                        verdict,
                    })?;
                }
                return Ok((Some(record), dec));
            }
            if let Some((trace, store)) = sink.as_mut() {
                if !(first && skip_entry) {
                    store.push(state.s, state.w.clone());
                    trace.push(TraceEntry {
                        s: dec.s,
                        dec: dec.clone(),
                        verdict,
                    })?;
                }
            }
            if state.s >= s_stop - 0.5 * ds {
                return Ok((None, dec));
            }
            let remaining = ((s_stop - state.s) / ds).round().max(1.0) as u64;
            prev = Some((dec.s, dec.q.clone()));
            first = false;
            for _ in 0..per.min(remaining) {
                match self.solver.step(state) {
                    Ok(()) => {}
                    Err(Error::Diverged { s, .. }) => {
                        // Physical blowup before the next assessment: count
                        // it as an exit through the last binding coefficient.
                        let (sp, qp) = prev.as_ref().expect("assessed before stepping");
                        let k = 0;
                        let record = ExitRecord {
                            s_exit: s,
                            binding: "diverged".to_string(),
                            mode: Some(k),
                            q_k: qp[k],
                            dq_k: qp[k] / (s - sp).max(ds),
                        };
                        self.exits.push(record.clone());
                        return Ok((Some(record), dec));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }

    /// Run a probe from `base` plus an optional additive correction and
    /// report the watched coefficient at the stopping point.
    fn probe(
        &mut self,
        base: &SolverState,
        delta: Option<&[f64]>,
        s_stop: f64,
        watch: usize,
    ) -> Result<ProbeStop> {
        let mut state = base.clone();
        if let Some(delta) = delta {
            for (v, d) in state.w.values_mut().iter_mut().zip(delta) {
                *v += d;
            }
        }
        self.iterations += 1;
        let (exit, dec) = self.evolve(&mut state, s_stop, None, false)?;
        Ok(ProbeStop {
            q_watch: dec.q[watch],
            s: exit.as_ref().map(|e| e.s_exit).unwrap_or(dec.s),
            exited: exit.is_some(),
        })
    }

    /// Bisect one scalar so the watched coefficient changes sign at the
    /// probe stop. `make` produces the probe start for a given scalar.
    /// Returns the tuned scalar, whether the bracket needed a grid scan,
    /// and a probe that reached s_stop without exiting, if one occurred.
    fn bisect(
        &mut self,
        make: &dyn Fn(f64) -> Result<(SolverState, Option<Vec<f64>>)>,
        lo0: f64,
        hi0: f64,
        s_stop: f64,
        watch: usize,
        max_iter: usize,
    ) -> Result<(f64, bool, bool)> {
        let run = |rig: &mut Self, c: f64| -> Result<ProbeStop> {
            let (state, delta) = make(c)?;
            rig.probe(&state, delta.as_deref(), s_stop, watch)
        };
        let mut lo = lo0;
        let mut hi = hi0;
        let mut fallback = false;
        let p_lo = run(self, lo)?;
        if !p_lo.exited {
            return Ok((lo, false, true));
        }
        if hi0 == lo0 {
            // Degenerate box: no freedom to search, the endpoint decides.
            return Ok((lo, false, false));
        }
        let p_hi = run(self, hi)?;
        if !p_hi.exited {
            return Ok((hi, false, true));
        }
        let mut sign_lo = p_lo.q_watch.is_sign_positive();
        if sign_lo == p_hi.q_watch.is_sign_positive() {
            // No sign change across the box: scan it for a usable bracket
            // and fall back to the deepest probe when none shows up.
            fallback = true;
            let scans = 16;
            let mut best = (lo, p_lo.s);
            let mut prev_c = lo;
            let mut prev_sign = sign_lo;
            let mut found = false;
            for i in 1..=scans {
                let c = lo0 + (hi0 - lo0) * i as f64 / scans as f64;
                let p = run(self, c)?;
                if !p.exited {
                    return Ok((c, true, true));
                }
                if p.s > best.1 {
                    best = (c, p.s);
                }
                if p.q_watch.is_sign_positive() != prev_sign {
                    lo = prev_c;
                    hi = c;
                    sign_lo = prev_sign;
                    found = true;
                    break;
                }
                prev_c = c;
                prev_sign = p.q_watch.is_sign_positive();
            }
            if !found {
                return Ok((best.0, true, false));
            }
        }
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..max_iter {
            mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            let p = run(self, mid)?;
            if !p.exited {
                return Ok((mid, fallback, true));
            }
            if p.q_watch.is_sign_positive() == sign_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((mid, fallback, false))
    }

    /// Cut-off eigenmode direction used for seed corrections at time s.
    fn correction_shape(&self, k: usize, s: f64) -> Result<Vec<f64>> {
        let params = *self.projector.params();
        let poly = spectral::eigenfunction(params.m, k)?;
        let cut = self.k_const * s.powf(1.0 / (2.0 * params.m as f64));
        let grid = &self.projector.grid;
        Ok((0..grid.len())
            .map(|i| {
                let y = grid.y(i);
                Profile::chi0(2.0 * y.abs() / cut) * spectral::eval(&poly, y)
            })
            .collect())
    }

    /// Re-tune the trapped state at a checkpoint: measured coefficients of
    /// the slower unstable modes are subtracted directly, then the fastest
    /// mode is re-bisected, since its surviving error is dominated by the
    /// measurement bias that a subtraction cannot beat.
    fn retune(
        &mut self,
        state: &mut SolverState,
        horizon: f64,
        max_iter: usize,
    ) -> Result<bool> {
        let two_m = 2 * self.projector.params().m as usize;
        let (dec, _) = self.assess(state)?;
        for k in 1..two_m {
            let shape = self.correction_shape(k, state.s)?;
            let c = dec.q[k];
            for (v, sh) in state.w.values_mut().iter_mut().zip(&shape) {
                *v -= c * sh;
            }
        }
        let shape = self.correction_shape(0, state.s)?;
        let amp = self.a / (state.s * state.s);
        let base = state.clone();
        let make = |c: f64| -> Result<(SolverState, Option<Vec<f64>>)> {
            let delta: Vec<f64> = shape.iter().map(|sh| c * amp * sh).collect();
            Ok((base.clone(), Some(delta)))
        };
        let (c_star, fallback, _) = self.bisect(&make, -1.0, 1.0, horizon, 0, max_iter)?;
        for (v, sh) in state.w.values_mut().iter_mut().zip(&shape) {
            *v += c_star * amp * sh;
        }
        Ok(fallback)
    }
}

/// Shooting search for seed coordinates whose trajectory stays trapped.
///
/// The unstable coordinates are tuned one at a time by bisection on the
/// sign of their coefficient at the probe stop, in two sweeps ordered by
/// decreasing growth rate. A double holds too few digits to keep the
/// fastest mode trapped over a long span, so past the seed box the search
/// re-tunes at checkpoints every `segment` units: measured slow-mode
/// coefficients are subtracted and the fastest mode is re-bisected with a
/// fresh scalar, which resets the granularity clock.
pub fn shoot(
    cfg: &SolverConfig,
    table: &KernelTable,
    a: f64,
    k_const: f64,
    d_init: &[f64],
    settings: &ShootSettings,
) -> Result<ShootOutcome> {
    let params = cfg.params;
    let two_m = 2 * params.m as usize;
    if two_m > 6 {
        return Err(Error::Config(format!(
            "shooting tunes at most 6 seed directions, the model has {two_m}"
        )));
    }
    if d_init.len() != two_m {
        return Err(Error::Config(format!(
            "seed needs {} coordinates, got {}",
            two_m,
            d_init.len()
        )));
    }
    if settings.s_end <= cfg.s0 {
        return Err(Error::Config(format!(
            "trapping target s_end = {} does not exceed s0 = {}",
            settings.s_end, cfg.s0
        )));
    }
    // A zero-width box is legal: the search has no freedom, every candidate
    // is the seed itself, and the outcome reports where that seed exits.
    if settings.box_half < 0.0 || settings.box_half > a {
        return Err(Error::Config(format!(
            "seed box half width must lie in [0, A], got {}",
            settings.box_half
        )));
    }
    let solver = Solver::new(cfg.clone())?;
    let projector = ModeProjector::new(table, params, cfg.l, cfg.n)?;
    let mut rig = ShootRig {
        solver,
        projector,
        a,
        k_const,
        snap: settings.snap,
        iterations: 0,
        exits: Vec::new(),
    };

    // Probe starts are assembled from owned pieces only, so the closures
    // handed to the bisection never hold a borrow of the rig itself.
    let profile_state = rig.solver.init_state(&InitialData::Profile)?;
    let seeded = |d: &[f64]| -> Result<(SolverState, Option<Vec<f64>>)> {
        let seed = build_initial_data(a, cfg.s0, d, &params, k_const, cfg.l, cfg.n)?;
        Ok((profile_state.clone(), Some(seed.into_values())))
    };

    let mut d: Vec<f64> = d_init
        .iter()
        .map(|v| v.clamp(-settings.box_half, settings.box_half))
        .collect();
    let horizon0 = (cfg.s0 + settings.segment + settings.lookahead).min(settings.s_end);
    let mut grid_fallback = false;
    // Two sweeps over the coordinates in order of decreasing growth rate;
    // the second sweep re-tunes each coordinate against the improved rest.
    for _ in 0..2 {
        for k in 0..two_m {
            let d_snapshot = d.clone();
            let make = |c: f64| {
                let mut dd = d_snapshot.clone();
                dd[k] = c;
                seeded(&dd)
            };
            let (c_star, fallback, _) = rig.bisect(
                &make,
                -settings.box_half,
                settings.box_half,
                horizon0,
                k,
                settings.max_iter,
            )?;
            grid_fallback = grid_fallback || fallback;
            d[k] = c_star;
        }
    }

    // Committed trajectory with checkpoint re-tuning.
    let (mut state, seed_delta) = seeded(&d)?;
    for (v, sv) in state
        .w
        .values_mut()
        .iter_mut()
        .zip(seed_delta.as_deref().expect("seed delta"))
    {
        *v += sv;
    }
    let mut trace = ModeTrace::new();
    let mut store = SnapshotStore::default();
    let mut s_chk = cfg.s0;
    let mut skip_entry = false;
    let mut converged = false;
    loop {
        if s_chk > cfg.s0 {
            let horizon = (s_chk + settings.segment + settings.lookahead).min(settings.s_end);
            let fallback = rig.retune(&mut state, horizon, settings.max_iter)?;
            grid_fallback = grid_fallback || fallback;
        }
        let commit_to = (s_chk + settings.segment).min(settings.s_end);
        let (exit, _) = rig.evolve(
            &mut state,
            commit_to,
            Some((&mut trace, &mut store)),
            skip_entry,
        )?;
        if exit.is_some() {
            break;
        }
        if commit_to >= settings.s_end - 1e-9 {
            converged = true;
            break;
        }
        s_chk = commit_to;
        skip_entry = true;
    }
    let s_star = trace.s_star().unwrap_or(cfg.s0);
    Ok(ShootOutcome {
        d_star: d,
        s_star,
        converged,
        iterations: rig.iterations,
        grid_fallback,
        trace,
        snapshots: store,
        exits: rig.exits,
    })
}

/// One probe of the blowup limit in unscaled variables.
#[derive(Clone, Copy, Debug)]
pub struct ProfilePoint {
    /// Sample position relative to the blowup point.
    pub x0: f64,
    /// Crossing time solving |x0| = K ((T - t0) |log(T - t0)|)^(1/2m).
    pub t0: f64,
    /// Snapshot time the readout used.
    pub s_snap: f64,
    /// e^(s/(p-1)) w(x0 e^(s/2m), s): the solution at (x0, t0).
    pub u_num: f64,
    /// kappa (curv x0^2m / (2m |log x0|))^(-1/(p-1)): the predicted limit.
    pub u_pred: f64,
    pub ratio: f64,
}

/// Read the forming final profile off stored snapshots, in the gauge T = 1
/// where s = -log(T - t). Each x0 is followed along the blowup ray to its
/// crossing time and compared against the predicted limit law.
pub fn final_profile(
    store: &SnapshotStore,
    params: &ModelParams,
    k_const: f64,
    x0s: &[f64],
) -> Result<Vec<ProfilePoint>> {
    if store.s.len() < 2 {
        return Err(Error::Config(
            "final-profile readout needs at least 2 stored snapshots".to_string(),
        ));
    }
    let two_m = 2.0 * params.m as f64;
    let s_first = store.s[0];
    let s_last = *store.s.last().expect("nonempty");
    // x0 -> crossing time via sigma = T - t0: the map
    // g(sigma) = K (sigma |log sigma|)^(1/2m) is monotone on sigma < 1/e,
    // so bisect in u = log sigma.
    let g = |u: f64| k_const * (u.exp() * (-u)).powf(1.0 / two_m);
    let mut out = Vec::with_capacity(x0s.len());
    for &x0 in x0s {
        if !(x0 > 0.0 && x0 < 1.0) {
            return Err(Error::Config(format!(
                "readout position must satisfy 0 < x0 < 1, got {x0}"
            )));
        }
        let (mut u_lo, mut u_hi) = (-s_last, -s_first);
        if x0 < g(u_lo) || x0 > g(u_hi) {
            return Err(Error::Config(format!(
                "x0 = {x0} maps outside the window the run resolved \
                 ([{:.3e}, {:.3e}])",
                g(u_lo),
                g(u_hi)
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (u_lo + u_hi);
            if g(mid) < x0 {
                u_lo = mid;
            } else {
                u_hi = mid;
            }
        }
        let u = 0.5 * (u_lo + u_hi);
        let s_t = -u;
        let t0 = 1.0 - u.exp();
        let j = store
            .s
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - s_t).abs().total_cmp(&(b.1 - s_t).abs()))
            .map(|(i, _)| i)
            .expect("nonempty");
        let s_snap = store.s[j];
        let w = &store.w[j];
        let y0 = x0 * (s_snap / two_m).exp();
        if y0 > 0.9 * w.half_width() {
            return Err(Error::Config(format!(
                "x0 = {x0} lands at y = {y0:.1}, outside the resolved grid"
            )));
        }
        let u_num = (s_snap / (params.p - 1.0)).exp() * interp_linear(w, y0);
        let u_pred = params.kappa
            * (params.curv * x0.powf(two_m) / (two_m * x0.ln().abs()))
                .powf(-1.0 / (params.p - 1.0));
        out.push(ProfilePoint {
            x0,
            t0,
            s_snap,
            u_num,
            u_pred,
            ratio: u_num / u_pred,
        });
    }
    Ok(out)
}

/// Positions x0 = K (s e^(-s))^(1/2m) for a ladder of snapshot times, the
/// points where the readout lands exactly on the profile scale y = K s^(1/2m).
/// Times are capped so the readout stays inside 0.9 of the grid half width
/// even after snapping to the nearest stored time, which can shift s by half
/// the snapshot spacing and inflate y by exp(snap / 4m). An empty vector
/// means no snapshot resolves that scale.
pub fn profile_probe_points(
    store: &SnapshotStore,
    params: &ModelParams,
    k_const: f64,
    count: usize,
) -> Vec<f64> {
    let two_m = 2.0 * params.m as f64;
    let s_first = store.s.first().copied().unwrap_or(0.0);
    let mut s_last = store.s.last().copied().unwrap_or(0.0);
    let snap = if store.s.len() >= 2 {
        store.s[1] - store.s[0]
    } else {
        0.0
    };
    if let Some(w) = store.w.first() {
        let margin = 0.89 * (-snap / (2.0 * two_m)).exp();
        s_last = s_last.min((margin * w.half_width() / k_const).powf(two_m));
    }
    if s_last <= s_first {
        return Vec::new();
    }
    (1..=count)
        .map(|i| {
            let s = s_first + (s_last - s_first) * i as f64 / (count + 1) as f64;
            k_const * (s * (-s).exp()).powf(1.0 / two_m)
        })
        .collect()
}

/// Limit profile along the blowup ray at fixed K, in the fraction
/// tau = (t - t0)/(T - t0) of the remaining time:
/// kappa ((1 - tau) + curv K^2m)^(-1/(p-1)). At tau = 0 this reproduces
/// the slow profile at z = K.
pub fn hat_profile(params: &ModelParams, k_const: f64, tau: f64) -> f64 {
    let two_m = 2.0 * params.m as f64;
    params.kappa
        * ((1.0 - tau) + params.curv * k_const.powf(two_m)).powf(-1.0 / (params.p - 1.0))
}

fn interp_linear(w: &Field, y: f64) -> f64 {
    let h = w.spacing();
    let t = (y + w.half_width()) / h;
    let i = (t.floor() as usize).min(w.len() - 2);
    let frac = t - i as f64;
    w.values()[i] * (1.0 - frac) + w.values()[i + 1] * frac
}
