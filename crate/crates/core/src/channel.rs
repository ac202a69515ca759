//! Channel synthesis: BS/UE hardware impairments, over-the-air propagation,
//! baseband composition for the linear TDD model and the synthetic UL→DL
//! scenarios, pilot observations and least-squares channel estimation.
//!
//! Shape conventions: `H_UL` is `M x N` (one column per user), `H_DL` is
//! `N x M` (one row per user).

use std::fmt;
use std::str::FromStr;

use crate::error::{CalibError, Result};
use crate::numerics::{inverse, matmul, sample_complex_gaussian, CMatrix, SimRng, C64};

/// Minimum modulus accepted for entries that must be inverted.
const INVERTIBLE_FLOOR: f64 = 1e-9;

/// Signal-to-noise ratio of an observation; `Noiseless` is a distinct marker
/// and never takes part in arithmetic as an infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Noiseless,
    Db(f64),
}

impl Snr {
    pub fn from_db(db: f64) -> Result<Snr> {
        if db.is_nan() {
            return Err(CalibError::invalid("SNR must not be NaN"));
        }
        if db == f64::INFINITY {
            return Ok(Snr::Noiseless);
        }
        if db == f64::NEG_INFINITY {
            return Err(CalibError::invalid("SNR of -inf dB is not supported"));
        }
        Ok(Snr::Db(db))
    }

    pub fn linear(&self) -> Option<f64> {
        match self {
            Snr::Noiseless => None,
            Snr::Db(db) => Some(10f64.powf(db / 10.0)),
        }
    }

    /// Per-entry AWGN variance `1/SNR` (zero when noiseless).
    pub fn noise_variance(&self) -> f64 {
        self.linear().map_or(0.0, |s| 1.0 / s)
    }

    /// dB value for reporting; `+inf` for the noiseless marker.
    pub fn db(&self) -> f64 {
        match self {
            Snr::Noiseless => f64::INFINITY,
            Snr::Db(db) => *db,
        }
    }
}

/// Transceiver responses of one BS and `N` single-antenna users.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub m: usize,
    pub n: usize,
    /// BS transmit response, `M x M`.
    pub t_dl: CMatrix,
    /// BS receive response, `M x M`.
    pub r_ul: CMatrix,
    /// Per-user receive responses.
    pub r_dl: Vec<C64>,
    /// Per-user transmit responses.
    pub t_ul: Vec<C64>,
    pub crosstalk: f64,
}

impl HardwareProfile {
    /// Impairment-free hardware: identity BS matrices and unit user responses.
    pub fn ideal(m: usize, n: usize) -> Self {
        HardwareProfile {
            m,
            n,
            t_dl: CMatrix::identity(m),
            r_ul: CMatrix::identity(m),
            r_dl: vec![C64::new(1.0, 0.0); n],
            t_ul: vec![C64::new(1.0, 0.0); n],
            crosstalk: 0.0,
        }
    }

    /// Scales both BS matrices so every row has unit expected power,
    /// `1 / sqrt(1 + (M-1) * crosstalk^2)`. Composed channels then have unit
    /// expected per-entry power in both directions.
    pub fn power_normalized(&self) -> HardwareProfile {
        let row_power = 1.0 + (self.m as f64 - 1.0) * self.crosstalk * self.crosstalk;
        let s = C64::new(1.0 / row_power.sqrt(), 0.0);
        HardwareProfile {
            t_dl: self.t_dl.scale(s),
            r_ul: self.r_ul.scale(s),
            ..self.clone()
        }
    }

    /// Linear calibration coefficients of the reciprocity identity
    /// `h_DL = a (h_UL)^T B`: `a[n] = r_DL[n] / t_UL[n]`, `B = R_UL^{-T} T_DL`.
    pub fn calibration_coefficients(&self) -> Result<(Vec<C64>, CMatrix)> {
        let a = self
            .r_dl
            .iter()
            .zip(&self.t_ul)
            .map(|(r, t)| r / t)
            .collect();
        let b = matmul(&inverse(&self.r_ul)?.transpose(), &self.t_dl)?;
        Ok((a, b))
    }

    fn validate(&self) -> Result<()> {
        if self.t_dl.shape() != (self.m, self.m) || self.r_ul.shape() != (self.m, self.m) {
            return Err(CalibError::shape(
                "hardware profile",
                format!("M={}", self.m),
                format!("T_DL {} R_UL {}", self.t_dl.shape_str(), self.r_ul.shape_str()),
            ));
        }
        if self.r_dl.len() != self.n || self.t_ul.len() != self.n {
            return Err(CalibError::shape(
                "hardware profile",
                format!("N={}", self.n),
                format!("r_DL {} t_UL {}", self.r_dl.len(), self.t_ul.len()),
            ));
        }
        Ok(())
    }
}

fn nonzero_draw(rng: &mut SimRng, variance: f64) -> C64 {
    loop {
        let z = rng.complex_gaussian(variance);
        if z.norm() > INVERTIBLE_FLOOR {
            return z;
        }
    }
}

/// Draws BS and user impairments. Diagonal entries are CN(0,1), off-diagonal
/// entries CN(0, crosstalk^2); entries that must be inverted are redrawn when
/// their modulus falls below 1e-9.
pub fn gen_hardware_profile(
    rng: &mut SimRng,
    m: usize,
    n: usize,
    crosstalk: f64,
) -> Result<HardwareProfile> {
    if m == 0 || n == 0 {
        return Err(CalibError::invalid(format!(
            "M and N must be positive, got M={m} N={n}"
        )));
    }
    if !(0.0..=1.0).contains(&crosstalk) {
        return Err(CalibError::invalid(format!(
            "crosstalk_level must lie in [0, 1], got {crosstalk}"
        )));
    }
    let off_var = crosstalk * crosstalk;
    let bs_matrix = |rng: &mut SimRng| {
        CMatrix::from_fn(m, m, |r, c| {
            if r == c {
                nonzero_draw(rng, 1.0)
            } else if off_var > 0.0 {
                rng.complex_gaussian(off_var)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    };
    let t_dl = bs_matrix(rng);
    let r_ul = bs_matrix(rng);
    let r_dl = (0..n).map(|_| rng.complex_gaussian(1.0)).collect();
    let t_ul = (0..n).map(|_| nonzero_draw(rng, 1.0)).collect();
    Ok(HardwareProfile {
        m,
        n,
        t_dl,
        r_ul,
        r_dl,
        t_ul,
        crosstalk,
    })
}

/// Over-the-air DL channels, one `1 x M` row per user stacked into `N x M`.
/// The UL propagation channel of user `n` is the transpose of row `n`.
pub fn gen_propagation(rng: &mut SimRng, m: usize, n: usize) -> Result<CMatrix> {
    if m == 0 || n == 0 {
        return Err(CalibError::invalid(format!(
            "M and N must be positive, got M={m} N={n}"
        )));
    }
    sample_complex_gaussian(rng, n, m, 1.0)
}

/// UL and DL channels of one link realization (or their estimates).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPair {
    /// `M x N`, column `n` is user `n`'s UL channel.
    pub h_ul: CMatrix,
    /// `N x M`, row `n` is user `n`'s DL channel.
    pub h_dl: CMatrix,
    pub snr: Snr,
}

/// Baseband channels of the linear TDD model:
/// `h_DL[n] = r_DL[n] c[n] T_DL` and `h_UL[n] = R_UL c[n]^T t_UL[n]`.
pub fn compose_baseband_tdd(profile: &HardwareProfile, c_dl: &CMatrix) -> Result<ChannelPair> {
    profile.validate()?;
    if c_dl.shape() != (profile.n, profile.m) {
        return Err(CalibError::shape(
            "compose_baseband_tdd",
            format!("profile N={} M={}", profile.n, profile.m),
            c_dl.shape_str(),
        ));
    }
    let dl_rows = matmul(c_dl, &profile.t_dl)?;
    let h_dl = CMatrix::from_fn(profile.n, profile.m, |u, k| profile.r_dl[u] * dl_rows[(u, k)]);
    let ul_cols = matmul(&profile.r_ul, &c_dl.transpose())?;
    let h_ul = CMatrix::from_fn(profile.m, profile.n, |k, u| ul_cols[(k, u)] * profile.t_ul[u]);
    Ok(ChannelPair {
        h_ul,
        h_dl,
        snr: Snr::Noiseless,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    LinearTdd,
    LinearSynthetic,
    TanhType,
    PowerType,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::LinearTdd,
        ScenarioKind::LinearSynthetic,
        ScenarioKind::TanhType,
        ScenarioKind::PowerType,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::LinearTdd => "linear-tdd",
            ScenarioKind::LinearSynthetic => "linear-synthetic",
            ScenarioKind::TanhType => "tanh-type",
            ScenarioKind::PowerType => "power-type",
        }
    }

    pub fn is_synthetic(&self) -> bool {
        !matches!(self, ScenarioKind::LinearTdd)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CalibError::invalid(format!("unknown scenario kind `{s}`")))
    }
}

/// How `tanh` acts on a complex entry in the tanh-type scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TanhMode {
    /// `tanh(re) + j tanh(im)`.
    Split,
    /// Analytic complex `tanh`.
    Complex,
}

impl FromStr for TanhMode {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(TanhMode::Split),
            "complex" => Ok(TanhMode::Complex),
            _ => Err(CalibError::invalid(format!("unknown tanh mode `{s}`"))),
        }
    }
}

impl fmt::Display for TanhMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TanhMode::Split => "split",
            TanhMode::Complex => "complex",
        })
    }
}

/// UL→DL relationship used to generate a dataset. The enum carries exactly the
/// parameters each kind needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    LinearTdd {
        profile: HardwareProfile,
    },
    /// `h_DL[n] = c[n] h_UL[n]^T D`
    LinearSynthetic { c: Vec<C64>, d: CMatrix },
    /// `h_DL[n] = c[n] tanh(h_UL[n])^T D`
    TanhType {
        c: Vec<C64>,
        d: CMatrix,
        mode: TanhMode,
    },
    /// `h_DL[n] = c[n] (h_UL[n] ∘ h_UL[n])^T D`
    PowerType { c: Vec<C64>, d: CMatrix },
}

impl Scenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Scenario::LinearTdd { .. } => ScenarioKind::LinearTdd,
            Scenario::LinearSynthetic { .. } => ScenarioKind::LinearSynthetic,
            Scenario::TanhType { .. } => ScenarioKind::TanhType,
            Scenario::PowerType { .. } => ScenarioKind::PowerType,
        }
    }

    /// `(M, N)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Scenario::LinearTdd { profile } => (profile.m, profile.n),
            Scenario::LinearSynthetic { c, d }
            | Scenario::TanhType { c, d, .. }
            | Scenario::PowerType { c, d } => (d.rows(), c.len()),
        }
    }

    /// Draws a linear TDD scenario with power-normalized hardware.
    pub fn linear_tdd(rng: &mut SimRng, m: usize, n: usize, crosstalk: f64) -> Result<Scenario> {
        let profile = gen_hardware_profile(rng, m, n, crosstalk)?.power_normalized();
        Ok(Scenario::LinearTdd { profile })
    }

    /// Draws a synthetic scenario: `c[n] ~ CN(0,1)` and a Haar unitary `D`.
    pub fn synthetic(
        kind: ScenarioKind,
        rng: &mut SimRng,
        m: usize,
        n: usize,
        tanh_mode: TanhMode,
    ) -> Result<Scenario> {
        if m == 0 || n == 0 {
            return Err(CalibError::invalid(format!(
                "M and N must be positive, got M={m} N={n}"
            )));
        }
        let c: Vec<C64> = (0..n).map(|_| rng.complex_gaussian(1.0)).collect();
        let d = crate::numerics::random_unitary(rng, m)?;
        Ok(match kind {
            ScenarioKind::LinearSynthetic => Scenario::LinearSynthetic { c, d },
            ScenarioKind::TanhType => Scenario::TanhType {
                c,
                d,
                mode: tanh_mode,
            },
            ScenarioKind::PowerType => Scenario::PowerType { c, d },
            ScenarioKind::LinearTdd => {
                return Err(CalibError::InvalidScenario(
                    "linear-tdd is not a synthetic scenario".into(),
                ))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::LinearTdd { profile } => profile
                .validate()
                .map_err(|e| CalibError::InvalidScenario(e.to_string())),
            Scenario::LinearSynthetic { c, d }
            | Scenario::TanhType { c, d, .. }
            | Scenario::PowerType { c, d } => {
                if c.is_empty() {
                    return Err(CalibError::InvalidScenario("no per-user scales".into()));
                }
                if d.rows() != d.cols() {
                    return Err(CalibError::InvalidScenario(format!(
                        "D must be square, got {}",
                        d.shape_str()
                    )));
                }
                let gram = d.adjoint().matmul(d)?;
                let err = gram.max_abs_diff(&CMatrix::identity(d.rows()))?;
                if err > 1e-10 {
                    return Err(CalibError::InvalidScenario(format!(
                        "D is not unitary (max |D^H D - I| = {err:.3e})"
                    )));
                }
                Ok(())
            }
        }
    }
}

fn split_tanh(z: C64) -> C64 {
    C64::new(z.re.tanh(), z.im.tanh())
}

type EntryMap = Box<dyn Fn(C64) -> C64>;

/// Maps UL channels (`M x N`) to the scenario's noiseless DL channels (`N x M`).
pub fn apply_scenario(scenario: &Scenario, h_ul: &CMatrix) -> Result<CMatrix> {
    scenario.validate()?;
    let (m, n) = scenario.dims();
    if h_ul.shape() != (m, n) {
        return Err(CalibError::InvalidScenario(format!(
            "scenario expects H_UL of {m}x{n}, got {}",
            h_ul.shape_str()
        )));
    }
    let (scales, d, f): (Vec<C64>, CMatrix, EntryMap) = match scenario {
        Scenario::LinearTdd { profile } => {
            let (a, b) = profile.calibration_coefficients()?;
            (a, b, Box::new(|z| z))
        }
        Scenario::LinearSynthetic { c, d } => (c.clone(), d.clone(), Box::new(|z| z)),
        Scenario::TanhType { c, d, mode } => (
            c.clone(),
            d.clone(),
            match mode {
                TanhMode::Split => Box::new(split_tanh),
                TanhMode::Complex => Box::new(|z: C64| z.tanh()),
            },
        ),
        Scenario::PowerType { c, d } => (c.clone(), d.clone(), Box::new(|z| z * z)),
    };
    // Row n of the transformed transpose is f(h_UL[n])^T scaled by its user factor.
    let rows = CMatrix::from_fn(n, m, |u, k| scales[u] * f(h_ul[(k, u)]));
    matmul(&rows, &d)
}

/// Orthogonal unit-modulus pilots: `dim x K` with `X X^H = K I`.
///
/// Row `i` is a DFT row `exp(j 2π i k / K)` rotated by a random phase offset;
/// phases are wrapped into `[-π, π]`.
pub fn gen_pilots(rng: &mut SimRng, dim: usize, k: usize) -> Result<CMatrix> {
    if dim == 0 {
        return Err(CalibError::invalid("pilot dimension must be positive"));
    }
    if k < dim {
        return Err(CalibError::invalid(format!(
            "pilot length K={k} is shorter than the {dim} sources to separate"
        )));
    }
    use std::f64::consts::PI;
    let offsets: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-PI, PI)).collect();
    Ok(CMatrix::from_fn(dim, k, |i, t| {
        let step = ((i * t) % k) as f64 / k as f64;
        let mut phase = 2.0 * PI * step + offsets[i];
        if phase > PI {
            phase -= 2.0 * PI;
        }
        C64::from_polar(1.0, phase)
    }))
}

fn check_pilots(x: &CMatrix) -> Result<()> {
    let k = x.cols();
    if k < x.rows() {
        return Err(CalibError::InvalidPilot(format!(
            "pilot length {k} is shorter than {} sources",
            x.rows()
        )));
    }
    let gram = x.matmul(&x.adjoint())?;
    let target = CMatrix::identity(x.rows()).scale(C64::new(k as f64, 0.0));
    let err = gram.max_abs_diff(&target)?;
    if err > 1e-9 * k as f64 {
        return Err(CalibError::InvalidPilot(format!(
            "max |X X^H - K I| = {err:.3e}"
        )));
    }
    Ok(())
}

fn observe(
    op: &'static str,
    h: &CMatrix,
    x: &CMatrix,
    snr: Snr,
    rng: &mut SimRng,
) -> Result<CMatrix> {
    if h.cols() != x.rows() {
        return Err(CalibError::shape(op, h.shape_str(), x.shape_str()));
    }
    check_pilots(x)?;
    let mut y = h.matmul(x)?;
    let var = snr.noise_variance();
    if var > 0.0 {
        for z in y.as_mut_slice() {
            *z += rng.complex_gaussian(var);
        }
    }
    Ok(y)
}

/// `y_UL = H_UL x_UL + w_UL` with `w_UL ~ CN(0, 1/SNR)`; `x_UL` is `N x K`.
pub fn observe_ul(h_ul: &CMatrix, x_ul: &CMatrix, snr: Snr, rng: &mut SimRng) -> Result<CMatrix> {
    observe("observe_ul", h_ul, x_ul, snr, rng)
}

/// `y_DL = H_DL x_DL + w_DL` with `w_DL ~ CN(0, 1/SNR)`; `x_DL` is `M x K`.
pub fn observe_dl(h_dl: &CMatrix, x_dl: &CMatrix, snr: Snr, rng: &mut SimRng) -> Result<CMatrix> {
    observe("observe_dl", h_dl, x_dl, snr, rng)
}

/// Least-squares channel estimate for orthogonal pilots, `y x^H / K`.
pub fn estimate_channel_ls(y: &CMatrix, x: &CMatrix) -> Result<CMatrix> {
    if y.cols() != x.cols() {
        return Err(CalibError::shape("estimate_channel_ls", y.shape_str(), x.shape_str()));
    }
    let k = x.cols() as f64;
    Ok(y.matmul(&x.adjoint())?.scale(C64::new(1.0 / k, 0.0)))
}

/// Paired UL/DL channel estimates plus, when generated in-process, the
/// noiseless DL channels they were estimated from.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    pub m: usize,
    pub n: usize,
    pub scenario: ScenarioKind,
    pub pairs: Vec<ChannelPair>,
    /// Noiseless `H_DL` per pair; empty when unknown (e.g. loaded from file).
    pub truth_dl: Vec<CMatrix>,
}

impl CalibrationDataset {
    pub fn new(
        m: usize,
        n: usize,
        scenario: ScenarioKind,
        pairs: Vec<ChannelPair>,
        truth_dl: Vec<CMatrix>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CalibError::invalid("dataset needs at least one pair"));
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.h_ul.shape() != (m, n) || p.h_dl.shape() != (n, m) {
                return Err(CalibError::shape(
                    "dataset pair",
                    format!("M={m} N={n}"),
                    format!("pair {i}: H_UL {} H_DL {}", p.h_ul.shape_str(), p.h_dl.shape_str()),
                ));
            }
        }
        if !truth_dl.is_empty() && truth_dl.len() != pairs.len() {
            return Err(CalibError::shape(
                "dataset truth",
                pairs.len(),
                truth_dl.len(),
            ));
        }
        Ok(CalibrationDataset {
            m,
            n,
            scenario,
            pairs,
            truth_dl,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_truth(&self) -> bool {
        !self.truth_dl.is_empty()
    }

    /// The SNR shared by every pair, if there is one.
    pub fn snr(&self) -> Option<Snr> {
        let first = self.pairs.first()?.snr;
        self.pairs.iter().all(|p| p.snr == first).then_some(first)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<CalibrationDataset> {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        let truth = if self.has_truth() {
            indices.iter().map(|&i| self.truth_dl[i].clone()).collect()
        } else {
            Vec::new()
        };
        CalibrationDataset::new(self.m, self.n, self.scenario, pairs, truth)
    }

    /// Seeded random partition into `(train, held_out)`; the held-out part gets
    /// `round(P * held_out_fraction)` pairs, clamped so both sides are nonempty.
    pub fn split(
        &self,
        held_out_fraction: f64,
        rng: &mut SimRng,
    ) -> Result<(CalibrationDataset, CalibrationDataset)> {
        let (train, held) = split_indices(self.len(), held_out_fraction, rng)?;
        Ok((self.subset(&train)?, self.subset(&held)?))
    }
}

/// Index partition used by [`CalibrationDataset::split`].
pub fn split_indices(
    len: usize,
    held_out_fraction: f64,
    rng: &mut SimRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) {
        return Err(CalibError::invalid(format!(
            "held-out fraction must lie in (0, 1), got {held_out_fraction}"
        )));
    }
    if len < 2 {
        return Err(CalibError::invalid(format!(
            "cannot split {len} pairs into two nonempty parts"
        )));
    }
    let held = ((len as f64 * held_out_fraction).round() as usize).clamp(1, len - 1);
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    let held_idx = idx.split_off(len - held);
    Ok((idx, held_idx))
}

fn draw_truth(scenario: &Scenario, rng: &mut SimRng) -> Result<ChannelPair> {
    let (m, n) = scenario.dims();
    match scenario {
        Scenario::LinearTdd { profile } => {
            let c = gen_propagation(rng, m, n)?;
            compose_baseband_tdd(profile, &c)
        }
        _ => {
            let h_ul = sample_complex_gaussian(rng, m, n, 1.0)?;
            let h_dl = apply_scenario(scenario, &h_ul)?;
            Ok(ChannelPair {
                h_ul,
                h_dl,
                snr: Snr::Noiseless,
            })
        }
    }
}

fn build_with(
    rng: &SimRng,
    scenario: &Scenario,
    p: usize,
    mut snr_for: impl FnMut(usize) -> Snr,
) -> Result<CalibrationDataset> {
    scenario.validate()?;
    if p == 0 {
        return Err(CalibError::invalid("dataset size P must be at least 1"));
    }
    let (m, n) = scenario.dims();
    let mut channels = rng.fork("channels");
    let mut pilot_rng = rng.fork("pilots");
    let mut noise = rng.fork("noise");
    let x_ul = gen_pilots(&mut pilot_rng, n, n)?;
    let x_dl = gen_pilots(&mut pilot_rng, m, m)?;

    let mut pairs = Vec::with_capacity(p);
    let mut truth = Vec::with_capacity(p);
    for i in 0..p {
        let exact = draw_truth(scenario, &mut channels)?;
        let snr = snr_for(i);
        let pair = match snr {
            // Skipping the pilot round trip keeps noiseless estimates bit-exact.
            Snr::Noiseless => exact.clone(),
            Snr::Db(_) => {
                let y_ul = observe_ul(&exact.h_ul, &x_ul, snr, &mut noise)?;
                let y_dl = observe_dl(&exact.h_dl, &x_dl, snr, &mut noise)?;
                ChannelPair {
                    h_ul: estimate_channel_ls(&y_ul, &x_ul)?,
                    h_dl: estimate_channel_ls(&y_dl, &x_dl)?,
                    snr,
                }
            }
        };
        pairs.push(pair);
        truth.push(exact.h_dl);
    }
    CalibrationDataset::new(m, n, scenario.kind(), pairs, truth)
}

/// `P` independent channel draws, observed through orthogonal pilots at `snr`
/// and estimated by least squares (UL pilots of length `N`, DL of length `M`).
///
/// Channels, pilots and noise come from separate child streams of `rng`, so
/// datasets built from the same stream at different SNRs share channel
/// realizations and standardized noise.
pub fn build_dataset(
    rng: &SimRng,
    scenario: &Scenario,
    p: usize,
    snr: Snr,
) -> Result<CalibrationDataset> {
    build_with(rng, scenario, p, |_| snr)
}

/// Like [`build_dataset`], with each pair's SNR drawn uniformly in dB from
/// `[lo_db, hi_db]`.
pub fn build_dataset_mixed_snr(
    rng: &SimRng,
    scenario: &Scenario,
    p: usize,
    lo_db: f64,
    hi_db: f64,
) -> Result<CalibrationDataset> {
    if !(lo_db.is_finite() && hi_db.is_finite() && lo_db <= hi_db) {
        return Err(CalibError::invalid(format!(
            "invalid SNR range [{lo_db}, {hi_db}]"
        )));
    }
    let mut snr_rng = rng.fork("snr");
    build_with(rng, scenario, p, |_| Snr::Db(snr_rng.uniform_range(lo_db, hi_db)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mse_between, Normalization};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn zero_crosstalk_is_diagonal() {
        let mut rng = SimRng::new(1);
        let p = gen_hardware_profile(&mut rng, 4, 2, 0.0).unwrap();
        for r in 0..4 {
            for col in 0..4 {
                if r != col {
                    assert_eq!(p.t_dl[(r, col)], c(0.0, 0.0));
                    assert_eq!(p.r_ul[(r, col)], c(0.0, 0.0));
                }
            }
        }
        assert!(gen_hardware_profile(&mut rng, 4, 2, 1.5).is_err());
        assert!(gen_hardware_profile(&mut rng, 4, 2, -0.1).is_err());
    }

    #[test]
    fn full_crosstalk_fills_all_entries() {
        let mut rng = SimRng::new(2);
        let p = gen_hardware_profile(&mut rng, 32, 4, 1.0).unwrap();
        assert!(p.t_dl.as_slice().iter().all(|z| z.norm() > 0.0));
        let power = p.r_ul.frobenius_sq() / (32.0 * 32.0);
        assert!((power - 1.0).abs() < 0.15, "power {power}");
        assert!(p.t_ul.iter().all(|t| t.norm() > INVERTIBLE_FLOOR));
    }

    #[test]
    fn off_diagonal_variance_tracks_crosstalk() {
        let mut rng = SimRng::new(3);
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..400 {
            let p = gen_hardware_profile(&mut rng, 8, 1, 0.5).unwrap();
            for r in 0..8 {
                for col in 0..8 {
                    if r != col {
                        acc += p.t_dl[(r, col)].norm_sqr();
                        count += 1;
                    }
                }
            }
        }
        let var = acc / count as f64;
        assert!((var - 0.25).abs() < 0.01, "var {var}");
    }

    #[test]
    fn propagation_shapes_and_moments() {
        let mut rng = SimRng::new(4);
        assert_eq!(gen_propagation(&mut rng, 1, 1).unwrap().shape(), (1, 1));
        assert_eq!(gen_propagation(&mut rng, 32, 4).unwrap().shape(), (4, 32));
        let big = gen_propagation(&mut rng, 1000, 100).unwrap();
        let var = big.frobenius_sq() / 100_000.0;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn ideal_hardware_is_reciprocal() {
        let mut rng = SimRng::new(5);
        let cdl = gen_propagation(&mut rng, 6, 3).unwrap();
        let pair = compose_baseband_tdd(&HardwareProfile::ideal(6, 3), &cdl).unwrap();
        assert_eq!(pair.h_dl, cdl);
        assert_eq!(pair.h_ul, cdl.transpose());
        assert_eq!(pair.snr, Snr::Noiseless);
    }

    #[test]
    fn scalar_composition() {
        let profile = HardwareProfile {
            m: 1,
            n: 1,
            t_dl: CMatrix::row_vector(&[c(2.0, 0.0)]),
            r_ul: CMatrix::row_vector(&[c(5.0, 0.0)]),
            r_dl: vec![c(3.0, 0.0)],
            t_ul: vec![c(7.0, 0.0)],
            crosstalk: 0.0,
        };
        let cdl = CMatrix::row_vector(&[c(1.0, 0.0)]);
        let pair = compose_baseband_tdd(&profile, &cdl).unwrap();
        assert_eq!(pair.h_dl[(0, 0)], c(6.0, 0.0));
        assert_eq!(pair.h_ul[(0, 0)], c(35.0, 0.0));
        assert!(compose_baseband_tdd(&profile, &CMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn reciprocity_identity_holds_for_random_profile() {
        let mut rng = SimRng::new(6);
        let profile = gen_hardware_profile(&mut rng, 8, 3, 1.0).unwrap();
        let cdl = gen_propagation(&mut rng, 8, 3).unwrap();
        let pair = compose_baseband_tdd(&profile, &cdl).unwrap();
        let (a, b) = profile.calibration_coefficients().unwrap();
        for u in 0..3 {
            let hul_t = CMatrix::row_vector(&pair.h_ul.column(u));
            let pred = hul_t.matmul(&b).unwrap().scale(a[u]);
            let truth = CMatrix::row_vector(pair.h_dl.row(u));
            assert!(pred.max_abs_diff(&truth).unwrap() < 1e-9);
        }
        let via_scenario = apply_scenario(&Scenario::LinearTdd { profile }, &pair.h_ul).unwrap();
        assert!(via_scenario.max_abs_diff(&pair.h_dl).unwrap() < 1e-9);
    }

    fn synthetic(kind: ScenarioKind, m: usize, scale: C64) -> Scenario {
        let d = CMatrix::identity(m);
        let cs = vec![scale];
        match kind {
            ScenarioKind::LinearSynthetic => Scenario::LinearSynthetic { c: cs, d },
            ScenarioKind::TanhType => Scenario::TanhType {
                c: cs,
                d,
                mode: TanhMode::Split,
            },
            ScenarioKind::PowerType => Scenario::PowerType { c: cs, d },
            ScenarioKind::LinearTdd => unreachable!(),
        }
    }

    #[test]
    fn scenario_examples() {
        let tanh = synthetic(ScenarioKind::TanhType, 3, c(1.3, -0.2));
        let out = apply_scenario(&tanh, &CMatrix::zeros(3, 1)).unwrap();
        assert_eq!(out.max_abs(), 0.0);

        let power = synthetic(ScenarioKind::PowerType, 1, c(1.0, 0.0));
        let out = apply_scenario(&power, &CMatrix::column_vector(&[c(1.0, 1.0)])).unwrap();
        assert!((out[(0, 0)] - c(0.0, 2.0)).norm() < 1e-15);

        let lin = synthetic(ScenarioKind::LinearSynthetic, 2, c(2.0, 0.0));
        let out =
            apply_scenario(&lin, &CMatrix::column_vector(&[c(1.0, 0.0), c(0.0, 1.0)])).unwrap();
        assert_eq!(out.shape(), (1, 2));
        assert_eq!(out[(0, 0)], c(2.0, 0.0));
        assert_eq!(out[(0, 1)], c(0.0, 2.0));
    }

    #[test]
    fn scenario_rejects_bad_parameters() {
        let bad_d = Scenario::LinearSynthetic {
            c: vec![c(1.0, 0.0)],
            d: CMatrix::identity(2).scale(c(2.0, 0.0)),
        };
        assert!(matches!(
            apply_scenario(&bad_d, &CMatrix::zeros(2, 1)),
            Err(CalibError::InvalidScenario(_))
        ));
        let lin = synthetic(ScenarioKind::LinearSynthetic, 2, c(1.0, 0.0));
        assert!(matches!(
            apply_scenario(&lin, &CMatrix::zeros(3, 1)),
            Err(CalibError::InvalidScenario(_))
        ));
        let mut rng = SimRng::new(1);
        assert!(Scenario::synthetic(ScenarioKind::LinearTdd, &mut rng, 2, 2, TanhMode::Split)
            .is_err());
    }

    #[test]
    fn complex_tanh_mode_differs_from_split() {
        let z = CMatrix::column_vector(&[c(0.7, 0.9)]);
        let split = synthetic(ScenarioKind::TanhType, 1, c(1.0, 0.0));
        let complex = Scenario::TanhType {
            c: vec![c(1.0, 0.0)],
            d: CMatrix::identity(1),
            mode: TanhMode::Complex,
        };
        let a = apply_scenario(&split, &z).unwrap();
        let b = apply_scenario(&complex, &z).unwrap();
        assert!((a[(0, 0)] - c(0.7f64.tanh(), 0.9f64.tanh())).norm() < 1e-15);
        assert!((b[(0, 0)] - c(0.7, 0.9).tanh()).norm() < 1e-15);
        assert!((a[(0, 0)] - b[(0, 0)]).norm() > 1e-3);
    }

    #[test]
    fn pilots_are_orthogonal_unit_modulus() {
        let mut rng = SimRng::new(9);
        let one = gen_pilots(&mut rng, 1, 1).unwrap();
        assert!((one[(0, 0)].norm() - 1.0).abs() < 1e-15);
        let x = gen_pilots(&mut rng, 4, 4).unwrap();
        check_pilots(&x).unwrap();
        let x = gen_pilots(&mut rng, 32, 40).unwrap();
        check_pilots(&x).unwrap();
        for z in x.as_slice() {
            assert!((z.norm() - 1.0).abs() < 1e-15);
            assert!(z.arg().abs() <= std::f64::consts::PI);
        }
        assert!(gen_pilots(&mut rng, 4, 3).is_err());
    }

    #[test]
    fn noiseless_observation_is_exact_product() {
        let mut rng = SimRng::new(10);
        let h = sample_complex_gaussian(&mut rng, 32, 4, 1.0).unwrap();
        let x = gen_pilots(&mut rng, 4, 4).unwrap();
        let y = observe_ul(&h, &x, Snr::Noiseless, &mut rng).unwrap();
        assert_eq!(y, h.matmul(&x).unwrap());
        let est = estimate_channel_ls(&y, &x).unwrap();
        assert_eq!(est.shape(), (32, 4));
        assert!(est.max_abs_diff(&h).unwrap() < 1e-12);

        let hdl = sample_complex_gaussian(&mut rng, 4, 32, 1.0).unwrap();
        let xdl = gen_pilots(&mut rng, 32, 32).unwrap();
        let ydl = observe_dl(&hdl, &xdl, Snr::Db(10.0), &mut rng).unwrap();
        assert_eq!(ydl.shape(), (4, 32));
    }

    #[test]
    fn non_orthogonal_pilots_are_rejected() {
        let mut rng = SimRng::new(11);
        let h = CMatrix::identity(2);
        let x = CMatrix::from_fn(2, 2, |_, _| c(1.0, 0.0));
        assert!(matches!(
            observe_ul(&h, &x, Snr::Db(10.0), &mut rng),
            Err(CalibError::InvalidPilot(_))
        ));
    }

    #[test]
    fn ul_noise_power_at_zero_db() {
        let mut rng = SimRng::new(12);
        let h = CMatrix::zeros(64, 4);
        let x = gen_pilots(&mut rng, 4, 4).unwrap();
        let mut acc = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let y = observe_ul(&h, &x, Snr::Db(0.0), &mut rng).unwrap();
            acc += y.frobenius_sq();
        }
        let per_entry = acc / (trials * 64 * 4) as f64;
        assert!((per_entry - 1.0).abs() < 0.03, "{per_entry}");
    }

    #[test]
    fn scalar_observation_moment() {
        let mut rng = SimRng::new(13);
        let h = CMatrix::row_vector(&[c(2.0, 0.0)]);
        let x = CMatrix::row_vector(&[c(1.0, 0.0)]);
        let snr = Snr::Db(10.0);
        let mut acc = 0.0;
        let trials = 40_000;
        for _ in 0..trials {
            let y = observe_ul(&h, &x, snr, &mut rng).unwrap();
            acc += (y[(0, 0)] - c(2.0, 0.0)).norm_sqr();
        }
        let mean = acc / trials as f64;
        assert!((mean - 0.1).abs() < 0.003, "{mean}");
    }

    #[test]
    fn dl_residual_statistics() {
        let mut rng = SimRng::new(14);
        let hdl = sample_complex_gaussian(&mut rng, 4, 32, 1.0).unwrap();
        let x = gen_pilots(&mut rng, 32, 32).unwrap();
        let clean = hdl.matmul(&x).unwrap();
        let snr = Snr::Db(20.0);
        let mut power = 0.0;
        let mut mean = C64::new(0.0, 0.0);
        let trials = 100;
        for _ in 0..trials {
            let y = observe_dl(&hdl, &x, snr, &mut rng).unwrap();
            let r = y.sub(&clean).unwrap();
            power += r.frobenius_sq();
            mean += r.as_slice().iter().sum::<C64>();
        }
        let count = (trials * 4 * 32) as f64;
        assert!((power / count - 0.01).abs() < 0.0005);
        assert!((mean / count).norm() < 0.001);
    }

    #[test]
    fn ls_estimation_error_variance() {
        let mut rng = SimRng::new(15);
        let h = sample_complex_gaussian(&mut rng, 32, 4, 1.0).unwrap();
        let x = gen_pilots(&mut rng, 4, 4).unwrap();
        let snr = Snr::Db(10.0);
        let mut acc = 0.0;
        let trials = 400;
        for _ in 0..trials {
            let y = observe_ul(&h, &x, snr, &mut rng).unwrap();
            let est = estimate_channel_ls(&y, &x).unwrap();
            acc += mse_between(&est, &h, Normalization::Mean).unwrap();
        }
        let per_entry = acc / trials as f64;
        let expect = 1.0 / (4.0 * 10.0);
        assert!((per_entry / expect - 1.0).abs() < 0.05, "{per_entry}");
    }

    #[test]
    fn noiseless_ideal_dataset_is_reciprocal() {
        let rng = SimRng::new(16);
        let scenario = Scenario::LinearTdd {
            profile: HardwareProfile::ideal(4, 2),
        };
        let ds = build_dataset(&rng, &scenario, 1, Snr::Noiseless).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.pairs[0].h_dl, ds.pairs[0].h_ul.transpose());
        assert!(build_dataset(&rng, &scenario, 0, Snr::Noiseless).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_shares_channels_across_snr() {
        let mut srng = SimRng::new(17);
        let scenario = Scenario::linear_tdd(&mut srng, 8, 2, 1.0).unwrap();
        let rng = SimRng::new(18);
        let a = build_dataset(&rng, &scenario, 5, Snr::Db(10.0)).unwrap();
        let b = build_dataset(&rng, &scenario, 5, Snr::Db(10.0)).unwrap();
        assert_eq!(a, b);
        let c30 = build_dataset(&rng, &scenario, 5, Snr::Db(30.0)).unwrap();
        assert_eq!(a.truth_dl, c30.truth_dl);
        assert_eq!(a.snr(), Some(Snr::Db(10.0)));
        let mixed = build_dataset_mixed_snr(&rng, &scenario, 5, 0.0, 40.0).unwrap();
        assert_eq!(mixed.snr(), None);
        assert_eq!(mixed.truth_dl, a.truth_dl);
    }

    #[test]
    fn table_sized_dataset_and_split() {
        let mut srng = SimRng::new(19);
        let scenario =
            Scenario::synthetic(ScenarioKind::LinearSynthetic, &mut srng, 32, 4, TanhMode::Split)
                .unwrap();
        let ds = build_dataset(&SimRng::new(20), &scenario, 10240, Snr::Db(20.0)).unwrap();
        assert_eq!(ds.len(), 10240);
        let (train, held) = ds.split(0.4, &mut SimRng::new(21)).unwrap();
        assert_eq!(train.len(), 6144);
        assert_eq!(held.len(), 4096);
        assert!(held.has_truth());
    }

    #[test]
    fn split_needs_two_pairs() {
        assert!(split_indices(1, 0.4, &mut SimRng::new(1)).is_err());
        assert!(split_indices(10, 0.0, &mut SimRng::new(1)).is_err());
        let (a, b) = split_indices(2, 0.4, &mut SimRng::new(1)).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn power_normalization_gives_unit_channel_power() {
        let mut rng = SimRng::new(22);
        let mut acc_ul = 0.0;
        let mut acc_dl = 0.0;
        let draws = 300;
        for _ in 0..draws {
            let scenario = Scenario::linear_tdd(&mut rng, 16, 2, 1.0).unwrap();
            let pair = draw_truth(&scenario, &mut rng).unwrap();
            acc_ul += pair.h_ul.frobenius_sq() / 32.0;
            acc_dl += pair.h_dl.frobenius_sq() / 32.0;
        }
        assert!((acc_ul / draws as f64 - 1.0).abs() < 0.15);
        assert!((acc_dl / draws as f64 - 1.0).abs() < 0.15);
    }
}
