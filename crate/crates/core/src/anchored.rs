//! The process seen from its rightmost occupied site.
//!
//! Anchoring subtracts the rightmost coordinate from every occupied site, so
//! a nonempty configuration becomes a set of non-positive even offsets with 0
//! always present. Configurations evolved with a `FullLeft` boundary carry a
//! *truncated* marker: offsets deeper than the tracked part of the window are
//! unknown (semantically occupied), so only a finite prefix of the anchored
//! picture is reliable and deep cylinder projections are refused rather than
//! silently wrong.

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lattice::{
    step_anchored, step_forward, BondLayer, BoundaryMode, Environment, LevelConfig, SimParams,
    Window,
};
use crate::rng::{LayerProbabilities, TrialRng};
use crate::stats::SupportKey;

/// Starting configuration of a chain, always instantiated at level 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitialCondition {
    /// The single site 0.
    Origin,
    /// A finite set of non-positive even sites containing 0.
    Finite(Vec<i64>),
    /// Every site `<= 0` (tracked portion explicit, left tail modelled by the
    /// `FullLeft` boundary).
    Full,
}

impl InitialCondition {
    pub fn to_level_config(&self, window: &Window) -> Result<LevelConfig> {
        match self {
            InitialCondition::Origin => {
                LevelConfig::from_sites(window, 0, &[0], BoundaryMode::Free)
            }
            InitialCondition::Finite(sites) => {
                if !sites.contains(&0) {
                    return Err(Error::InvalidConfig(
                        "a finite initial condition must contain site 0".into(),
                    ));
                }
                if let Some(&bad) = sites.iter().find(|&&x| x > 0 || x % 2 != 0) {
                    return Err(Error::InvalidConfig(format!(
                        "initial sites must be non-positive and even, found {bad}"
                    )));
                }
                LevelConfig::from_sites(window, 0, sites, BoundaryMode::Free)
            }
            InitialCondition::Full => {
                Ok(LevelConfig::full_up_to(window, 0, 0, BoundaryMode::FullLeft))
            }
        }
    }

    /// Starting frame for the anchored chain driver. Finite sets use the
    /// static window; `Full` occupies an entire sliding frame whose top slot
    /// is site 0, the rightmost point of the initial set.
    pub fn to_chain_config(&self, window: &Window) -> Result<LevelConfig> {
        match self {
            InitialCondition::Full => {
                Ok(LevelConfig::anchored_full(window.width, 0, 0))
            }
            _ => self.to_level_config(window),
        }
    }
}

impl fmt::Display for InitialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialCondition::Origin => write!(f, "origin"),
            InitialCondition::Full => write!(f, "full"),
            InitialCondition::Finite(sites) => {
                write!(f, "finite:")?;
                for (i, x) in sites.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for InitialCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(InitialCondition::Origin),
            "full" => Ok(InitialCondition::Full),
            _ => {
                let rest = s.strip_prefix("finite:").ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "unknown initial condition '{s}' (expected origin, full or finite:LIST)"
                    ))
                })?;
                let sites = rest
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<i64>().map_err(|_| {
                            Error::InvalidConfig(format!("bad site '{t}' in initial condition"))
                        })
                    })
                    .collect::<Result<Vec<i64>>>()?;
                Ok(InitialCondition::Finite(sites))
            }
        }
    }
}

impl Serialize for InitialCondition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for InitialCondition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// An anchored configuration: offsets relative to the rightmost occupied
/// site, strictly decreasing from 0.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnchoredConfig {
    /// The absorbing state.
    Empty,
    /// Every occupied offset is known.
    Finite { offsets: Vec<i64> },
    /// Offsets deeper than `depth` sites below the anchor were outside the
    /// window; only the listed prefix is reliable.
    Truncated { offsets: Vec<i64>, depth: usize },
}

impl AnchoredConfig {
    pub fn is_empty(&self) -> bool {
        matches!(self, AnchoredConfig::Empty)
    }

    pub fn offsets(&self) -> Option<&[i64]> {
        match self {
            AnchoredConfig::Empty => None,
            AnchoredConfig::Finite { offsets } | AnchoredConfig::Truncated { offsets, .. } => {
                Some(offsets)
            }
        }
    }
}

impl Serialize for AnchoredConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AnchoredConfig::Empty => s.serialize_none(),
            AnchoredConfig::Finite { offsets } => offsets.serialize(s),
            AnchoredConfig::Truncated { offsets, depth } => {
                use serde::ser::SerializeStruct;
                let mut st = s.serialize_struct("Truncated", 2)?;
                st.serialize_field("offsets", offsets)?;
                st.serialize_field("truncated_depth", depth)?;
                st.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for AnchoredConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Null,
            Offsets(Vec<i64>),
            Truncated { offsets: Vec<i64>, truncated_depth: usize },
        }
        match Repr::deserialize(d)? {
            Repr::Null => Ok(AnchoredConfig::Empty),
            Repr::Offsets(offsets) => Ok(AnchoredConfig::Finite { offsets }),
            Repr::Truncated { offsets, truncated_depth } => {
                Ok(AnchoredConfig::Truncated { offsets, depth: truncated_depth })
            }
        }
    }
}

/// Shifts a configuration to its rightmost occupied site.
///
/// An empty `FullLeft` configuration is refused: the rightmost site then sits
/// somewhere in the untracked left tail, so the anchored view is undefined
/// and the window was too narrow for the requested regime.
pub fn anchor(config: &LevelConfig) -> Result<AnchoredConfig> {
    let Some(r) = config.rightmost() else {
        return match config.mode() {
            BoundaryMode::Free => Ok(AnchoredConfig::Empty),
            BoundaryMode::FullLeft => Err(Error::Guard(format!(
                "the rightmost occupied site left the window at level {}; enlarge the window",
                config.level()
            ))),
        };
    };
    let mut offsets: Vec<i64> = config.occupied_sites().iter().rev().map(|x| x - r).collect();
    debug_assert_eq!(offsets.first(), Some(&0));
    offsets.shrink_to_fit();
    match config.mode() {
        BoundaryMode::Free => Ok(AnchoredConfig::Finite { offsets }),
        BoundaryMode::FullLeft => {
            // Tracked sites of this level reach down to `origin`, so offsets
            // are reliable only `depth` site-slots below the anchor.
            let depth = ((r - config.origin()) / 2) as usize;
            Ok(AnchoredConfig::Truncated { offsets, depth })
        }
    }
}

/// Occupation pattern of the `r` sites immediately left of the anchor
/// (offsets -2, -4, …, -2r). Bit `k` corresponds to offset `-2(k+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CylinderPattern {
    r: usize,
    bits: u32,
}

/// Patterns are tabulated densely, so keep the depth word-sized.
pub const MAX_PATTERN_DEPTH: usize = 24;

impl CylinderPattern {
    pub fn new(r: usize, bits: u32) -> Result<Self> {
        if r == 0 || r > MAX_PATTERN_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "cylinder depth must lie in 1..={MAX_PATTERN_DEPTH}, got {r}"
            )));
        }
        if r < 32 && bits >> r != 0 {
            return Err(Error::InvalidConfig(format!(
                "pattern bits {bits:#b} exceed depth {r}"
            )));
        }
        Ok(CylinderPattern { r, bits })
    }

    pub fn depth(&self) -> usize {
        self.r
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Offset `-2k` (k in 1..=r) occupied?
    pub fn occupied_at(&self, k: usize) -> bool {
        k >= 1 && k <= self.r && self.bits >> (k - 1) & 1 == 1
    }
}

impl fmt::Display for CylinderPattern {
    /// Offset -2 first, then -4, and so on.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.r {
            write!(f, "{}", self.bits >> k & 1)?;
        }
        Ok(())
    }
}

impl FromStr for CylinderPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut bits = 0u32;
        for (k, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => bits |= 1 << k,
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "pattern strings use only 0 and 1, got '{s}'"
                    )))
                }
            }
        }
        CylinderPattern::new(s.len(), bits)
    }
}

impl Serialize for CylinderPattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CylinderPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

impl SupportKey for CylinderPattern {
    fn encoding(&self) -> u64 {
        self.r as u64
    }
}

/// Projects an anchored configuration onto its depth-`r` cylinder pattern.
pub fn project(config: &AnchoredConfig, r: usize) -> Result<CylinderPattern> {
    match config {
        AnchoredConfig::Empty => Err(Error::EmptyProjection),
        AnchoredConfig::Finite { offsets } => pattern_from_offsets(offsets, r),
        AnchoredConfig::Truncated { offsets, depth } => {
            if r > *depth {
                Err(Error::ProjectionDepth { r, depth: *depth })
            } else {
                pattern_from_offsets(offsets, r)
            }
        }
    }
}

fn pattern_from_offsets(offsets: &[i64], r: usize) -> Result<CylinderPattern> {
    let mut bits = 0u32;
    for &o in offsets {
        if o < 0 {
            let k = (-o / 2) as usize;
            if (1..=r).contains(&k) && o % 2 == 0 {
                bits |= 1 << (k - 1);
            }
        }
    }
    CylinderPattern::new(r, bits)
}

/// Death time of a chain: `t` is the first level with no occupied site, or
/// `None` when the chain was still alive at the simulation horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub t: Option<u32>,
}

impl SurvivalRecord {
    /// Still alive strictly after level `n`?
    pub fn survived_past(&self, n: u32) -> bool {
        match self.t {
            None => true,
            Some(t) => t > n,
        }
    }
}

/// One trial's anchored trajectory over levels `0..=n_max`.
#[derive(Clone, Debug)]
pub struct ZetaTrajectory {
    pub anchored: Vec<AnchoredConfig>,
    pub record: SurvivalRecord,
}

/// Runs the anchored chain through a materialised environment.
///
/// Finite initial sets evolve in the environment's static window; the `Full`
/// initial set evolves in a sliding frame re-anchored on the rightmost site
/// at every level, reusing the environment's per-slot bond draws (see
/// [`BondLayer::repinned`]).
pub fn run_zeta_chain(env: &Environment, initial: &InitialCondition) -> Result<ZetaTrajectory> {
    let n_max = env.params().n_max;
    let mut anchored = Vec::with_capacity(n_max as usize + 1);
    let mut config = initial.to_chain_config(env.window())?;
    anchored.push(anchor(&config)?);
    let mut death = None;
    for level in 0..n_max {
        if config.is_empty() {
            anchored.push(AnchoredConfig::Empty);
            continue;
        }
        config = match config.mode() {
            BoundaryMode::FullLeft => {
                let layer = env.layer(level)?.repinned(config.origin(), config.origin() + 1);
                step_anchored(&config, &layer)?
            }
            BoundaryMode::Free => step_forward(&config, env.layer(level)?)?,
        };
        if config.is_empty() && config.mode() == BoundaryMode::Free {
            death.get_or_insert(level + 1);
        }
        anchored.push(anchor(&config)?);
    }
    Ok(ZetaTrajectory { anchored, record: SurvivalRecord { t: death } })
}

/// Lazily sampled anchored chain for Monte Carlo driving: bond layers are
/// drawn level by level from the trial's stream and discarded, so memory
/// stays flat and dead chains stop consuming CPU early. Draw-for-draw it
/// reproduces [`run_zeta_chain`] on [`sample_environment`].
pub struct ZetaChain {
    window: Window,
    probs: LayerProbabilities,
    rng: TrialRng,
    config: LevelConfig,
    n_max: u32,
}

impl ZetaChain {
    pub fn new(params: &SimParams, trial_index: u64, initial: &InitialCondition) -> Result<Self> {
        let window = params.window();
        let config = initial.to_chain_config(&window)?;
        Ok(ZetaChain {
            window,
            probs: params.probabilities(),
            rng: TrialRng::new(params.seed, trial_index),
            config,
            n_max: params.n_max,
        })
    }

    pub fn level(&self) -> u32 {
        self.config.level()
    }

    pub fn config(&self) -> &LevelConfig {
        &self.config
    }

    /// Dead chains (Free mode, no occupation) stay dead; stepping one is a
    /// no-op that still reports the state.
    pub fn is_dead(&self) -> bool {
        self.config.is_empty() && self.config.mode() == BoundaryMode::Free
    }

    pub fn step(&mut self) -> Result<&LevelConfig> {
        let level = self.config.level();
        if level >= self.n_max {
            return Err(Error::LevelOutOfRange { level: level + 1, max: self.n_max });
        }
        match self.config.mode() {
            BoundaryMode::FullLeft => {
                let origin = self.config.origin();
                let layer = BondLayer::sample_at(
                    origin,
                    origin + 1,
                    self.config.width(),
                    level,
                    &mut self.rng,
                    &self.probs,
                );
                self.config = step_anchored(&self.config, &layer)?;
            }
            BoundaryMode::Free => {
                let layer = BondLayer::sample(&self.window, level, &mut self.rng, &self.probs);
                if !self.is_dead() {
                    self.config = step_forward(&self.config, &layer)?;
                } else {
                    self.config = LevelConfig::empty(&self.window, level + 1, BoundaryMode::Free);
                }
            }
        }
        Ok(&self.config)
    }

    /// Anchored view of the current level. A FullLeft chain is always
    /// anchorable (the sliding frame keeps the rightmost site in its top
    /// slot); a Free chain returns `Empty` once dead.
    pub fn anchored(&self) -> Result<AnchoredConfig> {
        anchor(&self.config)
    }

    /// Steps until `level` and reports whether the chain is still alive.
    pub fn advance_to(&mut self, level: u32) -> Result<bool> {
        while self.config.level() < level {
            if self.is_dead() {
                // No observer cares about the remaining layers of a dead
                // chain; skipping them is safe because each consumer reads
                // the stream only through this chain.
                self.config = LevelConfig::empty(&self.window, level, BoundaryMode::Free);
                break;
            }
            self.step()?;
        }
        Ok(!self.is_dead())
    }
}
