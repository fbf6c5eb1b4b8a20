//! The windowed oriented lattice and its sampled bond environments.
//!
//! Sites live on `{(x, n) : n >= 0, x + n even}`; every site `(x, n)` carries
//! a left bond to `(x-1, n+1)` and a right bond to `(x+1, n+1)`, each open
//! independently with probability `p`. The simulator never represents the
//! whole line: each level is tracked through a window of exactly `width`
//! sites of the correct parity, used in two regimes.
//!
//! *Static windows* serve finite initial sets and reachability queries: the
//! interval is fixed in advance, right-edge exits are hard errors (size the
//! window so they cannot happen), and the `Free` left edge drops whatever
//! falls off it.
//!
//! *Anchored windows* serve configurations with an infinite occupied left
//! tail, whose rightmost site drifts left without bound in the subcritical
//! regime. There the window slides so that its top slot is always the current
//! rightmost site ([`step_anchored`]), and the `FullLeft` boundary stands in
//! for everything below the tracked span: the leftmost tracked site is
//! additionally occupied at each step with probability `1 - (1-p)^2`, the
//! chance that an untracked occupied neighbour feeds it through at least one
//! of two bonds. This stand-in is a documented approximation; its influence
//! on statistics near the anchor decays exponentially in the window width.
//!
//! The fringe draw is consumed once per level whether or not the stepped
//! configuration uses it, so one sampled stream serves every mode
//! identically.

use serde::{Deserialize, Serialize};

use crate::bits;
use crate::error::{Error, Result};
use crate::rng::{LayerProbabilities, TrialRng};

/// Global simulation parameters shared by every experiment.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SimParams {
    pub p: f64,
    pub n_max: u32,
    pub window_width: usize,
    pub seed: u64,
}

impl SimParams {
    /// The working regime is `0 < p < 1`; the endpoints are admitted exactly
    /// (all bonds closed / all bonds open) because degenerate environments
    /// make useful oracles.
    pub fn new(p: f64, n_max: u32, window_width: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "bond probability must lie in [0, 1], got {p}"
            )));
        }
        if n_max == 0 {
            return Err(Error::InvalidConfig("n_max must be at least 1".into()));
        }
        if window_width < 2 {
            return Err(Error::InvalidConfig(format!(
                "window width must be at least 2 sites, got {window_width}"
            )));
        }
        Ok(SimParams { p, n_max, window_width, seed })
    }

    pub fn window(&self) -> Window {
        Window::for_horizon(self.n_max, self.window_width)
    }

    pub fn probabilities(&self) -> LayerProbabilities {
        // SimParams::new validated p, so this cannot fail.
        LayerProbabilities::new(self.p).expect("validated p")
    }
}

/// Fixed integer interval `[lo, lo + 2*width - 1]` containing `width` sites
/// of each parity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub lo: i64,
    pub width: usize,
}

impl Window {
    /// Places the window so that a chain started from sites `<= 0` cannot
    /// exit on the right before level `n_max` (the extreme right path from 0
    /// sits at coordinate `n <= n_max < hi`).
    pub fn for_horizon(n_max: u32, width: usize) -> Window {
        let hi = n_max as i64 + 1;
        Window { lo: hi - (2 * width as i64 - 1), width }
    }

    pub fn hi(&self) -> i64 {
        self.lo + 2 * self.width as i64 - 1
    }

    /// Coordinate of tracked site index 0 at `level`.
    pub fn origin_at(&self, level: u32) -> i64 {
        if (self.lo + level as i64).rem_euclid(2) == 0 {
            self.lo
        } else {
            self.lo + 1
        }
    }

    pub fn contains(&self, x: i64) -> bool {
        x >= self.lo && x <= self.hi()
    }

    fn words(&self) -> usize {
        bits::words_for(self.width)
    }

    /// Maps a coordinate at `level` to its tracked site index.
    pub fn index_of(&self, x: i64, level: u32) -> Option<usize> {
        let origin = self.origin_at(level);
        if x < origin || (x - origin) % 2 != 0 {
            return None;
        }
        let i = ((x - origin) / 2) as usize;
        (i < self.width).then_some(i)
    }
}

/// Left-boundary semantics of a tracked configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryMode {
    /// Occupation falling off the left edge is dropped.
    Free,
    /// Everything left of the window is treated as occupied.
    FullLeft,
}

/// Occupied tracked sites at one level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelConfig {
    level: u32,
    origin: i64,
    width: usize,
    occ: Vec<u64>,
    mode: BoundaryMode,
}

impl LevelConfig {
    pub fn empty(window: &Window, level: u32, mode: BoundaryMode) -> LevelConfig {
        LevelConfig {
            level,
            origin: window.origin_at(level),
            width: window.width,
            occ: vec![0; window.words()],
            mode,
        }
    }

    /// All tracked sites occupied up to and including coordinate `max_x`
    /// (clamped to the window).
    pub fn full_up_to(window: &Window, level: u32, max_x: i64, mode: BoundaryMode) -> LevelConfig {
        let mut cfg = LevelConfig::empty(window, level, mode);
        let origin = cfg.origin;
        if max_x >= origin {
            let hi = (((max_x - origin) / 2) as usize).min(window.width - 1);
            bits::set_range(&mut cfg.occ, 0, hi, window.width);
        }
        cfg
    }

    /// A fully occupied sliding frame of `width` sites whose top slot carries
    /// coordinate `top` (which must match the level's parity).
    pub fn anchored_full(width: usize, level: u32, top: i64) -> LevelConfig {
        debug_assert_eq!((top + i64::from(level)).rem_euclid(2), 0);
        let mut occ = vec![u64::MAX; bits::words_for(width)];
        bits::mask_width(&mut occ, width);
        LevelConfig {
            level,
            origin: top - 2 * (width as i64 - 1),
            width,
            occ,
            mode: BoundaryMode::FullLeft,
        }
    }

    pub fn from_sites(
        window: &Window,
        level: u32,
        sites: &[i64],
        mode: BoundaryMode,
    ) -> Result<LevelConfig> {
        let mut cfg = LevelConfig::empty(window, level, mode);
        for &x in sites {
            let idx = window.index_of(x, level).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "site {x} is not a tracked level-{level} site of window [{}, {}]",
                    window.lo,
                    window.hi()
                ))
            })?;
            bits::set(&mut cfg.occ, idx);
        }
        Ok(cfg)
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn origin(&self) -> i64 {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    pub fn is_empty(&self) -> bool {
        bits::is_zero(&self.occ)
    }

    pub fn count(&self) -> u32 {
        bits::count_ones(&self.occ)
    }

    pub fn contains(&self, x: i64) -> bool {
        if x < self.origin || (x - self.origin) % 2 != 0 {
            return false;
        }
        let i = ((x - self.origin) / 2) as usize;
        i < self.width && bits::get(&self.occ, i)
    }

    /// Coordinate of the rightmost occupied tracked site.
    pub fn rightmost(&self) -> Option<i64> {
        bits::highest_set(&self.occ).map(|i| self.origin + 2 * i as i64)
    }

    pub fn occupied_sites(&self) -> Vec<i64> {
        bits::iter_ones(&self.occ).map(|i| self.origin + 2 * i as i64).collect()
    }

    pub(crate) fn words(&self) -> &[u64] {
        &self.occ
    }

    pub(crate) fn from_words(
        level: u32,
        origin: i64,
        width: usize,
        occ: Vec<u64>,
        mode: BoundaryMode,
    ) -> LevelConfig {
        LevelConfig { level, origin, width, occ, mode }
    }

    /// Same occupancy, different boundary semantics.
    pub fn with_mode(&self, mode: BoundaryMode) -> LevelConfig {
        LevelConfig { mode, ..self.clone() }
    }
}

/// Open/closed states of every bond between one level and the next, plus the
/// boundary-fringe outcome for that step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondLayer {
    level: u32,
    parent_origin: i64,
    child_origin: i64,
    width: usize,
    left: Vec<u64>,
    right: Vec<u64>,
    fringe_open: bool,
}

impl BondLayer {
    /// Draw order per layer: site 0 left, site 0 right, site 1 left, …, then
    /// one fringe draw. This order is part of the reproducibility contract.
    pub fn sample(
        window: &Window,
        level: u32,
        rng: &mut TrialRng,
        probs: &LayerProbabilities,
    ) -> BondLayer {
        Self::sample_at(
            window.origin_at(level),
            window.origin_at(level + 1),
            window.width,
            level,
            rng,
            probs,
        )
    }

    /// Samples a layer pinned to an explicit parent/child frame. The draws and
    /// their order are identical to [`BondLayer::sample`]; only the coordinate
    /// labels differ, which is what lets a sliding window reuse the same
    /// stream as a static one.
    pub fn sample_at(
        parent_origin: i64,
        child_origin: i64,
        width: usize,
        level: u32,
        rng: &mut TrialRng,
        probs: &LayerProbabilities,
    ) -> BondLayer {
        let words = bits::words_for(width);
        let mut left = vec![0u64; words];
        let mut right = vec![0u64; words];
        for i in 0..width {
            if probs.bond.open(rng.next_u64()) {
                bits::set(&mut left, i);
            }
            if probs.bond.open(rng.next_u64()) {
                bits::set(&mut right, i);
            }
        }
        let fringe_open = probs.fringe.open(rng.next_u64());
        BondLayer { level, parent_origin, child_origin, width, left, right, fringe_open }
    }

    /// The same drawn bonds, relabelled onto a different parent/child frame.
    /// Bond `i` of the result belongs to tracked slot `i` of the new frame.
    pub fn repinned(&self, parent_origin: i64, child_origin: i64) -> BondLayer {
        BondLayer { parent_origin, child_origin, ..self.clone() }
    }

    /// Layer with every bond closed; used to hand-build environments.
    pub fn closed(window: &Window, level: u32) -> BondLayer {
        BondLayer {
            level,
            parent_origin: window.origin_at(level),
            child_origin: window.origin_at(level + 1),
            width: window.width,
            left: vec![0; window.words()],
            right: vec![0; window.words()],
            fringe_open: false,
        }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Opens the left bond of the parent site at coordinate `x`.
    pub fn open_left(&mut self, x: i64) -> Result<()> {
        let i = self.parent_index(x)?;
        bits::set(&mut self.left, i);
        Ok(())
    }

    /// Opens the right bond of the parent site at coordinate `x`.
    pub fn open_right(&mut self, x: i64) -> Result<()> {
        let i = self.parent_index(x)?;
        bits::set(&mut self.right, i);
        Ok(())
    }

    pub fn set_fringe(&mut self, open: bool) {
        self.fringe_open = open;
    }

    fn parent_index(&self, x: i64) -> Result<usize> {
        let off = x - self.parent_origin;
        if off < 0 || off % 2 != 0 || (off / 2) as usize >= self.width {
            return Err(Error::InvalidConfig(format!(
                "coordinate {x} is not a tracked level-{} site",
                self.level
            )));
        }
        Ok((off / 2) as usize)
    }
}

/// Raw uniform draws for one layer, retained so the same environment can be
/// thresholded at several bond probabilities (exact monotone coupling).
#[derive(Clone, Debug)]
pub struct UniformLayer {
    level: u32,
    parent_origin: i64,
    child_origin: i64,
    width: usize,
    left: Vec<u64>,
    right: Vec<u64>,
    fringe: u64,
}

impl UniformLayer {
    /// Consumes exactly the same draws, in the same order, as
    /// [`BondLayer::sample`].
    pub fn sample(window: &Window, level: u32, rng: &mut TrialRng) -> UniformLayer {
        let mut left = Vec::with_capacity(window.width);
        let mut right = Vec::with_capacity(window.width);
        for _ in 0..window.width {
            left.push(rng.next_u64());
            right.push(rng.next_u64());
        }
        UniformLayer {
            level,
            parent_origin: window.origin_at(level),
            child_origin: window.origin_at(level + 1),
            width: window.width,
            left,
            right,
            fringe: rng.next_u64(),
        }
    }

    /// Thresholds the stored uniforms at bond probability `p`.
    pub fn threshold(&self, probs: &LayerProbabilities) -> BondLayer {
        let words = bits::words_for(self.width);
        let mut left = vec![0u64; words];
        let mut right = vec![0u64; words];
        for i in 0..self.width {
            if probs.bond.open(self.left[i]) {
                bits::set(&mut left, i);
            }
            if probs.bond.open(self.right[i]) {
                bits::set(&mut right, i);
            }
        }
        BondLayer {
            level: self.level,
            parent_origin: self.parent_origin,
            child_origin: self.child_origin,
            width: self.width,
            left,
            right,
            fringe_open: probs.fringe.open(self.fringe),
        }
    }
}

/// A fully materialised bond environment for one trial: every bond between
/// levels 0 and `n_max` has a definite state.
#[derive(Clone, Debug)]
pub struct Environment {
    params: SimParams,
    window: Window,
    trial_index: u64,
    layers: Vec<BondLayer>,
}

/// Samples the whole environment of one trial from its dedicated stream.
pub fn sample_environment(params: &SimParams, trial_index: u64) -> Environment {
    let window = params.window();
    let probs = params.probabilities();
    let mut rng = TrialRng::new(params.seed, trial_index);
    let layers = (0..params.n_max)
        .map(|level| BondLayer::sample(&window, level, &mut rng, &probs))
        .collect();
    Environment { params: *params, window, trial_index, layers }
}

impl Environment {
    /// Builds an environment from hand-specified layers (test fixtures).
    pub fn from_layers(params: SimParams, layers: Vec<BondLayer>) -> Result<Environment> {
        let window = params.window();
        if layers.len() != params.n_max as usize {
            return Err(Error::InvalidConfig(format!(
                "expected {} layers, got {}",
                params.n_max,
                layers.len()
            )));
        }
        for (k, layer) in layers.iter().enumerate() {
            let ok = layer.level == k as u32
                && layer.width == window.width
                && layer.parent_origin == window.origin_at(k as u32)
                && layer.child_origin == window.origin_at(k as u32 + 1);
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "layer {k} does not match the window geometry"
                )));
            }
        }
        Ok(Environment { params, window, trial_index: 0, layers })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn trial_index(&self) -> u64 {
        self.trial_index
    }

    pub fn layer(&self, level: u32) -> Result<&BondLayer> {
        self.layers.get(level as usize).ok_or(Error::LevelOutOfRange {
            level,
            max: self.params.n_max - 1,
        })
    }
}

/// Advances a configuration through one bond layer.
///
/// The update is a pair of masked word shifts. With `L`/`R` the open-bond
/// masks and `occ` the occupancy, a child level whose origin sits one step
/// left of the parent origin receives `(occ & L) | ((occ & R) << 1)`; one
/// step right receives `(occ & R) | ((occ & L) >> 1)`, the bit shifted out on
/// the left being exactly the occupation lost over the `Free` edge.
pub fn step_forward(config: &LevelConfig, layer: &BondLayer) -> Result<LevelConfig> {
    if config.level != layer.level {
        return Err(Error::LevelMismatch { config: config.level, layer: layer.level });
    }
    if config.width != layer.width || config.origin != layer.parent_origin {
        return Err(Error::InvalidConfig(
            "configuration and bond layer use different window geometry".into(),
        ));
    }
    let words = config.occ.len();
    let mut via_left = vec![0u64; words];
    let mut via_right = vec![0u64; words];
    for w in 0..words {
        via_left[w] = config.occ[w] & layer.left[w];
        via_right[w] = config.occ[w] & layer.right[w];
    }
    let mut child = vec![0u64; words];
    if layer.child_origin == config.origin - 1 {
        // Right children shift one index up; the top site's right child would
        // leave the window.
        if bits::get(&via_right, config.width - 1) {
            return Err(Error::WindowOverflow { level: config.level + 1 });
        }
        let mut shifted = vec![0u64; words];
        bits::shl1(&via_right, &mut shifted);
        for w in 0..words {
            child[w] = via_left[w] | shifted[w];
        }
    } else {
        // Left children shift one index down; index 0's left child falls off
        // the Free edge (and is semantically occupied anyway under FullLeft).
        let mut shifted = vec![0u64; words];
        bits::shr1(&via_left, &mut shifted);
        for w in 0..words {
            child[w] = via_right[w] | shifted[w];
        }
    }
    bits::mask_width(&mut child, config.width);
    if config.mode == BoundaryMode::FullLeft && layer.fringe_open {
        bits::set(&mut child, 0);
    }
    Ok(LevelConfig {
        level: config.level + 1,
        origin: layer.child_origin,
        width: config.width,
        occ: child,
        mode: config.mode,
    })
}

/// Advances a rightmost-anchored `FullLeft` configuration one level and
/// re-anchors the window on the new rightmost site.
///
/// The child occupancy is first computed in the frame one unit right of the
/// parent frame, which is the unique width-preserving frame containing the
/// top parent's right child, so growth on the right is never clipped: slot
/// `j` receives the right child of parent `j` and the left child of parent
/// `j+1`, while the bottom parent's left child falls off into the untracked
/// tail. The boundary fringe then feeds the lowest slot, and the window
/// finally slides so its top slot is the new rightmost site.
///
/// Slots scrolling in from below during the slide enter *empty*: the tail is
/// never materialised wholesale, its influence flows in solely through the
/// per-step fringe feed. (Entering slots sit far below the anchor, where the
/// chain's occupation density is already negligible; materialising them as
/// occupied would park a solid block under the window that the next deep
/// re-anchoring would land on, visibly distorting the law near the anchor.)
/// Only if every tracked child dies — possible but rare once the fringe feed
/// has seeded the lower window — does the tail's "occupied" reading apply
/// directly: the rightmost site is then the first untracked site below the
/// frame, and the configuration resets to a fully occupied window topped
/// there.
///
/// The layer must be pinned to the parent frame with `child_origin` one unit
/// right of `parent_origin` (see [`BondLayer::repinned`]).
pub fn step_anchored(config: &LevelConfig, layer: &BondLayer) -> Result<LevelConfig> {
    if config.mode != BoundaryMode::FullLeft {
        return Err(Error::InvalidConfig(
            "anchored stepping is defined for the FullLeft boundary only".into(),
        ));
    }
    if config.level != layer.level {
        return Err(Error::LevelMismatch { config: config.level, layer: layer.level });
    }
    if config.width != layer.width
        || config.origin != layer.parent_origin
        || layer.child_origin != config.origin + 1
    {
        return Err(Error::InvalidConfig(
            "anchored stepping needs a layer pinned to the parent frame, child frame one unit right"
                .into(),
        ));
    }
    let words = config.occ.len();
    let width = config.width;
    let via_left = bits::and(&config.occ, &layer.left);
    let mut child = vec![0u64; words];
    bits::shr1(&via_left, &mut child);
    for ((c, &o), &r) in child.iter_mut().zip(&config.occ).zip(&layer.right) {
        *c |= o & r;
    }
    if layer.fringe_open {
        bits::set(&mut child, 0);
    }
    let level = config.level + 1;
    let child_origin = config.origin + 1;
    match bits::highest_set(&child) {
        None => Ok(LevelConfig::anchored_full(width, level, child_origin - 2)),
        Some(top_slot) => {
            let slide = width - 1 - top_slot;
            let mut occ = bits::shl(&child, slide);
            bits::mask_width(&mut occ, width);
            Ok(LevelConfig {
                level,
                origin: child_origin - 2 * slide as i64,
                width,
                occ,
                mode: config.mode,
            })
        }
    }
}

/// Runs `initial` forward through the environment, returning the trajectory
/// `from_level ..= to_level` (inclusive of the initial configuration).
pub fn forward_reach(
    env: &Environment,
    initial: &LevelConfig,
    from_level: u32,
    to_level: u32,
) -> Result<Vec<LevelConfig>> {
    if initial.level != from_level {
        return Err(Error::LevelMismatch { config: initial.level, layer: from_level });
    }
    if to_level < from_level || to_level > env.params.n_max {
        return Err(Error::LevelOutOfRange { level: to_level, max: env.params.n_max });
    }
    let mut out = Vec::with_capacity((to_level - from_level + 1) as usize);
    out.push(initial.clone());
    for level in from_level..to_level {
        let next = step_forward(out.last().unwrap(), env.layer(level)?)?;
        out.push(next);
    }
    Ok(out)
}

/// For every level `k <= target_level`, the set of tracked sites from which
/// an open in-window path reaches level `target_level`.
///
/// Entry `k` of the result marks those sites; the entry at `target_level`
/// itself is the full window. Boundary fringes play no role here: reachability
/// is about realised bonds only, so the configurations come back in `Free`
/// mode.
pub fn backward_reach(env: &Environment, target_level: u32) -> Result<Vec<LevelConfig>> {
    if target_level > env.params.n_max {
        return Err(Error::LevelOutOfRange { level: target_level, max: env.params.n_max });
    }
    let window = &env.window;
    let words = window.words();
    let width = window.width;
    let mut out = vec![LevelConfig::empty(window, 0, BoundaryMode::Free); target_level as usize + 1];
    let mut reach = vec![u64::MAX; words];
    bits::mask_width(&mut reach, width);
    out[target_level as usize] = LevelConfig::from_words(
        target_level,
        window.origin_at(target_level),
        width,
        reach.clone(),
        BoundaryMode::Free,
    );
    for level in (0..target_level).rev() {
        let layer = env.layer(level)?;
        let mut next = vec![0u64; words];
        if layer.child_origin == layer.parent_origin - 1 {
            // Parent i reaches via left bond -> child i, right bond -> child i+1.
            let mut shifted = vec![0u64; words];
            bits::shr1(&reach, &mut shifted);
            for w in 0..words {
                next[w] = (layer.left[w] & reach[w]) | (layer.right[w] & shifted[w]);
            }
        } else {
            // Parent i reaches via left bond -> child i-1, right bond -> child i.
            let mut shifted = vec![0u64; words];
            bits::shl1(&reach, &mut shifted);
            for w in 0..words {
                next[w] = (layer.left[w] & shifted[w]) | (layer.right[w] & reach[w]);
            }
        }
        bits::mask_width(&mut next, width);
        reach = next;
        out[level as usize] = LevelConfig::from_words(
            level,
            window.origin_at(level),
            width,
            reach.clone(),
            BoundaryMode::Free,
        );
    }
    Ok(out)
}

/// Steps one configuration through the same uniform draws thresholded at each
/// probability in `ps` (which must be sorted increasing). Because a bond open
/// at `p` is open at every larger probability, the returned configurations
/// are sitewise nested.
pub fn coupled_step(
    config: &LevelConfig,
    uniforms: &UniformLayer,
    ps: &[f64],
) -> Result<Vec<LevelConfig>> {
    if ps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(
            "coupled probabilities must be sorted increasing".into(),
        ));
    }
    ps.iter()
        .map(|&p| {
            let probs = LayerProbabilities::new(p)?;
            step_forward(config, &uniforms.threshold(&probs))
        })
        .collect()
}

/// Steps a family of per-probability configurations through one shared
/// uniform layer, preserving nesting.
pub fn coupled_step_each(
    configs: &[LevelConfig],
    uniforms: &UniformLayer,
    ps: &[f64],
) -> Result<Vec<LevelConfig>> {
    if configs.len() != ps.len() {
        return Err(Error::InvalidConfig(
            "one configuration per coupled probability is required".into(),
        ));
    }
    if ps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(
            "coupled probabilities must be sorted increasing".into(),
        ));
    }
    let out: Vec<LevelConfig> = configs
        .iter()
        .zip(ps.iter())
        .map(|(cfg, &p)| {
            let probs = LayerProbabilities::new(p)?;
            step_forward(cfg, &uniforms.threshold(&probs))
        })
        .collect::<Result<_>>()?;
    debug_assert!(
        !configs.windows(2).all(|w| bits::is_subset(w[0].words(), w[1].words()))
            || out.windows(2).all(|w| bits::is_subset(w[0].words(), w[1].words())),
        "coupling lost the nesting of an initially nested family"
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits;
    use proptest::prelude::*;

    fn params(p: f64, n_max: u32, width: usize) -> SimParams {
        SimParams::new(p, n_max, width, 11).unwrap()
    }

    #[test]
    fn window_placement_and_parity() {
        let w = Window::for_horizon(1, 2);
        assert_eq!(w.lo, -1);
        assert_eq!(w.hi(), 2);
        assert_eq!(w.origin_at(0), 0);
        assert_eq!(w.origin_at(1), -1);

        let w = Window::for_horizon(100, 256);
        assert_eq!(w.hi(), 101);
        assert_eq!(w.hi() - w.lo + 1, 512);
        for level in 0..=100u32 {
            let o = w.origin_at(level);
            assert_eq!((o + level as i64).rem_euclid(2), 0);
            assert!(o == w.lo || o == w.lo + 1);
        }
    }

    #[test]
    fn index_coordinate_round_trip() {
        let w = Window::for_horizon(10, 16);
        for level in 0..=10u32 {
            let origin = w.origin_at(level);
            for i in 0..16usize {
                let x = origin + 2 * i as i64;
                assert_eq!(w.index_of(x, level), Some(i));
                assert_eq!(w.index_of(x + 1, level), None);
            }
            assert_eq!(w.index_of(origin - 2, level), None);
            assert_eq!(w.index_of(origin + 32, level), None);
        }
    }

    /// Exhausts the four bond outcomes of a single site: the one-step law
    /// from {0} is {-1,1} / {-1} / {1} / empty according to which bonds are
    /// open.
    #[test]
    fn one_step_outcomes_from_origin() {
        let pr = params(0.5, 1, 2);
        let window = pr.window();
        let init =
            LevelConfig::from_sites(&window, 0, &[0], BoundaryMode::Free).unwrap();
        let cases = [
            (false, false, vec![]),
            (true, false, vec![-1]),
            (false, true, vec![1]),
            (true, true, vec![-1, 1]),
        ];
        for (l, r, expect) in cases {
            let mut layer = BondLayer::closed(&window, 0);
            if l {
                layer.open_left(0).unwrap();
            }
            if r {
                layer.open_right(0).unwrap();
            }
            let child = step_forward(&init, &layer).unwrap();
            assert_eq!(child.occupied_sites(), expect);
            assert_eq!(child.level(), 1);
        }
    }

    #[test]
    fn right_edge_exit_is_an_error() {
        let pr = params(0.5, 1, 2);
        let window = pr.window();
        // Level 0 tracks {0, 2}; the right child of 2 is 3, beyond hi = 2.
        let init = LevelConfig::from_sites(&window, 0, &[2], BoundaryMode::Free).unwrap();
        let mut layer = BondLayer::closed(&window, 0);
        layer.open_right(2).unwrap();
        match step_forward(&init, &layer) {
            Err(Error::WindowOverflow { level: 1 }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
        // The left bond from the same site stays in range.
        let mut layer = BondLayer::closed(&window, 0);
        layer.open_left(2).unwrap();
        let child = step_forward(&init, &layer).unwrap();
        assert_eq!(child.occupied_sites(), vec![1]);
    }

    #[test]
    fn left_edge_drops_under_free() {
        // n_max = 3, width = 2 gives window [1, 4]; level 1 has origin 1, so
        // the left child of site 1 lands at 0, off the window.
        let pr = params(0.5, 3, 2);
        let window = pr.window();
        assert_eq!((window.lo, window.hi()), (1, 4));
        assert_eq!(window.origin_at(1), 1);
        let init = LevelConfig::from_sites(&window, 1, &[1], BoundaryMode::Free).unwrap();
        let mut layer = BondLayer::closed(&window, 1);
        layer.open_left(1).unwrap();
        let child = step_forward(&init, &layer).unwrap();
        assert!(child.is_empty());
    }

    #[test]
    fn fringe_feeds_leftmost_site_only_in_full_left_mode() {
        let pr = params(0.5, 1, 4);
        let window = pr.window();
        let mut layer = BondLayer::closed(&window, 0);
        layer.set_fringe(true);
        let free = LevelConfig::empty(&window, 0, BoundaryMode::Free);
        let full = LevelConfig::empty(&window, 0, BoundaryMode::FullLeft);
        assert!(step_forward(&free, &layer).unwrap().is_empty());
        let stepped = step_forward(&full, &layer).unwrap();
        assert_eq!(stepped.occupied_sites(), vec![window.origin_at(1)]);
        assert_eq!(stepped.mode(), BoundaryMode::FullLeft);
    }

    /// Anchored stepping in a width-4 frame topped at 0 (slots -6,-4,-2,0):
    /// the child frame sits one unit right, so the top parent's right child
    /// is never clipped, and the window then slides until the new rightmost
    /// occupies the top slot.
    #[test]
    fn anchored_step_geometry() {
        let window = Window { lo: -6, width: 4 };
        let parent = LevelConfig::anchored_full(4, 0, 0);
        assert_eq!(parent.origin(), -6);
        assert_eq!(parent.occupied_sites(), vec![-6, -4, -2, 0]);

        // Right growth: the top parent's right child (site 1) survives and
        // needs no slide; a mid-window left child lands two slots lower.
        let mut layer = BondLayer::closed(&window, 0);
        layer.open_right(0).unwrap();
        layer.open_left(-4).unwrap();
        let child = step_anchored(&parent, &layer).unwrap();
        assert_eq!(child.level(), 1);
        assert_eq!(child.origin(), -5);
        assert_eq!(child.occupied_sites(), vec![-5, 1]);
        assert_eq!(child.mode(), BoundaryMode::FullLeft);

        // Left drift: only the top parent's left child (site -1) survives,
        // so the frame slides one slot and re-tops there.
        let mut layer = BondLayer::closed(&window, 0);
        layer.open_left(0).unwrap();
        let child = step_anchored(&parent, &layer).unwrap();
        assert_eq!(child.origin(), -7);
        assert_eq!(child.occupied_sites(), vec![-1]);
        assert_eq!(child.rightmost(), Some(-1));

        // Deep drop: only the bottom parent's right child (site -5)
        // survives. The frame slides three slots and the slots scrolling in
        // from below enter empty.
        let mut layer = BondLayer::closed(&window, 0);
        layer.open_right(-6).unwrap();
        let child = step_anchored(&parent, &layer).unwrap();
        assert_eq!(child.origin(), -11);
        assert_eq!(child.occupied_sites(), vec![-5]);
        assert_eq!(child.count(), 1);
    }

    #[test]
    fn anchored_step_fringe_and_reset() {
        let window = Window { lo: -6, width: 4 };
        let parent = LevelConfig::anchored_full(4, 0, 0);

        // The fringe feeds the lowest child slot (site -5 in the child
        // frame) exactly as an untracked occupied neighbour would.
        let mut layer = BondLayer::closed(&window, 0);
        layer.set_fringe(true);
        layer.open_right(0).unwrap();
        let child = step_anchored(&parent, &layer).unwrap();
        assert_eq!(child.occupied_sites(), vec![-5, 1]);

        // All tracked children dead: the rightmost site is then the first
        // untracked one below the child frame, and the window resets to
        // fully occupied topped there.
        let layer = BondLayer::closed(&window, 0);
        let child = step_anchored(&parent, &layer).unwrap();
        assert_eq!(child.rightmost(), Some(-7));
        assert_eq!(child.occupied_sites(), vec![-13, -11, -9, -7]);
        assert_eq!(child.level(), 1);
        assert_eq!(child.mode(), BoundaryMode::FullLeft);
    }

    #[test]
    fn anchored_step_rejects_bad_inputs() {
        let window = Window { lo: -6, width: 4 };
        let layer = BondLayer::closed(&window, 0);
        let free = LevelConfig::from_sites(&window, 0, &[0], BoundaryMode::Free).unwrap();
        assert!(matches!(step_anchored(&free, &layer), Err(Error::InvalidConfig(_))));

        let later = LevelConfig::anchored_full(4, 1, -1);
        assert!(matches!(
            step_anchored(&later, &layer),
            Err(Error::LevelMismatch { config: 1, layer: 0 })
        ));

        // The layer must be pinned to the parent frame with the child frame
        // one unit right of it.
        let parent = LevelConfig::anchored_full(4, 0, 0);
        let shifted = layer.repinned(parent.origin(), parent.origin() - 1);
        assert!(matches!(step_anchored(&parent, &shifted), Err(Error::InvalidConfig(_))));
        let wrong_frame = layer.repinned(parent.origin() + 2, parent.origin() + 3);
        assert!(matches!(step_anchored(&parent, &wrong_frame), Err(Error::InvalidConfig(_))));
        let wide = BondLayer::closed(&Window { lo: -10, width: 6 }, 0)
            .repinned(parent.origin(), parent.origin() + 1);
        assert!(matches!(step_anchored(&parent, &wide), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn environment_sampling_is_deterministic() {
        let pr = params(0.37, 12, 9);
        let a = sample_environment(&pr, 5);
        let b = sample_environment(&pr, 5);
        for level in 0..12 {
            assert_eq!(a.layer(level).unwrap(), b.layer(level).unwrap());
        }
        let c = sample_environment(&pr, 6);
        let differs = (0..12).any(|l| a.layer(l).unwrap() != c.layer(l).unwrap());
        assert!(differs, "distinct trials should see distinct environments");
    }

    #[test]
    fn uniform_layers_threshold_to_sampled_layers() {
        let pr = params(0.42, 6, 7);
        let window = pr.window();
        let probs = pr.probabilities();
        let mut rng_a = TrialRng::new(pr.seed, 3);
        let mut rng_b = TrialRng::new(pr.seed, 3);
        for level in 0..6 {
            let direct = BondLayer::sample(&window, level, &mut rng_a, &probs);
            let uniform = UniformLayer::sample(&window, level, &mut rng_b);
            assert_eq!(direct, uniform.threshold(&probs), "level {level}");
        }
    }

    #[test]
    fn degenerate_probabilities_are_exact() {
        let closed = params(0.0, 3, 4);
        let env = sample_environment(&closed, 0);
        let window = closed.window();
        let init = LevelConfig::full_up_to(&window, 0, 0, BoundaryMode::FullLeft);
        let stepped = step_forward(&init, env.layer(0).unwrap()).unwrap();
        assert!(stepped.is_empty(), "p = 0 kills everything, fringe included");

        let open = params(1.0, 3, 4);
        let env = sample_environment(&open, 0);
        let window = open.window();
        let init = LevelConfig::from_sites(&window, 0, &[-2], BoundaryMode::Free).unwrap();
        let stepped = step_forward(&init, env.layer(0).unwrap()).unwrap();
        assert_eq!(stepped.occupied_sites(), vec![-3, -1]);
    }

    #[test]
    fn backward_reach_base_level_is_full_window() {
        let pr = params(0.5, 4, 6);
        let env = sample_environment(&pr, 2);
        let back = backward_reach(&env, 3).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[3].count() as usize, 6);
    }

    fn arb_env(width: usize, n_max: u32) -> impl Strategy<Value = Environment> {
        (0u64..1_000_000, 0.05f64..0.95).prop_map(move |(trial, p)| {
            let pr = SimParams::new(p, n_max, width, 99).unwrap();
            let mut env = sample_environment(&pr, trial);
            env.trial_index = trial;
            env
        })
    }

    proptest! {
        /// Anchored stepping always leaves the rightmost site in the top
        /// slot, with the frame origin matching the level's parity.
        #[test]
        fn anchored_step_reanchors_top_slot(trial in 0u64..4_000, p in 0.05f64..0.95) {
            let probs = LayerProbabilities::new(p).unwrap();
            let mut rng = TrialRng::new(7, trial);
            let width = 6usize;
            let mut config = LevelConfig::anchored_full(width, 0, 0);
            for _ in 0..12 {
                let layer = BondLayer::sample_at(
                    config.origin(),
                    config.origin() + 1,
                    width,
                    config.level(),
                    &mut rng,
                    &probs,
                );
                let next = step_anchored(&config, &layer).unwrap();
                prop_assert_eq!(next.level(), config.level() + 1);
                prop_assert_eq!(next.mode(), BoundaryMode::FullLeft);
                prop_assert_eq!(next.rightmost(), Some(next.origin() + 2 * (width as i64 - 1)));
                prop_assert_eq!((next.origin() + i64::from(next.level())).rem_euclid(2), 0);
                config = next;
            }
        }

        /// Duality oracle: a level-0 site reaches the target level iff the
        /// backward reach set marks it.
        #[test]
        fn forward_backward_duality(env in arb_env(8, 6), target in 1u32..=6) {
            let window = *env.window();
            let back = backward_reach(&env, target).unwrap();
            let origin = window.origin_at(0);
            for i in 0..window.width {
                let x = origin + 2 * i as i64;
                if x + target as i64 > window.hi() {
                    // Sites this far right could legitimately exit the window
                    // before `target`; forward stepping treats that as a hard
                    // error, so duality is only claimed away from the edge.
                    continue;
                }
                let single = LevelConfig::from_sites(&window, 0, &[x], BoundaryMode::Free).unwrap();
                let traj = forward_reach(&env, &single, 0, target).unwrap();
                let reaches = !traj.last().unwrap().is_empty();
                prop_assert_eq!(reaches, back[0].contains(x), "site {}", x);
            }
        }

        /// Stepping is monotone in the occupancy.
        #[test]
        fn step_is_monotone(env in arb_env(8, 4), seed_bits in 0u64..256, extra_bits in 0u64..256) {
            let window = *env.window();
            let mut small = LevelConfig::empty(&window, 0, BoundaryMode::Free);
            let mut large = LevelConfig::empty(&window, 0, BoundaryMode::Free);
            for i in 0..window.width.min(8) {
                if seed_bits >> i & 1 == 1 {
                    bits::set(&mut small.occ, i);
                    bits::set(&mut large.occ, i);
                }
                if extra_bits >> i & 1 == 1 {
                    bits::set(&mut large.occ, i);
                }
            }
            let mut a = small;
            let mut b = large;
            for level in 0..4 {
                let layer = env.layer(level).unwrap();
                a = match step_forward(&a, layer) {
                    Ok(next) => next,
                    Err(_) => return Ok(()), // overflow aborts the comparison
                };
                b = match step_forward(&b, layer) {
                    Ok(next) => next,
                    Err(_) => return Ok(()),
                };
                prop_assert!(bits::is_subset(a.words(), b.words()));
            }
        }

        /// A Free trajectory never exceeds the FullLeft trajectory driven by
        /// the same environment.
        #[test]
        fn free_is_dominated_by_full_left(env in arb_env(8, 5)) {
            let window = *env.window();
            let free0 = LevelConfig::full_up_to(&window, 0, 0, BoundaryMode::Free);
            let full0 = free0.with_mode(BoundaryMode::FullLeft);
            let mut free = free0;
            let mut full = full0;
            for level in 0..5 {
                let layer = env.layer(level).unwrap();
                free = step_forward(&free, layer).unwrap();
                full = step_forward(&full, layer).unwrap();
                prop_assert!(bits::is_subset(free.words(), full.words()));
            }
        }

        /// Coupled stepping produces nested configurations across the whole
        /// probability ladder, level after level.
        #[test]
        fn coupled_steps_nest(trial in 0u64..10_000) {
            let pr = SimParams::new(0.5, 6, 8, 17).unwrap();
            let window = pr.window();
            let ps = [0.2, 0.45, 0.7, 0.95];
            let mut rng = TrialRng::new(pr.seed, trial);
            let init = LevelConfig::full_up_to(&window, 0, 0, BoundaryMode::FullLeft);
            let mut configs = vec![init; ps.len()];
            for level in 0..6 {
                let uniforms = UniformLayer::sample(&window, level, &mut rng);
                configs = coupled_step_each(&configs, &uniforms, &ps).unwrap();
                for pair in configs.windows(2) {
                    prop_assert!(bits::is_subset(pair[0].words(), pair[1].words()));
                }
            }
        }
    }

    #[test]
    fn coupled_step_matches_plain_step_at_equal_p() {
        let pr = params(0.61, 5, 6);
        let window = pr.window();
        let probs = pr.probabilities();
        let mut rng_a = TrialRng::new(pr.seed, 8);
        let mut rng_b = TrialRng::new(pr.seed, 8);
        let mut plain = LevelConfig::full_up_to(&window, 0, 0, BoundaryMode::FullLeft);
        let mut coupled = plain.clone();
        for level in 0..5 {
            let layer = BondLayer::sample(&window, level, &mut rng_a, &probs);
            plain = step_forward(&plain, &layer).unwrap();
            let uniforms = UniformLayer::sample(&window, level, &mut rng_b);
            coupled = coupled_step(&coupled, &uniforms, &[pr.p]).unwrap().pop().unwrap();
            assert_eq!(plain, coupled);
        }
    }

    #[test]
    fn unsorted_coupled_probabilities_rejected() {
        let pr = params(0.5, 2, 4);
        let window = pr.window();
        let mut rng = TrialRng::new(0, 0);
        let uniforms = UniformLayer::sample(&window, 0, &mut rng);
        let cfg = LevelConfig::empty(&window, 0, BoundaryMode::Free);
        assert!(coupled_step(&cfg, &uniforms, &[0.5, 0.3]).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SimParams::new(-0.1, 10, 8, 0).is_err());
        assert!(SimParams::new(1.5, 10, 8, 0).is_err());
        assert!(SimParams::new(0.5, 0, 8, 0).is_err());
        assert!(SimParams::new(0.5, 10, 1, 0).is_err());
    }

    #[test]
    fn mismatched_step_inputs_rejected() {
        let pr = params(0.5, 3, 4);
        let window = pr.window();
        let cfg = LevelConfig::empty(&window, 1, BoundaryMode::Free);
        let layer = BondLayer::closed(&window, 0);
        assert!(matches!(
            step_forward(&cfg, &layer),
            Err(Error::LevelMismatch { config: 1, layer: 0 })
        ));
    }
}
