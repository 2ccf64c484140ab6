//! Procedurally generated closed-circuit racing with static obstacles.
//!
//! The car lives in curvilinear track coordinates: progress along the
//! centerline measured in tiles, lateral offset from the centerline (road
//! half-width normalized to 1) and heading error relative to the road.
//! Tracks are parameterized by the turn rate `kappa` and the per-tile
//! obstacle probability `p`.
//!
//! Rewards per step: `-0.1`, plus `1000 / N_t` for each tile entered for the
//! first time, minus `50` per obstacle collision. Reaching the outer lateral
//! limit ends the episode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::EnvParams;
use crate::error::{Error, Result};

pub const TIME_PENALTY: f64 = 0.1;
pub const COLLISION_PENALTY: f64 = 50.0;
pub const LAP_REWARD: f64 = 1000.0;

/// Tiles of lookahead in the observation.
pub const LOOKAHEAD: usize = 5;
pub const OBS_DIM: usize = 3 + 2 * LOOKAHEAD;
pub const MIN_TILES: usize = 50;

// Kinematics, in tiles per step and radians per tile.
pub const MAX_SPEED: f64 = 0.8;
const ACCEL: f64 = 0.05;
const BRAKE: f64 = 0.1;
const DRAG: f64 = 0.01;
const GRASS_SPEED_FACTOR: f64 = 0.5;
/// Largest steering curvature at low speed.
pub const MAX_STEER: f64 = 0.5;
/// Lateral grip: steering curvature is limited to `GRIP / speed²`.
pub const GRIP: f64 = 0.16;
const MAX_HEADING: f64 = 1.2;
/// Lateral displacement per unit of forward travel and unit sine of heading.
const LATERAL_GAIN: f64 = 2.0;
const MAX_LATERAL: f64 = 2.0;
/// Peak turn curvature per unit of turn rate.
pub const TURN_AMPLITUDE: f64 = 0.5;
const OBSTACLE_HALF_WIDTH: f64 = 0.25;
const CAR_HALF_WIDTH: f64 = 0.15;
const COLLISION_SPEED_FACTOR: f64 = 0.5;
const HARMONICS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Nominal tile count; each track draws its own count within ±`tile_variation`.
    pub base_tiles: usize,
    pub tile_variation: f64,
    pub max_steps: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { base_tiles: 300, tile_variation: 0.15, max_steps: 2000 }
    }
}

impl EnvConfig {
    pub fn desk() -> Self {
        Self { base_tiles: 100, tile_variation: 0.15, max_steps: 400 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    /// Signed heading change of the centerline across the tile (radians).
    pub curvature: f64,
    pub has_obstacle: bool,
    /// Obstacle center in normalized lateral units.
    pub obstacle_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub params: EnvParams,
    pub seed: u64,
    pub tiles: Vec<Tile>,
}

impl Track {
    /// Generates a closed circuit. Deterministic in `(params, seed, config)`.
    ///
    /// The random draws do not depend on `params`, so two tracks with the same
    /// seed share their layout: curvature scales with `kappa`, and the obstacle
    /// set for a larger `p` is a superset of the one for a smaller `p`.
    pub fn generate(params: EnvParams, seed: u64, config: &EnvConfig) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread: f64 = rng.random_range(-1.0..=1.0) * config.tile_variation;
        let n = ((config.base_tiles as f64 * (1.0 + spread)).round() as usize).max(MIN_TILES);

        let harmonics: Vec<(f64, f64, f64)> = (0..HARMONICS)
            .map(|_| {
                let freq = rng.random_range(2..=7) as f64;
                let amp = rng.random_range(0.5..1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (freq, amp, phase)
            })
            .collect();
        let mut shape: Vec<f64> = (0..n)
            .map(|i| {
                harmonics
                    .iter()
                    .map(|(f, a, ph)| a * (std::f64::consts::TAU * f * i as f64 / n as f64 + ph).sin())
                    .sum()
            })
            .collect();
        let mean = shape.iter().sum::<f64>() / n as f64;
        shape.iter_mut().for_each(|s| *s -= mean);
        let peak = shape.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);

        let base = std::f64::consts::TAU / n as f64;
        let tiles = shape
            .iter()
            .map(|s| {
                let u: f64 = rng.random();
                let offset: f64 = rng.random_range(-1.0..=1.0);
                Tile {
                    curvature: base + params.kappa * TURN_AMPLITUDE * s / peak,
                    has_obstacle: u < params.p,
                    obstacle_offset: offset,
                }
            })
            .collect();
        Ok(Self { params, seed, tiles })
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn obstacle_count(&self) -> usize {
        self.tiles.iter().filter(|t| t.has_obstacle).count()
    }

    pub fn mean_abs_curvature(&self) -> f64 {
        self.tiles.iter().map(|t| t.curvature.abs()).sum::<f64>() / self.n_tiles() as f64
    }

    pub fn total_curvature(&self) -> f64 {
        self.tiles.iter().map(|t| t.curvature).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steering: f64,
    pub acceleration: f64,
    pub brake: f64,
}

impl Action {
    pub fn new(steering: f64, acceleration: f64, brake: f64) -> Self {
        Self { steering, acceleration, brake }
    }

    /// Clamps each component into its valid interval; NaN maps to 0.
    pub fn clamped(self) -> Self {
        let c = |v: f64, lo: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(lo, hi) };
        Self {
            steering: c(self.steering, -1.0, 1.0),
            acceleration: c(self.acceleration, 0.0, 1.0),
            brake: c(self.brake, 0.0, 1.0),
        }
    }
}

/// Fixed-length feature vector: lateral offset, heading error, speed, then a
/// curvature and an obstacle feature for each of the next [`LOOKAHEAD`] tiles.
///
/// The obstacle feature is a signed repulsion: zero without a live obstacle
/// or when the obstacle is laterally clear by a full road half-width,
/// otherwise `±(1 - |d - o|)` with the sign pointing away from the obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    /// Continuous progress along the centerline, in tiles.
    pub position: f64,
    pub lateral_offset: f64,
    pub speed: f64,
    pub heading_error: f64,
    pub visited: Vec<bool>,
    pub tiles_visited: usize,
    consumed: Vec<bool>,
    pub step_count: u32,
    pub on_grass: bool,
    /// Reached the outer lateral limit, which ends the episode.
    pub off_course: bool,
    pub terminated: bool,
    pub collisions: u32,
    pub grass_steps: u32,
    pub max_steps: u32,
}

impl EpisodeState {
    pub fn new(track: &Track, max_steps: u32) -> Self {
        let n = track.n_tiles();
        Self {
            position: 0.0,
            lateral_offset: 0.0,
            speed: 0.0,
            heading_error: 0.0,
            visited: vec![false; n],
            tiles_visited: 0,
            consumed: vec![false; n],
            step_count: 0,
            on_grass: false,
            off_course: false,
            terminated: false,
            collisions: 0,
            grass_steps: 0,
            max_steps,
        }
    }

    pub fn tile_index(&self) -> usize {
        (self.position.floor() as usize) % self.visited.len()
    }

    pub fn lap_completed(&self) -> bool {
        self.tiles_visited == self.visited.len()
    }

    /// Ended by the step limit rather than by finishing or leaving the course.
    pub fn truncated(&self) -> bool {
        self.terminated && !self.lap_completed() && !self.off_course
    }

    pub fn observe(&self, track: &Track) -> Observation {
        let mut f = [0.0; OBS_DIM];
        f[0] = self.lateral_offset;
        f[1] = self.heading_error;
        f[2] = self.speed / MAX_SPEED;
        let n = track.n_tiles();
        let here = self.position.floor() as usize;
        for j in 0..LOOKAHEAD {
            let idx = here + 1 + j;
            if idx >= n {
                break;
            }
            let tile = &track.tiles[idx];
            f[3 + 2 * j] = tile.curvature / TURN_AMPLITUDE;
            if tile.has_obstacle && !self.consumed[idx] {
                let rel = self.lateral_offset - tile.obstacle_offset;
                if rel.abs() < 1.0 {
                    let sign = if rel >= 0.0 { 1.0 } else { -1.0 };
                    f[4 + 2 * j] = sign * (1.0 - rel.abs());
                }
            }
        }
        Observation(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEvents {
    pub new_tiles: u32,
    pub collisions: u32,
    pub collided: bool,
    pub on_grass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub events: StepEvents,
    pub done: bool,
}

/// Reward of one step with the given event counts.
pub fn step_reward(n_tiles: usize, new_tiles: u32, collisions: u32) -> f64 {
    -TIME_PENALTY + LAP_REWARD * new_tiles as f64 / n_tiles as f64 - COLLISION_PENALTY * collisions as f64
}

/// Episode return implied by the event totals.
pub fn ledger_reward(n_tiles: usize, steps: u32, tiles: usize, collisions: u32) -> f64 {
    LAP_REWARD * tiles as f64 / n_tiles as f64 - TIME_PENALTY * steps as f64 - COLLISION_PENALTY * collisions as f64
}

/// Advances the episode by one step in place.
pub fn step(track: &Track, state: &mut EpisodeState, action: Action) -> Result<StepOutcome> {
    if state.terminated {
        return Err(Error::InvalidState("episode already terminated".into()));
    }
    let a = action.clamped();
    let n = track.n_tiles();

    let cap = if state.on_grass { GRASS_SPEED_FACTOR * MAX_SPEED } else { MAX_SPEED };
    let v = (state.speed + ACCEL * a.acceleration - BRAKE * a.brake - DRAG * state.speed).clamp(0.0, cap);

    let grip_limit = if v > 0.0 { (GRIP / (v * v)).min(MAX_STEER) } else { MAX_STEER };
    let turn = (a.steering * MAX_STEER).clamp(-grip_limit, grip_limit);
    let road = track.tiles[state.tile_index()].curvature;
    let heading = (state.heading_error + (turn - road) * v).clamp(-MAX_HEADING, MAX_HEADING);
    let raw_lateral = state.lateral_offset + LATERAL_GAIN * v * heading.sin();
    let lateral = raw_lateral.clamp(-MAX_LATERAL, MAX_LATERAL);
    let forward = v * heading.cos();

    let old_floor = state.position.floor() as usize;
    let new_position = state.position + forward;
    let new_floor = new_position.floor() as usize;

    let mut events = StepEvents::default();
    let mut speed = v;
    for boundary in (old_floor + 1)..=new_floor {
        let idx = boundary % n;
        if !state.visited[idx] {
            state.visited[idx] = true;
            state.tiles_visited += 1;
            events.new_tiles += 1;
        }
        let tile = &track.tiles[idx];
        if tile.has_obstacle
            && !state.consumed[idx]
            && (lateral - tile.obstacle_offset).abs() < OBSTACLE_HALF_WIDTH + CAR_HALF_WIDTH
        {
            state.consumed[idx] = true;
            events.collisions += 1;
            speed *= COLLISION_SPEED_FACTOR;
        }
    }

    state.position = new_position;
    state.speed = speed;
    state.heading_error = heading;
    state.lateral_offset = lateral;
    state.on_grass = lateral.abs() > 1.0;
    state.off_course = raw_lateral.abs() >= MAX_LATERAL;
    state.step_count += 1;
    state.collisions += events.collisions;
    if state.on_grass {
        state.grass_steps += 1;
    }
    events.collided = events.collisions > 0;
    events.on_grass = state.on_grass;
    state.terminated = state.lap_completed() || state.off_course || state.step_count >= state.max_steps;

    Ok(StepOutcome {
        reward: step_reward(n, events.new_tiles, events.collisions),
        events,
        done: state.terminated,
    })
}

/// Maps observations to actions. `rng` is the episode's private stream.
pub trait Policy: Sync {
    fn act(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Action;
}

impl<F> Policy for F
where
    F: Fn(&Observation) -> Action + Sync,
{
    fn act(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Action {
        self(obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Return from the event ledger.
    pub total_reward: f64,
    /// Return accumulated step by step.
    pub summed_reward: f64,
    pub n_tiles: usize,
    pub tiles_visited: usize,
    pub collisions: u32,
    pub obstacle_count: usize,
    pub steps: u32,
    pub grass_steps: u32,
    pub grass_fraction: f64,
    pub lap_completed: bool,
    pub off_course: bool,
}

impl EpisodeMetrics {
    /// Collisions per generated obstacle (0 on obstacle-free tracks).
    pub fn collision_obstacle_ratio(&self) -> f64 {
        if self.obstacle_count == 0 {
            0.0
        } else {
            self.collisions as f64 / self.obstacle_count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u32,
    pub reward: f64,
    pub tile_index: usize,
    pub lateral_offset: f64,
    pub new_tiles: u32,
    pub collided: bool,
    pub on_grass: bool,
}

fn run(
    track: &Track,
    policy: &dyn Policy,
    seed: u64,
    max_steps: u32,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<EpisodeMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = EpisodeState::new(track, max_steps.max(1));
    let mut summed = 0.0;
    while !state.terminated {
        let obs = state.observe(track);
        let action = policy.act(&obs, &mut rng);
        let out = step(track, &mut state, action)?;
        summed += out.reward;
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow {
                step: state.step_count,
                reward: out.reward,
                tile_index: state.tile_index(),
                lateral_offset: state.lateral_offset,
                new_tiles: out.events.new_tiles,
                collided: out.events.collided,
                on_grass: out.events.on_grass,
            });
        }
    }
    Ok(EpisodeMetrics {
        total_reward: ledger_reward(track.n_tiles(), state.step_count, state.tiles_visited, state.collisions),
        summed_reward: summed,
        n_tiles: track.n_tiles(),
        tiles_visited: state.tiles_visited,
        collisions: state.collisions,
        obstacle_count: track.obstacle_count(),
        steps: state.step_count,
        grass_steps: state.grass_steps,
        grass_fraction: state.grass_steps as f64 / state.step_count as f64,
        lap_completed: state.lap_completed(),
        off_course: state.off_course,
    })
}

/// Plays one episode to termination.
pub fn run_episode(track: &Track, policy: &dyn Policy, seed: u64, max_steps: u32) -> Result<EpisodeMetrics> {
    run(track, policy, seed, max_steps, None)
}

/// Like [`run_episode`] but also records a per-step trace.
pub fn run_episode_traced(
    track: &Track,
    policy: &dyn Policy,
    seed: u64,
    max_steps: u32,
) -> Result<(EpisodeMetrics, Vec<TraceRow>)> {
    let mut rows = Vec::new();
    let m = run(track, policy, seed, max_steps, Some(&mut rows))?;
    Ok((m, rows))
}

pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Scripted controller used as a competent baseline: tracks the centerline,
/// slows for sharp upcoming turns and sidesteps obstacles.
pub fn reference_controller(obs: &Observation) -> Action {
    let f = &obs.0;
    let lateral = f[0];
    let heading = f[1];
    let next_curv = f[3] * TURN_AMPLITUDE;
    let peak_curv = (0..LOOKAHEAD).map(|j| (f[3 + 2 * j] * TURN_AMPLITUDE).abs()).fold(0.0, f64::max);

    let mut target = 0.0;
    for j in 0..3 {
        let rep = f[4 + 2 * j];
        if rep != 0.0 {
            target = lateral + rep.signum() * (0.45 - (1.0 - rep.abs())).max(0.0) * 1.5;
            break;
        }
    }
    let target = target.clamp(-0.85, 0.85);
    let steer = (next_curv + 0.6 * (target - lateral) - 1.2 * heading) / MAX_STEER;

    let safe_speed = if peak_curv > 0.0 { (GRIP / peak_curv).sqrt() } else { MAX_SPEED };
    let speed = f[2] * MAX_SPEED;
    let (acc, brk) = if speed > safe_speed * 0.95 { (0.0, 1.0) } else { (1.0, 0.0) };
    Action::new(steer, acc, brk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kappa: f64, p: f64) -> EnvParams {
        EnvParams::new(kappa, p).unwrap()
    }

    #[test]
    fn obstacle_extremes() {
        let cfg = EnvConfig::default();
        for seed in 0..5 {
            assert_eq!(Track::generate(params(0.5, 0.0), seed, &cfg).unwrap().obstacle_count(), 0);
            let t = Track::generate(params(0.5, 1.0), seed, &cfg).unwrap();
            assert_eq!(t.obstacle_count(), t.n_tiles());
        }
    }

    #[test]
    fn track_closes() {
        for seed in 0..20 {
            let t = Track::generate(params(0.71, 0.13), seed, &EnvConfig::desk()).unwrap();
            assert!((t.total_curvature() - std::f64::consts::TAU).abs() < 1e-6);
            assert!(t.n_tiles() >= MIN_TILES);
        }
    }

    #[test]
    fn higher_turn_rate_gives_sharper_track() {
        for seed in 0..20 {
            let lo = Track::generate(params(0.31, 0.05), seed, &EnvConfig::default()).unwrap();
            let hi = Track::generate(params(0.71, 0.05), seed, &EnvConfig::default()).unwrap();
            assert!(hi.mean_abs_curvature() > lo.mean_abs_curvature());
        }
    }

    #[test]
    fn idle_step_costs_time_only() {
        let t = Track::generate(params(0.31, 0.05), 1, &EnvConfig::default()).unwrap();
        let mut s = EpisodeState::new(&t, 100);
        let out = step(&t, &mut s, Action::default()).unwrap();
        assert_eq!(out.reward, -0.1);
        assert_eq!(out.events, StepEvents::default());
    }

    #[test]
    fn crossing_into_obstacle() {
        let mut t = Track::generate(params(0.31, 0.0), 1, &EnvConfig::default()).unwrap();
        t.tiles[1] = Tile { curvature: 0.0, has_obstacle: true, obstacle_offset: 0.0 };
        t.tiles[0].curvature = 0.0;
        let mut s = EpisodeState::new(&t, 100);
        s.position = 0.9;
        s.speed = 0.5;
        let out = step(&t, &mut s, Action::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(out.events.new_tiles, 1);
        assert!(out.events.collided);
        let n = t.n_tiles() as f64;
        assert_eq!(out.reward, -0.1 + 1000.0 / n - 50.0);
    }

    #[test]
    fn stepping_terminated_episode_fails() {
        let t = Track::generate(params(0.31, 0.05), 1, &EnvConfig::default()).unwrap();
        let mut s = EpisodeState::new(&t, 1);
        step(&t, &mut s, Action::default()).unwrap();
        assert!(s.terminated);
        assert!(matches!(step(&t, &mut s, Action::default()), Err(Error::InvalidState(_))));
    }

    #[test]
    fn inert_policy() {
        let t = Track::generate(params(0.51, 0.09), 3, &EnvConfig::default()).unwrap();
        let idle = |_: &Observation| Action::new(0.0, 0.0, 0.0);
        let m = run_episode(&t, &idle, 0, 300).unwrap();
        assert_eq!(m.steps, 300);
        assert!(m.tiles_visited <= LOOKAHEAD);
        assert_eq!(m.total_reward, -0.1 * 300.0);
        assert_eq!(m.collisions, 0);
    }

    #[test]
    fn observation_is_zero_padded_at_track_end() {
        let t = Track::generate(params(0.31, 1.0), 2, &EnvConfig::default()).unwrap();
        let mut s = EpisodeState::new(&t, 100);
        s.position = (t.n_tiles() - 2) as f64 + 0.5;
        let o = s.observe(&t);
        assert_ne!(o.0[3], 0.0);
        assert!(o.0[5..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reference_controller_completes_easy_laps() {
        let cfg = EnvConfig::default();
        let mut laps = 0;
        for seed in 0..10 {
            let t = Track::generate(params(0.31, 0.0), seed, &cfg).unwrap();
            let m = run_episode(&t, &reference_controller, seed, cfg.max_steps).unwrap();
            if m.lap_completed {
                laps += 1;
                assert_eq!(m.total_reward, 1000.0 - 0.1 * m.steps as f64);
            }
        }
        assert!(laps >= 8, "only {laps} laps");
    }

    #[test]
    fn track_json_round_trip() {
        let t = Track::generate(params(0.41, 0.07), 9, &EnvConfig::desk()).unwrap();
        assert_eq!(Track::from_json(&t.to_json().unwrap()).unwrap(), t);
    }
}
