//! Procedural gridworld: rooms joined by corridors, categorized objects,
//! panoramic observations, a shortest-path oracle, episode tiers and the
//! Success / SPL harness.
//!
//! Cells are 0.25 m, the length of one forward step. Turns rotate by 90°.
//! Observations depend only on the cell, not the heading.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, OracleEncoder};
use crate::error::{Result, TsgmError};
use crate::builder::{BuilderState, GraphDelta};
use crate::graph::{Detection, TsgmGraph};
use crate::policy::Action;

pub const CELL_SIZE: f64 = 0.25;
pub const SUCCESS_RADIUS: f64 = 1.0;
const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    pub fn left(self) -> Heading {
        Heading::from_index(self as usize + 3)
    }

    pub fn right(self) -> Heading {
        Heading::from_index(self as usize + 1)
    }

    pub fn back(self) -> Heading {
        Heading::from_index(self as usize + 2)
    }

    /// Cell offset of one step; north is `y - 1`.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
}

impl Pose {
    pub fn cell(&self) -> (usize, usize) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub rooms: usize,
    pub objects: usize,
    pub categories: usize,
    /// Chebyshev detection radius in cells.
    pub detect_radius: usize,
    /// Standard deviation of the additive detection-score noise.
    pub score_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 24,
            height: 24,
            rooms: 6,
            objects: 12,
            categories: 8,
            detect_radius: 2,
            score_noise: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(TsgmError::validation("world.width", "world must be at least 8 x 8"));
        }
        if self.rooms == 0 {
            return Err(TsgmError::validation("world.rooms", "must be >= 1"));
        }
        if self.categories == 0 {
            return Err(TsgmError::validation("world.categories", "must be >= 1"));
        }
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return Err(TsgmError::validation("world.score_noise", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    pub category: usize,
    /// Index of the object's anchor in the encoder.
    pub identity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Room {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Room {
    fn center(&self) -> (usize, usize) {
        ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)
    }

    fn overlaps_with_margin(&self, o: &Room) -> bool {
        self.x0 <= o.x1 + 1 && o.x0 <= self.x1 + 1 && self.y0 <= o.y1 + 1 && o.y0 <= self.y1 + 1
    }
}

/// An immutable generated world with its oracle encoder.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    seed: u64,
    free: Vec<bool>,
    objects: Vec<Placement>,
    encoder: OracleEncoder,
}

impl World {
    /// Rebuilds a world from stored parts; the encoder anchors are derived from `seed`.
    pub fn from_parts(config: WorldConfig, encoder: &EncoderConfig, seed: u64, free: Vec<bool>, objects: Vec<Placement>) -> Result<Self> {
        config.validate()?;
        if free.len() != config.width * config.height {
            return Err(TsgmError::validation("world.grid", "grid size does not match width x height"));
        }
        for o in &objects {
            if o.x >= config.width || o.y >= config.height || !free[o.y * config.width + o.x] {
                return Err(TsgmError::validation("world.objects", format!("object at ({}, {}) is not on a free cell", o.x, o.y)));
            }
            if o.category >= config.categories {
                return Err(TsgmError::validation("world.objects", format!("category {} out of range", o.category)));
            }
            if o.identity >= objects.len() {
                return Err(TsgmError::validation("world.objects", format!("identity {} out of range", o.identity)));
            }
        }
        let encoder = OracleEncoder::new(encoder, config.width, config.height, objects.len(), seed)?;
        Ok(World {
            config,
            seed,
            free,
            objects,
            encoder,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn objects(&self) -> &[Placement] {
        &self.objects
    }

    pub fn encoder(&self) -> &OracleEncoder {
        &self.encoder
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.free
    }

    pub fn is_free(&self, x: usize, y: usize) -> bool {
        x < self.config.width && y < self.config.height && self.free[y * self.config.width + x]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.free.len())
            .filter(|&i| self.free[i])
            .map(|i| (i % self.config.width, i / self.config.width))
            .collect()
    }

    fn index(&self, x: usize, y: usize) -> usize {
        y * self.config.width + x
    }

    fn neighbor(&self, x: usize, y: usize, h: Heading) -> Option<(usize, usize)> {
        let (dx, dy) = h.delta();
        let nx = x.checked_add_signed(dx)?;
        let ny = y.checked_add_signed(dy)?;
        self.is_free(nx, ny).then_some((nx, ny))
    }

    /// BFS step counts from `target` to every cell; `u32::MAX` marks unreachable cells.
    pub fn distance_field(&self, target: (usize, usize)) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.free.len()];
        if !self.is_free(target.0, target.1) {
            return dist;
        }
        let mut queue = VecDeque::from([target]);
        dist[self.index(target.0, target.1)] = 0;
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[self.index(x, y)];
            for h in Heading::ALL {
                if let Some((nx, ny)) = self.neighbor(x, y, h) {
                    let ni = self.index(nx, ny);
                    if dist[ni] == UNREACHABLE {
                        dist[ni] = d + 1;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
        dist
    }

    /// Grid cells on the segment between two cells, endpoints included.
    fn line_of_sight(&self, from: (usize, usize), to: (usize, usize)) -> bool {
        let (mut x, mut y) = (from.0 as isize, from.1 as isize);
        let (x1, y1) = (to.0 as isize, to.1 as isize);
        let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
        let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
        let mut err = dx + dy;
        loop {
            if !self.is_free(x as usize, y as usize) {
                return false;
            }
            if x == x1 && y == y1 {
                return true;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Generates a world: non-overlapping rooms chained by L-shaped corridors,
/// plus one extra corridor closing a loop when there are three or more rooms.
pub fn generate_world(seed: u64, config: &WorldConfig, encoder: &EncoderConfig) -> Result<World> {
    config.validate()?;
    encoder.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let max_side = |extent: usize| (extent / 3).max(3).min(extent - 2);

    let mut rooms: Vec<Room> = Vec::new();
    for _ in 0..config.rooms * 200 {
        if rooms.len() == config.rooms {
            break;
        }
        let rw = rng.random_range(3..=max_side(w));
        let rh = rng.random_range(3..=max_side(h));
        let x0 = rng.random_range(1..=w - 1 - rw);
        let y0 = rng.random_range(1..=h - 1 - rh);
        let room = Room {
            x0,
            y0,
            x1: x0 + rw - 1,
            y1: y0 + rh - 1,
        };
        if rooms.iter().all(|r| !r.overlaps_with_margin(&room)) {
            rooms.push(room);
        }
    }
    if rooms.len() < config.rooms {
        return Err(TsgmError::Generation(format!(
            "could not place {} rooms in a {w} x {h} world (placed {})",
            config.rooms,
            rooms.len()
        )));
    }

    let mut free = vec![false; w * h];
    for r in &rooms {
        for y in r.y0..=r.y1 {
            for x in r.x0..=r.x1 {
                free[y * w + x] = true;
            }
        }
    }
    let mut carve = |a: (usize, usize), b: (usize, usize), horizontal_first: bool| {
        let corner = if horizontal_first { (b.0, a.1) } else { (a.0, b.1) };
        for (p, q) in [(a, corner), (corner, b)] {
            for y in p.1.min(q.1)..=p.1.max(q.1) {
                for x in p.0.min(q.0)..=p.0.max(q.0) {
                    free[y * w + x] = true;
                }
            }
        }
    };
    for pair in rooms.windows(2) {
        carve(pair[0].center(), pair[1].center(), rng.random_bool(0.5));
    }
    if rooms.len() >= 3 {
        carve(rooms[rooms.len() - 1].center(), rooms[0].center(), rng.random_bool(0.5));
    }

    let mut objects = Vec::with_capacity(config.objects);
    for identity in 0..config.objects {
        let room = rooms[identity % rooms.len()];
        let mut cells: Vec<(usize, usize)> = (room.y0..=room.y1)
            .flat_map(|y| (room.x0..=room.x1).map(move |x| (x, y)))
            .filter(|c| objects.iter().all(|o: &Placement| (o.x, o.y) != *c))
            .collect();
        if cells.is_empty() {
            cells = (room.y0..=room.y1).flat_map(|y| (room.x0..=room.x1).map(move |x| (x, y))).collect();
        }
        let (x, y) = cells[rng.random_range(0..cells.len())];
        objects.push(Placement {
            x,
            y,
            category: rng.random_range(0..config.categories),
            identity,
        });
    }

    World::from_parts(config.clone(), encoder, seed, free, objects)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Vec<f64>,
    pub detections: Vec<Detection>,
    /// Identities of the detected objects, aligned with `detections`.
    pub identities: Vec<usize>,
}

/// Panoramic observation at `pose`.
pub fn observe(world: &World, pose: &Pose, rng: &mut impl Rng) -> Result<Observation> {
    if !world.is_free(pose.x, pose.y) {
        return Err(TsgmError::invalid(format!("pose ({}, {}) is not on a free cell", pose.x, pose.y)));
    }
    let enc = world.encoder();
    let image = enc.encode_image(enc.cell_index(pose.x, pose.y), rng)?;
    let radius = world.config.detect_radius;
    let noise = Normal::new(0.0, world.config.score_noise).map_err(|e| TsgmError::invalid(e.to_string()))?;
    let mut detections = Vec::new();
    let mut identities = Vec::new();
    for o in world.objects() {
        let (dx, dy) = (o.x.abs_diff(pose.x), o.y.abs_diff(pose.y));
        if dx.max(dy) > radius || !world.line_of_sight(pose.cell(), (o.x, o.y)) {
            continue;
        }
        let dist = CELL_SIZE * ((dx * dx + dy * dy) as f64).sqrt();
        let score = (1.0 / (1.0 + dist) + noise.sample(rng)).clamp(0.0, 1.0);
        detections.push(Detection {
            feature: enc.encode_object(o.identity, rng)?,
            category: o.category,
            score,
        });
        identities.push(o.identity);
    }
    Ok(Observation {
        image,
        detections,
        identities,
    })
}

/// Applies one action. `Stop` leaves the pose unchanged; the caller ends the episode.
pub fn step_env(world: &World, pose: &Pose, action: Action) -> Pose {
    match action {
        Action::Forward => match world.neighbor(pose.x, pose.y, pose.heading) {
            Some((x, y)) => Pose { x, y, ..*pose },
            None => *pose,
        },
        Action::TurnLeft => Pose {
            heading: pose.heading.left(),
            ..*pose
        },
        Action::TurnRight => Pose {
            heading: pose.heading.right(),
            ..*pose
        },
        Action::Stop => *pose,
    }
}

/// Shortest-path length in meters; `f64::INFINITY` when unreachable.
pub fn geodesic_distance(world: &World, a: (usize, usize), b: (usize, usize)) -> f64 {
    if !world.is_free(a.0, a.1) {
        return f64::INFINITY;
    }
    field_distance(world, &world.distance_field(b), a)
}

fn field_distance(world: &World, field: &[u32], cell: (usize, usize)) -> f64 {
    match field[world.index(cell.0, cell.1)] {
        UNREACHABLE => f64::INFINITY,
        d => d as f64 * CELL_SIZE,
    }
}

/// Oracle action from a precomputed distance field of the goal.
pub fn oracle_action_with_field(world: &World, field: &[u32], pose: &Pose) -> Result<Action> {
    oracle_action_within(world, field, pose, SUCCESS_RADIUS)
}

/// Oracle action that stops once the geodesic distance is at most `stop_radius` meters.
pub fn oracle_action_within(world: &World, field: &[u32], pose: &Pose, stop_radius: f64) -> Result<Action> {
    let here = field[world.index(pose.x, pose.y)];
    if here == UNREACHABLE {
        return Err(TsgmError::Planning(format!("goal unreachable from ({}, {})", pose.x, pose.y)));
    }
    if here as f64 * CELL_SIZE <= stop_radius {
        return Ok(Action::Stop);
    }
    let h = pose.heading;
    for (dir, action) in [
        (h, Action::Forward),
        (h.left(), Action::TurnLeft),
        (h.right(), Action::TurnRight),
        (h.back(), Action::TurnLeft),
    ] {
        if let Some((nx, ny)) = world.neighbor(pose.x, pose.y, dir) {
            if field[world.index(nx, ny)] + 1 == here {
                return Ok(action);
            }
        }
    }
    Err(TsgmError::Planning("no descending neighbor in distance field".into()))
}

/// Stop within 1 m; otherwise turn towards (or walk to) the next cell of a shortest path.
pub fn oracle_action(world: &World, pose: &Pose, goal: (usize, usize)) -> Result<Action> {
    if !world.is_free(goal.0, goal.1) {
        return Err(TsgmError::Planning(format!("goal ({}, {}) is not on a free cell", goal.0, goal.1)));
    }
    oracle_action_with_field(world, &world.distance_field(goal), pose)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    /// Half-open meter range, except that hard includes 10 m.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Tier::Easy => (1.5, 3.0),
            Tier::Medium => (3.0, 5.0),
            Tier::Hard => (5.0, 10.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = TsgmError;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TsgmError::invalid(format!("unknown tier `{s}` (easy|medium|hard)")))
    }
}

/// Tier of a start-goal geodesic length; lengths outside `[1.5, 10]` are rejected.
pub fn classify_difficulty(geodesic_m: f64) -> Result<Tier> {
    match geodesic_m {
        g if (1.5..3.0).contains(&g) => Ok(Tier::Easy),
        g if (3.0..5.0).contains(&g) => Ok(Tier::Medium),
        g if (5.0..=10.0).contains(&g) => Ok(Tier::Hard),
        g => Err(TsgmError::invalid(format!("geodesic length {g} m is outside every tier"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    /// Index of the world inside its [`Suite`].
    pub world: usize,
    pub start: Pose,
    pub goal: Pose,
    /// Goal image feature given to the agent.
    pub goal_feature: Vec<f64>,
    pub geodesic: f64,
    pub tier: Tier,
}

/// Samples `count` episodes of `tier` in one world.
pub fn sample_episodes(world: &World, world_index: usize, tier: Tier, count: usize, first_id: usize, rng: &mut impl Rng) -> Result<Vec<Episode>> {
    let cells = world.free_cells();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 200 * (count + 1) {
            return Err(TsgmError::Generation(format!(
                "world {} has too few {tier} start-goal pairs",
                world.seed()
            )));
        }
        let goal = cells[rng.random_range(0..cells.len())];
        let field = world.distance_field(goal);
        let mut starts: Vec<_> = cells
            .iter()
            .copied()
            .filter(|&c| classify_difficulty(field_distance(world, &field, c)).ok() == Some(tier))
            .collect();
        if starts.is_empty() {
            continue;
        }
        starts.shuffle(rng);
        let start = starts[0];
        let heading = |rng: &mut dyn rand::RngCore| Heading::from_index(rng.random_range(0..4));
        let enc = world.encoder();
        out.push(Episode {
            id: first_id + out.len(),
            world: world_index,
            start: Pose {
                x: start.0,
                y: start.1,
                heading: heading(rng),
            },
            goal: Pose {
                x: goal.0,
                y: goal.1,
                heading: heading(rng),
            },
            goal_feature: enc.encode_image(enc.cell_index(goal.0, goal.1), rng)?,
            geodesic: field_distance(world, &field, start),
            tier,
        });
    }
    Ok(out)
}

/// Worlds plus episodes that reference them by index.
#[derive(Debug, Clone)]
pub struct Suite {
    pub worlds: Vec<World>,
    pub episodes: Vec<Episode>,
}

impl Suite {
    /// `per_tier` episodes of each requested tier, spread round-robin over `num_worlds` worlds.
    pub fn generate(
        seed: u64,
        world_config: &WorldConfig,
        encoder: &EncoderConfig,
        num_worlds: usize,
        tiers: &[Tier],
        per_tier: usize,
    ) -> Result<Suite> {
        if num_worlds == 0 {
            return Err(TsgmError::validation("suite.worlds", "must be >= 1"));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let worlds = (0..num_worlds)
            .map(|_| generate_world(seeds.random(), world_config, encoder))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.random());
        let mut episodes = Vec::new();
        for &tier in tiers {
            for k in 0..per_tier {
                let wi = k % num_worlds;
                let ep = sample_episodes(&worlds[wi], wi, tier, 1, episodes.len(), &mut rng)?;
                episodes.extend(ep);
            }
        }
        Ok(Suite { worlds, episodes })
    }

    /// Training and validation suites over the same worlds. Validation
    /// episodes are drawn first; training episodes never repeat a validation
    /// (start cell, goal cell) pair, and ids are unique across both suites.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_split(
        seed: u64,
        world_config: &WorldConfig,
        encoder: &EncoderConfig,
        num_worlds: usize,
        tiers: &[Tier],
        train_per_tier: usize,
        val_per_tier: usize,
    ) -> Result<(Suite, Suite)> {
        let val = Suite::generate(seed, world_config, encoder, num_worlds, tiers, val_per_tier)?;
        let held_out: std::collections::HashSet<_> = val.episodes.iter().map(|e| (e.world, e.start.cell(), e.goal.cell())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7121_5EED);
        let mut episodes: Vec<Episode> = Vec::new();
        for &tier in tiers {
            let mut k = 0;
            let mut attempts = 0;
            while k < train_per_tier {
                attempts += 1;
                if attempts > 100 * (train_per_tier + 1) {
                    return Err(TsgmError::Generation(format!("could not find {train_per_tier} fresh {tier} training episodes")));
                }
                let wi = k % num_worlds;
                let id = val.episodes.len() + episodes.len();
                let ep = sample_episodes(&val.worlds[wi], wi, tier, 1, id, &mut rng)?.remove(0);
                if !held_out.contains(&(ep.world, ep.start.cell(), ep.goal.cell())) {
                    episodes.push(ep);
                    k += 1;
                }
            }
        }
        let train = Suite {
            worlds: val.worlds.clone(),
            episodes,
        };
        Ok((train, val))
    }

    pub fn world_of(&self, episode: &Episode) -> Result<&World> {
        self.worlds
            .get(episode.world)
            .ok_or_else(|| TsgmError::invalid(format!("episode {} references missing world {}", episode.id, episode.world)))
    }

    pub fn filter_tier(&self, tier: Option<Tier>) -> Suite {
        Suite {
            worlds: self.worlds.clone(),
            episodes: self.episodes.iter().filter(|e| tier.is_none_or(|t| e.tier == t)).cloned().collect(),
        }
    }
}

/// Everything an agent may look at for one decision. Learned agents use only
/// `observation` and the episode's goal feature; the oracle also reads the pose.
pub struct StepContext<'a> {
    pub world: &'a World,
    pub episode: &'a Episode,
    pub pose: Pose,
    pub observation: &'a Observation,
    pub step: usize,
}

pub trait Agent {
    fn reset(&mut self, world: &World, episode: &Episode) -> Result<()>;
    fn act(&mut self, ctx: &StepContext<'_>) -> Result<Action>;
    /// Optional per-step diagnostics, drained after every `act`.
    fn take_step_log(&mut self) -> Option<serde_json::Value> {
        None
    }
}

/// Shortest-path follower with privileged access to the map.
#[derive(Debug, Clone, Default)]
pub struct OracleAgent {
    field: Vec<u32>,
}

impl Agent for OracleAgent {
    fn reset(&mut self, world: &World, episode: &Episode) -> Result<()> {
        self.field = world.distance_field(episode.goal.cell());
        Ok(())
    }

    fn act(&mut self, ctx: &StepContext<'_>) -> Result<Action> {
        oracle_action_with_field(ctx.world, &self.field, &ctx.pose)
    }
}

/// Uniform draw over the four actions, reseeded per episode.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        RandomAgent {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn reset(&mut self, _world: &World, episode: &Episode) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ episode_salt(episode.id));
        Ok(())
    }

    fn act(&mut self, _ctx: &StepContext<'_>) -> Result<Action> {
        Ok(Action::ALL[self.rng.random_range(0..4)])
    }
}

/// Uniform draw over the three motion actions; never stops.
pub fn random_walk(steps: usize, rng: &mut impl Rng) -> Vec<Action> {
    const MOVES: [Action; 3] = [Action::Forward, Action::TurnLeft, Action::TurnRight];
    (0..steps).map(|_| MOVES[rng.random_range(0..3)]).collect()
}

/// Runs the graph builder on the observation at `start` and after every
/// action. `Stop` actions are rejected: a stopped agent makes no further
/// observations.
pub fn build_graph_along(world: &World, start: Pose, actions: &[Action], obs_seed: u64) -> Result<(TsgmGraph, Vec<GraphDelta>)> {
    if actions.contains(&Action::Stop) {
        return Err(TsgmError::invalid("a graph-building trajectory cannot contain stop"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(obs_seed);
    let mut builder = BuilderState::new(world.encoder().config(), world.config().categories);
    let mut pose = start;
    let mut deltas = Vec::with_capacity(actions.len() + 1);
    let obs = observe(world, &pose, &mut rng)?;
    deltas.push(builder.step(&obs.image, &obs.detections)?);
    for &a in actions {
        pose = step_env(world, &pose, a);
        let obs = observe(world, &pose, &mut rng)?;
        deltas.push(builder.step(&obs.image, &obs.detections)?);
    }
    Ok((builder.graph().clone(), deltas))
}

pub(crate) fn episode_salt(id: usize) -> u64 {
    (id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Observation noise stream of one episode, shared by every agent evaluated on it.
pub fn observation_rng(seed: u64, episode: &Episode) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ episode_salt(episode.id) ^ 0x0B5E_0B5E)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: usize,
    pub tier: Tier,
    pub success: bool,
    pub stopped: bool,
    pub steps: usize,
    pub shortest: f64,
    pub traveled: f64,
    pub final_geodesic: f64,
    pub actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_logs: Vec<serde_json::Value>,
}

impl EpisodeRecord {
    pub fn spl(&self) -> f64 {
        spl_term(self.success, self.shortest, self.traveled)
    }
}

fn spl_term(success: bool, shortest: f64, traveled: f64) -> f64 {
    if !success {
        return 0.0;
    }
    let denom = shortest.max(traveled);
    if denom == 0.0 {
        1.0
    } else {
        shortest / denom
    }
}

/// Mean of `success · shortest / max(shortest, traveled)`.
pub fn spl(successes: &[bool], shortest: &[f64], traveled: &[f64]) -> Result<f64> {
    if successes.len() != shortest.len() || shortest.len() != traveled.len() {
        return Err(TsgmError::invalid("spl inputs have different lengths"));
    }
    if successes.is_empty() {
        return Err(TsgmError::invalid("spl of an empty episode set"));
    }
    if traveled.iter().chain(shortest).any(|&v| v < 0.0 || v.is_nan()) {
        return Err(TsgmError::invalid("spl lengths must be >= 0"));
    }
    let total: f64 = successes
        .iter()
        .zip(shortest.iter().zip(traveled))
        .map(|(&s, (&l, &p))| spl_term(s, l, p))
        .sum();
    Ok(total / successes.len() as f64)
}

/// Runs one episode. Success requires an explicit stop within 1 m geodesic of the goal.
pub fn run_episode<A: Agent + ?Sized>(
    agent: &mut A,
    world: &World,
    episode: &Episode,
    max_steps: usize,
    obs_seed: u64,
    keep_logs: bool,
) -> Result<EpisodeRecord> {
    agent.reset(world, episode)?;
    let goal_field = world.distance_field(episode.goal.cell());
    let mut rng = observation_rng(obs_seed, episode);
    let mut pose = episode.start;
    let mut traveled = 0.0;
    let mut actions = Vec::new();
    let mut step_logs = Vec::new();
    let mut stopped = false;
    for step in 0..max_steps {
        let observation = observe(world, &pose, &mut rng)?;
        let ctx = StepContext {
            world,
            episode,
            pose,
            observation: &observation,
            step,
        };
        let action = agent.act(&ctx)?;
        if let Some(log) = agent.take_step_log() {
            if keep_logs {
                step_logs.push(log);
            }
        }
        actions.push(action);
        if action == Action::Stop {
            stopped = true;
            break;
        }
        let next = step_env(world, &pose, action);
        if next.cell() != pose.cell() {
            traveled += CELL_SIZE;
        }
        pose = next;
    }
    let final_geodesic = field_distance(world, &goal_field, pose.cell());
    Ok(EpisodeRecord {
        id: episode.id,
        tier: episode.tier,
        success: stopped && final_geodesic <= SUCCESS_RADIUS,
        stopped,
        steps: actions.len(),
        shortest: episode.geodesic,
        traveled,
        final_geodesic,
        actions,
        step_logs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierMetrics {
    pub episodes: usize,
    pub success: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub success: f64,
    pub spl: f64,
    pub per_tier: BTreeMap<Tier, TierMetrics>,
}

impl Metrics {
    pub fn from_records(records: &[EpisodeRecord]) -> Result<Metrics> {
        let summarize = |rs: &[&EpisodeRecord]| -> Result<TierMetrics> {
            let succ: Vec<bool> = rs.iter().map(|r| r.success).collect();
            let short: Vec<f64> = rs.iter().map(|r| r.shortest).collect();
            let trav: Vec<f64> = rs.iter().map(|r| r.traveled).collect();
            Ok(TierMetrics {
                episodes: rs.len(),
                success: succ.iter().filter(|&&s| s).count() as f64 / rs.len() as f64,
                spl: spl(&succ, &short, &trav)?,
            })
        };
        if records.is_empty() {
            return Err(TsgmError::invalid("cannot compute metrics of an empty episode set"));
        }
        let all: Vec<&EpisodeRecord> = records.iter().collect();
        let overall = summarize(&all)?;
        let mut per_tier = BTreeMap::new();
        for tier in Tier::ALL {
            let rs: Vec<&EpisodeRecord> = records.iter().filter(|r| r.tier == tier).collect();
            if !rs.is_empty() {
                per_tier.insert(tier, summarize(&rs)?);
            }
        }
        Ok(Metrics {
            episodes: records.len(),
            success: overall.success,
            spl: overall.spl,
            per_tier,
        })
    }

    pub fn tier_success(&self, tier: Tier) -> Option<f64> {
        self.per_tier.get(&tier).map(|t| t.success)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub records: Vec<EpisodeRecord>,
}

/// Evaluates a cloneable agent on every episode of `suite`, one clone per
/// episode, in parallel on the current rayon pool. Results are independent of
/// the thread count because every episode owns its random streams.
pub fn evaluate<A: Agent + Clone + Send + Sync>(agent: &A, suite: &Suite, max_steps: usize, obs_seed: u64, keep_logs: bool) -> Result<EvalReport> {
    if suite.episodes.is_empty() {
        return Err(TsgmError::invalid("cannot evaluate an empty episode set"));
    }
    let records = suite
        .episodes
        .par_iter()
        .map(|ep| {
            let mut a = agent.clone();
            run_episode(&mut a, suite.world_of(ep)?, ep, max_steps, obs_seed, keep_logs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        metrics: Metrics::from_records(&records)?,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_world(rows: &[&str]) -> World {
        let h = rows.len();
        let w = rows[0].len();
        let free = rows.iter().flat_map(|r| r.chars().map(|c| c != '#')).collect();
        let cfg = WorldConfig {
            width: w,
            height: h,
            objects: 0,
            ..WorldConfig::default()
        };
        World::from_parts(cfg, &EncoderConfig::default(), 0, free, vec![]).unwrap()
    }

    fn open_8x8() -> World {
        parse_world(&["########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########"])
    }

    fn with_objects(world: &World, objects: Vec<Placement>) -> World {
        World::from_parts(
            WorldConfig {
                objects: objects.len(),
                ..world.config().clone()
            },
            &EncoderConfig::default(),
            0,
            world.free_mask().to_vec(),
            objects,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig::default();
        let a = generate_world(5, &cfg, &EncoderConfig::default()).unwrap();
        let b = generate_world(5, &cfg, &EncoderConfig::default()).unwrap();
        assert_eq!(a.free_mask(), b.free_mask());
        assert_eq!(a.objects(), b.objects());
        let c = generate_world(6, &cfg, &EncoderConfig::default()).unwrap();
        assert_ne!(a.free_mask(), c.free_mask());
    }

    #[test]
    fn world_without_objects_is_navigable() {
        let cfg = WorldConfig {
            objects: 0,
            ..WorldConfig::default()
        };
        let w = generate_world(1, &cfg, &EncoderConfig::default()).unwrap();
        assert!(w.objects().is_empty());
        let cells = w.free_cells();
        let field = w.distance_field(cells[0]);
        assert!(cells.iter().all(|&(x, y)| field[y * w.width() + x] != UNREACHABLE));
    }

    #[test]
    fn infeasible_worlds_are_rejected() {
        let tiny = WorldConfig {
            width: 4,
            ..WorldConfig::default()
        };
        assert!(generate_world(0, &tiny, &EncoderConfig::default()).is_err());
        let crowded = WorldConfig {
            width: 8,
            height: 8,
            rooms: 9,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(0, &crowded, &EncoderConfig::default()), Err(TsgmError::Generation(_))));
    }

    #[test]
    fn motion_rules() {
        let w = open_8x8();
        let p = Pose {
            x: 1,
            y: 1,
            heading: Heading::North,
        };
        assert_eq!(step_env(&w, &p, Action::Forward), p);
        let mut q = p;
        for _ in 0..4 {
            q = step_env(&w, &q, Action::TurnLeft);
        }
        assert_eq!(q, p);
        let east = step_env(&w, &p, Action::TurnRight);
        assert_eq!(east.heading, Heading::East);
        let moved = step_env(&w, &east, Action::Forward);
        assert_eq!(moved.cell(), (2, 1));
        assert_eq!(geodesic_distance(&w, p.cell(), moved.cell()), 0.25);
        assert_eq!(step_env(&w, &p, Action::Stop), p);
    }

    #[test]
    fn geodesic_around_an_obstacle() {
        let w = parse_world(&["#########", "#.......#", "#.#####.#", "#.......#", "#########", "#########", "#########", "#########"]);
        assert_eq!(geodesic_distance(&w, (1, 1), (1, 1)), 0.0);
        // straight down the left column
        assert_eq!(geodesic_distance(&w, (1, 1), (1, 3)), 0.5);
        // (3,1) -> (3,3): left to x=1, down 2, right 2 = 2 + 2 + 2 cells
        assert_eq!(geodesic_distance(&w, (3, 1), (3, 3)), 6.0 * 0.25);
        assert_eq!(geodesic_distance(&w, (1, 1), (0, 0)), f64::INFINITY);
    }

    #[test]
    fn oracle_rules() {
        let w = parse_world(&["##########", "#........#", "##########", "##########", "##########", "##########", "##########", "##########"]);
        let goal = (8, 1);
        let at = |x, heading| Pose { x, y: 1, heading };
        assert_eq!(oracle_action(&w, &at(4, Heading::West), goal).unwrap(), Action::Stop);
        assert_eq!(oracle_action(&w, &at(1, Heading::East), goal).unwrap(), Action::Forward);
        assert_eq!(oracle_action(&w, &at(1, Heading::West), goal).unwrap(), Action::TurnLeft);
        assert_eq!(oracle_action(&w, &at(1, Heading::North), goal).unwrap(), Action::TurnRight);
        assert_eq!(oracle_action(&w, &at(1, Heading::South), goal).unwrap(), Action::TurnLeft);
        assert!(matches!(oracle_action(&w, &at(1, Heading::East), (0, 0)), Err(TsgmError::Planning(_))));
    }

    #[test]
    fn detection_rules() {
        let base = open_8x8();
        let w = with_objects(
            &base,
            vec![
                Placement {
                    x: 3,
                    y: 3,
                    category: 1,
                    identity: 0,
                },
                Placement {
                    x: 6,
                    y: 6,
                    category: 2,
                    identity: 1,
                },
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let here = Pose {
            x: 3,
            y: 3,
            heading: Heading::North,
        };
        let obs = observe(&w, &here, &mut rng).unwrap();
        assert_eq!(obs.identities, vec![0]);
        assert!(obs.detections[0].score > 0.8);
        assert_eq!(obs.detections[0].category, 1);
        let far = Pose { x: 1, y: 6, ..here };
        assert!(observe(&w, &far, &mut rng).unwrap().detections.is_empty());
        assert!(observe(&w, &Pose { x: 0, y: 0, ..here }, &mut rng).is_err());

        // a wall between agent and object hides it
        let walled = parse_world(&["########", "#..#...#", "#..#...#", "#..#...#", "#......#", "#......#", "#......#", "########"]);
        let w = with_objects(
            &walled,
            vec![Placement {
                x: 4,
                y: 2,
                category: 0,
                identity: 0,
            }],
        );
        let left = Pose { x: 2, y: 2, ..here };
        assert!(observe(&w, &left, &mut rng).unwrap().detections.is_empty());
        let below = Pose { x: 4, y: 4, ..here };
        assert_eq!(observe(&w, &below, &mut rng).unwrap().identities, vec![0]);
    }

    #[test]
    fn tiers() {
        assert_eq!(classify_difficulty(2.0).unwrap(), Tier::Easy);
        assert_eq!(classify_difficulty(4.0).unwrap(), Tier::Medium);
        assert_eq!(classify_difficulty(7.5).unwrap(), Tier::Hard);
        assert_eq!(classify_difficulty(1.5).unwrap(), Tier::Easy);
        assert_eq!(classify_difficulty(3.0).unwrap(), Tier::Medium);
        assert_eq!(classify_difficulty(10.0).unwrap(), Tier::Hard);
        assert!(classify_difficulty(1.25).is_err());
        assert!(classify_difficulty(10.25).is_err());
    }

    #[test]
    fn spl_unit_cases() {
        assert_eq!(spl(&[true], &[2.0], &[2.0]).unwrap(), 1.0);
        assert_eq!(spl(&[false], &[2.0], &[2.0]).unwrap(), 0.0);
        assert_eq!(spl(&[true], &[2.0], &[4.0]).unwrap(), 0.5);
        assert!(spl(&[], &[], &[]).is_err());
        assert!(spl(&[true], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn episodes_respect_tier_bounds() {
        let w = generate_world(3, &WorldConfig::default(), &EncoderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for tier in Tier::ALL {
            for ep in sample_episodes(&w, 0, tier, 10, 0, &mut rng).unwrap() {
                assert_eq!(classify_difficulty(ep.geodesic).unwrap(), tier);
                assert_eq!(ep.geodesic, geodesic_distance(&w, ep.start.cell(), ep.goal.cell()));
            }
        }
    }

    #[derive(Clone)]
    struct Scripted(Vec<Action>);

    impl Agent for Scripted {
        fn reset(&mut self, _: &World, _: &Episode) -> Result<()> {
            Ok(())
        }
        fn act(&mut self, ctx: &StepContext<'_>) -> Result<Action> {
            Ok(self.0.get(ctx.step).copied().unwrap_or(Action::TurnLeft))
        }
    }

    fn corridor_episode() -> (World, Episode) {
        let w = parse_world(&["##########", "#........#", "##########", "##########", "##########", "##########", "##########", "##########"]);
        let ep = Episode {
            id: 0,
            world: 0,
            start: Pose {
                x: 1,
                y: 1,
                heading: Heading::East,
            },
            goal: Pose {
                x: 8,
                y: 1,
                heading: Heading::East,
            },
            goal_feature: vec![0.0; 32],
            geodesic: 7.0 * 0.25,
            tier: Tier::Easy,
        };
        (w, ep)
    }

    #[test]
    fn reaching_without_stopping_fails() {
        let (w, ep) = corridor_episode();
        let mut walker = Scripted(vec![Action::Forward; 7]);
        let r = run_episode(&mut walker, &w, &ep, 20, 0, false).unwrap();
        assert_eq!(r.final_geodesic, 0.0);
        assert!(!r.success && !r.stopped);
        let mut stopper = Scripted(vec![Action::Stop]);
        let r = run_episode(&mut stopper, &w, &ep, 20, 0, false).unwrap();
        assert!(r.stopped && !r.success);
        let mut good = Scripted([vec![Action::Forward; 3], vec![Action::Stop]].concat());
        let r = run_episode(&mut good, &w, &ep, 20, 0, false).unwrap();
        assert!(r.success);
        assert_eq!(r.traveled, 0.75);
        assert_eq!(r.spl(), 1.0);
    }

    #[test]
    fn oracle_agent_succeeds_in_corridor() {
        let (w, ep) = corridor_episode();
        let suite = Suite {
            worlds: vec![w],
            episodes: vec![ep],
        };
        let report = evaluate(&OracleAgent::default(), &suite, 500, 0, false).unwrap();
        assert_eq!(report.metrics.success, 1.0);
        assert_eq!(report.metrics.spl, 1.0);
        assert!(evaluate(&OracleAgent::default(), &suite.filter_tier(Some(Tier::Hard)), 500, 0, false).is_err());
    }
}
