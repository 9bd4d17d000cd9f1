//! Reproducible synthetic food-delivery world with a planted click model.
//!
//! POIs carry a latent cuisine, users a preference vector over cuisines, and
//! every impression happens in a context (weather, mealtime, cell,
//! temperature, day type). Click propensity is a logistic threshold model over
//! user-cuisine affinity, a cuisine x weather x mealtime bonus, distance and
//! POI quality. Its parameters are kept in [`GroundTruth`] so evaluation can
//! compare learned rankings against the generator's own.

pub mod catalog;
mod io;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LarrError, Result};
use catalog::{CUISINES, NAME_SUFFIXES, NICK_SYLLABLES, GENDERS, REGIONS, TIMESLOTS, WEATHERS};

pub use io::{
    load_interactions, load_truth_rows, load_world, save_interactions, save_truth_rows, save_world,
    WorldManifest, FORMAT_VERSION,
};
pub use render::{
    entity_texts, render_poi_description, render_user_texts, PoiTexts, UserTexts, NO_HISTORY,
    MAX_HISTORY_CLAUSES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoiId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: u8,
    pub y: u8,
}

impl Cell {
    pub fn manhattan(self, other: Cell) -> u32 {
        (self.x as i32 - other.x as i32).unsigned_abs() + (self.y as i32 - other.y as i32).unsigned_abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_pois: usize,
    pub n_users: usize,
    pub n_cuisines: usize,
    pub grid_size: usize,
    pub n_weather: usize,
    pub n_timeslots: usize,
    /// Scale of the logistic noise added to the click logit; 0 makes clicks a
    /// deterministic threshold of the logit.
    pub affinity_noise: f64,
    pub seed: u64,
    /// Impressions simulated per user to build their pre-log history.
    pub history_impressions: usize,
    /// Concentration of the symmetric Dirichlet over cuisine preferences.
    pub preference_concentration: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_pois: 200,
            n_users: 1000,
            n_cuisines: 8,
            grid_size: 8,
            n_weather: 4,
            n_timeslots: 4,
            affinity_noise: 1.0,
            seed: 42,
            history_impressions: 24,
            preference_concentration: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_pois", self.n_pois),
            ("n_users", self.n_users),
            ("n_cuisines", self.n_cuisines),
            ("grid_size", self.grid_size),
            ("n_weather", self.n_weather),
            ("n_timeslots", self.n_timeslots),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LarrError::InvalidConfig(format!("{name} must be >= 1")));
        }
        let limits = [
            ("n_cuisines", self.n_cuisines, CUISINES.len()),
            ("n_weather", self.n_weather, WEATHERS.len()),
            ("n_timeslots", self.n_timeslots, TIMESLOTS.len()),
            ("grid_size", self.grid_size, 200),
        ];
        for (name, v, max) in limits {
            if v > max {
                return Err(LarrError::InvalidConfig(format!("{name} = {v} exceeds {max}")));
            }
        }
        if !(self.affinity_noise >= 0.0 && self.affinity_noise.is_finite()) {
            return Err(LarrError::InvalidConfig("affinity_noise must be >= 0".into()));
        }
        if !(self.preference_concentration > 0.0) {
            return Err(LarrError::InvalidConfig("preference_concentration must be > 0".into()));
        }
        Ok(())
    }

    pub fn region_of(&self, cell: Cell) -> usize {
        if self.grid_size < 2 {
            return 0;
        }
        let half = (self.grid_size / 2) as u8;
        (cell.x >= half) as usize + 2 * (cell.y >= half) as usize
    }

    pub fn region_name(&self, cell: Cell) -> &'static str {
        REGIONS[self.region_of(cell)]
    }

    pub fn cells_in_region(&self, region: usize) -> Vec<Cell> {
        let g = self.grid_size as u8;
        (0..g)
            .flat_map(|y| (0..g).map(move |x| Cell { x, y }))
            .filter(|&c| self.region_of(c) == region)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub poi_id: PoiId,
    pub name: String,
    pub location: Cell,
    pub cuisine: usize,
    pub menu: Vec<String>,
    pub intro: String,
    pub stats: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub nickname: String,
    pub gender: String,
    pub home: Cell,
    pub preference: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Click,
    Order,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub weather: usize,
    pub timeslot: usize,
    pub cell: Cell,
    pub temperature: f64,
    pub weekend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub time: u64,
    pub poi_id: PoiId,
    pub context: Context,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub profile: Profile,
    pub history: Vec<HistoryEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub time: u64,
    pub user_id: UserId,
    pub poi_id: PoiId,
    pub context: Context,
    pub click: u8,
    pub order: u8,
}

/// Parameters of the planted click model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub base_logit: f64,
    pub preference_weight: f64,
    pub distance_weight: f64,
    pub same_region_bonus: f64,
    pub quality_weight: f64,
    pub order_fraction: f64,
    /// Context-match bonus indexed `[cuisine][weather][timeslot]`.
    pub bonus: Vec<Vec<Vec<f64>>>,
    pub poi_quality: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub pois: Vec<PoiRecord>,
    pub users: Vec<UserRecord>,
    pub truth: GroundTruth,
}

/// Generator-side probabilities for one sampled record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub logit: f64,
    pub p_click: f64,
    pub p_order: f64,
}

fn logistic_noise(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
    (u / (1.0 - u)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl World {
    pub fn poi(&self, id: PoiId) -> &PoiRecord {
        &self.pois[id.0 as usize]
    }

    pub fn user(&self, id: UserId) -> &UserRecord {
        &self.users[id.0 as usize]
    }

    /// Noise-free click logit of an impression.
    pub fn click_logit(&self, user: UserId, poi: PoiId, ctx: &Context) -> f64 {
        let t = &self.truth;
        let p = self.poi(poi);
        let u = self.user(user);
        let c = p.cuisine;
        let rel = (u.profile.preference[c] * self.config.n_cuisines as f64).max(1e-6);
        let pref = t.preference_weight * rel.ln().clamp(-3.0, 2.0);
        let dist = ctx.cell.manhattan(p.location) as f64 / self.config.grid_size as f64;
        let same = self.config.region_of(ctx.cell) == self.config.region_of(p.location);
        t.base_logit
            + pref
            + t.bonus[c][ctx.weather][ctx.timeslot]
            - t.distance_weight * dist
            + if same { t.same_region_bonus } else { 0.0 }
            + t.quality_weight * t.poi_quality[poi.0 as usize]
    }

    /// Click probability implied by the logistic threshold model.
    pub fn click_probability(&self, logit: f64) -> f64 {
        let s = self.config.affinity_noise;
        if s == 0.0 {
            if logit > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            sigmoid(logit / s)
        }
    }

    fn draw_context(&self, rng: &mut ChaCha8Rng, home: Cell) -> Context {
        let cfg = &self.config;
        let weather = rng.random_range(0..cfg.n_weather);
        let timeslot = rng.random_range(0..cfg.n_timeslots);
        let g = cfg.grid_size as u8;
        let cell = if rng.random_bool(0.75) {
            home
        } else {
            Cell {
                x: rng.random_range(0..g),
                y: rng.random_range(0..g),
            }
        };
        let temperature = Normal::new(WEATHERS[weather].mean_temperature, 3.0)
            .unwrap()
            .sample(rng);
        let temperature = (temperature * 10.0).round() / 10.0;
        Context {
            weather,
            timeslot,
            cell,
            temperature,
            weekend: rng.random_bool(2.0 / 7.0),
        }
    }

    fn draw_poi(&self, rng: &mut ChaCha8Rng, ctx: &Context, by_region: &[Vec<PoiId>]) -> PoiId {
        let local = &by_region[self.config.region_of(ctx.cell)];
        if !local.is_empty() && rng.random_bool(0.6) {
            local[rng.random_range(0..local.len())]
        } else {
            PoiId(rng.random_range(0..self.pois.len()) as u32)
        }
    }

    fn pois_by_region(&self) -> Vec<Vec<PoiId>> {
        let mut out = vec![Vec::new(); REGIONS.len()];
        for p in &self.pois {
            out[self.config.region_of(p.location)].push(p.poi_id);
        }
        out
    }

    /// Samples one impression and its labels.
    fn simulate(
        &self,
        rng: &mut ChaCha8Rng,
        user: UserId,
        by_region: &[Vec<PoiId>],
    ) -> (PoiId, Context, u8, u8, TruthRow) {
        let ctx = self.draw_context(rng, self.user(user).profile.home);
        let poi = self.draw_poi(rng, &ctx, by_region);
        let logit = self.click_logit(user, poi, &ctx);
        let noise = logistic_noise(rng);
        let click = (logit + self.config.affinity_noise * noise > 0.0) as u8;
        let order = (click == 1 && rng.random_bool(self.truth.order_fraction)) as u8;
        let p_click = self.click_probability(logit);
        let row = TruthRow {
            logit,
            p_click,
            p_order: p_click * self.truth.order_fraction,
        };
        (poi, ctx, click, order, row)
    }
}

fn nickname(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..4);
    let mut s: String = (0..n)
        .map(|_| NICK_SYLLABLES[rng.random_range(0..NICK_SYLLABLES.len())])
        .collect();
    if let Some(f) = s.get_mut(0..1) {
        f.make_ascii_uppercase();
    }
    s
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn build_truth(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> GroundTruth {
    let bonus = (0..cfg.n_cuisines)
        .map(|c| {
            (0..cfg.n_weather)
                .map(|w| {
                    (0..cfg.n_timeslots)
                        .map(|t| 1.2 * CUISINES[c].warmth * WEATHERS[w].chill + 0.8 * CUISINES[c].slot_affinity[t])
                        .collect()
                })
                .collect()
        })
        .collect();
    let quality = Normal::new(0.0, 0.5).unwrap();
    GroundTruth {
        base_logit: -1.2,
        preference_weight: 1.0,
        distance_weight: 1.5,
        same_region_bonus: 0.5,
        quality_weight: 1.0,
        order_fraction: 0.35,
        bonus,
        poi_quality: (0..cfg.n_pois).map(|_| quality.sample(rng)).collect(),
    }
}

/// Generates POIs, users (with pre-log histories) and the click model.
pub fn gen_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = build_truth(config, &mut rng);
    let g = config.grid_size as u8;

    let mut taken = BTreeSet::new();
    let mut pois = Vec::with_capacity(config.n_pois);
    for i in 0..config.n_pois {
        let cuisine = rng.random_range(0..config.n_cuisines);
        let location = Cell {
            x: rng.random_range(0..g),
            y: rng.random_range(0..g),
        };
        let c = &CUISINES[cuisine];
        let base = format!(
            "{} {}",
            c.name_words[rng.random_range(0..c.name_words.len())],
            NAME_SUFFIXES[rng.random_range(0..NAME_SUFFIXES.len())]
        );
        let mut name = base.clone();
        let mut n = 2;
        while !taken.insert((name.clone(), location)) {
            name = format!("{base} {n}");
            n += 1;
        }
        let mut picks: Vec<usize> = (0..c.dishes.len()).collect();
        for j in 0..3 {
            let k = rng.random_range(j..picks.len());
            picks.swap(j, k);
        }
        let mut picks = picks[..3].to_vec();
        picks.sort_unstable();
        let menu = picks.iter().map(|&d| c.dishes[d].to_string()).collect();
        let q = truth.poi_quality[i];
        let rating = ((3.9 + 0.5 * q).clamp(1.0, 5.0) * 10.0).round() / 10.0;
        let monthly = (rng.random_range(200.0..1500.0) * (0.6 * q).exp() / 10.0).round() * 10.0;
        let price = rng.random_range(15..80) as f64;
        let stats = BTreeMap::from([
            ("avg_price".to_string(), price),
            ("monthly_orders".to_string(), monthly),
            ("rating".to_string(), rating),
        ]);
        let mut poi = PoiRecord {
            poi_id: PoiId(i as u32),
            name,
            location,
            cuisine,
            menu,
            intro: String::new(),
            stats,
        };
        poi.intro = render::intro_for(config, &poi);
        pois.push(poi);
    }

    let mut users = Vec::with_capacity(config.n_users);
    for i in 0..config.n_users {
        let profile = Profile {
            nickname: nickname(&mut rng),
            gender: GENDERS[rng.random_range(0..GENDERS.len())].to_string(),
            home: Cell {
                x: rng.random_range(0..g),
                y: rng.random_range(0..g),
            },
            preference: dirichlet(&mut rng, config.n_cuisines, config.preference_concentration),
        };
        users.push(UserRecord {
            user_id: UserId(i as u32),
            profile,
            history: Vec::new(),
        });
    }

    let mut world = World {
        config: config.clone(),
        pois,
        users,
        truth,
    };
    let by_region = world.pois_by_region();
    let mut histories = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let mut events = Vec::new();
        for t in 0..config.history_impressions {
            let (poi_id, context, click, order, _) = world.simulate(&mut rng, UserId(u as u32), &by_region);
            if click == 1 {
                events.push(HistoryEvent {
                    time: t as u64,
                    poi_id,
                    context,
                    action: if order == 1 { Action::Order } else { Action::Click },
                });
            }
        }
        histories.push(events);
    }
    for (u, h) in world.users.iter_mut().zip(histories) {
        u.history = h;
    }
    Ok(world)
}

/// Samples `n` logged impressions, also returning the generator-side
/// probabilities of each.
pub fn sample_interactions_with_truth(
    world: &World,
    n: usize,
    seed: u64,
) -> Result<(Vec<InteractionRecord>, Vec<TruthRow>)> {
    if world.pois.is_empty() || world.users.is_empty() {
        return Err(LarrError::Empty("world"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_u64.rotate_left(17));
    let by_region = world.pois_by_region();
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for time in 0..n {
        let user = UserId(rng.random_range(0..world.users.len()) as u32);
        let (poi_id, context, click, order, row) = world.simulate(&mut rng, user, &by_region);
        records.push(InteractionRecord {
            time: time as u64,
            user_id: user,
            poi_id,
            context,
            click,
            order,
        });
        truth.push(row);
    }
    Ok((records, truth))
}

pub fn sample_interactions(world: &World, n: usize, seed: u64) -> Result<Vec<InteractionRecord>> {
    sample_interactions_with_truth(world, n, seed).map(|(r, _)| r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    /// Fraction of the latest records that form the test set.
    pub test_fraction: f64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { test_fraction: 0.2 }
    }
}

/// Temporal split: the last `test_fraction` of records by time go to test.
pub fn split_dataset(
    records: &[InteractionRecord],
    policy: SplitPolicy,
) -> Result<(Vec<InteractionRecord>, Vec<InteractionRecord>)> {
    let f = policy.test_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(LarrError::InvalidConfig(format!("test_fraction {f} outside (0, 1)")));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.time);
    let n_test = (sorted.len() as f64 * f).round() as usize;
    let test = sorted.split_off(sorted.len() - n_test);
    Ok((sorted, test))
}
