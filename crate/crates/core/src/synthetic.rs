//! Seeded synthetic catalog and click log with known structure.
//!
//! Hotels belong to a market and an amenity cluster. Each cluster has an
//! attribute prototype and its own neighbourhood inside every market; a
//! hotel's attributes are its prototype plus noise. Within a market, hotel
//! popularity follows a Zipf law over a random ranking.
//!
//! Sessions stay in one market with probability `p_market` (otherwise they
//! move to a second market once). Each next click stays in the current
//! hotel's cluster with probability `p_cluster`, else it is any hotel of the
//! market, both popularity-weighted.
//!
//! The first hotel of every (cluster, market) cell is a noise-free
//! "flagship", giving a cluster x market grid for analogy checks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};

use crate::catalog::{AttrValue, FeatureKind, FeatureSchema, HotelRecord};
use crate::coldstart::haversine_km;
use crate::error::{Error, Result};
use crate::sessions::{ClickEvent, SECONDS_PER_DAY};

const KM_PER_DEGREE: f64 = 111.195;
const MAX_SESSION_LENGTH: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub hotels: usize,
    pub markets: usize,
    pub clusters: usize,
    pub sessions: usize,
    pub seed: u64,
    pub p_market: f64,
    pub p_cluster: f64,
    /// Zipf exponent of within-market popularity.
    pub popularity_skew: f64,
    pub mean_session_length: f64,
    pub sessions_per_user: usize,
    /// Probability that any single attribute of a non-flagship is missing.
    pub missing_rate: f64,
    /// Maximum distance of a cluster neighbourhood from the market centre.
    pub market_radius_km: f64,
    /// Spread of hotels around their neighbourhood centre.
    pub neighbourhood_km: f64,
    pub start_timestamp: i64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            hotels: 1000,
            markets: 25,
            clusters: 8,
            sessions: 50_000,
            seed: 42,
            p_market: 0.9,
            p_cluster: 0.7,
            popularity_skew: 1.5,
            mean_session_length: 4.5,
            sessions_per_user: 3,
            missing_rate: 0.05,
            market_radius_km: 6.0,
            neighbourhood_km: 1.0,
            start_timestamp: 1_577_836_800,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.markets < 2 || self.clusters < 2 {
            return bad("need at least 2 markets and 2 clusters");
        }
        if self.hotels < self.markets * self.clusters {
            return bad("need at least one hotel per (market, cluster) cell");
        }
        for p in [self.p_market, self.p_cluster, self.missing_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.mean_session_length < 2.0 || self.sessions_per_user == 0 {
            return bad("sessions need a mean length >= 2 and at least one per user");
        }
        if !(self.popularity_skew >= 0.0 && self.market_radius_km > 0.0 && self.neighbourhood_km > 0.0) {
            return bad("skew and radii must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub schema: FeatureSchema,
    pub catalog: Vec<HotelRecord>,
    pub events: Vec<ClickEvent>,
    /// Cluster of each catalog row.
    pub cluster: Vec<usize>,
    /// Market number of each catalog row.
    pub market: Vec<usize>,
    /// `flagships[cluster][market]` is a catalog row.
    pub flagships: Vec<Vec<usize>>,
    /// Unnormalized popularity of each catalog row within its market.
    pub popularity: Vec<f64>,
}

impl SyntheticData {
    /// Up to `n` distinct analogy quadruples `[(A,X), (B,X), (B,Y), (A,Y)]`
    /// of flagship hotel ids, for clusters `A != B` and markets `X != Y`.
    pub fn planted_quadruples(&self, n: usize, seed: u64) -> Vec<[String; 4]> {
        let k = self.config.clusters;
        let m = self.config.markets;
        let total = k * (k - 1) * m * (m - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, total, n.min(total));
        let mut picks = picks.into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|mut i| {
                let y_off = i % (m - 1);
                i /= m - 1;
                let x = i % m;
                i /= m;
                let b_off = i % (k - 1);
                let a = i / (k - 1);
                let b = (a + 1 + b_off) % k;
                let y = (x + 1 + y_off) % m;
                let id = |c: usize, mk: usize| self.catalog[self.flagships[c][mk]].hotel_id.clone();
                [id(a, x), id(b, x), id(b, y), id(a, y)]
            })
            .collect()
    }
}

struct Prototype {
    star: f64,
    user_rating: f64,
    property_type: usize,
    wifi: bool,
    breakfast: bool,
    pets: bool,
    rooms: f64,
    price: f64,
}

fn yes_no(b: bool) -> AttrValue {
    AttrValue::Category(if b { "yes" } else { "no" }.into())
}

fn property_types(schema: &FeatureSchema) -> Vec<String> {
    match schema.feature("property_type").map(|f| &f.kind) {
        Some(FeatureKind::Categorical { categories }) => categories.clone(),
        _ => unreachable!("reference schema has property_type"),
    }
}

/// Popularity-weighted draw from `members`, never returning `exclude`.
fn draw_weighted<R: Rng>(rng: &mut R, members: &[usize], weight: &[f64], exclude: Option<usize>) -> Option<usize> {
    let total: f64 = members.iter().filter(|&&h| Some(h) != exclude).map(|&h| weight[h]).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for &h in members {
        if Some(h) == exclude {
            continue;
        }
        last = Some(h);
        u -= weight[h];
        if u < 0.0 {
            return Some(h);
        }
    }
    last
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schema = FeatureSchema::reference();
    let types = property_types(&schema);
    let (m_count, k_count) = (config.markets, config.clusters);

    // market centres at least 200 km apart
    let mut centres: Vec<(f64, f64)> = Vec::with_capacity(m_count);
    while centres.len() < m_count {
        let lat = rng.random_range(-55.0..60.0);
        let lon = rng.random_range(-179.0..179.0);
        if centres.iter().all(|&(a, b)| haversine_km(a, b, lat, lon) > 200.0) {
            centres.push((lat, lon));
        }
    }

    let prototypes: Vec<Prototype> = (0..k_count)
        .map(|k| Prototype {
            star: rng.random_range(1..=5) as f64,
            user_rating: (rng.random_range(5.0..9.5f64) * 10.0).round() / 10.0,
            property_type: if k < types.len() { k } else { rng.random_range(0..types.len()) },
            wifi: rng.random_bool(0.7),
            breakfast: rng.random_bool(0.5),
            pets: rng.random_bool(0.4),
            rooms: rng.random_range(10f64.ln()..400f64.ln()).exp().round(),
            price: rng.random_range(1..=4) as f64,
        })
        .collect();

    // neighbourhood centre of each (market, cluster), as km offsets
    let neighbourhoods: Vec<Vec<(f64, f64)>> = (0..m_count)
        .map(|_| {
            (0..k_count)
                .map(|_| {
                    let r = config.market_radius_km * rng.random::<f64>().sqrt();
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    (r * t.cos(), r * t.sin())
                })
                .collect()
        })
        .collect();

    let jitter = Normal::<f64>::new(0.0, config.neighbourhood_km).expect("positive spread");
    let rating_noise = Normal::<f64>::new(0.0, 0.4).expect("positive spread");
    let rooms_noise = Normal::<f64>::new(0.0, 0.25).expect("positive spread");

    let mut catalog = Vec::with_capacity(config.hotels);
    let mut cluster = Vec::with_capacity(config.hotels);
    let mut market = Vec::with_capacity(config.hotels);
    let mut flagships = vec![vec![0usize; m_count]; k_count];
    for m in 0..m_count {
        let size = config.hotels / m_count + usize::from(m < config.hotels % m_count);
        for j in 0..size {
            let k = j % k_count;
            let flagship = j < k_count;
            let row = catalog.len();
            if flagship {
                flagships[k][m] = row;
            }
            let p = &prototypes[k];
            let (cx, cy) = neighbourhoods[m][k];
            let (dx, dy) = if flagship {
                (cx, cy)
            } else {
                (cx + jitter.sample(&mut rng), cy + jitter.sample(&mut rng))
            };
            let (clat, clon) = centres[m];
            let lat = clat + dy / KM_PER_DEGREE;
            let lon = clon + dx / (KM_PER_DEGREE * clat.to_radians().cos());

            let mut attrs: BTreeMap<String, Option<AttrValue>> = BTreeMap::new();
            let mut put = |name: &str, v: AttrValue, rng: &mut ChaCha8Rng| {
                let missing = !flagship && rng.random_bool(config.missing_rate);
                attrs.insert(name.to_string(), if missing { None } else { Some(v) });
            };
            if flagship {
                put("star_rating", AttrValue::Number(p.star), &mut rng);
                put("user_rating", AttrValue::Number(p.user_rating), &mut rng);
                put("property_type", AttrValue::Category(types[p.property_type].clone()), &mut rng);
                put("wifi", yes_no(p.wifi), &mut rng);
                put("breakfast", yes_no(p.breakfast), &mut rng);
                put("pets", yes_no(p.pets), &mut rng);
                put("room_count", AttrValue::Number(p.rooms), &mut rng);
                put("price_tier", AttrValue::Number(p.price), &mut rng);
            } else {
                let step = |v: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
                    if rng.random_bool(0.15) {
                        (v + if rng.random_bool(0.5) { 1.0 } else { -1.0 }).clamp(lo, hi)
                    } else {
                        v
                    }
                };
                let flip = |b: bool, rng: &mut ChaCha8Rng| if rng.random_bool(0.1) { !b } else { b };
                let star = step(p.star, 1.0, 5.0, &mut rng);
                put("star_rating", AttrValue::Number(star), &mut rng);
                let ur = ((p.user_rating + rating_noise.sample(&mut rng)).clamp(1.0, 10.0) * 10.0).round() / 10.0;
                put("user_rating", AttrValue::Number(ur), &mut rng);
                let pt = if rng.random_bool(0.1) {
                    rng.random_range(0..types.len())
                } else {
                    p.property_type
                };
                put("property_type", AttrValue::Category(types[pt].clone()), &mut rng);
                let (w, b, pe) = (flip(p.wifi, &mut rng), flip(p.breakfast, &mut rng), flip(p.pets, &mut rng));
                put("wifi", yes_no(w), &mut rng);
                put("breakfast", yes_no(b), &mut rng);
                put("pets", yes_no(pe), &mut rng);
                let rooms = (p.rooms * rooms_noise.sample(&mut rng).exp()).round().clamp(1.0, 500.0);
                put("room_count", AttrValue::Number(rooms), &mut rng);
                let price = step(p.price, 1.0, 4.0, &mut rng);
                put("price_tier", AttrValue::Number(price), &mut rng);
            }
            catalog.push(HotelRecord {
                hotel_id: format!("H{:05}", row),
                market_id: format!("M{:03}", m),
                latitude: lat,
                longitude: lon,
                attributes: attrs,
            });
            cluster.push(k);
            market.push(m);
        }
    }

    // popularity: Zipf over a random ranking inside each market
    let mut weight = vec![0.0; catalog.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m_count];
    let mut cell: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); k_count]; m_count];
    for (h, (&m, &k)) in market.iter().zip(&cluster).enumerate() {
        members[m].push(h);
        cell[m][k].push(h);
    }
    for list in &members {
        let mut ranking = list.clone();
        rand::seq::SliceRandom::shuffle(&mut ranking[..], &mut rng);
        for (r, &h) in ranking.iter().enumerate() {
            weight[h] = 1.0 / ((r + 1) as f64).powf(config.popularity_skew);
        }
    }

    let extra = Geometric::new(1.0 / (config.mean_session_length - 1.0)).expect("valid probability");
    let mut events = Vec::new();
    let mut user = 0usize;
    let mut clock = 0i64;
    for s in 0..config.sessions {
        if s % config.sessions_per_user == 0 {
            user = s / config.sessions_per_user;
            clock = config.start_timestamp + rng.random_range(0..365 * SECONDS_PER_DAY);
        } else {
            clock += rng.random_range(8 * SECONDS_PER_DAY..30 * SECONDS_PER_DAY);
        }
        let len = (2 + extra.sample(&mut rng) as usize).min(MAX_SESSION_LENGTH);
        let mut m = rng.random_range(0..m_count);
        let switch_at = (!rng.random_bool(config.p_market)).then(|| rng.random_range(1..len));
        let mut current = draw_weighted(&mut rng, &members[m], &weight, None).expect("non-empty market");
        let user_id = format!("U{:06}", user);
        let mut t = clock;
        events.push(ClickEvent {
            user_id: user_id.clone(),
            hotel_id: catalog[current].hotel_id.clone(),
            timestamp: t,
        });
        for pos in 1..len {
            let mut exclude = Some(current);
            if switch_at == Some(pos) {
                m = (m + rng.random_range(1..m_count)) % m_count;
                exclude = None;
            }
            let same = &cell[m][cluster[current]];
            let next = if rng.random_bool(config.p_cluster) {
                draw_weighted(&mut rng, same, &weight, exclude)
            } else {
                None
            }
            .or_else(|| draw_weighted(&mut rng, &members[m], &weight, exclude))
            .expect("market has another hotel");
            current = next;
            t += rng.random_range(30..3600);
            events.push(ClickEvent {
                user_id: user_id.clone(),
                hotel_id: catalog[current].hotel_id.clone(),
                timestamp: t,
            });
        }
    }
    events.sort_by_key(|e| e.timestamp);

    Ok(SyntheticData {
        config: config.clone(),
        schema,
        catalog,
        events,
        cluster,
        market,
        flagships,
        popularity: weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sessions::sessionize;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            hotels: 120,
            markets: 4,
            clusters: 3,
            sessions: 300,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.catalog, b.catalog);
        assert_eq!(a.events, b.events);
        for r in &a.catalog {
            r.validate(&a.schema).unwrap();
        }
        assert_eq!(a.catalog.len(), 120);
        let other = generate(&SyntheticConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.events, other.events);
    }

    #[test]
    fn sessions_are_recoverable() {
        let d = generate(&small()).unwrap();
        let sessions = sessionize(&d.events, 7.0);
        assert_eq!(sessions.len(), 300);
        assert!(sessions.iter().all(|s| s.len() >= 2 && s.windows(2).all(|w| w[0] != w[1])));
    }

    #[test]
    fn markets_are_compact_and_grid_is_complete() {
        let d = generate(&small()).unwrap();
        for k in 0..3 {
            for m in 0..4 {
                let row = d.flagships[k][m];
                assert_eq!((d.cluster[row], d.market[row]), (k, m));
                assert!(d.catalog[row].attributes.values().all(|v| v.is_some()));
            }
        }
        let q = d.planted_quadruples(10, 1);
        assert_eq!(q.len(), 10);
        for [ax, bx, by, ay] in &q {
            let row = |id: &str| d.catalog.iter().position(|r| r.hotel_id == id).unwrap();
            assert_eq!(d.cluster[row(ax)], d.cluster[row(ay)]);
            assert_eq!(d.cluster[row(bx)], d.cluster[row(by)]);
            assert_eq!(d.market[row(ax)], d.market[row(bx)]);
            assert_eq!(d.market[row(by)], d.market[row(ay)]);
            assert_ne!(d.cluster[row(ax)], d.cluster[row(bx)]);
        }
    }
}
