//! Fixed text templates turning records into keyword slices.

use super::catalog::{CUISINES, TIMESLOTS, WEATHERS};
use super::{Action, PoiRecord, UserRecord, World, WorldConfig};
use crate::textcodec::{keyword, KeywordedText};

/// Rendered in place of the action clauses for users without history.
pub const NO_HISTORY: &str = "no history";
/// Only the most recent events are spelled out.
pub const MAX_HISTORY_CLAUSES: usize = 4;

pub(crate) fn intro_for(config: &WorldConfig, poi: &PoiRecord) -> String {
    let c = &CUISINES[poi.cuisine];
    let region = config.region_name(poi.location);
    let feel = if c.warmth > 0.3 {
        "warming food for cold days"
    } else if c.warmth < -0.3 {
        "refreshing treats for hot days"
    } else {
        "good in any weather"
    };
    let best = c
        .slot_affinity
        .iter()
        .take(config.n_timeslots)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &a)| if a > acc.1 { (i, a) } else { acc })
        .0;
    format!("{} in {region}, {feel}, popular at {}", c.tag, TIMESLOTS[best])
}

pub fn render_location(poi: &PoiRecord) -> String {
    format!("cell ({},{})", poi.location.x, poi.location.y)
}

pub fn render_stats(poi: &PoiRecord) -> String {
    let get = |k: &str| poi.stats.get(k).copied().unwrap_or(0.0);
    format!(
        "rating {:.1}, {} orders a month, avg price {}",
        get("rating"),
        get("monthly_orders") as i64,
        get("avg_price") as i64
    )
}

/// All six POI keyword slices in keyword order.
pub fn render_poi_description(poi: &PoiRecord) -> KeywordedText {
    KeywordedText::new([
        (keyword::NAME, poi.name.clone()),
        (keyword::LOCATION, render_location(poi)),
        (keyword::TAG, CUISINES[poi.cuisine].tag.to_string()),
        (keyword::INTRO, poi.intro.clone()),
        (keyword::MENU, format!("menu: {}", poi.menu.join(", "))),
        (keyword::STATS, render_stats(poi)),
    ])
}

/// Returns `(U_p, U_a)`. Action clauses mention what was done, the cuisine,
/// the mealtime and the weather; the trailing statistics count all events.
pub fn render_user_texts(world: &World, user: &UserRecord) -> (KeywordedText, KeywordedText) {
    let p = &user.profile;
    let u_p = KeywordedText::new([(
        keyword::PROFILE,
        format!(
            "{}, {}, lives in {} cell ({},{})",
            p.nickname,
            p.gender,
            world.config.region_name(p.home),
            p.home.x,
            p.home.y
        ),
    )]);
    let actions = if user.history.is_empty() {
        NO_HISTORY.to_string()
    } else {
        let start = user.history.len().saturating_sub(MAX_HISTORY_CLAUSES);
        let clauses: Vec<String> = user.history[start..]
            .iter()
            .map(|e| {
                let verb = match e.action {
                    Action::Click => "clicked",
                    Action::Order => "ordered",
                };
                format!(
                    "{verb} {} at {}, {}",
                    CUISINES[world.poi(e.poi_id).cuisine].tag,
                    TIMESLOTS[e.context.timeslot],
                    WEATHERS[e.context.weather].name
                )
            })
            .collect();
        let orders = user.history.iter().filter(|e| e.action == Action::Order).count();
        format!(
            "{}; {} clicks, {} orders",
            clauses.join("; "),
            user.history.len(),
            orders
        )
    };
    (u_p, KeywordedText::new([(keyword::ACTIONS, actions)]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiTexts {
    /// Full description in keyword order.
    pub description: KeywordedText,
    /// Identity and numbers: name, location, menu, stats.
    pub p_d: KeywordedText,
    /// Semantics: tag and intro.
    pub p_b: KeywordedText,
    /// `P_d ++ P_b`.
    pub p: KeywordedText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserTexts {
    pub u_p: KeywordedText,
    pub u_a: KeywordedText,
    /// `U_p ++ U_a`.
    pub u: KeywordedText,
}

pub fn entity_texts(world: &World) -> (Vec<UserTexts>, Vec<PoiTexts>) {
    let users = world
        .users
        .iter()
        .map(|u| {
            let (u_p, u_a) = render_user_texts(world, u);
            let u = u_p.concat(&u_a);
            UserTexts { u_p, u_a, u }
        })
        .collect();
    let pois = world
        .pois
        .iter()
        .map(|poi| {
            let description = render_poi_description(poi);
            let p_d = description.select(&[keyword::NAME, keyword::LOCATION, keyword::MENU, keyword::STATS]);
            let p_b = description.select(&[keyword::TAG, keyword::INTRO]);
            let p = p_d.concat(&p_b);
            PoiTexts {
                description,
                p_d,
                p_b,
                p,
            }
        })
        .collect();
    (users, pois)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn world() -> World {
        gen_world(&WorldConfig {
            n_pois: 20,
            n_users: 30,
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn name_and_location_first() {
        let mut w = world();
        w.pois[0].name = "Pizza Palace".into();
        w.pois[0].location = Cell { x: 3, y: 7 };
        let d = render_poi_description(&w.pois[0]);
        assert_eq!(d.len(), keyword::POI_NAMES.len());
        assert_eq!(d.slices[0].text, "Pizza Palace");
        assert_eq!(d.slices[1].text, "cell (3,7)");
    }

    #[test]
    fn menu_change_only_affects_later_slices() {
        let w = world();
        let mut other = w.pois[0].clone();
        other.menu = vec!["something else".into()];
        let a = render_poi_description(&w.pois[0]);
        let b = render_poi_description(&other);
        assert_eq!(a.slices[..2], b.slices[..2]);
        assert!(a.slices[2..] != b.slices[2..]);
    }

    #[test]
    fn empty_history_sentinel() {
        let mut w = world();
        w.users[0].history.clear();
        let (_, u_a) = render_user_texts(&w, &w.users[0]);
        assert_eq!(u_a.texts(), [NO_HISTORY]);
    }

    #[test]
    fn same_profile_different_history() {
        let mut w = world();
        let donor = w.users.iter().position(|u| !u.history.is_empty()).unwrap();
        let mut twin = w.users[donor].clone();
        twin.history.truncate(twin.history.len() - 1);
        if twin.history.is_empty() {
            twin.history = w.users[donor].history.clone();
            twin.history[0].action = match twin.history[0].action {
                Action::Click => Action::Order,
                Action::Order => Action::Click,
            };
        }
        w.users.push(twin);
        let (pa, aa) = render_user_texts(&w, &w.users[donor]);
        let (pb, ab) = render_user_texts(&w, w.users.last().unwrap());
        assert_eq!(pa, pb);
        assert_ne!(aa, ab);
    }

    #[test]
    fn three_events_three_clauses_in_order() {
        let mut w = world();
        let pick = w.users.iter().position(|u| u.history.len() >= 3).unwrap();
        w.users[pick].history.truncate(3);
        let (_, u_a) = render_user_texts(&w, &w.users[pick]);
        let text = &u_a.slices[0].text;
        let clauses: Vec<&str> = text.split("; ").collect();
        assert_eq!(clauses.len(), 4, "3 clauses plus stats: {text}");
        for (clause, e) in clauses.iter().zip(&w.users[pick].history) {
            assert!(clause.contains(CUISINES[w.poi(e.poi_id).cuisine].tag));
            assert!(clause.contains(TIMESLOTS[e.context.timeslot]));
        }
    }

    #[test]
    fn entity_text_concatenation_preserves_order() {
        let w = world();
        let (users, pois) = entity_texts(&w);
        for u in &users {
            assert_eq!(u.u.slices, [u.u_p.slices.clone(), u.u_a.slices.clone()].concat());
        }
        for p in &pois {
            assert_eq!(p.p.slices, [p.p_d.slices.clone(), p.p_b.slices.clone()].concat());
            assert_eq!(p.p.len(), 6);
        }
    }
}
