//! Seeded synthetic data: check-in logs for pipeline fixtures and clustered
//! feature matrices with known cluster labels.

use std::collections::BTreeSet;
use std::io::Write;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::features::{FeatureMatrix, PoiFeatureVector, SegmentLayout, Span, HOURS_PER_DAY};
use crate::ingest::CheckIn;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub pois: usize,
    pub clusters: usize,
    pub regions: usize,
    pub users: usize,
    /// Visitor pool per cluster.
    pub pool: usize,
    pub top_k: usize,
    /// Probability that any one attribute ignores the cluster profile.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            pois: 2000,
            clusters: 40,
            regions: 24,
            users: 400,
            pool: 25,
            top_k: 10,
            noise: 0.2,
            seed: 0,
        }
    }
}

/// A feature matrix whose rows come from known clusters. Cluster `c` owns
/// category `c mod categories`, so categories align with clusters.
#[derive(Debug, Clone)]
pub struct ClusteredCorpus {
    pub matrix: FeatureMatrix,
    /// Cluster of each row, in row order.
    pub labels: Vec<usize>,
    /// Category name of each row, in row order.
    pub categories: Vec<String>,
}

struct Profile {
    region: usize,
    hours: Vec<usize>,
    visitors: Vec<usize>,
}

pub fn clustered_features(spec: &ClusterSpec) -> ClusteredCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let categories = spec.clusters;
    let layout = SegmentLayout {
        category: Span {
            offset: 0,
            len: categories,
        },
        region: Span {
            offset: categories,
            len: spec.regions + 1,
        },
        time: Span {
            offset: categories + spec.regions + 1,
            len: HOURS_PER_DAY,
        },
        visitors: Span {
            offset: categories + spec.regions + 1 + HOURS_PER_DAY,
            len: spec.users,
        },
    };
    let all_hours: Vec<usize> = (0..HOURS_PER_DAY).collect();
    let all_users: Vec<usize> = (0..spec.users).collect();
    let profiles: Vec<Profile> = (0..spec.clusters)
        .map(|_| Profile {
            region: rng.random_range(0..spec.regions),
            hours: all_hours.choose_multiple(&mut rng, spec.top_k).copied().collect(),
            visitors: all_users.choose_multiple(&mut rng, spec.pool).copied().collect(),
        })
        .collect();

    let mut rows = Vec::with_capacity(spec.pois);
    let mut labels = Vec::with_capacity(spec.pois);
    let mut names = Vec::with_capacity(spec.pois);
    for i in 0..spec.pois {
        let c = i % spec.clusters;
        let p = &profiles[c];
        let mut values = vec![0u8; layout.width()];
        let category = c % categories;
        values[layout.category.offset + category] = 1;
        let region = if rng.random_bool(spec.noise) {
            rng.random_range(0..spec.regions)
        } else {
            p.region
        };
        values[layout.region.offset + region] = 1;
        let mut hours = BTreeSet::new();
        for &h in &p.hours {
            hours.insert(if rng.random_bool(spec.noise) {
                rng.random_range(0..HOURS_PER_DAY)
            } else {
                h
            });
        }
        for h in hours {
            values[layout.time.offset + h] = 1;
        }
        let mut visitors = BTreeSet::new();
        while visitors.len() < spec.top_k.min(spec.users) {
            visitors.insert(if rng.random_bool(spec.noise) {
                rng.random_range(0..spec.users)
            } else {
                *p.visitors.choose(&mut rng).expect("non-empty pool")
            });
        }
        for u in visitors {
            values[layout.visitors.offset + u] = 1;
        }
        rows.push(PoiFeatureVector {
            poi_id: format!("poi_{i:05}"),
            values,
        });
        labels.push(c);
        names.push(format!("category_{category:02}"));
    }
    ClusteredCorpus {
        matrix: FeatureMatrix { layout, rows },
        labels,
        categories: names,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckinSpec {
    pub pois: usize,
    pub users: usize,
    pub categories: usize,
    pub neighborhoods: usize,
    pub checkins_per_user: usize,
    /// Chance that a check-in revisits a POI from the user's own history.
    pub revisit: f64,
    pub seed: u64,
}

impl Default for CheckinSpec {
    fn default() -> Self {
        Self {
            pois: 200,
            users: 120,
            categories: 12,
            neighborhoods: 6,
            checkins_per_user: 45,
            revisit: 0.3,
            seed: 0,
        }
    }
}

struct SynthPoi {
    id: String,
    category: usize,
    neighborhood: usize,
    lat: f64,
    lon: f64,
    popularity: f64,
}

/// Check-in log around a city-sized box, sorted by user then time.
///
/// Users favour their home neighbourhood and a few categories; each
/// category has its own busy hours.
pub fn checkins(spec: &CheckinSpec) -> Vec<CheckIn> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spread = Normal::new(0.0, 0.004).expect("valid sigma");
    let centers: Vec<(f64, f64)> = (0..spec.neighborhoods)
        .map(|_| (rng.random_range(40.68..40.80), rng.random_range(-74.02..-73.90)))
        .collect();
    let peak_hours: Vec<usize> = (0..spec.categories).map(|_| rng.random_range(7..23)).collect();
    let pois: Vec<SynthPoi> = (0..spec.pois)
        .map(|i| {
            let neighborhood = rng.random_range(0..spec.neighborhoods);
            let (clat, clon) = centers[neighborhood];
            SynthPoi {
                id: format!("venue_{i:04}"),
                category: rng.random_range(0..spec.categories),
                neighborhood,
                lat: clat + spread.sample(&mut rng),
                lon: clon + spread.sample(&mut rng),
                popularity: 1.0 / (1.0 + (i % 37) as f64).sqrt(),
            }
        })
        .collect();

    let start = NaiveDate::from_ymd_opt(2012, 4, 3)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start date");
    let mut out = Vec::with_capacity(spec.users * spec.checkins_per_user);
    for u in 0..spec.users {
        let user = format!("user_{u:04}");
        let home = rng.random_range(0..spec.neighborhoods);
        let favourites: Vec<usize> = (0..3).map(|_| rng.random_range(0..spec.categories)).collect();
        let weights: Vec<f64> = pois
            .iter()
            .map(|p| {
                let mut w = p.popularity;
                if p.neighborhood == home {
                    w *= 3.0;
                }
                if favourites.contains(&p.category) {
                    w *= 4.0;
                }
                w
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut visited: Vec<usize> = Vec::new();
        let mut day = rng.random_range(0..10i64);
        let mut last: Option<NaiveDateTime> = None;
        for _ in 0..spec.checkins_per_user {
            let poi = if !visited.is_empty() && rng.random_bool(spec.revisit) {
                *visited.choose(&mut rng).expect("non-empty")
            } else {
                let mut target = rng.random_range(0.0..total);
                let mut pick = pois.len() - 1;
                for (i, &w) in weights.iter().enumerate() {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            };
            visited.push(poi);
            let p = &pois[poi];
            let hour = (peak_hours[p.category] as i64 + rng.random_range(-2..=2)).clamp(0, 23);
            let mut t = start
                + Duration::days(day)
                + Duration::hours(hour)
                + Duration::minutes(rng.random_range(0..60))
                + Duration::seconds(rng.random_range(0..60));
            if let Some(prev) = last {
                if t <= prev {
                    day += 1;
                    t += Duration::days(1);
                }
            }
            day += rng.random_range(0..3i64);
            last = Some(t);
            out.push(CheckIn {
                user_id: user.clone(),
                poi_id: p.id.clone(),
                timestamp: t,
                category: format!("Category {:02}", p.category),
                latitude: p.lat,
                longitude: p.lon,
            });
        }
    }
    out
}

/// Tab-separated rows in the default ingest layout:
/// user, poi, `%Y-%m-%d %H:%M:%S`, category, latitude, longitude.
pub fn write_checkins_tsv(checkins: &[CheckIn], mut w: impl Write) -> std::io::Result<()> {
    for c in checkins {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            c.user_id,
            c.poi_id,
            c.timestamp.format("%Y-%m-%d %H:%M:%S"),
            c.category,
            c.latitude,
            c.longitude
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_checkins, FormatSpec};

    #[test]
    fn clustered_corpus_shape_and_determinism() {
        let spec = ClusterSpec {
            pois: 120,
            clusters: 6,
            ..ClusterSpec::default()
        };
        let a = clustered_features(&spec);
        let b = clustered_features(&spec);
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.matrix.len(), 120);
        assert_eq!(a.labels.iter().filter(|&&c| c == 5).count(), 20);
        for row in &a.matrix.rows {
            let visitors = row.values[a.matrix.layout.visitors.range()].iter().filter(|&&v| v == 1).count();
            assert_eq!(visitors, 10);
            assert_eq!(row.values[a.matrix.layout.category.range()].iter().filter(|&&v| v == 1).count(), 1);
        }
    }

    #[test]
    fn checkins_parse_back() {
        let spec = CheckinSpec {
            users: 5,
            checkins_per_user: 20,
            ..CheckinSpec::default()
        };
        let data = checkins(&spec);
        assert_eq!(data.len(), 100);
        for pair in data.windows(2) {
            if pair[0].user_id == pair[1].user_id {
                assert!(pair[0].timestamp < pair[1].timestamp);
            }
        }
        let mut buf = Vec::new();
        write_checkins_tsv(&data, &mut buf).unwrap();
        let parsed = parse_checkins(buf.as_slice(), &FormatSpec::default()).unwrap();
        assert!(parsed.rejects.is_empty());
        assert_eq!(parsed.checkins.len(), 100);
        assert_eq!(parsed.checkins[0].timestamp, data[0].timestamp);
    }
}
