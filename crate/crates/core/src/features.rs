//! Multi-hot POI feature vectors: category, region, busy hours and
//! frequent visitors, concatenated in that order.
//!
//! # Feature matrix file
//!
//! ```text
//! # poi-features v1
//! layout category=0+209 region=209+41 time=250+24 visitors=274+1083
//! rows 5135 cols 1357
//! <poi_id>\t<ascending comma-separated indices of the 1 entries>
//! ...
//! ```
//!
//! Spans are written as `offset+length`. Rows appear in lexical `poi_id`
//! order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geocode::RegionVocab;
use crate::ingest::PoiRecord;

pub const HOURS_PER_DAY: usize = 24;
const FILE_MAGIC: &str = "# poi-features v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub category: Span,
    pub region: Span,
    pub time: Span,
    pub visitors: Span,
}

impl SegmentLayout {
    pub fn width(&self) -> usize {
        self.visitors.end()
    }

    pub fn spans(&self) -> [(&'static str, Span); 4] {
        [
            ("category", self.category),
            ("region", self.region),
            ("time", self.time),
            ("visitors", self.visitors),
        ]
    }
}

/// Vocabularies and selection sizes that define the feature space.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    pub categories: Vec<String>,
    pub regions: RegionVocab,
    pub users: Vec<String>,
    pub top_k_slots: usize,
    pub top_k_visitors: usize,
    user_index: HashMap<String, usize>,
}

impl FeatureSpace {
    pub fn new(
        categories: Vec<String>,
        regions: RegionVocab,
        users: Vec<String>,
        top_k_slots: usize,
        top_k_visitors: usize,
    ) -> Result<Self> {
        if categories.is_empty() || users.is_empty() {
            return Err(Error::Config(
                "feature space needs non-empty category and user vocabularies".into(),
            ));
        }
        if top_k_slots == 0 || top_k_visitors == 0 {
            return Err(Error::Config("top-k selection sizes must be positive".into()));
        }
        let user_index = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        Ok(Self {
            categories,
            regions,
            users,
            top_k_slots,
            top_k_visitors,
            user_index,
        })
    }

    pub fn layout(&self) -> SegmentLayout {
        let category = Span {
            offset: 0,
            len: self.categories.len(),
        };
        let region = Span {
            offset: category.end(),
            len: self.regions.len() + 1,
        };
        let time = Span {
            offset: region.end(),
            len: HOURS_PER_DAY,
        };
        let visitors = Span {
            offset: time.end(),
            len: self.users.len(),
        };
        SegmentLayout {
            category,
            region,
            time,
            visitors,
        }
    }
}

pub fn encode_category(poi: &PoiRecord, space: &FeatureSpace) -> Result<Vec<u8>> {
    if poi.category_id >= space.categories.len() {
        return Err(Error::Unknown {
            kind: "category id",
            key: poi.category_id.to_string(),
        });
    }
    let mut span = vec![0u8; space.categories.len()];
    span[poi.category_id] = 1;
    Ok(span)
}

pub fn encode_region(poi: &PoiRecord, space: &FeatureSpace) -> Result<Vec<u8>> {
    let mut span = vec![0u8; space.regions.len() + 1];
    span[space.regions.id_of_coordinate(poi.latitude, poi.longitude)?] = 1;
    Ok(span)
}

/// Marks the `top_k_slots` busiest hours. Ties go to the earlier hour and
/// hours without visits are never marked.
pub fn encode_time_slots(poi: &PoiRecord, space: &FeatureSpace) -> Result<[u8; HOURS_PER_DAY]> {
    if poi.hour_histogram.iter().all(|&c| c == 0) {
        return Err(Error::Invalid(format!(
            "POI `{}` has an empty hour histogram",
            poi.poi_id
        )));
    }
    let mut hours: Vec<usize> = (0..HOURS_PER_DAY)
        .filter(|&h| poi.hour_histogram[h] > 0)
        .collect();
    hours.sort_by(|&a, &b| poi.hour_histogram[b].cmp(&poi.hour_histogram[a]).then(a.cmp(&b)));
    let mut span = [0u8; HOURS_PER_DAY];
    for h in hours.into_iter().take(space.top_k_slots) {
        span[h] = 1;
    }
    Ok(span)
}

/// Marks the `top_k_visitors` most frequent visitors, ties by user id.
pub fn encode_collaborative(poi: &PoiRecord, space: &FeatureSpace) -> Result<Vec<u8>> {
    let mut visitors: Vec<(&String, u32)> = poi
        .visitor_histogram
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(u, &n)| (u, n))
        .collect();
    visitors.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut span = vec![0u8; space.users.len()];
    for (user, _) in visitors.into_iter().take(space.top_k_visitors) {
        let idx = space.user_index.get(user).ok_or_else(|| Error::Unknown {
            kind: "user",
            key: user.clone(),
        })?;
        span[*idx] = 1;
    }
    Ok(span)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoiFeatureVector {
    pub poi_id: String,
    pub values: Vec<u8>,
}

impl PoiFeatureVector {
    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    pub layout: SegmentLayout,
    pub rows: Vec<PoiFeatureVector>,
}

impl FeatureMatrix {
    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row-major dense copy as `f64`.
    pub fn to_dense(&self) -> Vec<f64> {
        self.rows
            .iter()
            .flat_map(|r| r.values.iter().map(|&v| v as f64))
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{FILE_MAGIC}")?;
        let spans: Vec<String> = self
            .layout
            .spans()
            .iter()
            .map(|(name, s)| format!("{name}={}+{}", s.offset, s.len))
            .collect();
        writeln!(w, "layout {}", spans.join(" "))?;
        writeln!(w, "rows {} cols {}", self.rows.len(), self.width())?;
        for row in &self.rows {
            let idx: Vec<String> = row.active_indices().map(|i| i.to_string()).collect();
            writeln!(w, "{}\t{}", row.poi_id, idx.join(","))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("feature matrix: {msg}"));
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file"))?
                .map_err(|e| Error::Parse(e.to_string()))
        };
        if next()? != FILE_MAGIC {
            return Err(bad("missing header"));
        }
        let layout_line = next()?;
        let mut spans = BTreeMap::new();
        for part in layout_line
            .strip_prefix("layout ")
            .ok_or_else(|| bad("missing layout"))?
            .split_whitespace()
        {
            let (name, span) = part.split_once('=').ok_or_else(|| bad("bad span"))?;
            let (off, len) = span.split_once('+').ok_or_else(|| bad("bad span"))?;
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad span number"));
            spans.insert(
                name.to_string(),
                Span {
                    offset: parse(off)?,
                    len: parse(len)?,
                },
            );
        }
        let get = |name: &str| spans.get(name).copied().ok_or_else(|| bad("incomplete layout"));
        let layout = SegmentLayout {
            category: get("category")?,
            region: get("region")?,
            time: get("time")?,
            visitors: get("visitors")?,
        };
        let dims = next()?;
        let nums: Vec<usize> = dims
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        let [n_rows, n_cols] = nums[..] else {
            return Err(bad("bad dims line"));
        };
        if n_cols != layout.width() {
            return Err(bad("column count disagrees with layout"));
        }
        let mut rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let line = next()?;
            let (poi_id, idx) = line.split_once('\t').ok_or_else(|| bad("bad row"))?;
            let mut values = vec![0u8; n_cols];
            for i in idx.split(',').filter(|s| !s.is_empty()) {
                let i: usize = i.parse().map_err(|_| bad("bad index"))?;
                *values.get_mut(i).ok_or_else(|| bad("index out of range"))? = 1;
            }
            rows.push(PoiFeatureVector {
                poi_id: poi_id.to_string(),
                values,
            });
        }
        Ok(Self { layout, rows })
    }
}

/// Builds one feature row per POI, in lexical `poi_id` order.
pub fn build_feature_matrix<'a, I>(pois: I, space: &FeatureSpace) -> Result<FeatureMatrix>
where
    I: IntoIterator<Item = &'a PoiRecord>,
{
    let layout = space.layout();
    let mut pois: Vec<&PoiRecord> = pois.into_iter().collect();
    pois.sort_by(|a, b| a.poi_id.cmp(&b.poi_id));
    if pois.windows(2).any(|w| w[0].poi_id == w[1].poi_id) {
        return Err(Error::Invalid("duplicate POI in feature input".into()));
    }
    let rows = pois
        .into_iter()
        .map(|poi| {
            let mut values = Vec::with_capacity(layout.width());
            values.extend(encode_category(poi, space)?);
            values.extend(encode_region(poi, space)?);
            values.extend(encode_time_slots(poi, space)?);
            values.extend(encode_collaborative(poi, space)?);
            debug_assert_eq!(values.len(), layout.width());
            Ok(PoiFeatureVector {
                poi_id: poi.poi_id.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix { layout, rows })
}
