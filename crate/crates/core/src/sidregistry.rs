//! Semantic IDs: rendering, parsing, collision suffixes and statistics.
//!
//! A semantic ID renders as one `<tag_index>` token per codebook layer,
//! tags `a`, `b`, `c`, … in layer order, e.g. `<a_15><b_2><c_9>`. POIs that
//! share a base tuple get one extra token with the next tag, numbered in
//! lexical `poi_id` order: `<a_15><b_2><c_9><d_0>`, `<a_15><b_2><c_9><d_1>`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use regex::Regex;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const TAGS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

/// Largest layer count that leaves a tag free for the suffix token.
pub const MAX_LAYERS: usize = TAGS.len() - 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId {
    pub indices: Vec<usize>,
    pub suffix: Option<usize>,
}

impl SemanticId {
    pub fn new(indices: Vec<usize>, suffix: Option<usize>) -> Self {
        Self { indices, suffix }
    }

    pub fn num_layers(&self) -> usize {
        self.indices.len()
    }

    /// The same ID without its disambiguation token.
    pub fn base(&self) -> SemanticId {
        SemanticId::new(self.indices.clone(), None)
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Renders the first `depth` layer tokens.
    pub fn render_prefix(&self, depth: usize) -> String {
        let mut out = String::new();
        for (l, &i) in self.indices.iter().take(depth).enumerate() {
            push_token(&mut out, l, i);
        }
        out
    }

    /// Strict parse of a rendered ID with `num_layers` layer tokens and an
    /// optional suffix token.
    pub fn parse(s: &str, num_layers: usize) -> Result<Self> {
        let bad = || Error::MalformedSid(s.to_string());
        if num_layers == 0 || num_layers > MAX_LAYERS {
            return Err(bad());
        }
        let mut rest = s;
        let mut tokens = Vec::new();
        while !rest.is_empty() {
            let body = rest.strip_prefix('<').ok_or_else(bad)?;
            let end = body.find('>').ok_or_else(bad)?;
            let (tag, idx) = body[..end].split_once('_').ok_or_else(bad)?;
            let tag = match tag.as_bytes() {
                [t] => *t,
                _ => return Err(bad()),
            };
            if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) || (idx.len() > 1 && idx.starts_with('0')) {
                return Err(bad());
            }
            let idx: usize = idx.parse().map_err(|_| bad())?;
            tokens.push((tag, idx));
            rest = &body[end + 1..];
        }
        if tokens.len() != num_layers && tokens.len() != num_layers + 1 {
            return Err(bad());
        }
        for (pos, &(tag, _)) in tokens.iter().enumerate() {
            if tag != TAGS[pos] {
                return Err(bad());
            }
        }
        let suffix = (tokens.len() == num_layers + 1).then(|| tokens[num_layers].1);
        Ok(SemanticId::new(
            tokens[..num_layers].iter().map(|&(_, i)| i).collect(),
            suffix,
        ))
    }
}

fn push_token(out: &mut String, layer: usize, index: usize) {
    use std::fmt::Write as _;
    let _ = write!(out, "<{}_{}>", TAGS[layer] as char, index);
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = self.render_prefix(self.indices.len());
        if let Some(s) = self.suffix {
            push_token(&mut out, self.indices.len(), s);
        }
        f.write_str(&out)
    }
}

/// Finds the first SID-shaped run of tokens in free text, tolerating
/// whitespace between tokens. Used to read generated model output.
#[derive(Debug, Clone)]
pub struct SidScanner {
    pattern: Regex,
    num_layers: usize,
}

impl SidScanner {
    pub fn new(num_layers: usize) -> Result<Self> {
        if num_layers == 0 || num_layers > MAX_LAYERS {
            return Err(Error::Config(format!("unsupported layer count {num_layers}")));
        }
        let mut pat = String::new();
        for l in 0..num_layers {
            if l > 0 {
                pat.push_str(r"\s*");
            }
            pat.push_str(&format!(r"<{}_(0|[1-9]\d*)>", TAGS[l] as char));
        }
        pat.push_str(&format!(r"(?:\s*<{}_(0|[1-9]\d*)>)?", TAGS[num_layers] as char));
        let pattern = Regex::new(&pat).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { pattern, num_layers })
    }

    pub fn find(&self, text: &str) -> Option<SemanticId> {
        let caps = self.pattern.captures(text)?;
        let indices = (1..=self.num_layers)
            .map(|g| caps[g].parse().ok())
            .collect::<Option<Vec<usize>>>()?;
        let suffix = match caps.get(self.num_layers + 1) {
            Some(m) => Some(m.as_str().parse().ok()?),
            None => None,
        };
        Some(SemanticId::new(indices, suffix))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SidStats {
    pub pois: usize,
    pub distinct_tuples: usize,
    /// Base tuples used by exactly one POI.
    pub unique: usize,
    /// POIs whose base tuple is shared with another POI.
    pub colliding_pois: usize,
    /// Base tuples shared by two or more POIs.
    pub colliding_tuples: usize,
    pub max_group: usize,
}

impl SidStats {
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (k, v) in [
            ("pois", self.pois),
            ("distinct_tuples", self.distinct_tuples),
            ("unique", self.unique),
            ("colliding_pois", self.colliding_pois),
            ("colliding_tuples", self.colliding_tuples),
            ("max_group", self.max_group),
        ] {
            writeln!(w, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Counts over the sizes of base-tuple groups.
pub fn stats_from_group_sizes(sizes: impl IntoIterator<Item = usize>) -> SidStats {
    let mut s = SidStats::default();
    for n in sizes {
        s.pois += n;
        s.distinct_tuples += 1;
        s.max_group = s.max_group.max(n);
        if n == 1 {
            s.unique += 1;
        } else {
            s.colliding_pois += n;
            s.colliding_tuples += 1;
        }
    }
    s
}

/// Bidirectional POI ↔ semantic ID map.
#[derive(Debug, Clone, PartialEq)]
pub struct SidRegistry {
    num_layers: usize,
    codebook_size: usize,
    by_poi: BTreeMap<String, SemanticId>,
    by_sid: HashMap<String, String>,
    stats: SidStats,
}

/// Groups POIs by base tuple and suffixes every group of two or more.
pub fn assign_sids<I>(tuples: I, codebook_size: usize, num_layers: usize) -> Result<SidRegistry>
where
    I: IntoIterator<Item = (String, Vec<usize>)>,
{
    if num_layers == 0 || num_layers > MAX_LAYERS {
        return Err(Error::Config(format!("unsupported layer count {num_layers}")));
    }
    let mut groups: BTreeMap<Vec<usize>, Vec<String>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for (poi, tuple) in tuples {
        if tuple.len() != num_layers {
            return Err(Error::Invalid(format!(
                "poi `{poi}` has a {}-layer tuple, expected {num_layers}",
                tuple.len()
            )));
        }
        if let Some(&bad) = tuple.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::Invalid(format!(
                "poi `{poi}` uses codeword {bad}, codebook size is {codebook_size}"
            )));
        }
        if !seen.insert(poi.clone()) {
            return Err(Error::DuplicatePoi(poi));
        }
        groups.entry(tuple).or_default().push(poi);
    }
    let stats = stats_from_group_sizes(groups.values().map(Vec::len));
    let mut by_poi = BTreeMap::new();
    for (tuple, mut pois) in groups {
        pois.sort();
        let shared = pois.len() > 1;
        for (j, poi) in pois.into_iter().enumerate() {
            by_poi.insert(poi, SemanticId::new(tuple.clone(), shared.then_some(j)));
        }
    }
    SidRegistry::from_map(by_poi, codebook_size, num_layers, Some(stats))
}

impl SidRegistry {
    fn from_map(
        by_poi: BTreeMap<String, SemanticId>,
        codebook_size: usize,
        num_layers: usize,
        stats: Option<SidStats>,
    ) -> Result<Self> {
        let mut by_sid = HashMap::with_capacity(by_poi.len());
        for (poi, sid) in &by_poi {
            if let Some(other) = by_sid.insert(sid.render(), poi.clone()) {
                return Err(Error::Invalid(format!(
                    "pois `{other}` and `{poi}` share semantic id {sid}"
                )));
            }
        }
        let stats = stats.unwrap_or_else(|| {
            let mut sizes: HashMap<&[usize], usize> = HashMap::new();
            for sid in by_poi.values() {
                *sizes.entry(sid.indices.as_slice()).or_default() += 1;
            }
            stats_from_group_sizes(sizes.into_values())
        });
        Ok(Self {
            num_layers,
            codebook_size,
            by_poi,
            by_sid,
            stats,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.by_poi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_poi.is_empty()
    }

    pub fn stats(&self) -> SidStats {
        self.stats
    }

    pub fn sid_of(&self, poi: &str) -> Option<&SemanticId> {
        self.by_poi.get(poi)
    }

    /// The SID of `poi`, or an error naming it.
    pub fn require(&self, poi: &str) -> Result<&SemanticId> {
        self.sid_of(poi).ok_or_else(|| Error::Unknown {
            kind: "poi (no semantic id)",
            key: poi.to_string(),
        })
    }

    pub fn poi_of(&self, rendered: &str) -> Option<&str> {
        self.by_sid.get(rendered).map(String::as_str)
    }

    /// `(poi_id, sid)` in lexical `poi_id` order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &SemanticId)> {
        self.by_poi.iter().map(|(p, s)| (p.as_str(), s))
    }

    /// Numeric IDs for the ablation without semantic IDs: each POI's
    /// position in lexical `poi_id` order.
    pub fn numeric_ids(&self) -> HashMap<String, usize> {
        self.by_poi.keys().enumerate().map(|(i, p)| (p.clone(), i)).collect()
    }

    /// One `poi_id<TAB>sid` line per POI, lexical `poi_id` order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (poi, sid) in self.iter() {
            writeln!(w, "{poi}\t{sid}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead, codebook_size: usize, num_layers: usize) -> Result<Self> {
        let mut by_poi = BTreeMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (poi, sid) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("registry line {}: missing tab", n + 1)))?;
            let sid = SemanticId::parse(sid, num_layers)?;
            if sid.indices.iter().any(|&i| i >= codebook_size) {
                return Err(Error::Parse(format!("registry line {}: index out of range", n + 1)));
            }
            if by_poi.insert(poi.to_string(), sid).is_some() {
                return Err(Error::DuplicatePoi(poi.to_string()));
            }
        }
        Self::from_map(by_poi, codebook_size, num_layers, None)
    }

    /// Hex SHA-256 of the registry file contents.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

pub fn sid_stats(registry: &SidRegistry) -> SidStats {
    registry.stats()
}

/// Number of equal leading layer indices; the suffix is ignored.
pub fn shared_prefix_len(a: &SemanticId, b: &SemanticId) -> Result<usize> {
    if a.num_layers() != b.num_layers() {
        return Err(Error::Invalid(format!(
            "cannot compare {}-layer and {}-layer semantic ids",
            a.num_layers(),
            b.num_layers()
        )));
    }
    Ok(a.indices.iter().zip(&b.indices).take_while(|(x, y)| x == y).count())
}

/// Category histogram of the POIs under one rendered prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixProfile {
    pub prefix: String,
    pub counts: BTreeMap<String, usize>,
}

impl PrefixProfile {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Most frequent category; ties go to the lexically smaller name.
    pub fn modal(&self) -> Option<(&str, usize)> {
        let mut best: Option<(&str, usize)> = None;
        for (c, &n) in &self.counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((c, n));
            }
        }
        best
    }
}

/// One profile per distinct prefix of length `depth`, in prefix order.
/// POIs missing from `categories` are an error.
pub fn prefix_category_profile(
    registry: &SidRegistry,
    categories: &HashMap<String, String>,
    depth: usize,
) -> Result<Vec<PrefixProfile>> {
    if depth > registry.num_layers() {
        return Err(Error::Invalid(format!(
            "prefix depth {depth} exceeds {} layers",
            registry.num_layers()
        )));
    }
    let mut table: BTreeMap<Vec<usize>, BTreeMap<String, usize>> = BTreeMap::new();
    for (poi, sid) in registry.iter() {
        let cat = categories.get(poi).ok_or_else(|| Error::Unknown {
            kind: "poi (no category)",
            key: poi.to_string(),
        })?;
        *table
            .entry(sid.indices[..depth].to_vec())
            .or_default()
            .entry(cat.clone())
            .or_default() += 1;
    }
    Ok(table
        .into_iter()
        .map(|(prefix, counts)| PrefixProfile {
            prefix: SemanticId::new(prefix, None).render_prefix(depth),
            counts,
        })
        .collect())
}

/// CSV with header `prefix,category,count`.
pub fn write_profile_csv(profiles: &[PrefixProfile], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Parse(e.to_string());
    out.write_record(["prefix", "category", "count"]).map_err(io)?;
    for p in profiles {
        for (c, n) in &p.counts {
            out.write_record([p.prefix.as_str(), c.as_str(), &n.to_string()])
                .map_err(io)?;
        }
    }
    out.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reg(pairs: &[(&str, [usize; 3])]) -> SidRegistry {
        assign_sids(pairs.iter().map(|(p, t)| (p.to_string(), t.to_vec())), 32, 3).unwrap()
    }

    #[test]
    fn collision_rendering() {
        let r = reg(&[("p2", [15, 2, 9]), ("p1", [15, 2, 9]), ("p3", [1, 2, 3])]);
        assert_eq!(r.sid_of("p1").unwrap().render(), "<a_15><b_2><c_9><d_0>");
        assert_eq!(r.sid_of("p2").unwrap().render(), "<a_15><b_2><c_9><d_1>");
        assert_eq!(r.sid_of("p3").unwrap().render(), "<a_1><b_2><c_3>");
        assert_eq!(r.poi_of("<a_15><b_2><c_9><d_1>"), Some("p2"));
    }

    #[test]
    fn stats_small_cases() {
        let r = reg(&[
            ("a", [1, 1, 1]),
            ("b", [1, 1, 1]),
            ("c", [1, 1, 1]),
            ("d", [2, 0, 0]),
            ("e", [3, 0, 0]),
        ]);
        let s = r.stats();
        assert_eq!((s.unique, s.colliding_pois, s.colliding_tuples, s.max_group), (2, 3, 1, 3));
        let empty = assign_sids(Vec::<(String, Vec<usize>)>::new(), 4, 3).unwrap();
        assert_eq!(empty.stats(), SidStats::default());
    }

    #[test]
    fn input_validation() {
        let dup = vec![("x".to_string(), vec![0, 0]), ("x".to_string(), vec![1, 1])];
        assert!(matches!(assign_sids(dup, 4, 2), Err(Error::DuplicatePoi(_))));
        assert!(assign_sids(vec![("x".to_string(), vec![4, 0])], 4, 2).is_err());
        assert!(assign_sids(vec![("x".to_string(), vec![0])], 4, 2).is_err());
    }

    #[test]
    fn prefix_lengths() {
        let p = |s| SemanticId::parse(s, 3).unwrap();
        assert_eq!(shared_prefix_len(&p("<a_15><b_2><c_1>"), &p("<a_15><b_2><c_9>")).unwrap(), 2);
        assert_eq!(shared_prefix_len(&p("<a_15><b_2><c_1>"), &p("<a_15><b_12><c_2>")).unwrap(), 1);
        assert_eq!(shared_prefix_len(&p("<a_1><b_2><c_3><d_0>"), &p("<a_1><b_2><c_3><d_1>")).unwrap(), 3);
        let two = SemanticId::new(vec![1, 2], None);
        assert!(shared_prefix_len(&two, &p("<a_1><b_2><c_3>")).is_err());
    }

    #[test]
    fn parser_rejects_malformed() {
        for s in ["", "<a_1><b_2>", "<a_1><c_2><d_3>", "<a_01><b_2><c_3>", "<a_1><b_2><c_3><e_0>", "<a_1> <b_2><c_3>", "<a_x><b_2><c_3>", "<a_1><b_2><c_3><d_0><e_1>"] {
            assert!(SemanticId::parse(s, 3).is_err(), "{s}");
        }
    }

    #[test]
    fn scanner_is_lenient() {
        let sc = SidScanner::new(3).unwrap();
        let want = SemanticId::new(vec![3, 20, 1], Some(4));
        assert_eq!(sc.find("  answer: <a_3> <b_20>\t<c_1> <d_4>.\n"), Some(want));
        assert_eq!(sc.find("<a_3><b_20><c_1>"), Some(SemanticId::new(vec![3, 20, 1], None)));
        assert_eq!(sc.find("<a_3><b_20>"), None);
        assert_eq!(sc.find(""), None);
    }

    #[test]
    fn profile_rows_and_csv() {
        let r = reg(&[("a", [1, 1, 1]), ("b", [1, 2, 1]), ("c", [2, 0, 0])]);
        let cats: HashMap<String, String> = [("a", "Bar"), ("b", "Cafe"), ("c", "Bar")]
            .iter()
            .map(|(p, c)| (p.to_string(), c.to_string()))
            .collect();
        let prof = prefix_category_profile(&r, &cats, 1).unwrap();
        assert_eq!(prof.len(), 2);
        assert_eq!(prof[0].prefix, "<a_1>");
        assert_eq!(prof[0].modal(), Some(("Bar", 1)));
        let mut buf = Vec::new();
        write_profile_csv(&prof, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "prefix,category,count\n<a_1>,Bar,1\n<a_1>,Cafe,1\n<a_2>,Bar,1\n"
        );
        assert!(prefix_category_profile(&r, &cats, 4).is_err());
    }

    #[test]
    fn registry_file_round_trip() {
        let r = reg(&[("p2", [15, 2, 9]), ("p1", [15, 2, 9]), ("p3", [1, 2, 3])]);
        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        let back = SidRegistry::read_from(buf.as_slice(), 32, 3).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.content_hash(), r.content_hash());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(idx in prop::collection::vec(0usize..1000, 1..6), suffix in prop::option::of(0usize..50)) {
            let sid = SemanticId::new(idx.clone(), suffix);
            prop_assert_eq!(SemanticId::parse(&sid.render(), idx.len()).unwrap(), sid);
        }

        #[test]
        fn registry_is_bijective(tuples in prop::collection::vec(prop::collection::vec(0usize..4, 3), 0..300)) {
            let input: Vec<(String, Vec<usize>)> = tuples.iter().enumerate().map(|(i, t)| (format!("poi{i}"), t.clone())).collect();
            let r = assign_sids(input.clone(), 4, 3).unwrap();
            prop_assert_eq!(r.len(), input.len());
            for (poi, tuple) in &input {
                let sid = r.sid_of(poi).unwrap();
                prop_assert_eq!(&sid.indices, tuple);
                prop_assert_eq!(r.poi_of(&sid.render()), Some(poi.as_str()));
            }
            let mut groups: HashMap<&Vec<usize>, usize> = HashMap::new();
            for t in &tuples {
                *groups.entry(t).or_default() += 1;
            }
            let s = r.stats();
            prop_assert_eq!(s.unique, groups.values().filter(|&&n| n == 1).count());
            prop_assert_eq!(s.colliding_pois, groups.values().filter(|&&n| n > 1).sum::<usize>());
            prop_assert_eq!(s.unique + s.colliding_pois, input.len());
        }
    }
}
