//! Open Location Code ("Plus Code") grid encoding and region vocabularies.
//!
//! Only full-length, unshortened codes of 2 to 10 significant digits are
//! produced. Digits are derived with integer arithmetic in units of the
//! finest OLC grid so that cell boundaries are exact.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const CODE_ALPHABET: &[u8; 20] = b"23456789CFGHJMPQRVWX";
pub const SEPARATOR: char = '+';
pub const PADDING: char = '0';
pub const DEFAULT_PRECISION: usize = 8;

const SEPARATOR_POSITION: usize = 8;
const PAIR_CODE_LENGTH: usize = 10;
const BASE: i64 = 20;
// Units per degree at 10 digits; 20^3.
const PAIR_PRECISION: i64 = 8000;
// Finest OLC grid (15 digits), used only to reproduce the reference rounding.
const FINAL_LAT_PRECISION: i64 = PAIR_PRECISION * 3125;
const FINAL_LNG_PRECISION: i64 = PAIR_PRECISION * 1024;
const GRID_LAT_DIVISOR: i64 = 3125;
const GRID_LNG_DIVISOR: i64 = 1024;

/// A full Plus Code string together with its number of significant digits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionCode {
    pub code: String,
    pub precision: usize,
}

impl fmt::Display for RegionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code)
    }
}

/// Bounding box of a decoded cell, in degrees. Lower edges are inclusive,
/// upper edges exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBounds {
    pub lat_lo: f64,
    pub lat_hi: f64,
    pub lon_lo: f64,
    pub lon_hi: f64,
}

impl CellBounds {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_lo && lat < self.lat_hi && lon >= self.lon_lo && lon < self.lon_hi
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.lat_lo + self.lat_hi) / 2.0,
            (self.lon_lo + self.lon_hi) / 2.0,
        )
    }
}

fn check_precision(precision: usize) -> Result<()> {
    match precision {
        2 | 4 | 6 | 8 | 10 => Ok(()),
        p => Err(Error::InvalidPrecision(p)),
    }
}

/// Cell height and width in degrees for a code of `precision` digits.
pub fn cell_size(precision: usize) -> Result<f64> {
    check_precision(precision)?;
    Ok(20.0 / 20f64.powi(precision as i32 / 2 - 1))
}

fn clip_latitude(lat: f64) -> f64 {
    lat.clamp(-90.0, 90.0)
}

fn normalize_longitude(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

// Python's `int(round(x, 6))` for the non-negative magnitudes used here.
fn to_units(value: f64) -> i64 {
    ((value * 1e6).round() / 1e6).floor() as i64
}

/// Encodes a coordinate into a Plus Code with `precision` significant digits.
pub fn encode_plus_code(lat: f64, lon: f64, precision: usize) -> Result<RegionCode> {
    check_precision(precision)?;
    if !lat.is_finite() || !lon.is_finite() {
        return Err(Error::Invalid(format!("non-finite coordinate ({lat}, {lon})")));
    }
    let mut lat = clip_latitude(lat);
    let lon = normalize_longitude(lon);
    if lat == 90.0 {
        lat -= cell_size(precision)?;
    }

    let lat_units = to_units((lat + 90.0) * FINAL_LAT_PRECISION as f64) / GRID_LAT_DIVISOR;
    let lng_units = to_units((lon + 180.0) * FINAL_LNG_PRECISION as f64) / GRID_LNG_DIVISOR;

    let mut digits = [0u8; PAIR_CODE_LENGTH];
    let (mut lat_v, mut lng_v) = (lat_units, lng_units);
    for pair in (0..PAIR_CODE_LENGTH / 2).rev() {
        digits[pair * 2] = CODE_ALPHABET[(lat_v % BASE) as usize];
        digits[pair * 2 + 1] = CODE_ALPHABET[(lng_v % BASE) as usize];
        lat_v /= BASE;
        lng_v /= BASE;
    }

    let mut code = String::with_capacity(SEPARATOR_POSITION + 3);
    for (i, &d) in digits.iter().enumerate().take(precision) {
        if i == SEPARATOR_POSITION {
            code.push(SEPARATOR);
        }
        code.push(d as char);
    }
    for _ in precision..SEPARATOR_POSITION {
        code.push(PADDING);
    }
    if precision <= SEPARATOR_POSITION {
        code.push(SEPARATOR);
    }
    Ok(RegionCode { code, precision })
}

fn digit_value(c: char) -> Option<i64> {
    let upper = c.to_ascii_uppercase() as u8;
    CODE_ALPHABET.iter().position(|&a| a == upper).map(|p| p as i64)
}

/// Decodes a full Plus Code into the bounding box of its cell.
pub fn decode_cell(code: &str) -> Result<CellBounds> {
    let invalid = || Error::InvalidCode(code.to_string());
    let sep = code.find(SEPARATOR).ok_or_else(invalid)?;
    if sep != SEPARATOR_POSITION || code[sep + 1..].contains(SEPARATOR) {
        return Err(invalid());
    }
    let mut significant: Vec<i64> = Vec::with_capacity(PAIR_CODE_LENGTH);
    let mut padding_seen = false;
    for c in code.chars().filter(|&c| c != SEPARATOR) {
        if c == PADDING {
            padding_seen = true;
            continue;
        }
        if padding_seen {
            return Err(invalid());
        }
        significant.push(digit_value(c).ok_or_else(invalid)?);
    }
    let precision = significant.len();
    if check_precision(precision).is_err() {
        return Err(invalid());
    }
    if padding_seen && code.len() != SEPARATOR_POSITION + 1 {
        return Err(invalid());
    }
    let (mut lat_v, mut lng_v) = (0i64, 0i64);
    for pair in significant.chunks(2) {
        lat_v = lat_v * BASE + pair[0];
        lng_v = lng_v * BASE + pair[1];
    }
    // Scale to the 10-digit unit grid.
    let missing_pairs = (PAIR_CODE_LENGTH - precision) / 2;
    let scale = BASE.pow(missing_pairs as u32);
    let lat_lo = (lat_v * scale) as f64 / PAIR_PRECISION as f64 - 90.0;
    let lat_hi = ((lat_v + 1) * scale) as f64 / PAIR_PRECISION as f64 - 90.0;
    let lon_lo = (lng_v * scale) as f64 / PAIR_PRECISION as f64 - 180.0;
    let lon_hi = ((lng_v + 1) * scale) as f64 / PAIR_PRECISION as f64 - 180.0;
    if lat_lo >= 90.0 || lon_lo >= 180.0 {
        return Err(invalid());
    }
    Ok(CellBounds {
        lat_lo,
        lat_hi,
        lon_lo,
        lon_hi,
    })
}

/// Dense integer ids over the distinct region codes of the training POIs.
///
/// Codes are sorted lexicographically and numbered `0..len()`; id `len()`
/// is reserved for unseen regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionVocab {
    precision: usize,
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl RegionVocab {
    pub fn from_codes<I, S>(codes: I, precision: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        check_precision(precision)?;
        let codes: Vec<String> = codes
            .into_iter()
            .map(Into::into)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Ok(Self {
            precision,
            codes,
            index,
        })
    }

    pub fn precision(&self) -> usize {
        self.precision
    }

    /// Number of known regions, excluding the unknown bucket.
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn id_of(&self, code: &str) -> usize {
        self.index.get(code).copied().unwrap_or(self.unk_id())
    }

    pub fn id_of_coordinate(&self, lat: f64, lon: f64) -> Result<usize> {
        Ok(self.id_of(&encode_plus_code(lat, lon, self.precision)?.code))
    }

    /// One code per line, line number equals id.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for code in &self.codes {
            writeln!(w, "{code}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead, precision: usize) -> Result<Self> {
        let mut codes = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            decode_cell(line)?;
            codes.push(line.to_string());
        }
        Self::from_codes(codes, precision)
    }
}

/// Builds the region vocabulary over the given POI coordinates.
pub fn build_region_vocab<'a, I>(coordinates: I, precision: usize) -> Result<RegionVocab>
where
    I: IntoIterator<Item = (f64, f64)> + 'a,
{
    let codes = coordinates
        .into_iter()
        .map(|(lat, lon)| encode_plus_code(lat, lon, precision).map(|c| c.code))
        .collect::<Result<Vec<_>>>()?;
    RegionVocab::from_codes(codes, precision)
}
