//! Hotel catalog ingestion, the attribute schema, and the dense input
//! encodings fed to the amenity and geography projections.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::sessions::SessionCorpus;

/// Width of the geographic input vector: `[lat/90, sin(lon), cos(lon)]`.
pub const GEO_WIDTH: usize = 3;

/// Columns that precede the feature columns in a catalog file.
pub const FIXED_COLUMNS: [&str; 4] = ["hotel_id", "market_id", "latitude", "longitude"];

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Numeric { min: f64, max: f64 },
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: &str, min: f64, max: f64) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Numeric { min, max },
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
            },
        }
    }

    /// Number of slots this feature occupies in the amenity vector.
    pub fn width(&self) -> usize {
        match &self.kind {
            FeatureKind::Numeric { .. } => 1,
            FeatureKind::Categorical { categories } => categories.len(),
        }
    }
}

/// Ordered list of feature descriptors. The order fixes the slot layout of
/// the encoded amenity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
    offsets: Vec<usize>,
    width: usize,
}

#[derive(Deserialize)]
struct RawSchema {
    #[serde(default)]
    feature: Vec<RawFeature>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeature {
    name: String,
    kind: String,
    min: Option<f64>,
    max: Option<f64>,
    categories: Option<Vec<String>>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.is_empty() {
                return Err(Error::Schema("empty feature name".into()));
            }
            if FIXED_COLUMNS.contains(&f.name.as_str()) {
                return Err(Error::Schema(format!("`{}` is a reserved column", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("feature `{}` declared twice", f.name)));
            }
            match &f.kind {
                FeatureKind::Numeric { min, max } => {
                    if !(min.is_finite() && max.is_finite() && max > min) {
                        return Err(Error::Schema(format!(
                            "feature `{}`: bounds must satisfy min < max",
                            f.name
                        )));
                    }
                }
                FeatureKind::Categorical { categories } => {
                    if categories.is_empty() {
                        return Err(Error::Schema(format!(
                            "feature `{}`: empty category list",
                            f.name
                        )));
                    }
                    let distinct: HashSet<_> = categories.iter().collect();
                    if distinct.len() != categories.len() {
                        return Err(Error::Schema(format!(
                            "feature `{}`: duplicate categories",
                            f.name
                        )));
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(features.len());
        let mut width = 0;
        for f in &features {
            offsets.push(width);
            width += f.width();
        }
        Ok(FeatureSchema {
            features,
            offsets,
            width,
        })
    }

    /// Schema shipped with the engine and used by the synthetic generator.
    pub fn reference() -> Self {
        FeatureSchema::new(vec![
            FeatureSpec::numeric("star_rating", 1.0, 5.0),
            FeatureSpec::numeric("user_rating", 1.0, 10.0),
            FeatureSpec::categorical(
                "property_type",
                &["hotel", "apartment", "hostel", "resort", "bnb"],
            ),
            FeatureSpec::categorical("wifi", &["yes", "no"]),
            FeatureSpec::categorical("breakfast", &["yes", "no"]),
            FeatureSpec::categorical("pets", &["yes", "no"]),
            FeatureSpec::numeric("room_count", 1.0, 500.0),
            FeatureSpec::numeric("price_tier", 1.0, 4.0),
        ])
        .expect("reference schema is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawSchema =
            toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let mut features = Vec::with_capacity(raw.feature.len());
        for f in raw.feature {
            let kind = match f.kind.as_str() {
                "numeric" => {
                    let (Some(min), Some(max)) = (f.min, f.max) else {
                        return Err(Error::Schema(format!(
                            "numeric feature `{}` needs min and max",
                            f.name
                        )));
                    };
                    FeatureKind::Numeric { min, max }
                }
                "categorical" => FeatureKind::Categorical {
                    categories: f.categories.ok_or_else(|| {
                        Error::Schema(format!(
                            "categorical feature `{}` needs categories",
                            f.name
                        ))
                    })?,
                },
                other => {
                    return Err(Error::Schema(format!(
                        "feature `{}`: unknown kind `{other}`",
                        f.name
                    )))
                }
            };
            features.push(FeatureSpec { name: f.name, kind });
        }
        FeatureSchema::new(features)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes back to the TOML layout accepted by [`FeatureSchema::parse`].
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for f in &self.features {
            out.push_str("[[feature]]\n");
            out.push_str(&format!("name = {:?}\n", f.name));
            match &f.kind {
                FeatureKind::Numeric { min, max } => {
                    out.push_str("kind = \"numeric\"\n");
                    out.push_str(&format!("min = {min:?}\nmax = {max:?}\n"));
                }
                FeatureKind::Categorical { categories } => {
                    out.push_str("kind = \"categorical\"\n");
                    let quoted: Vec<String> =
                        categories.iter().map(|c| format!("{c:?}")).collect();
                    out.push_str(&format!("categories = [{}]\n", quoted.join(", ")));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Encoded amenity width: one slot per numeric feature, `m` per categorical.
    pub fn encoded_width(&self) -> usize {
        self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Number(f64),
    Category(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HotelRecord {
    pub hotel_id: String,
    pub market_id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Feature name to value; `None` marks a missing value.
    pub attributes: BTreeMap<String, Option<AttrValue>>,
}

impl HotelRecord {
    pub fn attribute(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.get(name).and_then(|v| v.as_ref())
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::OutOfRange {
                hotel: self.hotel_id.clone(),
                field: "latitude",
                value: self.latitude,
            });
        }
        if !(self.longitude > -180.0 && self.longitude <= 180.0) {
            return Err(Error::OutOfRange {
                hotel: self.hotel_id.clone(),
                field: "longitude",
                value: self.longitude,
            });
        }
        for (name, value) in &self.attributes {
            let spec = schema
                .feature(name)
                .ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
            match (&spec.kind, value) {
                (_, None) => {}
                (FeatureKind::Numeric { .. }, Some(AttrValue::Number(v))) if v.is_finite() => {}
                (FeatureKind::Categorical { categories }, Some(AttrValue::Category(c))) => {
                    if !categories.contains(c) {
                        return Err(Error::UnknownCategory {
                            feature: name.clone(),
                            value: c.clone(),
                        });
                    }
                }
                _ => {
                    return Err(Error::Invalid(format!(
                        "hotel `{}`: value of `{name}` does not match its feature kind",
                        self.hotel_id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Reads a catalog CSV: `hotel_id, market_id, latitude, longitude`, then one
/// column per schema feature. Empty cells are missing values.
pub fn load_catalog(path: &Path, schema: &FeatureSchema) -> Result<Vec<HotelRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_catalog(file, &path.display().to_string(), schema)
}

pub fn read_catalog<R: Read>(
    reader: R,
    source: &str,
    schema: &FeatureSchema,
) -> Result<Vec<HotelRecord>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        file: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(expected) {
            return Err(parse_err(
                1,
                format!("column {} must be `{expected}`", i + 1),
            ));
        }
    }
    let mut feature_cols = Vec::new();
    let mut seen = HashSet::new();
    for name in header.iter().skip(FIXED_COLUMNS.len()) {
        let spec = schema
            .feature(name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
        if !seen.insert(name) {
            return Err(parse_err(1, format!("column `{name}` repeated")));
        }
        feature_cols.push(spec);
    }

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let hotel_id = row[0].to_string();
        if hotel_id.is_empty() {
            return Err(parse_err(line, "empty hotel_id".into()));
        }
        let coord = |idx: usize, name: &str| -> Result<f64> {
            row[idx]
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("bad {name} `{}`", &row[idx])))
        };
        let latitude = coord(2, "latitude")?;
        let longitude = coord(3, "longitude")?;
        let mut attributes = BTreeMap::new();
        for (j, spec) in feature_cols.iter().enumerate() {
            let cell = row.get(FIXED_COLUMNS.len() + j).unwrap_or("");
            let value = if cell.is_empty() {
                None
            } else {
                match &spec.kind {
                    FeatureKind::Numeric { .. } => {
                        Some(AttrValue::Number(cell.parse::<f64>().map_err(|_| {
                            parse_err(line, format!("`{}`: bad number `{cell}`", spec.name))
                        })?))
                    }
                    FeatureKind::Categorical { .. } => Some(AttrValue::Category(cell.to_string())),
                }
            };
            attributes.insert(spec.name.clone(), value);
        }
        let record = HotelRecord {
            hotel_id,
            market_id: row[1].to_string(),
            latitude,
            longitude,
            attributes,
        };
        record.validate(schema).map_err(|e| match e {
            e @ Error::OutOfRange { .. } => e,
            other => parse_err(line, other.to_string()),
        })?;
        if !ids.insert(record.hotel_id.clone()) {
            return Err(Error::DuplicateHotel(record.hotel_id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records back out in the catalog CSV layout.
pub fn write_catalog<W: std::io::Write>(
    writer: W,
    records: &[HotelRecord],
    schema: &FeatureSchema,
) -> Result<()> {
    let io_err = |e: csv::Error| Error::Invalid(format!("writing catalog: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(schema.features().iter().map(|f| f.name.as_str()));
    w.write_record(&header).map_err(io_err)?;
    for r in records {
        let mut row = vec![
            r.hotel_id.clone(),
            r.market_id.clone(),
            format!("{}", r.latitude),
            format!("{}", r.longitude),
        ];
        for f in schema.features() {
            row.push(match r.attribute(&f.name) {
                None => String::new(),
                Some(AttrValue::Number(v)) => format!("{v}"),
                Some(AttrValue::Category(c)) => c.clone(),
            });
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("writing catalog: {e}")))?;
    Ok(())
}

/// Encodes a record's attributes into the dense amenity input.
///
/// Numeric features take one slot holding `(v - min) / (max - min)` clipped to
/// `[0, 1]`; categorical features take a one-hot block. A missing feature
/// leaves all of its slots at zero.
pub fn encode_amenities(record: &HotelRecord, schema: &FeatureSchema) -> Result<Vec<f64>> {
    let mut out = vec![0.0; schema.encoded_width()];
    for (spec, &offset) in schema.features.iter().zip(&schema.offsets) {
        let Some(value) = record.attribute(&spec.name) else {
            continue;
        };
        match (&spec.kind, value) {
            (FeatureKind::Numeric { min, max }, AttrValue::Number(v)) => {
                out[offset] = ((v - min) / (max - min)).clamp(0.0, 1.0);
            }
            (FeatureKind::Categorical { categories }, AttrValue::Category(c)) => {
                let pos = categories.iter().position(|x| x == c).ok_or_else(|| {
                    Error::UnknownCategory {
                        feature: spec.name.clone(),
                        value: c.clone(),
                    }
                })?;
                out[offset + pos] = 1.0;
            }
            (FeatureKind::Numeric { .. }, AttrValue::Category(c)) => {
                // numeric tokens may arrive as text from hand-built records
                let v: f64 = c.parse().map_err(|_| {
                    Error::Invalid(format!("feature `{}`: `{c}` is not numeric", spec.name))
                })?;
                let FeatureKind::Numeric { min, max } = spec.kind else {
                    unreachable!()
                };
                out[offset] = ((v - min) / (max - min)).clamp(0.0, 1.0);
            }
            (FeatureKind::Categorical { .. }, AttrValue::Number(v)) => {
                return Err(Error::UnknownCategory {
                    feature: spec.name.clone(),
                    value: v.to_string(),
                })
            }
        }
    }
    for name in record.attributes.keys() {
        if schema.feature(name).is_none() {
            return Err(Error::UnknownAttribute(name.clone()));
        }
    }
    Ok(out)
}

/// `[lat/90, sin(lon), cos(lon)]`, continuous across the antimeridian.
pub fn encode_geo(record: &HotelRecord) -> [f64; GEO_WIDTH] {
    let lon = record.longitude.to_radians();
    [record.latitude / 90.0, lon.sin(), lon.cos()]
}

/// Dense index space over catalog hotels.
///
/// Indices are ordered by descending training-click frequency, ties broken by
/// hotel id. Hotels never clicked in training keep frequency 0 and count as
/// cold-start.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, u32>,
    frequency: Vec<u64>,
    market: Vec<u32>,
    markets: Vec<String>,
}

impl Vocabulary {
    /// Assembles a vocabulary from per-index tables. Rows must already be in
    /// index order.
    pub fn from_parts(
        ids: Vec<String>,
        frequency: Vec<u64>,
        market: Vec<u32>,
        markets: Vec<String>,
    ) -> Result<Self> {
        if ids.len() != frequency.len() || ids.len() != market.len() {
            return Err(Error::Shape("vocabulary tables differ in length".into()));
        }
        if ids.len() > u32::MAX as usize {
            return Err(Error::Invalid("vocabulary too large".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i as u32).is_some() {
                return Err(Error::DuplicateHotel(id.clone()));
            }
        }
        if let Some(&m) = market.iter().find(|&&m| m as usize >= markets.len()) {
            return Err(Error::Invalid(format!("market index {m} out of range")));
        }
        Ok(Vocabulary {
            ids,
            index,
            frequency,
            market,
            markets,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, hotel_id: &str) -> Option<u32> {
        self.index.get(hotel_id).copied()
    }

    pub fn require(&self, hotel_id: &str) -> Result<u32> {
        self.index_of(hotel_id)
            .ok_or_else(|| Error::UnknownHotel(hotel_id.to_string()))
    }

    pub fn id(&self, index: u32) -> &str {
        &self.ids[index as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn frequency(&self, index: u32) -> u64 {
        self.frequency[index as usize]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequency
    }

    pub fn is_cold_start(&self, index: u32) -> bool {
        self.frequency[index as usize] == 0
    }

    pub fn cold_start_count(&self) -> usize {
        self.frequency.iter().filter(|&&f| f == 0).count()
    }

    pub fn market_of(&self, index: u32) -> u32 {
        self.market[index as usize]
    }

    pub fn market_assignments(&self) -> &[u32] {
        &self.market
    }

    pub fn markets(&self) -> &[String] {
        &self.markets
    }

    pub fn market_index(&self, market_id: &str) -> Option<u32> {
        self.markets
            .binary_search_by(|m| m.as_str().cmp(market_id))
            .ok()
            .map(|i| i as u32)
    }

    /// Hotel indices grouped by market, ascending within each market.
    pub fn market_members(&self) -> Vec<Vec<u32>> {
        let mut members = vec![Vec::new(); self.markets.len()];
        for (i, &m) in self.market.iter().enumerate() {
            members[m as usize].push(i as u32);
        }
        members
    }
}

/// Builds the vocabulary from the catalog and the training split.
pub fn build_vocab(catalog: &[HotelRecord], corpus: &SessionCorpus<String>) -> Result<Vocabulary> {
    build_vocab_from_sessions(catalog, &corpus.train)
}

pub fn build_vocab_from_sessions(
    catalog: &[HotelRecord],
    train: &[Vec<String>],
) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, u64> = catalog.iter().map(|r| (r.hotel_id.as_str(), 0)).collect();
    if counts.len() != catalog.len() {
        let mut seen = HashSet::new();
        for r in catalog {
            if !seen.insert(&r.hotel_id) {
                return Err(Error::DuplicateHotel(r.hotel_id.clone()));
            }
        }
    }
    for session in train {
        for id in session {
            *counts
                .get_mut(id.as_str())
                .ok_or_else(|| Error::UnknownHotel(id.clone()))? += 1;
        }
    }
    let markets: Vec<String> = catalog
        .iter()
        .map(|r| r.market_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut order: Vec<&HotelRecord> = catalog.iter().collect();
    order.sort_by(|a, b| {
        counts[b.hotel_id.as_str()]
            .cmp(&counts[a.hotel_id.as_str()])
            .then_with(|| a.hotel_id.cmp(&b.hotel_id))
    });
    let ids = order.iter().map(|r| r.hotel_id.clone()).collect();
    let frequency = order.iter().map(|r| counts[r.hotel_id.as_str()]).collect();
    let market = order
        .iter()
        .map(|r| markets.binary_search(&r.market_id).expect("market listed") as u32)
        .collect();
    Vocabulary::from_parts(ids, frequency, market, markets)
}

/// Encoded model inputs for every vocabulary index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    amenity_width: usize,
    amenity: Vec<f64>,
    geo: Vec<f64>,
}

impl FeatureTable {
    pub fn build(
        catalog: &[HotelRecord],
        schema: &FeatureSchema,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let by_id: HashMap<&str, &HotelRecord> =
            catalog.iter().map(|r| (r.hotel_id.as_str(), r)).collect();
        let width = schema.encoded_width();
        let mut amenity = Vec::with_capacity(vocab.len() * width);
        let mut geo = Vec::with_capacity(vocab.len() * GEO_WIDTH);
        for id in vocab.ids() {
            let record = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::UnknownHotel(id.clone()))?;
            amenity.extend(encode_amenities(record, schema)?);
            geo.extend(encode_geo(record));
        }
        Ok(FeatureTable {
            amenity_width: width,
            amenity,
            geo,
        })
    }

    pub fn from_raw(amenity_width: usize, amenity: Vec<f64>, geo: Vec<f64>) -> Result<Self> {
        let rows = geo.len() / GEO_WIDTH;
        if geo.len() % GEO_WIDTH != 0 || amenity.len() != rows * amenity_width {
            return Err(Error::Shape("feature table dimensions disagree".into()));
        }
        Ok(FeatureTable {
            amenity_width,
            amenity,
            geo,
        })
    }

    pub fn len(&self) -> usize {
        self.geo.len() / GEO_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        self.geo.is_empty()
    }

    pub fn amenity_width(&self) -> usize {
        self.amenity_width
    }

    pub fn amenity(&self, index: u32) -> &[f64] {
        let i = index as usize;
        &self.amenity[i * self.amenity_width..(i + 1) * self.amenity_width]
    }

    pub fn geo(&self, index: u32) -> &[f64] {
        let i = index as usize;
        &self.geo[i * GEO_WIDTH..(i + 1) * GEO_WIDTH]
    }

    pub fn set_row(&mut self, index: u32, amenity: &[f64], geo: &[f64; GEO_WIDTH]) -> Result<()> {
        if amenity.len() != self.amenity_width {
            return Err(Error::Shape("amenity row width".into()));
        }
        let i = index as usize;
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: self.len(),
            });
        }
        self.amenity[i * self.amenity_width..(i + 1) * self.amenity_width].copy_from_slice(amenity);
        self.geo[i * GEO_WIDTH..(i + 1) * GEO_WIDTH].copy_from_slice(geo);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wifi_star() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec::categorical("wifi", &["yes", "no"]),
            FeatureSpec::numeric("star", 1.0, 5.0),
        ])
        .unwrap()
    }

    fn record(attrs: &[(&str, AttrValue)]) -> HotelRecord {
        HotelRecord {
            hotel_id: "h".into(),
            market_id: "m".into(),
            latitude: 0.0,
            longitude: 0.0,
            attributes: attrs
                .iter()
                .map(|(k, v)| (k.to_string(), Some(v.clone())))
                .collect(),
        }
    }

    #[test]
    fn loads_single_row() {
        let schema = FeatureSchema::new(vec![FeatureSpec::numeric("star", 1.0, 5.0)]).unwrap();
        let csv = "hotel_id,market_id,latitude,longitude,star\nh1,NYC,40.7,-74.0,4\n";
        let rows = read_catalog(csv.as_bytes(), "mem", &schema).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.hotel_id.as_str(), r.market_id.as_str()), ("h1", "NYC"));
        assert_eq!((r.latitude, r.longitude), (40.7, -74.0));
        assert_eq!(r.attribute("star"), Some(&AttrValue::Number(4.0)));
    }

    #[test]
    fn rejects_bad_rows() {
        let schema = FeatureSchema::new(vec![FeatureSpec::numeric("star", 1.0, 5.0)]).unwrap();
        let lat = "hotel_id,market_id,latitude,longitude,star\nh1,NYC,95.0,-74.0,4\n";
        assert!(matches!(
            read_catalog(lat.as_bytes(), "mem", &schema),
            Err(Error::OutOfRange { field: "latitude", .. })
        ));
        let dup = "hotel_id,market_id,latitude,longitude,star\nh1,NYC,40,-74,4\nh1,NYC,41,-74,3\n";
        assert!(matches!(
            read_catalog(dup.as_bytes(), "mem", &schema),
            Err(Error::DuplicateHotel(id)) if id == "h1"
        ));
        let unknown = "hotel_id,market_id,latitude,longitude,color\nh1,NYC,40,-74,red\n";
        assert!(matches!(
            read_catalog(unknown.as_bytes(), "mem", &schema),
            Err(Error::UnknownAttribute(_))
        ));
        let garbled = "hotel_id,market_id,latitude,longitude,star\nh1,NYC,40,-74,4\nh2,NYC,abc,-74,4\n";
        match read_catalog(garbled.as_bytes(), "cat.csv", &schema) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn encodes_amenities() {
        let schema = wifi_star();
        let r = record(&[
            ("wifi", AttrValue::Category("yes".into())),
            ("star", AttrValue::Number(3.0)),
        ]);
        assert_eq!(encode_amenities(&r, &schema).unwrap(), vec![1.0, 0.0, 0.5]);
        let missing = record(&[("star", AttrValue::Number(5.0))]);
        assert_eq!(encode_amenities(&missing, &schema).unwrap(), vec![0.0, 0.0, 1.0]);
        let bad = record(&[("wifi", AttrValue::Category("maybe".into()))]);
        assert!(matches!(
            encode_amenities(&bad, &schema),
            Err(Error::UnknownCategory { .. })
        ));
        let clipped = record(&[("star", AttrValue::Number(9.0))]);
        assert_eq!(encode_amenities(&clipped, &schema).unwrap()[2], 1.0);
    }

    #[test]
    fn encodes_geo() {
        let mut r = record(&[]);
        assert_eq!(encode_geo(&r), [0.0, 0.0, 1.0]);
        r.latitude = 90.0;
        r.longitude = 180.0;
        let g = encode_geo(&r);
        assert_eq!(g[0], 1.0);
        assert!(g[1].abs() < 1e-12 && (g[2] + 1.0).abs() < 1e-12);
        r.latitude = -45.0;
        r.longitude = -90.0;
        let g = encode_geo(&r);
        assert_eq!(g[0], -0.5);
        assert!((g[1] + 1.0).abs() < 1e-12 && g[2].abs() < 1e-12);
    }

    #[test]
    fn schema_rejects_bad_categories() {
        assert!(FeatureSchema::new(vec![FeatureSpec::categorical("x", &[])]).is_err());
        assert!(FeatureSchema::new(vec![FeatureSpec::categorical("x", &["a", "a"])]).is_err());
        assert!(FeatureSchema::new(vec![FeatureSpec::numeric("x", 2.0, 2.0)]).is_err());
    }

    #[test]
    fn schema_toml_round_trip() {
        let schema = FeatureSchema::reference();
        assert_eq!(FeatureSchema::parse(&schema.to_toml()).unwrap(), schema);
        assert_eq!(schema.encoded_width(), 1 + 1 + 5 + 2 + 2 + 2 + 1 + 1);
    }

    fn hotel(id: &str, market: &str) -> HotelRecord {
        HotelRecord {
            hotel_id: id.into(),
            market_id: market.into(),
            latitude: 0.0,
            longitude: 0.0,
            attributes: BTreeMap::new(),
        }
    }

    #[test]
    fn vocab_orders_by_frequency() {
        let catalog = vec![hotel("a", "x"), hotel("b", "y"), hotel("c", "x")];
        let mut train = vec![vec!["b".to_string(); 5]];
        train.push(vec!["a".to_string(), "a".to_string()]);
        let vocab = build_vocab_from_sessions(&catalog, &train).unwrap();
        assert_eq!(vocab.ids(), ["b", "a", "c"]);
        assert_eq!(vocab.frequencies(), [5, 2, 0]);
        assert!(vocab.is_cold_start(2) && !vocab.is_cold_start(0));
        assert_eq!(vocab.markets(), ["x", "y"]);
        assert_eq!(vocab.market_of(0), 1);

        let empty = build_vocab_from_sessions(&catalog, &[]).unwrap();
        assert_eq!(empty.cold_start_count(), 3);
        assert_eq!(empty.ids(), ["a", "b", "c"]);

        let bad = build_vocab_from_sessions(&catalog, &[vec!["zzz".to_string()]]);
        assert!(matches!(bad, Err(Error::UnknownHotel(id)) if id == "zzz"));
    }
}
