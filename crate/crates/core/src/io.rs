//! CSV loading and writing.
//!
//! Canonical wide-format columns: `id`, `cluster`, `w.<j>`, `c.<t>`,
//! `l.<t>`, `a.<t>`, `y`, with `t` running 1..=K for `c` and 1..=K-1 for
//! `l` and `a`. Long format instead has one row per subject-visit with
//! columns `id`, `cluster`, `t`, `c`, `l`, `a`, `y`, plus the `w.<j>`
//! columns repeated on every row; the outcome is read from the `t = K` row.
//!
//! A schema file renames columns: one `canonical = column` line each, `#`
//! comments allowed. Binary cells must be `0` or `1`; empty cells are
//! missing. Missing values are only legal where censoring explains them, and
//! they load as zero. A missing baseline covariate makes the whole subject
//! incomplete; incomplete subjects are an error unless dropping them was
//! requested, in which case they are dropped and reported.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::data::{Dataset, LongitudinalRecord};
use crate::error::{CoreError, Result};

/// Canonical-name to column-name mapping. Names absent from the map are
/// looked up in the file under their canonical spelling.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    map: BTreeMap<String, String>,
}

impl Schema {
    /// Identity mapping: file columns already use canonical names.
    pub fn identity() -> Self {
        Schema::default()
    }

    /// Parses `canonical = column` lines. Blank lines and `#` comments are
    /// skipped; values may be quoted.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut used_columns = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::invalid_data(format!(
                    "schema line {}: expected `canonical = column`, found {raw:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().trim_matches('"').trim_matches('\'').to_string();
            if classify(&key).is_none() {
                return Err(CoreError::invalid_data(format!(
                    "schema line {}: {key:?} is not a canonical column name",
                    lineno + 1
                )));
            }
            if value.is_empty() {
                return Err(CoreError::invalid_data(format!(
                    "schema line {}: empty column name for {key:?}",
                    lineno + 1
                )));
            }
            if let Some(prev) = used_columns.insert(value.clone(), key.clone()) {
                return Err(CoreError::invalid_data(format!(
                    "schema maps both {prev:?} and {key:?} to column {value:?}"
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(CoreError::invalid_data(format!(
                    "schema repeats canonical name {key:?}"
                )));
            }
        }
        Ok(Schema { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Schema::parse(&text)
    }

    fn reverse(&self) -> BTreeMap<&str, &str> {
        self.map.iter().map(|(k, v)| (v.as_str(), k.as_str())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub schema: Schema,
    /// One row per subject-visit instead of one row per subject.
    pub long: bool,
    /// Drop subjects with missing baseline covariates instead of erroring.
    pub drop_incomplete_baseline: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            schema: Schema::identity(),
            long: false,
            drop_incomplete_baseline: false,
        }
    }
}

/// A loaded dataset plus what was discarded on the way.
#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Subject ids dropped for incomplete baseline covariates.
    pub dropped_subjects: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Col {
    Id,
    Cluster,
    Y,
    T,
    W(usize),
    C(usize),
    L(usize),
    A(usize),
}

fn classify(canonical: &str) -> Option<Col> {
    match canonical {
        "id" => return Some(Col::Id),
        "cluster" => return Some(Col::Cluster),
        "y" => return Some(Col::Y),
        "t" => return Some(Col::T),
        "c" => return Some(Col::C(0)),
        "l" => return Some(Col::L(0)),
        "a" => return Some(Col::A(0)),
        _ => {}
    }
    let (family, idx) = canonical.split_once('.')?;
    let idx: usize = idx.parse().ok().filter(|&i| i >= 1)?;
    match family {
        "w" => Some(Col::W(idx)),
        "c" => Some(Col::C(idx)),
        "l" => Some(Col::L(idx)),
        "a" => Some(Col::A(idx)),
        _ => None,
    }
}

/// Indexed-family positions, checked contiguous from 1.
fn contiguous(family: &str, mut positions: Vec<(usize, usize)>) -> Result<Vec<usize>> {
    positions.sort_unstable();
    for (want, &(idx, _)) in (1..).zip(positions.iter()) {
        if idx != want {
            return Err(CoreError::invalid_data(format!(
                "columns for {family} are not contiguous from {family}.1: missing {family}.{want}"
            )));
        }
    }
    Ok(positions.into_iter().map(|(_, pos)| pos).collect())
}

struct Header {
    id: usize,
    cluster: usize,
    y: usize,
    t: Option<usize>,
    c_long: Option<usize>,
    l_long: Option<usize>,
    a_long: Option<usize>,
    w: Vec<usize>,
    c: Vec<usize>,
    l: Vec<usize>,
    a: Vec<usize>,
}

fn resolve_header(header: &csv::StringRecord, schema: &Schema, long: bool) -> Result<Header> {
    let reverse = schema.reverse();
    let mut single: BTreeMap<&str, usize> = BTreeMap::new();
    let mut w = Vec::new();
    let mut c = Vec::new();
    let mut l = Vec::new();
    let mut a = Vec::new();
    let mut unknown = Vec::new();
    for (pos, cell) in header.iter().enumerate() {
        let name = cell.trim();
        let canonical = reverse.get(name).copied().unwrap_or(name);
        let col = match classify(canonical) {
            Some(col) => col,
            None => {
                unknown.push(name.to_string());
                continue;
            }
        };
        let dup = |what: &str| {
            CoreError::invalid_data(format!("column for {what} appears more than once"))
        };
        match col {
            Col::Id => {
                if single.insert("id", pos).is_some() {
                    return Err(dup("id"));
                }
            }
            Col::Cluster => {
                if single.insert("cluster", pos).is_some() {
                    return Err(dup("cluster"));
                }
            }
            Col::Y => {
                if single.insert("y", pos).is_some() {
                    return Err(dup("y"));
                }
            }
            Col::T => {
                if single.insert("t", pos).is_some() {
                    return Err(dup("t"));
                }
            }
            Col::W(i) => w.push((i, pos)),
            Col::C(0) => {
                if single.insert("c", pos).is_some() {
                    return Err(dup("c"));
                }
            }
            Col::L(0) => {
                if single.insert("l", pos).is_some() {
                    return Err(dup("l"));
                }
            }
            Col::A(0) => {
                if single.insert("a", pos).is_some() {
                    return Err(dup("a"));
                }
            }
            Col::C(i) => c.push((i, pos)),
            Col::L(i) => l.push((i, pos)),
            Col::A(i) => a.push((i, pos)),
        }
    }
    if !unknown.is_empty() {
        return Err(CoreError::invalid_data(format!(
            "unrecognized columns {unknown:?}; map them in the schema file or remove them"
        )));
    }
    for (family, list) in [("w", &w), ("c", &c), ("l", &l), ("a", &a)] {
        let mut sorted: Vec<usize> = list.iter().map(|&(i, _)| i).collect();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != list.len() {
            return Err(CoreError::invalid_data(format!(
                "duplicate indexed column in family {family}"
            )));
        }
    }
    let need = |key: &str| {
        single.get(key).copied().ok_or_else(|| {
            CoreError::invalid_data(format!("required column for {key:?} is missing"))
        })
    };
    let header = if long {
        for (family, list) in [("c", &c), ("l", &l), ("a", &a)] {
            if !list.is_empty() {
                return Err(CoreError::invalid_data(format!(
                    "long format uses a single {family:?} column, not {family}.<t> columns"
                )));
            }
        }
        Header {
            id: need("id")?,
            cluster: need("cluster")?,
            y: need("y")?,
            t: Some(need("t")?),
            c_long: Some(need("c")?),
            l_long: Some(need("l")?),
            a_long: Some(need("a")?),
            w: contiguous("w", w)?,
            c: Vec::new(),
            l: Vec::new(),
            a: Vec::new(),
        }
    } else {
        let c = contiguous("c", c)?;
        let l = contiguous("l", l)?;
        let a = contiguous("a", a)?;
        if c.len() < 2 {
            return Err(CoreError::invalid_data(
                "wide format needs censoring columns c.1..c.K with K >= 2",
            ));
        }
        if l.len() != c.len() - 1 || a.len() != c.len() - 1 {
            return Err(CoreError::invalid_data(format!(
                "found {} censoring columns but {} covariate and {} exposure columns; \
                 expected one fewer than censoring",
                c.len(),
                l.len(),
                a.len()
            )));
        }
        Header {
            id: need("id")?,
            cluster: need("cluster")?,
            y: need("y")?,
            t: None,
            c_long: None,
            l_long: None,
            a_long: None,
            w: contiguous("w", w)?,
            c,
            l,
            a,
        }
    };
    Ok(header)
}

fn where_is(rec: &csv::StringRecord, row: usize) -> String {
    match rec.position() {
        Some(p) => format!("line {}", p.line()),
        None => format!("data row {row}"),
    }
}

fn parse_binary(cell: &str, what: &str, at: &str) -> Result<Option<bool>> {
    match cell.trim() {
        "" | "NA" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(CoreError::invalid_data(format!(
            "{at}: {what} must be 0 or 1, found {other:?}"
        ))),
    }
}

fn parse_count(cell: &str, at: &str) -> Result<Option<u32>> {
    match cell.trim() {
        "" | "NA" => Ok(None),
        other => other.parse::<u32>().map(Some).map_err(|_| {
            CoreError::invalid_data(format!(
                "{at}: outcome must be a nonnegative integer, found {other:?}"
            ))
        }),
    }
}

fn parse_real(cell: &str, what: &str, at: &str) -> Result<Option<f64>> {
    match cell.trim() {
        "" | "NA" => Ok(None),
        other => {
            let v: f64 = other.parse().map_err(|_| {
                CoreError::invalid_data(format!("{at}: {what} must be numeric, found {other:?}"))
            })?;
            if !v.is_finite() {
                return Err(CoreError::invalid_data(format!(
                    "{at}: {what} must be finite, found {other:?}"
                )));
            }
            Ok(Some(v))
        }
    }
}

/// Resolves the censoring vector for one subject: missing entries after an
/// observed censoring event fill forward as censored.
fn resolve_censoring(raw: &[Option<bool>], id: &str, at: &str) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(raw.len());
    let mut censored = false;
    for (t, v) in raw.iter().enumerate() {
        let value = match v {
            Some(v) => *v,
            None if censored => true,
            None => {
                return Err(CoreError::invalid_data(format!(
                    "{at}: subject {id}: censoring status at visit {} is missing \
                     before any censoring event",
                    t + 1
                )))
            }
        };
        censored = censored || value;
        out.push(value);
    }
    Ok(out)
}

/// Fills a covariate or exposure cell, zeroing only when censoring explains
/// the gap. `t` is 1-based.
fn resolve_gap(
    v: Option<bool>,
    c: &[bool],
    t: usize,
    what: &str,
    id: &str,
    at: &str,
) -> Result<bool> {
    match v {
        Some(v) => Ok(v),
        None if c[t - 1] => Ok(false),
        None => Err(CoreError::invalid_data(format!(
            "{at}: subject {id}: {what} at visit {t} is missing while uncensored"
        ))),
    }
}

pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<LoadReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)?;
    let header = resolve_header(rdr.headers()?, &opts.schema, opts.long)?;
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(CoreError::invalid_data(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let raw = if opts.long {
        assemble_long(&header, &rows)?
    } else {
        assemble_wide(&header, &rows)?
    };

    let mut records = Vec::with_capacity(raw.len());
    let mut dropped = Vec::new();
    for (rec, w_raw, at) in raw {
        match complete_baseline(w_raw, &rec.subject_id, &at) {
            Ok(w) => records.push(LongitudinalRecord { w, ..rec }),
            Err(e) => {
                if opts.drop_incomplete_baseline {
                    dropped.push(rec.subject_id);
                } else {
                    return Err(e);
                }
            }
        }
    }
    if records.is_empty() {
        return Err(CoreError::invalid_data(
            "every subject was dropped for incomplete baseline covariates",
        ));
    }
    Ok(LoadReport {
        dataset: Dataset::new(records)?,
        dropped_subjects: dropped,
    })
}

fn complete_baseline(w: Vec<Option<f64>>, id: &str, at: &str) -> Result<Vec<f64>> {
    w.into_iter()
        .enumerate()
        .map(|(j, v)| {
            v.ok_or_else(|| {
                CoreError::invalid_data(format!(
                    "{at}: subject {id}: baseline covariate w.{} is missing",
                    j + 1
                ))
            })
        })
        .collect()
}

type RawRecord = (LongitudinalRecord, Vec<Option<f64>>, String);

fn assemble_wide(h: &Header, rows: &[csv::StringRecord]) -> Result<Vec<RawRecord>> {
    let k = h.c.len();
    let mut out = Vec::with_capacity(rows.len());
    for (i, rec) in rows.iter().enumerate() {
        let at = where_is(rec, i + 1);
        let id = rec.get(h.id).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(CoreError::invalid_data(format!("{at}: empty subject id")));
        }
        let cluster = rec.get(h.cluster).unwrap_or("").trim().to_string();
        if cluster.is_empty() {
            return Err(CoreError::invalid_data(format!(
                "{at}: subject {id}: empty cluster id"
            )));
        }
        let c_raw: Vec<Option<bool>> = h
            .c
            .iter()
            .enumerate()
            .map(|(t, &pos)| {
                parse_binary(rec.get(pos).unwrap_or(""), &format!("c.{}", t + 1), &at)
            })
            .collect::<Result<_>>()?;
        let c = resolve_censoring(&c_raw, &id, &at)?;
        let mut l = Vec::with_capacity(k - 1);
        let mut a = Vec::with_capacity(k - 1);
        for t in 1..k {
            let lv = parse_binary(rec.get(h.l[t - 1]).unwrap_or(""), &format!("l.{t}"), &at)?;
            let av = parse_binary(rec.get(h.a[t - 1]).unwrap_or(""), &format!("a.{t}"), &at)?;
            l.push(resolve_gap(lv, &c, t, &format!("covariate l.{t}"), &id, &at)?);
            a.push(resolve_gap(av, &c, t, &format!("exposure a.{t}"), &id, &at)?);
        }
        let y = match parse_count(rec.get(h.y).unwrap_or(""), &at)? {
            Some(y) => y,
            None if c[k - 1] => 0,
            None => {
                return Err(CoreError::invalid_data(format!(
                    "{at}: subject {id}: outcome is missing while uncensored"
                )))
            }
        };
        let w: Vec<Option<f64>> = h
            .w
            .iter()
            .enumerate()
            .map(|(j, &pos)| {
                parse_real(rec.get(pos).unwrap_or(""), &format!("w.{}", j + 1), &at)
            })
            .collect::<Result<_>>()?;
        let record = LongitudinalRecord {
            subject_id: id,
            cluster_id: cluster,
            w: Vec::new(),
            c,
            l,
            a,
            y,
        };
        out.push((record, w, at));
    }
    Ok(out)
}

struct LongSubject {
    cluster: String,
    first_at: String,
    /// Per visit `t` (1-based index `t-1`): censoring, covariate, exposure,
    /// outcome cells and the source location.
    visits: Vec<Option<(Option<bool>, Option<bool>, Option<bool>, Option<u32>, String)>>,
    w: Vec<Option<f64>>,
}

fn assemble_long(h: &Header, rows: &[csv::StringRecord]) -> Result<Vec<RawRecord>> {
    let (t_pos, c_pos, l_pos, a_pos) = (
        h.t.expect("long header"),
        h.c_long.expect("long header"),
        h.l_long.expect("long header"),
        h.a_long.expect("long header"),
    );
    let mut order = Vec::new();
    let mut subjects: BTreeMap<String, LongSubject> = BTreeMap::new();
    let mut k = 0usize;
    for (i, rec) in rows.iter().enumerate() {
        let at = where_is(rec, i + 1);
        let id = rec.get(h.id).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(CoreError::invalid_data(format!("{at}: empty subject id")));
        }
        let cluster = rec.get(h.cluster).unwrap_or("").trim().to_string();
        if cluster.is_empty() {
            return Err(CoreError::invalid_data(format!(
                "{at}: subject {id}: empty cluster id"
            )));
        }
        let t: usize = rec
            .get(t_pos)
            .unwrap_or("")
            .trim()
            .parse()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| {
                CoreError::invalid_data(format!("{at}: visit index t must be a positive integer"))
            })?;
        k = k.max(t);
        let c = parse_binary(rec.get(c_pos).unwrap_or(""), "c", &at)?;
        let l = parse_binary(rec.get(l_pos).unwrap_or(""), "l", &at)?;
        let a = parse_binary(rec.get(a_pos).unwrap_or(""), "a", &at)?;
        let y = parse_count(rec.get(h.y).unwrap_or(""), &at)?;
        let w: Vec<Option<f64>> = h
            .w
            .iter()
            .enumerate()
            .map(|(j, &pos)| {
                parse_real(rec.get(pos).unwrap_or(""), &format!("w.{}", j + 1), &at)
            })
            .collect::<Result<_>>()?;
        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            LongSubject {
                cluster: cluster.clone(),
                first_at: at.clone(),
                visits: Vec::new(),
                w: vec![None; h.w.len()],
            }
        });
        if entry.cluster != cluster {
            return Err(CoreError::invalid_data(format!(
                "{at}: subject {id}: cluster changes across rows ({} vs {cluster})",
                entry.cluster
            )));
        }
        for (slot, value) in entry.w.iter_mut().zip(w) {
            match (&slot, value) {
                (None, v) => *slot = v,
                (Some(prev), Some(v)) if (*prev - v).abs() > 0.0 => {
                    return Err(CoreError::invalid_data(format!(
                        "{at}: subject {id}: baseline covariate changes across rows"
                    )))
                }
                _ => {}
            }
        }
        if entry.visits.len() < t {
            entry.visits.resize_with(t, || None);
        }
        if entry.visits[t - 1].is_some() {
            return Err(CoreError::invalid_data(format!(
                "{at}: subject {id}: visit {t} appears more than once"
            )));
        }
        entry.visits[t - 1] = Some((c, l, a, y, at));
    }
    if k < 2 {
        return Err(CoreError::invalid_data(
            "long format needs visits t = 1..K with K >= 2",
        ));
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let s = &subjects[&id];
        let mut c_raw = Vec::with_capacity(k);
        let mut l_raw = Vec::with_capacity(k);
        let mut a_raw = Vec::with_capacity(k);
        let mut y_cell: Option<u32> = None;
        for t in 1..=k {
            let visit = s.visits.get(t - 1).and_then(|v| v.as_ref()).ok_or_else(|| {
                CoreError::invalid_data(format!(
                    "subject {id}: visit {t} is missing (first seen at {})",
                    s.first_at
                ))
            })?;
            let (c, l, a, y, at) = visit;
            c_raw.push(*c);
            if t < k {
                l_raw.push((*l, at.clone()));
                a_raw.push((*a, at.clone()));
            } else {
                if l.is_some() || a.is_some() {
                    return Err(CoreError::invalid_data(format!(
                        "{at}: subject {id}: covariate and exposure cells must be \
                         empty at the final visit"
                    )));
                }
                y_cell = *y;
            }
            if t < k && y.is_some() {
                return Err(CoreError::invalid_data(format!(
                    "{at}: subject {id}: outcome recorded before the final visit"
                )));
            }
        }
        let at = &s.first_at;
        let c = resolve_censoring(&c_raw, &id, at)?;
        let mut l = Vec::with_capacity(k - 1);
        let mut a = Vec::with_capacity(k - 1);
        for t in 1..k {
            let (lv, lat) = &l_raw[t - 1];
            let (av, aat) = &a_raw[t - 1];
            l.push(resolve_gap(*lv, &c, t, "covariate l", &id, lat)?);
            a.push(resolve_gap(*av, &c, t, "exposure a", &id, aat)?);
        }
        let y = match y_cell {
            Some(y) => y,
            None if c[k - 1] => 0,
            None => {
                return Err(CoreError::invalid_data(format!(
                    "subject {id}: outcome is missing while uncensored at the final visit"
                )))
            }
        };
        let record = LongitudinalRecord {
            subject_id: id,
            cluster_id: s.cluster.clone(),
            w: Vec::new(),
            c,
            l,
            a,
            y,
        };
        out.push((record, s.w.clone(), at.clone()));
    }
    Ok(out)
}

/// Writes a dataset in wide format under canonical column names. Floats use
/// the shortest round-trip representation, so equal datasets produce
/// byte-identical files.
pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let k = d.k();
    let p = d.p();
    let mut out = String::new();
    out.push_str("id,cluster");
    for j in 1..=p {
        write!(out, ",w.{j}").unwrap();
    }
    for t in 1..=k {
        write!(out, ",c.{t}").unwrap();
    }
    for t in 1..k {
        write!(out, ",l.{t}").unwrap();
    }
    for t in 1..k {
        write!(out, ",a.{t}").unwrap();
    }
    out.push_str(",y\n");
    for r in d.records() {
        write!(out, "{},{}", r.subject_id, r.cluster_id).unwrap();
        for v in &r.w {
            write!(out, ",{v}").unwrap();
        }
        for &c in &r.c {
            write!(out, ",{}", u8::from(c)).unwrap();
        }
        for &l in &r.l {
            write!(out, ",{}", u8::from(l)).unwrap();
        }
        for &a in &r.a {
            write!(out, ",{}", u8::from(a)).unwrap();
        }
        writeln!(out, ",{}", r.y).unwrap();
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::record;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_wide_with_canonical_names() {
        let f = write_tmp(
            "id,cluster,w.1,c.1,c.2,c.3,l.1,l.2,a.1,a.2,y\n\
             s1,h1,0.5,0,0,0,1,0,1,1,2\n\
             s2,h1,-0.3,0,1,1,1,,1,,\n",
        );
        let rep = load_dataset(f.path(), &LoadOptions::default()).unwrap();
        let d = rep.dataset;
        assert_eq!(d.n(), 2);
        assert_eq!(d.k(), 3);
        assert_eq!(d.p(), 1);
        let s2 = &d.records()[1];
        // Missing cells after censoring load as zero.
        assert_eq!(s2.c, vec![false, true, true]);
        assert_eq!(s2.l, vec![true, false]);
        assert_eq!(s2.a, vec![true, false]);
        assert_eq!(s2.y, 0);
        assert!(d.is_canonical());
    }

    #[test]
    fn missing_uncensored_value_errors_with_location() {
        let f = write_tmp(
            "id,cluster,w.1,c.1,c.2,c.3,l.1,l.2,a.1,a.2,y\n\
             s1,h1,0.5,0,0,0,1,,1,1,2\n",
        );
        let err = load_dataset(f.path(), &LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("s1"), "{msg}");
        assert!(msg.contains("l.2"), "{msg}");
    }

    #[test]
    fn missing_censoring_before_event_errors() {
        let f = write_tmp(
            "id,cluster,w.1,c.1,c.2,c.3,l.1,l.2,a.1,a.2,y\n\
             s1,h1,0.5,0,,0,1,1,1,1,2\n",
        );
        let err = load_dataset(f.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("censoring status"), "{err}");
    }

    #[test]
    fn incomplete_baseline_dropped_only_on_request() {
        let text = "id,cluster,w.1,c.1,c.2,l.1,a.1,y\n\
                    s1,h1,,0,0,1,1,1\n\
                    s2,h1,0.2,0,0,0,0,0\n";
        let f = write_tmp(text);
        let err = load_dataset(f.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("w.1"), "{err}");

        let opts = LoadOptions {
            drop_incomplete_baseline: true,
            ..LoadOptions::default()
        };
        let rep = load_dataset(f.path(), &opts).unwrap();
        assert_eq!(rep.dropped_subjects, vec!["s1".to_string()]);
        assert_eq!(rep.dataset.n(), 1);
        assert_eq!(rep.dataset.records()[0].subject_id, "s2");
    }

    #[test]
    fn schema_renames_columns() {
        let schema = Schema::parse(
            "# rename everything\n\
             id = subject\n\
             cluster = site\n\
             w.1 = age\n\
             c.1 = miss1\nc.2 = miss2\n\
             l.1 = infection\n\
             a.1 = exposed\n\
             y = count\n",
        )
        .unwrap();
        let f = write_tmp(
            "subject,site,age,miss1,miss2,infection,exposed,count\n\
             s1,h1,0.5,0,0,1,1,2\n",
        );
        let opts = LoadOptions {
            schema,
            ..LoadOptions::default()
        };
        let d = load_dataset(f.path(), &opts).unwrap().dataset;
        assert_eq!(d.k(), 2);
        assert_eq!(d.records()[0].y, 2);
        assert!(d.records()[0].l[0]);
    }

    #[test]
    fn schema_rejects_unknown_canonical_and_duplicates() {
        assert!(Schema::parse("bogus = x\n").is_err());
        assert!(Schema::parse("id = x\nid = z\n").is_err());
        assert!(Schema::parse("id = x\ncluster = x\n").is_err());
    }

    #[test]
    fn unknown_columns_are_rejected() {
        let f = write_tmp("id,cluster,w.1,c.1,c.2,l.1,a.1,y,extra\ns1,h1,0,0,0,0,0,1,9\n");
        let err = load_dataset(f.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn long_format_matches_wide() {
        let wide = write_tmp(
            "id,cluster,w.1,c.1,c.2,c.3,l.1,l.2,a.1,a.2,y\n\
             s1,h1,0.5,0,0,0,1,0,1,1,2\n\
             s2,h2,-0.3,0,1,1,1,0,1,0,0\n",
        );
        let long = write_tmp(
            "id,cluster,t,c,l,a,w.1,y\n\
             s1,h1,1,0,1,1,0.5,\n\
             s1,h1,2,0,0,1,0.5,\n\
             s1,h1,3,0,,,0.5,2\n\
             s2,h2,1,0,1,1,-0.3,\n\
             s2,h2,2,1,,,-0.3,\n\
             s2,h2,3,1,,,-0.3,\n",
        );
        let dw = load_dataset(wide.path(), &LoadOptions::default()).unwrap().dataset;
        let opts = LoadOptions {
            long: true,
            ..LoadOptions::default()
        };
        let dl = load_dataset(long.path(), &opts).unwrap().dataset;
        assert_eq!(dw.records(), dl.records());
    }

    #[test]
    fn long_format_rejects_gaps_and_duplicates() {
        let missing_visit = write_tmp(
            "id,cluster,t,c,l,a,w.1,y\n\
             s1,h1,1,0,1,1,0.5,\n\
             s1,h1,3,0,,,0.5,2\n",
        );
        let opts = LoadOptions {
            long: true,
            ..LoadOptions::default()
        };
        let err = load_dataset(missing_visit.path(), &opts).unwrap_err();
        assert!(err.to_string().contains("visit 2 is missing"), "{err}");

        let dup = write_tmp(
            "id,cluster,t,c,l,a,w.1,y\n\
             s1,h1,1,0,1,1,0.5,\n\
             s1,h1,1,0,1,1,0.5,\n\
             s1,h1,2,0,,,0.5,2\n",
        );
        let err = load_dataset(dup.path(), &opts).unwrap_err();
        assert!(err.to_string().contains("more than once"), "{err}");
    }

    #[test]
    fn write_then_load_roundtrips() {
        let recs = vec![
            record("s1", "h2", vec![0.25, -1.5], vec![0, 0, 0], vec![1, 0], vec![1, 1], 3),
            record("s2", "h1", vec![0.125, 2.0], vec![0, 0, 1], vec![0, 1], vec![1, 0], 0),
        ];
        let d = Dataset::new(recs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset(&path, &d).unwrap();
        let back = load_dataset(&path, &LoadOptions::default()).unwrap().dataset;
        assert_eq!(back.records(), d.records());

        // Byte-identical on rewrite.
        let path2 = dir.path().join("data2.csv");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
