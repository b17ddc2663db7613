//! Tab-separated file formats: ratings, ground truth, split manifests.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Dataset, Interaction, SplitAssignment, SplitTag, SyntheticGroundTruth};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One `user_id<TAB>item_id<TAB>rating` line.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub line: usize,
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Yields `(line_number, fields)` for every non-blank, non-comment line.
fn records<'a, R: BufRead + 'a>(
    reader: R,
    path: &'a Path,
    arity: usize,
) -> impl Iterator<Item = Result<(usize, Vec<String>)>> + 'a {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(idx, line)| {
            let line_no = idx + 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(path, e))),
            };
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                return None;
            }
            let fields: Vec<String> = trimmed.split('\t').map(str::to_owned).collect();
            if fields.len() != arity {
                return Some(Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("expected {arity} tab-separated fields, found {}", fields.len()),
                }));
            }
            Some(Ok((line_no, fields)))
        })
}

fn parse_num<F: std::str::FromStr>(field: &str, what: &str, path: &Path, line: usize) -> Result<F> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {what} `{field}`"),
    })
}

pub fn read_rating_records<R: BufRead>(reader: R, path: &Path) -> Result<Vec<RatingRecord>> {
    let mut out = Vec::new();
    for rec in records(reader, path, 3) {
        let (line, f) = rec?;
        let rating: f64 = parse_num(&f[2], "rating", path, line)?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("non-finite rating `{}`", f[2]),
            });
        }
        let [user_id, item_id, _]: [String; 3] = f.try_into().expect("arity checked");
        out.push(RatingRecord {
            line,
            user_id,
            item_id,
            rating,
        });
    }
    Ok(out)
}

/// Parses ratings and binarizes them: `rating >= positive_threshold` is positive.
///
/// Ids are re-indexed densely in order of first appearance.
pub fn parse_ratings<R: BufRead>(reader: R, path: &Path, positive_threshold: f64) -> Result<Dataset> {
    let recs = read_rating_records(reader, path)?;
    if recs.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = HashMap::new();
    let mut interactions = Vec::with_capacity(recs.len());
    let mut ratings = Vec::with_capacity(recs.len());
    for r in recs {
        let u = *users.entry(r.user_id.clone()).or_insert_with(|| {
            user_ids.push(r.user_id.clone());
            user_ids.len() - 1
        });
        let i = *items.entry(r.item_id.clone()).or_insert_with(|| {
            item_ids.push(r.item_id.clone());
            item_ids.len() - 1
        });
        if let Some(first) = seen.insert((u, i), r.line) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: r.line,
                message: format!(
                    "duplicate pair ({}, {}) first seen on line {first}",
                    r.user_id, r.item_id
                ),
            });
        }
        interactions.push(Interaction::new(u, i, r.rating >= positive_threshold));
        ratings.push(r.rating);
    }
    Dataset::with_ids(interactions, Some(ratings), user_ids, item_ids, positive_threshold)
}

pub fn load_ratings(path: impl AsRef<Path>, positive_threshold: f64) -> Result<Dataset> {
    let path = path.as_ref();
    parse_ratings(open(path)?, path, positive_threshold)
}

/// Writes the dataset as a ratings TSV. Raw ratings are written when present,
/// otherwise feedback as `1`/`0`; reloading with [`Dataset::positive_threshold`]
/// reproduces the interactions.
pub fn write_ratings(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for (k, x) in ds.interactions().iter().enumerate() {
        let uid = &ds.user_ids()[x.user];
        let iid = &ds.item_ids()[x.item];
        match ds.ratings() {
            Some(r) => writeln!(w, "{uid}\t{iid}\t{}", r[k]).map_err(io)?,
            None => writeln!(w, "{uid}\t{iid}\t{}", x.label()).map_err(io)?,
        }
    }
    w.flush().map_err(io)
}

/// Formats `v` with nine significant digits in plain decimal notation.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn write_ground_truth<T: Scalar>(
    ds: &Dataset,
    truth: &SyntheticGroundTruth<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if truth.n_users() != ds.n_users() || truth.n_items() != ds.n_items() {
        return Err(Error::InvalidArgument(
            "ground truth shape differs from dataset".into(),
        ));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for u in 0..truth.n_users() {
        for i in 0..truth.n_items() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                ds.user_ids()[u],
                ds.item_ids()[i],
                format_sig9(truth.gamma(u, i).as_f64()),
                format_sig9(truth.exposure(u, i).as_f64()),
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn id_index(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect()
}

fn lookup(map: &HashMap<&str, usize>, id: &str, what: &str, path: &Path, line: usize) -> Result<usize> {
    map.get(id).copied().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("unknown {what} id `{id}`"),
    })
}

pub fn read_ground_truth<T: Scalar>(ds: &Dataset, path: impl AsRef<Path>) -> Result<SyntheticGroundTruth<T>> {
    let path = path.as_ref();
    let users = id_index(ds.user_ids());
    let items = id_index(ds.item_ids());
    let n = ds.n_users() * ds.n_items();
    let mut gamma = vec![T::nan(); n];
    let mut m = vec![T::nan(); n];
    for rec in records(open(path)?, path, 4) {
        let (line, f) = rec?;
        let u = lookup(&users, &f[0], "user", path, line)?;
        let i = lookup(&items, &f[1], "item", path, line)?;
        let g: f64 = parse_num(&f[2], "gamma", path, line)?;
        let e: f64 = parse_num(&f[3], "exposure", path, line)?;
        gamma[u * ds.n_items() + i] = T::of(g);
        m[u * ds.n_items() + i] = T::of(e);
    }
    if gamma.iter().chain(&m).any(|v| v.is_nan()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "ground truth does not cover every user-item cell".into(),
        });
    }
    SyntheticGroundTruth::new(ds.n_users(), ds.n_items(), gamma, m)
}

pub fn write_split_manifest(ds: &Dataset, splits: &SplitAssignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for (tag, set) in splits.tagged() {
        for x in set {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                ds.user_ids()[x.user],
                ds.item_ids()[x.item],
                tag.as_str(),
                x.label()
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_split_manifest(ds: &Dataset, path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let path = path.as_ref();
    let users = id_index(ds.user_ids());
    let items = id_index(ds.item_ids());
    let mut splits = SplitAssignment::default();
    for rec in records(open(path)?, path, 4) {
        let (line, f) = rec?;
        let u = lookup(&users, &f[0], "user", path, line)?;
        let i = lookup(&items, &f[1], "item", path, line)?;
        let tag: SplitTag = f[2].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("unknown split tag `{}`", f[2]),
        })?;
        let feedback = match f[3].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        splits.set_mut(tag).push(Interaction::new(u, i, feedback));
    }
    splits.check_disjoint()?;
    Ok(splits)
}
