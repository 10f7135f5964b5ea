//! Ingestion of rating and graph arrays into a sparse observation list, the
//! canonical on-disk form, and seeded train/validation/test partitioning.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One observed entry of the array. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl Observation {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        Self { row, col, value }
    }
}

/// A partially observed `n_rows x n_cols` array.
///
/// Constructed through [`ObservationSet::new`], which rejects empty input,
/// out-of-range indices and repeated `(row, col)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_rows: usize,
    n_cols: usize,
    triples: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(n_rows: usize, n_cols: usize, triples: Vec<Observation>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::EmptyObservations);
        }
        let mut seen = HashSet::with_capacity(triples.len());
        for (i, t) in triples.iter().enumerate() {
            if t.row >= n_rows || t.col >= n_cols {
                return Err(Error::IndexOutOfRange {
                    row: t.row,
                    col: t.col,
                    n_rows,
                    n_cols,
                });
            }
            if !seen.insert((t.row, t.col)) {
                return Err(Error::DuplicateObservation {
                    line: i + 1,
                    row: t.row,
                    col: t.col,
                });
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            triples,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn triples(&self) -> &[Observation] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.triples.iter().map(|t| t.value).collect()
    }

    /// Smallest and largest observed value.
    pub fn value_range(&self) -> (f64, f64) {
        self.triples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t.value), hi.max(t.value))
            })
    }

    /// Subset selected by triple indices, keeping the array dimensions.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let triples = indices
            .iter()
            .map(|&i| {
                self.triples.get(i).copied().ok_or_else(|| {
                    Error::InvalidSplit(format!(
                        "triple index {i} out of range for {} observations",
                        self.triples.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.n_rows, self.n_cols, triples)
    }

    /// Render in the canonical text form: header `#obs N M`, optional `#`
    /// comment lines, then one `row<TAB>col<TAB>value` line per triple.
    pub fn to_canonical_string(&self, comments: &[String]) -> String {
        let mut out = String::with_capacity(self.triples.len() * 16);
        writeln!(out, "#obs {} {}", self.n_rows, self.n_cols).unwrap();
        for c in comments {
            for line in c.lines() {
                writeln!(out, "# {line}").unwrap();
            }
        }
        for t in &self.triples {
            // `{}` on f64 prints the shortest representation that parses back exactly.
            writeln!(out, "{}\t{}\t{}", t.row, t.col, t.value).unwrap();
        }
        out
    }

    pub fn write_canonical(&self, path: &Path, comments: &[String]) -> Result<()> {
        fs::write(path, self.to_canonical_string(comments)).map_err(|e| Error::io(path, e))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn strip_cr(line: &str) -> &str {
    line.strip_suffix('\r').unwrap_or(line)
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.parse::<T>().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} {field:?}"),
    })
}

fn parse_one_based(field: &str, line: usize, what: &str) -> Result<usize> {
    let id: usize = parse_field(field, line, what)?;
    if id == 0 {
        return Err(Error::Parse {
            line,
            message: format!("{what} ids are 1-based, found 0"),
        });
    }
    Ok(id - 1)
}

fn split_tabs(line: &str, expected: usize, line_no: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != expected {
        return Err(Error::Parse {
            line: line_no,
            message: format!(
                "expected {expected} tab-separated fields, found {}",
                fields.len()
            ),
        });
    }
    Ok(fields)
}

/// Collects triples while detecting duplicates with the offending line number.
struct TripleBuilder {
    seen: HashSet<(usize, usize)>,
    triples: Vec<Observation>,
    max_row: usize,
    max_col: usize,
}

impl TripleBuilder {
    fn new() -> Self {
        Self {
            seen: HashSet::new(),
            triples: Vec::new(),
            max_row: 0,
            max_col: 0,
        }
    }

    fn push(&mut self, line: usize, row: usize, col: usize, value: f64) -> Result<()> {
        if !self.seen.insert((row, col)) {
            return Err(Error::DuplicateObservation { line, row, col });
        }
        self.max_row = self.max_row.max(row + 1);
        self.max_col = self.max_col.max(col + 1);
        self.triples.push(Observation::new(row, col, value));
        Ok(())
    }
}

/// Parse MovieLens `user<TAB>item<TAB>rating<TAB>timestamp` text.
///
/// IDs are 1-based; `N` and `M` are the largest user and item ids. Ratings
/// must be integers in `[1, 5]`. The timestamp must be an integer and is
/// discarded.
pub fn parse_movielens(text: &str) -> Result<ObservationSet> {
    let mut builder = TripleBuilder::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields = split_tabs(strip_cr(raw), 4, line_no)?;
        let row = parse_one_based(fields[0], line_no, "user")?;
        let col = parse_one_based(fields[1], line_no, "item")?;
        let rating: i64 = parse_field(fields[2], line_no, "rating")?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("rating {rating} outside [1, 5]"),
            });
        }
        let _timestamp: i64 = parse_field(fields[3], line_no, "timestamp")?;
        builder.push(line_no, row, col, rating as f64)?;
    }
    ObservationSet::new(builder.max_row, builder.max_col, builder.triples)
}

pub fn ingest_movielens(path: &Path) -> Result<ObservationSet> {
    parse_movielens(&read_text(path)?)
}

/// Parse a `row<TAB>col<TAB>value` edge list with 1-based node ids.
///
/// With `square` set both dimensions become the largest id seen in either
/// column. Row and column entities still get separate latent features.
pub fn parse_edge_list(text: &str, square: bool) -> Result<ObservationSet> {
    let mut builder = TripleBuilder::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields = split_tabs(strip_cr(raw), 3, line_no)?;
        let row = parse_one_based(fields[0], line_no, "row")?;
        let col = parse_one_based(fields[1], line_no, "col")?;
        let value: f64 = parse_field(fields[2], line_no, "value")?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("non-finite value {value}"),
            });
        }
        builder.push(line_no, row, col, value)?;
    }
    let (n, m) = if square {
        let side = builder.max_row.max(builder.max_col);
        (side, side)
    } else {
        (builder.max_row, builder.max_col)
    };
    ObservationSet::new(n, m, builder.triples)
}

pub fn ingest_edge_list(path: &Path, square: bool) -> Result<ObservationSet> {
    parse_edge_list(&read_text(path)?, square)
}

/// Parse the canonical form written by [`ObservationSet::to_canonical_string`].
pub fn parse_canonical(text: &str) -> Result<ObservationSet> {
    let mut lines = text.lines().enumerate();
    let (n_rows, n_cols) = match lines.next() {
        Some((_, header)) => {
            let parts: Vec<&str> = strip_cr(header).split(' ').collect();
            if parts.len() != 3 || parts[0] != "#obs" {
                return Err(Error::Parse {
                    line: 1,
                    message: "expected header `#obs N M`".into(),
                });
            }
            (
                parse_field::<usize>(parts[1], 1, "row count")?,
                parse_field::<usize>(parts[2], 1, "column count")?,
            )
        }
        None => return Err(Error::EmptyObservations),
    };
    let mut builder = TripleBuilder::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = strip_cr(raw);
        if line.starts_with('#') {
            continue;
        }
        let fields = split_tabs(line, 3, line_no)?;
        let row: usize = parse_field(fields[0], line_no, "row")?;
        let col: usize = parse_field(fields[1], line_no, "col")?;
        let value: f64 = parse_field(fields[2], line_no, "value")?;
        builder.push(line_no, row, col, value)?;
    }
    ObservationSet::new(n_rows, n_cols, builder.triples)
}

pub fn read_canonical(path: &Path) -> Result<ObservationSet> {
    parse_canonical(&read_text(path)?)
}

/// Fractions and seed for the repeated hold-out protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub n_repeats: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |f: f64| f > 0.0 && f < 1.0;
        if !in_unit(self.test_fraction) {
            return Err(Error::InvalidSplit(format!(
                "test_fraction {} not in (0, 1)",
                self.test_fraction
            )));
        }
        if !in_unit(self.validation_fraction) {
            return Err(Error::InvalidSplit(format!(
                "validation_fraction {} not in (0, 1)",
                self.validation_fraction
            )));
        }
        if self.n_repeats == 0 {
            return Err(Error::InvalidSplit("n_repeats must be positive".into()));
        }
        Ok(())
    }

    /// `(test, validation, train)` sizes for `total` observations.
    pub fn partition_sizes(&self, total: usize) -> (usize, usize, usize) {
        let n_test = (self.test_fraction * total as f64).floor() as usize;
        let rest = total - n_test;
        let n_val = (self.validation_fraction * rest as f64).floor() as usize;
        (n_test, n_val, rest - n_val)
    }
}

/// The splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream: the `index + 1`-th splitmix64 draw
/// from state `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Triple indices (into the source set) of each partition, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: ObservationSet,
    pub validation: ObservationSet,
    pub test: ObservationSet,
    pub indices: SplitIndices,
}

impl DataSplit {
    pub fn from_indices(source: &ObservationSet, indices: SplitIndices) -> Result<Self> {
        let total = indices.train.len() + indices.validation.len() + indices.test.len();
        let mut seen = vec![false; source.len()];
        for &i in indices
            .train
            .iter()
            .chain(&indices.validation)
            .chain(&indices.test)
        {
            if i >= source.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidSplit(format!(
                    "triple index {i} repeated or out of range"
                )));
            }
        }
        if total != source.len() {
            return Err(Error::InvalidSplit(format!(
                "partitions cover {total} of {} triples",
                source.len()
            )));
        }
        Ok(Self {
            train: source.select(&indices.train)?,
            validation: source.select(&indices.validation)?,
            test: source.select(&indices.test)?,
            indices,
        })
    }
}

/// Split indices for repeat `repeat`: shuffle with the child seed, take the
/// leading test block, then the validation block from what remains.
pub fn split_indices(total: usize, spec: &SplitSpec, repeat: usize) -> Result<SplitIndices> {
    spec.validate()?;
    let (n_test, n_val, n_train) = spec.partition_sizes(total);
    for (name, size) in [("test", n_test), ("validation", n_val), ("train", n_train)] {
        if size == 0 {
            return Err(Error::InvalidSplit(format!(
                "{name} partition is empty for {total} observations"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(spec.seed, repeat as u64));
    let mut perm: Vec<usize> = (0..total).collect();
    perm.shuffle(&mut rng);
    let mut test = perm[..n_test].to_vec();
    let mut validation = perm[n_test..n_test + n_val].to_vec();
    let mut train = perm[n_test + n_val..].to_vec();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices {
        train,
        validation,
        test,
    })
}

pub fn make_splits(data: &ObservationSet, spec: &SplitSpec) -> Result<Vec<DataSplit>> {
    (0..spec.n_repeats)
        .map(|r| DataSplit::from_indices(data, split_indices(data.len(), spec, r)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(n: usize, m: usize) -> ObservationSet {
        let triples = (0..n)
            .flat_map(|r| (0..m).map(move |c| Observation::new(r, c, (r * m + c) as f64)))
            .collect();
        ObservationSet::new(n, m, triples).unwrap()
    }

    #[test]
    fn movielens_single_line() {
        let obs = parse_movielens("1\t1\t5\t0\n").unwrap();
        assert_eq!((obs.n_rows(), obs.n_cols()), (1, 1));
        assert_eq!(obs.triples(), &[Observation::new(0, 0, 5.0)]);
    }

    #[test]
    fn movielens_dims_are_max_ids() {
        let obs = parse_movielens("3\t1\t4\t881250949\n1\t7\t2\t1\n").unwrap();
        assert_eq!((obs.n_rows(), obs.n_cols(), obs.len()), (3, 7, 2));
        assert_eq!(obs.triples()[0], Observation::new(2, 0, 4.0));
    }

    #[test]
    fn movielens_short_line_reports_line_number() {
        match parse_movielens("1\t2") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_movielens("1\t1\t5\t0\n2\tx\t3\t0\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn movielens_rejects_spaces_and_bad_ratings() {
        assert!(parse_movielens("1 1 5 0").is_err());
        assert!(parse_movielens("1\t1\t6\t0").is_err());
        assert!(parse_movielens("1\t1\t4.5\t0").is_err());
        assert!(parse_movielens("0\t1\t4\t0").is_err());
    }

    #[test]
    fn movielens_duplicate_pair() {
        match parse_movielens("1\t1\t5\t0\n1\t1\t3\t9\n") {
            Err(Error::DuplicateObservation { line: 2, row: 0, col: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn edge_list_square_uses_max_over_both_columns() {
        let obs = parse_edge_list("1\t5\t1\n2\t1\t0\n", true).unwrap();
        assert_eq!((obs.n_rows(), obs.n_cols()), (5, 5));
        let obs = parse_edge_list("1\t5\t1\n2\t1\t0\n", false).unwrap();
        assert_eq!((obs.n_rows(), obs.n_cols()), (2, 5));
    }

    #[test]
    fn edge_list_empty_file_is_rejected() {
        assert!(matches!(parse_edge_list("", true), Err(Error::EmptyObservations)));
    }

    #[test]
    fn canonical_skips_comments() {
        let obs = dense(2, 3);
        let text = obs.to_canonical_string(&["model = nnmf".into()]);
        assert!(text.starts_with("#obs 2 3\n# model = nnmf\n"));
        assert_eq!(parse_canonical(&text).unwrap(), obs);
    }

    #[test]
    fn split_sizes_for_movielens_scale() {
        let spec = SplitSpec {
            test_fraction: 0.1,
            validation_fraction: 0.02,
            n_repeats: 1,
            seed: 1,
        };
        assert_eq!(spec.partition_sizes(100_000), (10_000, 1_800, 88_200));
    }

    #[test]
    fn empty_validation_partition_is_an_error() {
        let spec = SplitSpec {
            test_fraction: 0.1,
            validation_fraction: 0.1,
            n_repeats: 1,
            seed: 1,
        };
        let data = dense(2, 5);
        assert!(matches!(make_splits(&data, &spec), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn splits_are_deterministic_and_repeats_differ() {
        let spec = SplitSpec {
            test_fraction: 0.2,
            validation_fraction: 0.25,
            n_repeats: 3,
            seed: 42,
        };
        let data = dense(6, 5);
        let a = make_splits(&data, &spec).unwrap();
        let b = make_splits(&data, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].indices.test, a[1].indices.test);
    }

    #[test]
    fn invalid_fractions() {
        let mut spec = SplitSpec {
            test_fraction: 0.0,
            validation_fraction: 0.1,
            n_repeats: 1,
            seed: 0,
        };
        assert!(spec.validate().is_err());
        spec.test_fraction = 0.1;
        spec.validation_fraction = 1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference splitmix64 generator seeded with 0.
        assert_eq!(child_seed(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(child_seed(0, 1), 0x6E78_9E6A_A1B9_65F4);
    }
}
