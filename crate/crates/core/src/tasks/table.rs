use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Built-in partial kinship table (see `data/kinship.table`).
pub const KINSHIP_TABLE: &str = include_str!("../../data/kinship.table");

/// Where a composition table comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableSpec {
    /// Addition modulo `m` on labels `0..m`.
    Cyclic(usize),
    /// The bundled kinship-style table.
    Kinship,
    File(PathBuf),
}

impl fmt::Display for TableSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableSpec::Cyclic(m) => write!(f, "cyclic:{m}"),
            TableSpec::Kinship => f.write_str("kinship"),
            TableSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for TableSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "kinship" {
            return Ok(TableSpec::Kinship);
        }
        if let Some(m) = s.strip_prefix("cyclic:") {
            return match m.parse() {
                Ok(m) if m > 0 => Ok(TableSpec::Cyclic(m)),
                _ => Err(Error::Config(format!("bad cyclic group order in {s:?}"))),
            };
        }
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(TableSpec::File(PathBuf::from(p)));
        }
        Err(Error::Config(format!("unknown table {s:?} (cyclic:M, kinship or file:PATH)")))
    }
}

/// A binary operation on relation labels, possibly partial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionTable {
    labels: Vec<String>,
    /// `table[a * len + b]` is the composition of `a` then `b`.
    table: Vec<Option<usize>>,
}

impl CompositionTable {
    pub fn cyclic(m: usize) -> Self {
        let labels = (0..m).map(|i| i.to_string()).collect();
        let table = (0..m * m).map(|k| Some((k / m + k % m) % m)).collect();
        CompositionTable { labels, table }
    }

    pub fn kinship() -> Self {
        Self::parse(KINSHIP_TABLE, Path::new("<kinship>")).expect("bundled kinship table parses")
    }

    pub fn from_spec(spec: &TableSpec) -> Result<Self> {
        match spec {
            TableSpec::Cyclic(m) => Ok(Self::cyclic(*m)),
            TableSpec::Kinship => Ok(Self::kinship()),
            TableSpec::File(path) => Self::parse(&std::fs::read_to_string(path)?, path),
        }
    }

    /// Parses `labels a b c` followed by lines `a b = c`; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Format { path: path.to_path_buf(), line, reason };
        let mut labels: Option<Vec<String>> = None;
        let mut index = HashMap::new();
        let mut table = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            match (&labels, words.as_slice()) {
                (None, ["labels", names @ ..]) if !names.is_empty() => {
                    for (i, &n) in names.iter().enumerate() {
                        if index.insert(n.to_string(), i).is_some() {
                            return Err(err(no + 1, format!("label {n:?} listed twice")));
                        }
                    }
                    table = vec![None; names.len() * names.len()];
                    labels = Some(names.iter().map(|s| s.to_string()).collect());
                }
                (None, _) => return Err(err(no + 1, "expected `labels ...` first".into())),
                (Some(_), [a, b, "=", c]) => {
                    let look = |s: &str| index.get(s).copied().ok_or_else(|| err(no + 1, format!("unknown label {s:?}")));
                    let (a, b, c) = (look(a)?, look(b)?, look(c)?);
                    let slot = &mut table[a * index.len() + b];
                    if slot.is_some() {
                        return Err(err(no + 1, "composition defined twice".into()));
                    }
                    *slot = Some(c);
                }
                (Some(_), _) => return Err(err(no + 1, format!("expected `a b = c`, got {line:?}"))),
            }
        }
        let labels = labels.ok_or_else(|| err(0, "no `labels` line".into()))?;
        Ok(CompositionTable { labels, table })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_total(&self) -> bool {
        self.table.iter().all(Option::is_some)
    }

    pub fn compose(&self, a: usize, b: usize) -> Option<usize> {
        let n = self.len();
        if a >= n || b >= n {
            return None;
        }
        self.table[a * n + b]
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

/// Left fold of the table over `chain`.
pub fn compose_oracle(table: &CompositionTable, chain: &[usize]) -> Result<usize> {
    let (&first, rest) = chain.split_first().ok_or_else(|| Error::UndefinedComposition("empty chain".into()))?;
    if first >= table.len() {
        return Err(Error::index(format!("label {first} outside {} labels", table.len())));
    }
    rest.iter().try_fold(first, |acc, &b| {
        table.compose(acc, b).ok_or_else(|| {
            Error::UndefinedComposition(format!("{} then {}", table.labels.get(acc).map_or("?", |s| s), table.labels.get(b).map_or("?", |s| s)))
        })
    })
}
