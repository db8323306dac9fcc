//! Dataset generation and the line-delimited file format.
//!
//! Every file starts with one header line describing its split:
//!
//! ```text
//! #edge-transformer-dataset v1<TAB>task=relation<TAB>table=cyclic:5<TAB>vocab=0<TAB>split=train<TAB>range=2-3<TAB>count=5000<TAB>seed=7
//! ```
//!
//! followed by one instance per line, fields tab-separated in this order:
//!
//! * relation: `n=4  edges=0>2:3,2>1:0,1>3:4  query=0>3  target=2  k=3`
//! * reverse: `src=3 5 1  tgt=1 5 3`

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tasks::generate::{gen_relation_instance, gen_reverse_instance, RelationInstance, Seq2SeqInstance};
use crate::tasks::table::{CompositionTable, TableSpec};

const MAGIC: &str = "#edge-transformer-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Query-edge classification on composition chains.
    Relation,
    /// Sequence reversal through the encoder-decoder.
    Reverse,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Relation => "relation",
            TaskKind::Reverse => "reverse",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relation" => Ok(TaskKind::Relation),
            "reverse" => Ok(TaskKind::Reverse),
            _ => Err(Error::Config(format!("unknown task {s:?} (relation or reverse)"))),
        }
    }
}

/// Inclusive range of relation lengths or sequence lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LenRange {
    pub lo: usize,
    pub hi: usize,
}

impl LenRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid range {lo}-{hi}")));
        }
        Ok(LenRange { lo, hi })
    }

    pub fn single(k: usize) -> Self {
        LenRange { lo: k, hi: k }
    }

    pub fn contains(&self, v: usize) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

impl fmt::Display for LenRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}-{}", self.lo, self.hi)
        }
    }
}

impl FromStr for LenRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad range {s:?} (e.g. 4 or 2-3)"));
        match s.split_once('-') {
            Some((a, b)) => LenRange::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let k = s.trim().parse().map_err(|_| bad())?;
                LenRange::new(k, k)
            }
        }
    }
}

/// Everything needed to regenerate a dataset byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub table: TableSpec,
    /// Token vocabulary of the reverse task (unused for relations).
    pub vocab: usize,
    pub train: LenRange,
    pub train_count: usize,
    pub valid: LenRange,
    pub valid_count: usize,
    pub tests: Vec<LenRange>,
    pub test_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Cyclic-group(5) chains: train on k in {2, 3}, validate on k = 3,
    /// test on k = 4, 5, 6.
    pub fn relation_default() -> Self {
        DatasetSpec {
            task: TaskKind::Relation,
            table: TableSpec::Cyclic(5),
            vocab: 0,
            train: LenRange { lo: 2, hi: 3 },
            train_count: 5000,
            valid: LenRange::single(3),
            valid_count: 500,
            tests: vec![LenRange::single(4), LenRange::single(5), LenRange::single(6)],
            test_count: 2000,
            seed: 0,
        }
    }

    /// Reversal of 3-8 tokens over a 20-token vocabulary.
    pub fn reverse_default() -> Self {
        DatasetSpec {
            task: TaskKind::Reverse,
            table: TableSpec::Cyclic(1),
            vocab: 20,
            train: LenRange { lo: 3, hi: 8 },
            train_count: 6000,
            valid: LenRange { lo: 3, hi: 8 },
            valid_count: 300,
            tests: vec![LenRange { lo: 3, hi: 8 }],
            test_count: 1000,
            seed: 0,
        }
    }

    /// Headers of every split in generation order: train, valid, tests.
    pub fn splits(&self) -> Vec<SplitSpec> {
        let make = |name: String, range: LenRange, count: usize| SplitSpec {
            task: self.task,
            table: self.table.clone(),
            vocab: self.vocab,
            name,
            range,
            count,
            seed: self.seed,
        };
        let mut out = vec![make("train".into(), self.train, self.train_count), make("valid".into(), self.valid, self.valid_count)];
        for r in &self.tests {
            let name = match self.task {
                TaskKind::Relation => format!("test_k{r}"),
                TaskKind::Reverse => format!("test_len{r}"),
            };
            out.push(make(name, *r, self.test_count));
        }
        out
    }
}

/// Header of one dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub task: TaskKind,
    pub table: TableSpec,
    pub vocab: usize,
    pub name: String,
    pub range: LenRange,
    pub count: usize,
    pub seed: u64,
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{MAGIC}\ttask={}\ttable={}\tvocab={}\tsplit={}\trange={}\tcount={}\tseed={}",
            self.task, self.table, self.vocab, self.name, self.range, self.count, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instances {
    Relation(Vec<RelationInstance>),
    Reverse(Vec<Seq2SeqInstance>),
}

impl Instances {
    pub fn len(&self) -> usize {
        match self {
            Instances::Relation(v) => v.len(),
            Instances::Reverse(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One split: its header and its instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub spec: SplitSpec,
    pub instances: Instances,
}

impl Split {
    pub fn relations(&self) -> Option<&[RelationInstance]> {
        match &self.instances {
            Instances::Relation(v) => Some(v),
            Instances::Reverse(_) => None,
        }
    }

    pub fn sequences(&self) -> Option<&[Seq2SeqInstance]> {
        match &self.instances {
            Instances::Reverse(v) => Some(v),
            Instances::Relation(_) => None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.spec);
        match &self.instances {
            Instances::Relation(v) => v.iter().for_each(|x| s.push_str(&format!("{}\n", relation_line(x)))),
            Instances::Reverse(v) => v.iter().for_each(|x| s.push_str(&format!("{}\n", reverse_line(x)))),
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_text().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        parse_split(&std::fs::read_to_string(path)?, path)
    }
}

/// Generates every split of `spec`. Each split draws from its own ChaCha
/// stream of `spec.seed`; instances identical to a training instance are
/// redrawn in the held-out splits.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Split>> {
    let table = match spec.task {
        TaskKind::Relation => Some(CompositionTable::from_spec(&spec.table)?),
        TaskKind::Reverse => None,
    };
    let mut seen_rel = HashSet::new();
    let mut seen_seq = HashSet::new();
    let mut out = Vec::new();
    for (stream, split) in spec.splits().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream as u64);
        let held_out = stream > 0;
        let budget = 100 * split.count.max(1);
        let mut draws = 0;
        let instances = match spec.task {
            TaskKind::Relation => {
                let table = table.as_ref().expect("relation table");
                let mut v = Vec::with_capacity(split.count);
                while v.len() < split.count {
                    draws += 1;
                    if draws > budget {
                        return Err(Error::Generation(format!("split {} cannot avoid training instances", split.name)));
                    }
                    let k = rng.gen_range(split.range.lo..=split.range.hi);
                    let x = gen_relation_instance(table, k, &mut rng)?;
                    if held_out && seen_rel.contains(&x) {
                        continue;
                    }
                    v.push(x);
                }
                if !held_out {
                    seen_rel.extend(v.iter().cloned());
                }
                Instances::Relation(v)
            }
            TaskKind::Reverse => {
                let mut v = Vec::with_capacity(split.count);
                while v.len() < split.count {
                    draws += 1;
                    if draws > budget {
                        return Err(Error::Generation(format!("split {} cannot avoid training instances", split.name)));
                    }
                    let len = rng.gen_range(split.range.lo..=split.range.hi);
                    let x = gen_reverse_instance(spec.vocab, len, &mut rng)?;
                    if held_out && seen_seq.contains(&x.src) {
                        continue;
                    }
                    v.push(x);
                }
                if !held_out {
                    seen_seq.extend(v.iter().map(|x| x.src.clone()));
                }
                Instances::Reverse(v)
            }
        };
        out.push(Split { spec: split, instances });
    }
    Ok(out)
}

fn relation_line(x: &RelationInstance) -> String {
    let edges: Vec<String> = x.edges.iter().map(|(s, d, l)| format!("{s}>{d}:{l}")).collect();
    format!("n={}\tedges={}\tquery={}>{}\ttarget={}\tk={}", x.n, edges.join(","), x.query.0, x.query.1, x.target, x.k)
}

fn reverse_line(x: &Seq2SeqInstance) -> String {
    let join = |v: &[usize]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    format!("src={}\ttgt={}", join(&x.src), join(&x.tgt))
}

/// Splits `line` into tab-separated `key=value` fields with exactly `keys`.
fn fields<'a>(line: &'a str, keys: &[&str]) -> std::result::Result<Vec<&'a str>, String> {
    let parts: Vec<&str> = line.split('\t').collect();
    let mut out = Vec::with_capacity(keys.len());
    for (k, part) in parts.iter().enumerate() {
        let (key, value) = part.split_once('=').ok_or_else(|| format!("field {part:?} is not key=value"))?;
        match keys.get(k) {
            Some(&want) if want == key => out.push(value),
            Some(&want) => return Err(format!("expected field {want:?}, found {key:?}")),
            None => return Err(format!("unknown field {key:?}")),
        }
    }
    if out.len() != keys.len() {
        return Err(format!("missing field {:?}", keys[out.len()]));
    }
    Ok(out)
}

fn num(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("{s:?} is not a nonnegative integer"))
}

fn pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('>').ok_or_else(|| format!("{s:?} is not a>b"))?;
    Ok((num(a)?, num(b)?))
}

fn parse_relation(line: &str) -> std::result::Result<RelationInstance, String> {
    let f = fields(line, &["n", "edges", "query", "target", "k"])?;
    let mut edges = Vec::new();
    for e in f[1].split(',').filter(|e| !e.is_empty()) {
        let (sd, l) = e.split_once(':').ok_or_else(|| format!("edge {e:?} is not a>b:label"))?;
        let (s, d) = pair(sd)?;
        edges.push((s, d, num(l)?));
    }
    Ok(RelationInstance { n: num(f[0])?, edges, query: pair(f[2])?, target: num(f[3])?, k: num(f[4])? })
}

fn parse_reverse(line: &str) -> std::result::Result<Seq2SeqInstance, String> {
    let f = fields(line, &["src", "tgt"])?;
    let toks = |s: &str| s.split(' ').filter(|t| !t.is_empty()).map(num).collect::<std::result::Result<Vec<_>, _>>();
    Ok(Seq2SeqInstance { src: toks(f[0])?, tgt: toks(f[1])? })
}

fn parse_header(line: &str) -> std::result::Result<SplitSpec, String> {
    let rest = line.strip_prefix(MAGIC).and_then(|r| r.strip_prefix('\t')).ok_or("not a dataset header")?;
    let f = fields(rest, &["task", "table", "vocab", "split", "range", "count", "seed"])?;
    Ok(SplitSpec {
        task: f[0].parse().map_err(|e: Error| e.to_string())?,
        table: f[1].parse().map_err(|e: Error| e.to_string())?,
        vocab: num(f[2])?,
        name: f[3].to_string(),
        range: f[4].parse().map_err(|e: Error| e.to_string())?,
        count: num(f[5])?,
        seed: f[6].parse().map_err(|_| format!("bad seed {:?}", f[6]))?,
    })
}

/// Parses and validates a dataset file; errors name the offending line.
pub fn parse_split(text: &str, path: &Path) -> Result<Split> {
    let err = |line: usize, reason: String| Error::Format { path: path.to_path_buf(), line, reason };
    let mut lines = text.lines();
    let spec = parse_header(lines.next().ok_or_else(|| err(1, "empty file".into()))?).map_err(|r| err(1, r))?;
    let instances = match spec.task {
        TaskKind::Relation => {
            let table = CompositionTable::from_spec(&spec.table)?;
            let mut v = Vec::new();
            for (no, line) in lines.enumerate() {
                let x = parse_relation(line).map_err(|r| err(no + 2, r))?;
                if !spec.range.contains(x.k) {
                    return Err(err(no + 2, format!("k = {} outside the split range {}", x.k, spec.range)));
                }
                x.validate(&table).map_err(|r| err(no + 2, r))?;
                v.push(x);
            }
            Instances::Relation(v)
        }
        TaskKind::Reverse => {
            let mut v = Vec::new();
            for (no, line) in lines.enumerate() {
                let x = parse_reverse(line).map_err(|r| err(no + 2, r))?;
                if !spec.range.contains(x.src.len()) {
                    return Err(err(no + 2, format!("length {} outside the split range {}", x.src.len(), spec.range)));
                }
                x.validate_reverse(spec.vocab).map_err(|r| err(no + 2, r))?;
                v.push(x);
            }
            Instances::Reverse(v)
        }
    };
    if instances.len() != spec.count {
        return Err(err(instances.len() + 2, format!("header promises {} instances, file has {}", spec.count, instances.len())));
    }
    Ok(Split { spec, instances })
}
