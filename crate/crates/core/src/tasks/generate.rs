use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::GraphInput;
use crate::tasks::table::{compose_oracle, CompositionTable};

/// How many chains are drawn before a partial table is declared unusable.
pub const MAX_RESAMPLE: usize = 10_000;

/// A noiseless chain graph: exactly the `k` facts needed to derive `target`
/// for the pair `query`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationInstance {
    pub n: usize,
    pub edges: Vec<(usize, usize, usize)>,
    pub query: (usize, usize),
    pub target: usize,
    pub k: usize,
}

impl RelationInstance {
    pub fn graph(&self) -> GraphInput<'_> {
        GraphInput { n: self.n, edges: &self.edges }
    }

    /// Walks the chain from the query source and recomputes the target.
    pub fn validate(&self, table: &CompositionTable) -> std::result::Result<(), String> {
        if self.k < 1 || self.n != self.k + 1 {
            return Err(format!("n = {} does not equal k + 1 for k = {}", self.n, self.k));
        }
        if self.edges.len() != self.k {
            return Err(format!("{} edges for k = {}", self.edges.len(), self.k));
        }
        let (src, dst) = self.query;
        if src >= self.n || dst >= self.n {
            return Err(format!("query ({src}, {dst}) out of range"));
        }
        let mut node = src;
        let mut visited = vec![false; self.n];
        visited[node] = true;
        let mut chain = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            let mut out = self.edges.iter().filter(|e| e.0 == node);
            let (_, next, label) = *out.next().ok_or_else(|| format!("chain breaks at node {node}"))?;
            if out.next().is_some() {
                return Err(format!("node {node} has more than one outgoing edge"));
            }
            if next >= self.n || visited[next] {
                return Err(format!("chain revisits or leaves the graph at node {next}"));
            }
            visited[next] = true;
            chain.push(label);
            node = next;
        }
        if node != dst {
            return Err(format!("chain ends at {node}, query target node is {dst}"));
        }
        match compose_oracle(table, &chain) {
            Ok(t) if t == self.target => Ok(()),
            Ok(t) => Err(format!("target {} but the chain composes to {t}", self.target)),
            Err(e) => Err(e.to_string()),
        }
    }
}

/// Samples a length-`k` path with labels whose composition is defined (dead
/// ends restart the draw) and relabels its nodes by a uniform random permutation.
pub fn gen_relation_instance<R: Rng + ?Sized>(table: &CompositionTable, k: usize, rng: &mut R) -> Result<RelationInstance> {
    if k < 2 {
        return Err(Error::Generation(format!("relation length must be at least 2, got {k}")));
    }
    if table.is_empty() {
        return Err(Error::Generation("empty composition table".into()));
    }
    let mut attempt = 0;
    let (labels, target) = 'draw: loop {
        if attempt == MAX_RESAMPLE {
            return Err(Error::Generation(format!("no composable chain of length {k} after {MAX_RESAMPLE} draws")));
        }
        attempt += 1;
        // Extend the chain one label at a time, choosing uniformly among the
        // labels that keep the running composition defined.
        let mut labels = vec![rng.gen_range(0..table.len())];
        let mut acc = labels[0];
        while labels.len() < k {
            let next: Vec<(usize, usize)> =
                (0..table.len()).filter_map(|b| table.compose(acc, b).map(|c| (b, c))).collect();
            if next.is_empty() {
                continue 'draw;
            }
            let (b, c) = next[rng.gen_range(0..next.len())];
            labels.push(b);
            acc = c;
        }
        break (labels, acc);
    };
    let n = k + 1;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let edges = labels.iter().enumerate().map(|(p, &l)| (perm[p], perm[p + 1], l)).collect();
    Ok(RelationInstance { n, edges, query: (perm[0], perm[k]), target, k })
}

/// A source/target token pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Seq2SeqInstance {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Seq2SeqInstance {
    pub fn validate_reverse(&self, vocab: usize) -> std::result::Result<(), String> {
        if let Some(t) = self.src.iter().chain(&self.tgt).find(|&&t| t >= vocab) {
            return Err(format!("token {t} outside a vocabulary of {vocab}"));
        }
        if !self.tgt.iter().eq(self.src.iter().rev()) {
            return Err("target is not the reversed source".into());
        }
        Ok(())
    }
}

/// Uniform tokens of the given length; the target is the reversal.
pub fn gen_reverse_instance<R: Rng + ?Sized>(vocab: usize, length: usize, rng: &mut R) -> Result<Seq2SeqInstance> {
    if vocab == 0 || length == 0 {
        return Err(Error::Generation("reverse task needs a nonempty vocabulary and length".into()));
    }
    let src: Vec<usize> = (0..length).map(|_| rng.gen_range(0..vocab)).collect();
    let tgt = src.iter().rev().copied().collect();
    Ok(Seq2SeqInstance { src, tgt })
}
