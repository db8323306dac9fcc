use std::path::Path;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, GraphInput, Seq2SeqModel};
use crate::scalar::Scalar;
use crate::tasks::{RelationInstance, Seq2SeqInstance};

/// A model paired with the instance type it learns from.
pub trait Learner<T: Scalar>: Clone {
    type Item: Clone;

    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// Mean loss over a batch.
    fn batch_loss(&self, g: &mut Graph<T>, items: &[&Self::Item]) -> Result<Var>;
    /// Number of correctly solved instances in a batch.
    fn batch_correct(&self, items: &[Self::Item]) -> Result<usize>;
    /// Rejects data whose labels or tokens the model cannot represent.
    fn check_label_space(&self, items: &[Self::Item]) -> Result<()>;
    fn save(&self, path: &Path) -> Result<()>;
    /// Name of the per-split score (`accuracy` or `exact_match`).
    fn metric_name(&self) -> &'static str;
}

impl<T: Scalar> Learner<T> for EncoderModel<T> {
    type Item = RelationInstance;

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn batch_loss(&self, g: &mut Graph<T>, items: &[&RelationInstance]) -> Result<Var> {
        let graphs: Vec<GraphInput> = items.iter().map(|x| x.graph()).collect();
        let queries: Vec<(usize, usize)> = items.iter().map(|x| x.query).collect();
        let targets: Vec<usize> = items.iter().map(|x| x.target).collect();
        let logits = self.relation_logits(g, &graphs, &queries)?;
        g.cross_entropy(logits, &targets, None)
    }

    fn batch_correct(&self, items: &[RelationInstance]) -> Result<usize> {
        let mut g = Graph::new();
        let graphs: Vec<GraphInput> = items.iter().map(|x| x.graph()).collect();
        let queries: Vec<(usize, usize)> = items.iter().map(|x| x.query).collect();
        let logits = self.relation_logits(&mut g, &graphs, &queries)?;
        let c = self.config.num_output_labels;
        Ok(g.value(logits)
            .data()
            .chunks(c)
            .zip(items)
            .filter(|(row, x)| crate::model::argmax(row) == x.target)
            .count())
    }

    fn check_label_space(&self, items: &[RelationInstance]) -> Result<()> {
        let (labels, outputs) = (self.config.num_edge_labels, self.config.num_output_labels);
        for x in items {
            if x.target >= outputs {
                return Err(Error::LabelSpace(format!("target {} but the model predicts {outputs} labels", x.target)));
            }
            if let Some(e) = x.edges.iter().find(|e| e.2 >= labels) {
                return Err(Error::LabelSpace(format!("edge label {} but the model embeds {labels} labels", e.2)));
            }
        }
        Ok(())
    }

    fn save(&self, path: &Path) -> Result<()> {
        EncoderModel::save(self, path)
    }

    fn metric_name(&self) -> &'static str {
        "accuracy"
    }
}

impl<T: Scalar> Learner<T> for Seq2SeqModel<T> {
    type Item = Seq2SeqInstance;

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn batch_loss(&self, g: &mut Graph<T>, items: &[&Seq2SeqInstance]) -> Result<Var> {
        let srcs: Vec<&[usize]> = items.iter().map(|x| x.src.as_slice()).collect();
        let tgts: Vec<&[usize]> = items.iter().map(|x| x.tgt.as_slice()).collect();
        self.loss(g, &srcs, &tgts)
    }

    fn batch_correct(&self, items: &[Seq2SeqInstance]) -> Result<usize> {
        let srcs: Vec<&[usize]> = items.iter().map(|x| x.src.as_slice()).collect();
        let longest = items.iter().map(|x| x.tgt.len()).max().unwrap_or(0);
        // one token of slack beyond the longest reference so overlong outputs count as wrong
        let max_len = (longest + 1).min(self.config.max_len - 1).max(1);
        let out = self.greedy_decode(&srcs, max_len)?;
        Ok(out.iter().zip(items).filter(|(o, x)| !o.truncated && o.tokens == x.tgt).count())
    }

    fn check_label_space(&self, items: &[Seq2SeqInstance]) -> Result<()> {
        let (vocab, out) = (self.config.vocab_size, self.bos());
        for x in items {
            if let Some(t) = x.src.iter().find(|&&t| t >= vocab) {
                return Err(Error::LabelSpace(format!("source token {t} but the model embeds {vocab} tokens")));
            }
            if let Some(t) = x.tgt.iter().find(|&&t| t >= out) {
                return Err(Error::LabelSpace(format!("target token {t} but the model has {out} content tokens")));
            }
        }
        Ok(())
    }

    fn save(&self, path: &Path) -> Result<()> {
        Seq2SeqModel::save(self, path)
    }

    fn metric_name(&self) -> &'static str {
        "exact_match"
    }
}
