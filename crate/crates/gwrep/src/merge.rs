//! Streaming grouping of records across position-sorted study files.
//!
//! Each source must be sorted by chromosome then position. The merge holds
//! one record per source plus the current position's bucket, so memory does
//! not grow with the number of variants.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::io;

use gwrep_core::sumstats::{group_by_variant, normalize_chromosome, VariantRecord};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("source {source_index} is not sorted by chromosome and position at {variant_id}")]
    Unsorted { source_index: usize, variant_id: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Natural chromosome order: 1..22 numerically, then X, Y, MT, then any
/// other label lexically.
pub fn chrom_cmp(a: &str, b: &str) -> Ordering {
    fn rank(c: &str) -> (u32, &str) {
        let c = normalize_chromosome(c);
        if let Ok(n) = c.parse::<u32>() {
            return (n, "");
        }
        if c.eq_ignore_ascii_case("x") {
            (1001, "")
        } else if c.eq_ignore_ascii_case("y") {
            (1002, "")
        } else if c.eq_ignore_ascii_case("m") || c.eq_ignore_ascii_case("mt") {
            (1003, "")
        } else {
            (u32::MAX, c)
        }
    }
    rank(a).cmp(&rank(b))
}

fn locus_cmp(a: &VariantRecord, b: &VariantRecord) -> Ordering {
    chrom_cmp(&a.chromosome, &b.chromosome).then(a.position.cmp(&b.position))
}

struct Source<I> {
    it: I,
    head: Option<VariantRecord>,
}

pub struct SortedMerge<I> {
    sources: Vec<Source<I>>,
    pending: VecDeque<Vec<VariantRecord>>,
    failed: bool,
}

impl<I> SortedMerge<I>
where
    I: Iterator<Item = io::Result<VariantRecord>>,
{
    pub fn new(sources: Vec<I>) -> Result<Self, MergeError> {
        let mut m = Self {
            sources: sources.into_iter().map(|it| Source { it, head: None }).collect(),
            pending: VecDeque::new(),
            failed: false,
        };
        for i in 0..m.sources.len() {
            m.advance(i)?;
        }
        Ok(m)
    }

    // Replaces the head of source `i`, checking order against the old head.
    fn advance(&mut self, i: usize) -> Result<Option<VariantRecord>, MergeError> {
        let s = &mut self.sources[i];
        let next = s.it.next().transpose()?;
        if let (Some(prev), Some(n)) = (&s.head, &next) {
            if locus_cmp(n, prev) == Ordering::Less {
                return Err(MergeError::Unsorted { source_index: i, variant_id: n.variant_id.clone() });
            }
        }
        Ok(std::mem::replace(&mut s.head, next))
    }

    fn fill(&mut self) -> Result<bool, MergeError> {
        let Some(min) = self
            .sources
            .iter()
            .filter_map(|s| s.head.as_ref())
            .min_by(|a, b| locus_cmp(a, b))
            .cloned()
        else {
            return Ok(false);
        };
        let mut bucket = Vec::new();
        for i in 0..self.sources.len() {
            while self.sources[i].head.as_ref().is_some_and(|h| locus_cmp(h, &min) == Ordering::Equal) {
                if let Some(r) = self.advance(i)? {
                    bucket.push(r);
                }
            }
        }
        // Several allele pairs can share a position; split them by key.
        self.pending.extend(group_by_variant(bucket));
        Ok(true)
    }
}

impl<I> Iterator for SortedMerge<I>
where
    I: Iterator<Item = io::Result<VariantRecord>>,
{
    type Item = Result<Vec<VariantRecord>, MergeError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        while self.pending.is_empty() {
            match self.fill() {
                Ok(true) => {}
                Ok(false) => return None,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        self.pending.pop_front().map(Ok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gwrep_core::sumstats::{Allele, GeneticModel};

    fn rec(study: &str, chr: &str, pos: u64, a: Allele, b: Allele) -> VariantRecord {
        VariantRecord {
            study_id: study.into(),
            variant_id: format!("{chr}:{pos}"),
            chromosome: chr.into(),
            position: pos,
            effect_allele: a,
            other_allele: b,
            effect_allele_freq: 0.3,
            beta: 0.1,
            se: 0.1,
            p_value: 0.3,
            n_cases: 1,
            n_controls: 1,
            genetic_model: GeneticModel::Additive,
            phenotype: None,
        }
    }

    fn src(v: Vec<VariantRecord>) -> std::vec::IntoIter<io::Result<VariantRecord>> {
        v.into_iter().map(Ok).collect::<Vec<_>>().into_iter()
    }

    #[test]
    fn chromosome_order_is_natural() {
        let mut c = vec!["X", "10", "2", "chr1", "MT", "Y", "22", "un"];
        c.sort_by(|a, b| chrom_cmp(a, b));
        assert_eq!(c, vec!["chr1", "2", "10", "22", "X", "Y", "MT", "un"]);
    }

    #[test]
    fn merges_matching_loci_across_sources() {
        use Allele::*;
        let a = vec![rec("a", "1", 10, A, G), rec("a", "1", 20, C, T), rec("a", "2", 5, A, C)];
        let b = vec![rec("b", "1", 20, T, C), rec("b", "1", 30, A, G), rec("b", "2", 5, A, C)];
        let groups: Vec<_> = SortedMerge::new(vec![src(a), src(b)]).unwrap().map(Result::unwrap).collect();
        let shape: Vec<(String, Vec<String>)> = groups
            .iter()
            .map(|g| (g[0].variant_id.clone(), g.iter().map(|r| r.study_id.clone()).collect()))
            .collect();
        assert_eq!(
            shape,
            vec![
                ("1:10".into(), vec!["a".into()]),
                ("1:20".into(), vec!["a".into(), "b".into()]),
                ("1:30".into(), vec!["b".into()]),
                ("2:5".into(), vec!["a".into(), "b".into()]),
            ]
        );
    }

    #[test]
    fn multiallelic_position_split_by_alleles() {
        use Allele::*;
        let a = vec![rec("a", "1", 10, A, G), rec("a", "1", 10, A, C)];
        let b = vec![rec("b", "1", 10, C, A)];
        let groups: Vec<_> = SortedMerge::new(vec![src(a), src(b)]).unwrap().map(Result::unwrap).collect();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].len(), 1);
        assert_eq!(groups[1].len(), 2);
    }

    #[test]
    fn unsorted_source_reported() {
        use Allele::*;
        let a = vec![rec("a", "2", 10, A, G), rec("a", "1", 10, A, G)];
        let out: Vec<_> = SortedMerge::new(vec![src(a)]).unwrap().collect();
        assert!(out.iter().any(|r| matches!(r, Err(MergeError::Unsorted { source_index: 0, .. }))));
    }
}
