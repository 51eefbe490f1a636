//! Partial ancestral graphs: an edge-mark matrix over named variables, with
//! JSON and text renderings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mark at one end of a PAG edge. Arrow-arrow edges indicate latent
/// confounding; tail-tail edges indicate selection ancestry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Mark {
    None = 0,
    Circle = 1,
    Arrow = 2,
    Tail = 3,
}

impl Mark {
    pub fn from_u8(v: u8) -> Result<Mark> {
        Ok(match v {
            0 => Mark::None,
            1 => Mark::Circle,
            2 => Mark::Arrow,
            3 => Mark::Tail,
            other => return Err(Error::invalid(format!("invalid edge mark {other}"))),
        })
    }
}

/// A PAG as a square mark matrix: `mark(i, j)` is the mark at j's end of the
/// edge between i and j (`None` on both ends when there is no edge).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pag {
    labels: Vec<String>,
    marks: Vec<Mark>,
}

impl Pag {
    pub fn empty(labels: Vec<String>) -> Self {
        let n = labels.len();
        Pag {
            labels,
            marks: vec![Mark::None; n * n],
        }
    }

    pub fn from_marks(labels: Vec<String>, marks: Vec<Vec<u8>>) -> Result<Self> {
        let n = labels.len();
        if marks.len() != n || marks.iter().any(|row| row.len() != n) {
            return Err(Error::invalid(format!(
                "mark matrix must be {n}x{n} to match the labels"
            )));
        }
        let mut pag = Pag::empty(labels);
        for i in 0..n {
            for j in 0..n {
                pag.marks[i * n + j] = Mark::from_u8(marks[i][j])?;
            }
        }
        pag.validate()?;
        Ok(pag)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn var_count(&self) -> usize {
        self.labels.len()
    }

    /// Mark at j's end of the edge between i and j.
    pub fn mark(&self, i: usize, j: usize) -> Mark {
        self.marks[i * self.labels.len() + j]
    }

    pub fn set_mark(&mut self, i: usize, j: usize, mark: Mark) {
        let n = self.labels.len();
        self.marks[i * n + j] = mark;
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        i != j && self.mark(i, j) != Mark::None
    }

    /// Variables adjacent to `v`, ascending.
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        (0..self.var_count()).filter(|&w| self.adjacent(v, w)).collect()
    }

    pub fn edge_count(&self) -> usize {
        let n = self.var_count();
        (0..n)
            .map(|i| ((i + 1)..n).filter(|&j| self.adjacent(i, j)).count())
            .sum()
    }

    /// Structural invariants: zero diagonal and `mark(i,j) = None` iff
    /// `mark(j,i) = None`.
    pub fn validate(&self) -> Result<()> {
        let n = self.var_count();
        for i in 0..n {
            if self.mark(i, i) != Mark::None {
                return Err(Error::invalid(format!(
                    "self-mark on '{}'",
                    self.labels[i]
                )));
            }
            for j in 0..n {
                if i != j && (self.mark(i, j) == Mark::None) != (self.mark(j, i) == Mark::None) {
                    return Err(Error::invalid(format!(
                        "half-present edge between '{}' and '{}'",
                        self.labels[i], self.labels[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// One line per edge, e.g. `A o-> B`, `A --- B`, `A <-> B`.
    pub fn render_text(&self) -> String {
        let n = self.var_count();
        let mut out = String::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if !self.adjacent(i, j) {
                    continue;
                }
                let left = match self.mark(j, i) {
                    Mark::Circle => 'o',
                    Mark::Arrow => '<',
                    Mark::Tail => '-',
                    Mark::None => unreachable!(),
                };
                let right = match self.mark(i, j) {
                    Mark::Circle => 'o',
                    Mark::Arrow => '>',
                    Mark::Tail => '-',
                    Mark::None => unreachable!(),
                };
                out.push_str(&format!(
                    "{} {left}-{right} {}\n",
                    self.labels[i], self.labels[j]
                ));
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct PagJson {
    labels: Vec<String>,
    marks: Vec<Vec<u8>>,
}

pub fn pag_to_json(pag: &Pag) -> String {
    let n = pag.var_count();
    let marks = (0..n)
        .map(|i| (0..n).map(|j| pag.mark(i, j) as u8).collect())
        .collect();
    serde_json::to_string_pretty(&PagJson {
        labels: pag.labels().to_vec(),
        marks,
    })
    .expect("pag serialization")
}

pub fn pag_from_json(src: &str) -> Result<Pag> {
    let parsed: PagJson = serde_json::from_str(src)
        .map_err(|e| Error::parse_at(Some(e.line()), format!("pag JSON: {e}")))?;
    Pag::from_marks(parsed.labels, parsed.marks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marks_and_rendering() {
        let mut pag = Pag::empty(vec!["A".into(), "B".into(), "C".into()]);
        // A o-> B
        pag.set_mark(0, 1, Mark::Arrow);
        pag.set_mark(1, 0, Mark::Circle);
        // B <-> C
        pag.set_mark(1, 2, Mark::Arrow);
        pag.set_mark(2, 1, Mark::Arrow);
        pag.validate().unwrap();
        let text = pag.render_text();
        assert!(text.contains("A o-> B"));
        assert!(text.contains("B <-> C"));
        assert_eq!(pag.edge_count(), 2);
    }

    #[test]
    fn json_roundtrip() {
        let mut pag = Pag::empty(vec!["A".into(), "B".into()]);
        pag.set_mark(0, 1, Mark::Tail);
        pag.set_mark(1, 0, Mark::Tail);
        let back = pag_from_json(&pag_to_json(&pag)).unwrap();
        assert_eq!(back, pag);
        assert!(back.render_text().contains("A --- B"));
    }

    #[test]
    fn validate_rejects_half_edges() {
        let bad = Pag::from_marks(
            vec!["A".into(), "B".into()],
            vec![vec![0, 2], vec![0, 0]],
        );
        assert!(bad.is_err());
    }
}
