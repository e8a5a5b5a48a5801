use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point;

const HEADER: &str = "# ufm-matches v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: Point,
    pub b: Point,
    pub score: f64,
    /// Heatmap variance in px², when refined.
    pub sigma2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Stable sort by descending score.
    pub fn sort_by_score(&mut self) {
        self.matches.sort_by(|x, y| y.score.total_cmp(&x.score));
    }

    /// `(a, b)` point pairs.
    pub fn pairs(&self) -> Vec<(Point, Point)> {
        self.matches.iter().map(|m| (m.a, m.b)).collect()
    }

    /// Text form, score-descending; an absent σ² is written as `nan`.
    pub fn serialize(&self) -> String {
        let mut sorted = self.clone();
        sorted.sort_by_score();
        let mut s = String::from(HEADER);
        s.push('\n');
        for m in &sorted.matches {
            let _ = writeln!(
                s,
                "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                m.a.x,
                m.a.y,
                m.b.x,
                m.b.y,
                m.score,
                m.sigma2.unwrap_or(f64::NAN)
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(Error::format(format!("match file must start with `{HEADER}`")));
        }
        let mut matches = Vec::new();
        for (no, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("match line {}: {e}", no + 2)))?;
            if v.len() != 6 {
                return Err(Error::format(format!("match line {}: expected 6 fields, got {}", no + 2, v.len())));
            }
            if v[..5].iter().any(|x| !x.is_finite()) {
                return Err(Error::format(format!("match line {}: non-finite value", no + 2)));
            }
            matches.push(Match {
                a: Point::new(v[0], v[1]),
                b: Point::new(v[2], v[3]),
                score: v[4],
                sigma2: v[5].is_finite().then_some(v[5]),
            });
        }
        Ok(MatchSet { matches })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
