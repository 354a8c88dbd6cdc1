//! Per-token statistics over a generated token grid.
//!
//! Entropy is measured in nats. Grids are stored row-major, so the flat index
//! of cell `(y, x)` is `y * width + x`, which is also the generation order.

use crate::error::{ensure, GcpoError, Result};

const SUM_TOLERANCE: f64 = 1e-6;

/// A validated next-token distribution over the codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        ensure!(!probs.is_empty(), "probability vector is empty");
        if let Some((k, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(GcpoError::Validation(format!(
                "probability entry {k} is {p}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        ensure!(
            (sum - 1.0).abs() <= SUM_TOLERANCE,
            "probabilities sum to {sum}, expected 1"
        );
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Shannon entropy `-sum p ln p`, with `0 ln 0 = 0`.
pub fn token_entropy(p: &ProbVector) -> f64 {
    entropy_unchecked(p.as_slice())
}

/// Entropy of a row that is already known to be a distribution.
pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&pk| pk > 0.0)
        .map(|&pk| -pk * pk.ln())
        .sum();
    h.max(0.0)
}

/// A scalar field over an `height x width` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// Per-position token entropy (nats).
pub type EntropyMap = ScalarGrid;
/// Per-position entropy-gradient magnitude.
pub type GradientMap = ScalarGrid;

impl ScalarGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, "grid must be at least 1x1");
        ensure!(
            values.len() == height * width,
            "grid {height}x{width} needs {} values, got {}",
            height * width,
            values.len()
        );
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == width),
            "ragged rows in grid"
        );
        Self::new(height, width, rows.concat())
    }

    /// Entropy of every row of a row-major `n x vocab` probability table.
    pub fn entropy_map(height: usize, width: usize, probs: &[f64], vocab: usize) -> Result<Self> {
        ensure!(
            probs.len() == height * width * vocab,
            "probability table has {} entries, expected {}",
            probs.len(),
            height * width * vocab
        );
        let values = probs.chunks(vocab).map(entropy_unchecked).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Row-major CSV with `%.6f` cells and no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 10);
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|cell| {
                        cell.trim().parse::<f64>().map_err(|e| {
                            GcpoError::Validation(format!("bad CSV cell {cell:?}: {e}"))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }
}

/// Local causal averaging of an entropy map.
///
/// Each cell becomes the mean of itself and whichever of its upper-left,
/// upper, upper-right and left neighbours lie inside the grid.
pub fn smooth_entropy_map(m: &EntropyMap) -> EntropyMap {
    let (h, w) = (m.height, m.width);
    let mut out = Vec::with_capacity(m.values.len());
    for y in 0..h {
        for x in 0..w {
            // offsets from the centre keep constant regions exactly constant
            let centre = m.get(y, x);
            let mut offset = 0.0;
            let mut count = 1usize;
            let mut add = |v: f64| {
                offset += v - centre;
                count += 1;
            };
            if y > 0 {
                if x > 0 {
                    add(m.get(y - 1, x - 1));
                }
                add(m.get(y - 1, x));
                if x + 1 < w {
                    add(m.get(y - 1, x + 1));
                }
            }
            if x > 0 {
                add(m.get(y, x - 1));
            }
            out.push(centre + offset / count as f64);
        }
    }
    ScalarGrid {
        height: h,
        width: w,
        values: out,
    }
}

/// Central-difference gradient magnitude; one-sided differences on the border.
pub fn entropy_gradient(m: &EntropyMap) -> Result<GradientMap> {
    let (h, w) = (m.height, m.width);
    if h < 2 || w < 2 {
        return Err(GcpoError::DegenerateGrid {
            height: h,
            width: w,
        });
    }
    let mut out = Vec::with_capacity(m.values.len());
    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 {
                m.get(y, 1) - m.get(y, 0)
            } else if x == w - 1 {
                m.get(y, w - 1) - m.get(y, w - 2)
            } else {
                (m.get(y, x + 1) - m.get(y, x - 1)) / 2.0
            };
            let gy = if y == 0 {
                m.get(1, x) - m.get(0, x)
            } else if y == h - 1 {
                m.get(h - 1, x) - m.get(h - 2, x)
            } else {
                (m.get(y + 1, x) - m.get(y - 1, x)) / 2.0
            };
            out.push(gx.hypot(gy));
        }
    }
    Ok(ScalarGrid {
        height: h,
        width: w,
        values: out,
    })
}

/// Token embeddings for a group of `samples` sequences of `positions` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGroup {
    samples: usize,
    positions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingGroup {
    /// `data` is laid out as `[sample][position][dim]`.
    pub fn new(samples: usize, positions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == samples * positions * dim,
            "embedding group needs {} values, got {}",
            samples * positions * dim,
            data.len()
        );
        Ok(Self {
            samples,
            positions,
            dim,
            data,
        })
    }

    pub fn from_nested(group: &[Vec<Vec<f64>>]) -> Result<Self> {
        let samples = group.len();
        let positions = group.first().map_or(0, Vec::len);
        let dim = group
            .first()
            .and_then(|s| s.first())
            .map_or(0, Vec::len);
        ensure!(
            group
                .iter()
                .all(|s| s.len() == positions && s.iter().all(|e| e.len() == dim)),
            "ragged embedding group"
        );
        let data = group.iter().flatten().flatten().copied().collect();
        Self::new(samples, positions, dim, data)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn embedding(&self, sample: usize, position: usize) -> &[f64] {
        let start = (sample * self.positions + position) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Mean pairwise cosine similarity at each position across the group.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    pub mean_similarity: Vec<f64>,
}

pub fn group_similarity(g: &EmbeddingGroup) -> Result<SimilarityProfile> {
    ensure!(
        g.samples >= 2,
        "similarity needs at least 2 samples, got {}",
        g.samples
    );
    let mut norms = vec![0.0; g.samples * g.positions];
    for s in 0..g.samples {
        for t in 0..g.positions {
            let n = g.embedding(s, t).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(GcpoError::ZeroEmbedding {
                    position: t,
                    sample: s,
                });
            }
            norms[s * g.positions + t] = n;
        }
    }
    let pairs = (g.samples * (g.samples - 1) / 2) as f64;
    let mean_similarity = (0..g.positions)
        .map(|t| {
            let mut sum = 0.0;
            for j in 0..g.samples {
                for k in j + 1..g.samples {
                    let dot: f64 = g
                        .embedding(j, t)
                        .iter()
                        .zip(g.embedding(k, t))
                        .map(|(a, b)| a * b)
                        .sum();
                    sum += dot / (norms[j * g.positions + t] * norms[k * g.positions + t]);
                }
            }
            (sum / pairs).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(SimilarityProfile { mean_similarity })
}

impl SimilarityProfile {
    /// Reshape into a grid for export.
    pub fn to_grid(&self, height: usize, width: usize) -> Result<ScalarGrid> {
        ScalarGrid::new(height, width, self.mean_similarity.clone())
    }
}
