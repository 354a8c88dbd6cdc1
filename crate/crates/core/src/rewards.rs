//! Verifiable rewards on token grids. Every reward lies in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::policy::{GridShape, TokenGrid};

/// Axis-aligned rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// A token that should fill a rectangle and appear nowhere else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionTarget {
    pub token: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `1 - |#token - target| / N`
    Count { token: usize, target: usize },
    /// Fraction of the rectangle equal to the token times fraction of the
    /// outside not equal to it.
    Region { token: usize, rect: Rect },
    /// Mean of (border cells equal to `border`) and (interior cells equal to `interior`).
    BorderStructure { border: usize, interior: usize },
    /// Mean of two region scores.
    TwoRegion { first: RegionTarget, second: RegionTarget },
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::BorderStructure {
            border: 1,
            interior: 2,
        }
    }
}

fn check_rect(rect: &Rect, shape: GridShape) -> Result<()> {
    ensure!(rect.height >= 1 && rect.width >= 1, "empty rectangle {rect:?}");
    ensure!(
        rect.top + rect.height <= shape.height && rect.left + rect.width <= shape.width,
        "rectangle {rect:?} exceeds grid {}x{}",
        shape.height,
        shape.width
    );
    Ok(())
}

impl RewardSpec {
    pub fn validate(&self, shape: GridShape, vocab: usize) -> Result<()> {
        let tok = |t: usize| -> Result<()> {
            ensure!(t < vocab, "target token {t} out of range for vocab {vocab}");
            Ok(())
        };
        match self {
            RewardSpec::Count { token, target } => {
                tok(*token)?;
                ensure!(*target <= shape.len(), "count target {target} exceeds {} cells", shape.len());
            }
            RewardSpec::Region { token, rect } => {
                tok(*token)?;
                check_rect(rect, shape)?;
            }
            RewardSpec::BorderStructure { border, interior } => {
                tok(*border)?;
                tok(*interior)?;
            }
            RewardSpec::TwoRegion { first, second } => {
                for r in [first, second] {
                    tok(r.token)?;
                    check_rect(&r.rect, shape)?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, grid: &TokenGrid) -> Result<f64> {
        let shape = grid.shape;
        self.validate(shape, usize::MAX)?;
        let n = grid.len() as f64;
        let at = |t: usize| grid.tokens[t];
        Ok(match *self {
            RewardSpec::Count { token, target } => {
                let count = grid.tokens.iter().filter(|&&z| z == token).count();
                1.0 - (count as f64 - target as f64).abs() / n
            }
            RewardSpec::Region { token, rect } => region_score(grid, token, rect),
            RewardSpec::BorderStructure { border, interior } => {
                let (mut b_hit, mut b_total, mut i_hit, mut i_total) = (0, 0, 0, 0);
                for t in 0..grid.len() {
                    if shape.is_border(t) {
                        b_total += 1;
                        b_hit += usize::from(at(t) == border);
                    } else {
                        i_total += 1;
                        i_hit += usize::from(at(t) == interior);
                    }
                }
                (fraction(b_hit, b_total) + fraction(i_hit, i_total)) / 2.0
            }
            RewardSpec::TwoRegion { first, second } => {
                (region_score(grid, first.token, first.rect) + region_score(grid, second.token, second.rect)) / 2.0
            }
        })
    }

    /// Cells that form the "subject" of the task, if it has one.
    pub fn subject_mask(&self, shape: GridShape) -> Option<Vec<bool>> {
        let cells = 0..shape.len();
        let yx = |t: usize| (t / shape.width, t % shape.width);
        match self {
            RewardSpec::Count { .. } => None,
            RewardSpec::Region { rect, .. } => Some(cells.map(|t| {
                let (y, x) = yx(t);
                rect.contains(y, x)
            }).collect()),
            RewardSpec::BorderStructure { .. } => Some(cells.map(|t| shape.is_border(t)).collect()),
            RewardSpec::TwoRegion { first, second } => Some(cells.map(|t| {
                let (y, x) = yx(t);
                first.rect.contains(y, x) || second.rect.contains(y, x)
            }).collect()),
        }
    }
}

/// Empty sets count as fully satisfied.
fn fraction(hit: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

fn region_score(grid: &TokenGrid, token: usize, rect: Rect) -> f64 {
    let w = grid.shape.width;
    let (mut in_hit, mut in_total, mut out_clean, mut out_total) = (0, 0, 0, 0);
    for (t, &z) in grid.tokens.iter().enumerate() {
        if rect.contains(t / w, t % w) {
            in_total += 1;
            in_hit += usize::from(z == token);
        } else {
            out_total += 1;
            out_clean += usize::from(z != token);
        }
    }
    fraction(in_hit, in_total) * fraction(out_clean, out_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, tokens: Vec<usize>) -> TokenGrid {
        TokenGrid::new(GridShape::new(h, w), tokens).unwrap()
    }

    fn two_phase(h: usize, w: usize, a: usize, b: usize) -> TokenGrid {
        let shape = GridShape::new(h, w);
        let tokens = (0..h * w).map(|t| if shape.is_border(t) { a } else { b }).collect();
        TokenGrid::new(shape, tokens).unwrap()
    }

    #[test]
    fn count_exact_match() {
        let g = grid(2, 3, vec![4, 0, 4, 1, 4, 2]);
        let spec = RewardSpec::Count { token: 4, target: 3 };
        assert_eq!(spec.evaluate(&g).unwrap(), 1.0);
        let spec = RewardSpec::Count { token: 4, target: 5 };
        assert!((spec.evaluate(&g).unwrap() - (1.0 - 2.0 / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn border_structure_all_border_token() {
        let spec = RewardSpec::BorderStructure { border: 1, interior: 2 };
        assert_eq!(spec.evaluate(&grid(6, 6, vec![1; 36])).unwrap(), 0.5);
        assert_eq!(spec.evaluate(&two_phase(6, 6, 1, 2)).unwrap(), 1.0);
        assert_eq!(spec.evaluate(&two_phase(6, 6, 2, 1)).unwrap(), 0.0);
    }

    #[test]
    fn region_perfect_fill() {
        let rect = Rect { top: 1, left: 1, height: 2, width: 2 };
        let shape = GridShape::new(4, 4);
        let tokens = (0..16).map(|t| if rect.contains(t / 4, t % 4) { 5 } else { 0 }).collect();
        let g = TokenGrid::new(shape, tokens).unwrap();
        let spec = RewardSpec::Region { token: 5, rect };
        assert_eq!(spec.evaluate(&g).unwrap(), 1.0);
        // half the rectangle, clean outside
        let mut tokens = g.tokens.clone();
        tokens[5] = 0;
        tokens[6] = 0;
        assert_eq!(spec.evaluate(&grid(4, 4, tokens)).unwrap(), 0.5);

        let two = RewardSpec::TwoRegion {
            first: RegionTarget { token: 5, rect },
            second: RegionTarget { token: 7, rect: Rect { top: 0, left: 0, height: 1, width: 1 } },
        };
        // first region: inside perfect, outside clean -> 1; second: corner is 0 -> 0
        assert_eq!(two.evaluate(&g).unwrap(), 0.5);
    }

    #[test]
    fn malformed_specs_rejected() {
        let shape = GridShape::new(3, 3);
        let bad_rect = RewardSpec::Region { token: 1, rect: Rect { top: 2, left: 0, height: 2, width: 1 } };
        assert!(bad_rect.validate(shape, 4).is_err());
        assert!(bad_rect.evaluate(&grid(3, 3, vec![0; 9])).is_err());
        assert!(RewardSpec::Count { token: 9, target: 1 }.validate(shape, 4).is_err());
        assert!(RewardSpec::Count { token: 1, target: 10 }.validate(shape, 4).is_err());
        assert!(RewardSpec::BorderStructure { border: 0, interior: 4 }.validate(shape, 4).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec: RewardSpec = serde_json::from_str(r#"{"kind":"border_structure","border":3,"interior":5}"#).unwrap();
        assert_eq!(spec, RewardSpec::BorderStructure { border: 3, interior: 5 });
        assert!(serde_json::from_str::<RewardSpec>(r#"{"kind":"count","token":1,"target":2,"x":1}"#).is_err());
    }

    #[test]
    fn subject_masks() {
        let shape = GridShape::new(3, 3);
        let m = RewardSpec::default().subject_mask(shape).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 8);
        assert!(!m[4]);
        assert!(RewardSpec::Count { token: 0, target: 0 }.subject_mask(shape).is_none());
    }

    proptest! {
        #[test]
        fn rewards_in_unit_interval(tokens in proptest::collection::vec(0usize..4, 16), c in 0usize..4, k in 0usize..=16) {
            let g = grid(4, 4, tokens);
            let rect = Rect { top: 1, left: 0, height: 2, width: 3 };
            for spec in [
                RewardSpec::Count { token: c, target: k },
                RewardSpec::Region { token: c, rect },
                RewardSpec::BorderStructure { border: c, interior: (c + 1) % 4 },
            ] {
                let r = spec.evaluate(&g).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn count_improves_by_one_over_n(tokens in proptest::collection::vec(0usize..4, 16), k in 1usize..=16) {
            let g = grid(4, 4, tokens.clone());
            let spec = RewardSpec::Count { token: 0, target: k };
            let have = tokens.iter().filter(|&&z| z == 0).count();
            if have < k {
                let i = tokens.iter().position(|&z| z != 0).unwrap();
                let mut t2 = tokens.clone();
                t2[i] = 0;
                let delta = spec.evaluate(&grid(4, 4, t2)).unwrap() - spec.evaluate(&g).unwrap();
                prop_assert!((delta - 1.0 / 16.0).abs() < 1e-12);
            }
        }

        #[test]
        fn border_maximum_only_for_two_phase(tokens in proptest::collection::vec(0usize..3, 16)) {
            let g = grid(4, 4, tokens);
            let spec = RewardSpec::BorderStructure { border: 1, interior: 2 };
            let r = spec.evaluate(&g).unwrap();
            prop_assert_eq!(r == 1.0, g == two_phase(4, 4, 1, 2));
        }
    }
}
