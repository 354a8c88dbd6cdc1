//! Critical-token selection: initial tokens, high entropy-gradient tokens and
//! low intra-group similarity tokens, combined as a union mask.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, GcpoError, Result};
use crate::policy::RolloutRecord;
use crate::token_stats::{
    entropy_gradient, group_similarity, smooth_entropy_map, EmbeddingGroup, EntropyMap, GradientMap, ScalarGrid,
    SimilarityProfile,
};

/// Per-subset budgets as fractions of the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionBudget {
    pub init_fraction: f64,
    pub struct_fraction: f64,
    pub sim_fraction: f64,
}

impl Default for SelectionBudget {
    fn default() -> Self {
        Self {
            init_fraction: 0.1,
            struct_fraction: 0.1,
            sim_fraction: 0.1,
        }
    }
}

impl SelectionBudget {
    pub fn uniform(fraction: f64) -> Self {
        Self {
            init_fraction: fraction,
            struct_fraction: fraction,
            sim_fraction: fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("init_fraction", self.init_fraction),
            ("struct_fraction", self.struct_fraction),
            ("sim_fraction", self.sim_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(GcpoError::Config(format!(
                    "selection.{name} must be in [0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// `ceil(fraction * n)` capped at `n`.
///
/// The product is nudged down by 1e-9 first so that values such as
/// `0.1 * 30 = 3.0000000000000004` round to 3 rather than 4.
pub fn budget_count(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n)
    }
}

/// Positions `0..K_init`.
pub fn select_initial(n: usize, budget: &SelectionBudget) -> Vec<usize> {
    (0..budget_count(budget.init_fraction, n)).collect()
}

/// The `K_struct` positions with the largest gradient magnitude.
pub fn select_structural(g: &GradientMap, budget: &SelectionBudget) -> Vec<usize> {
    let k = budget_count(budget.struct_fraction, g.len());
    top_k_by(g.values(), k, |a, b| b.total_cmp(a))
}

/// The `K_sim` positions with the lowest mean intra-group similarity.
pub fn select_diverse(s: &SimilarityProfile, budget: &SelectionBudget) -> Vec<usize> {
    let k = budget_count(budget.sim_fraction, s.mean_similarity.len());
    top_k_by(&s.mean_similarity, k, f64::total_cmp)
}

/// First `k` indices under `order`, ties going to the lower index; returned ascending.
fn top_k_by(values: &[f64], k: usize, order: impl Fn(&f64, &f64) -> std::cmp::Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| order(&values[a], &values[b]));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Which subsets selected a position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetLabels {
    pub init: bool,
    pub structural: bool,
    pub diverse: bool,
}

impl SubsetLabels {
    pub fn any(&self) -> bool {
        self.init || self.structural || self.diverse
    }

    /// Export code: 0 none, 1 init, 2 struct, 3 sim; overlaps take the lowest.
    pub fn code(&self) -> u8 {
        if self.init {
            1
        } else if self.structural {
            2
        } else if self.diverse {
            3
        } else {
            0
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.init {
            out.push("init");
        }
        if self.structural {
            out.push("struct");
        }
        if self.diverse {
            out.push("sim");
        }
        out
    }
}

/// Boolean critical-token mask with per-position provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub selected: Vec<bool>,
    pub labels: Vec<SubsetLabels>,
}

impl SelectionMask {
    pub fn full(n: usize) -> Self {
        Self {
            selected: vec![true; n],
            labels: vec![SubsetLabels::default(); n],
        }
    }

    /// A mask without provenance labels (random or complement arms).
    pub fn from_selected(selected: Vec<bool>) -> Self {
        let n = selected.len();
        Self {
            selected,
            labels: vec![SubsetLabels::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn ratio(&self) -> f64 {
        if self.selected.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.selected.len() as f64
        }
    }

    pub fn complement(&self) -> Self {
        Self::from_selected(self.selected.iter().map(|s| !s).collect())
    }

    /// CSV grid of subset codes (see [`SubsetLabels::code`]).
    pub fn to_csv(&self, width: usize) -> String {
        let mut out = String::new();
        for row in self.labels.chunks(width) {
            let cells: Vec<String> = row.iter().map(|l| l.code().to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// JSON sidecar with the exact label sets and the effective ratio.
    pub fn sidecar_json(&self) -> serde_json::Value {
        let labels: Vec<Vec<&str>> = self.labels.iter().map(SubsetLabels::names).collect();
        serde_json::json!({
            "length": self.len(),
            "selected_count": self.count(),
            "effective_ratio": self.ratio(),
            "labels": labels,
        })
    }
}

/// Union of the three subsets over a sequence of length `n`.
pub fn build_mask(init: &[usize], structural: &[usize], sim: &[usize], n: usize) -> Result<SelectionMask> {
    let mut labels = vec![SubsetLabels::default(); n];
    for (name, set) in [("init", init), ("struct", structural), ("sim", sim)] {
        for &i in set {
            ensure!(i < n, "{name} index {i} out of range for length {n}");
            let l = &mut labels[i];
            match name {
                "init" => l.init = true,
                "struct" => l.structural = true,
                _ => l.diverse = true,
            }
        }
    }
    let selected = labels.iter().map(SubsetLabels::any).collect();
    Ok(SelectionMask { selected, labels })
}

/// Selection statistics and masks for one sampled group.
#[derive(Debug, Clone)]
pub struct GroupSelection {
    pub entropy_maps: Vec<EntropyMap>,
    pub smoothed: Vec<EntropyMap>,
    pub gradients: Vec<GradientMap>,
    pub similarity: SimilarityProfile,
    pub masks: Vec<SelectionMask>,
}

/// Critical-token masks for a group of rollouts.
///
/// Initial tokens are shared, structural tokens come from each sample's own
/// sampling-time entropy map, and diverse tokens are a group statistic.
pub fn select_group(group: &[RolloutRecord], budget: &SelectionBudget) -> Result<GroupSelection> {
    ensure!(group.len() >= 2, "selection needs a group of at least 2 rollouts");
    let shape = group[0].grid.shape;
    let n = shape.len();
    let vocab = group[0].probs.len() / n.max(1);
    let dim = group[0].embeddings.len() / n.max(1);
    ensure!(
        group.iter().all(|r| r.grid.shape == shape && r.probs.len() == n * vocab && r.embeddings.len() == n * dim),
        "rollouts in a group must share grid shape, vocab and embedding size"
    );
    let embeddings = EmbeddingGroup::new(
        group.len(),
        n,
        dim,
        group.iter().flat_map(|r| r.embeddings.iter().copied()).collect(),
    )?;
    let similarity = group_similarity(&embeddings)?;
    let init = select_initial(n, budget);
    let diverse = select_diverse(&similarity, budget);

    let mut out = GroupSelection {
        entropy_maps: Vec::with_capacity(group.len()),
        smoothed: Vec::with_capacity(group.len()),
        gradients: Vec::with_capacity(group.len()),
        similarity,
        masks: Vec::with_capacity(group.len()),
    };
    for r in group {
        let entropy = ScalarGrid::entropy_map(shape.height, shape.width, &r.probs, vocab)?;
        let smoothed = smooth_entropy_map(&entropy);
        let gradient = entropy_gradient(&smoothed)?;
        let structural = select_structural(&gradient, budget);
        out.masks.push(build_mask(&init, &structural, &diverse, n)?);
        out.entropy_maps.push(entropy);
        out.smoothed.push(smoothed);
        out.gradients.push(gradient);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_stats::ScalarGrid;
    use proptest::prelude::*;

    fn grad(values: Vec<f64>) -> GradientMap {
        let n = values.len();
        ScalarGrid::new(1, n, values).unwrap()
    }

    fn sims(values: Vec<f64>) -> SimilarityProfile {
        SimilarityProfile {
            mean_similarity: values,
        }
    }

    #[test]
    fn initial_examples() {
        assert_eq!(select_initial(36, &SelectionBudget::default()), vec![0, 1, 2, 3]);
        assert!(select_initial(36, &SelectionBudget::uniform(0.0)).is_empty());
        assert_eq!(select_initial(5, &SelectionBudget::uniform(1.0)), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn budget_rounding_is_robust_to_float_noise() {
        assert_eq!(budget_count(0.1, 30), 3);
        assert_eq!(budget_count(0.1, 36), 4);
        assert_eq!(budget_count(0.1, 1), 1);
        assert_eq!(budget_count(0.3, 10), 3);
        assert_eq!(budget_count(1.0, 7), 7);
    }

    #[test]
    fn structural_examples() {
        let one = SelectionBudget { struct_fraction: 0.25, ..SelectionBudget::uniform(0.0) };
        assert_eq!(select_structural(&grad(vec![0.0, 0.0, 5.0, 0.0]), &one), vec![2]);
        let two = SelectionBudget { struct_fraction: 0.5, ..SelectionBudget::uniform(0.0) };
        assert_eq!(select_structural(&grad(vec![1.0; 4]), &two), vec![0, 1]);
        let two_of_five = SelectionBudget { struct_fraction: 0.4, ..SelectionBudget::uniform(0.0) };
        assert_eq!(
            select_structural(&grad(vec![3.0, 1.0, 4.0, 1.0, 5.0]), &two_of_five),
            vec![2, 4]
        );
    }

    #[test]
    fn diverse_examples() {
        let b = |f| SelectionBudget { sim_fraction: f, ..SelectionBudget::uniform(0.0) };
        assert_eq!(select_diverse(&sims(vec![0.9, 0.1, 0.5]), &b(0.3)), vec![1]);
        assert_eq!(select_diverse(&sims(vec![0.4; 4]), &b(0.5)), vec![0, 1]);
        assert_eq!(select_diverse(&sims(vec![0.8, 0.2, 0.2, 0.9]), &b(0.5)), vec![1, 2]);
    }

    #[test]
    fn mask_examples() {
        let m = build_mask(&[0], &[0], &[2], 4).unwrap();
        assert_eq!(m.selected, vec![true, false, true, false]);
        assert_eq!(m.ratio(), 0.5);
        assert_eq!(m.labels[0].names(), vec!["init", "struct"]);
        assert_eq!(m.labels[0].code(), 1);

        let m = build_mask(&[1], &[4], &[7], 10).unwrap();
        assert!((m.ratio() - 0.3).abs() < 1e-15);

        let m = build_mask(&[], &[], &[], 6).unwrap();
        assert_eq!(m.count(), 0);
        assert_eq!(m.ratio(), 0.0);

        assert!(build_mask(&[0], &[9], &[], 4).is_err());
    }

    #[test]
    fn mask_exports() {
        let m = build_mask(&[0], &[0, 3], &[2], 4).unwrap();
        assert_eq!(m.to_csv(2), "1,0\n3,2\n");
        let j = m.sidecar_json();
        assert_eq!(j["effective_ratio"], 0.75);
        assert_eq!(j["labels"][0], serde_json::json!(["init", "struct"]));
    }

    proptest! {
        #[test]
        fn budgets_exact_and_union_bounded(
            values in proptest::collection::vec(0.0f64..10.0, 4..64),
            sim in proptest::collection::vec(-1.0f64..1.0, 4..64),
        ) {
            let n = values.len().min(sim.len());
            let b = SelectionBudget::default();
            let k = budget_count(0.1, n);
            let init = select_initial(n, &b);
            let st = select_structural(&grad(values[..n].to_vec()), &b);
            let dv = select_diverse(&sims(sim[..n].to_vec()), &b);
            prop_assert_eq!(init.len(), k);
            prop_assert_eq!(st.len(), k);
            prop_assert_eq!(dv.len(), k);
            let m = build_mask(&init, &st, &dv, n).unwrap();
            prop_assert!(m.count() <= 3 * k);
            for t in 0..n {
                prop_assert_eq!(m.selected[t], m.labels[t].any());
            }
        }

        #[test]
        fn structural_is_rank_based(values in proptest::collection::vec(0.0f64..5.0, 2..40), f in 0.0f64..1.0) {
            let b = SelectionBudget { struct_fraction: f, ..SelectionBudget::default() };
            let base = select_structural(&grad(values.clone()), &b);
            let transformed: Vec<f64> = values.iter().map(|v| (2.0 * v).exp() + 3.0).collect();
            prop_assert_eq!(&base, &select_structural(&grad(transformed), &b));
        }

        #[test]
        fn growing_a_budget_keeps_earlier_picks(
            values in proptest::collection::vec(0.0f64..5.0, 2..40),
            f in 0.0f64..0.5,
            extra in 0.0f64..0.5,
        ) {
            let small = SelectionBudget::uniform(f);
            let big = SelectionBudget::uniform(f + extra);
            let s = select_structural(&grad(values.clone()), &small);
            let l = select_structural(&grad(values.clone()), &big);
            prop_assert!(s.iter().all(|i| l.contains(i)));
            let s = select_diverse(&sims(values.clone()), &small);
            let l = select_diverse(&sims(values), &big);
            prop_assert!(s.iter().all(|i| l.contains(i)));
        }
    }
}
