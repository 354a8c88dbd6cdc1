//! Observation studies: downstream effect of perturbing early vs. middle
//! tokens, entropy statistics over subject and background regions, and CSV
//! exports of the per-token maps behind critical-token selection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, GcpoError, Result};
use crate::policy::{perturb_and_resample, sample_rollout, GridShape, PolicyParams, RolloutRecord};
use crate::selection::{budget_count, select_group, SelectionBudget};
use crate::token_stats::EntropyMap;

/// A half-open range of positions `[start, start + count)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionRange {
    pub start: usize,
    pub count: usize,
}

impl PositionRange {
    pub fn end(&self) -> usize {
        self.start + self.count
    }

    /// The first 10% of a sequence of length `n`.
    pub fn early(n: usize) -> Self {
        Self {
            start: 0,
            count: budget_count(0.1, n),
        }
    }

    /// A 10% window centred on the middle of the sequence.
    pub fn middle(n: usize) -> Self {
        let count = budget_count(0.1, n);
        Self {
            start: (n - count) / 2,
            count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub early: PositionRange,
    pub middle: PositionRange,
    pub noise_scale: f64,
    pub trials: usize,
    pub prompt_id: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn defaults_for(n: usize) -> Self {
        Self {
            early: PositionRange::early(n),
            middle: PositionRange::middle(n),
            noise_scale: 3.0,
            trials: 20,
            prompt_id: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub spec: PerturbationSpec,
    /// Mean downstream Hamming fraction after perturbing the early range.
    pub early_divergence: f64,
    pub middle_divergence: f64,
    /// `early_divergence - middle_divergence`
    pub difference: f64,
    pub early_trials: Vec<f64>,
    pub middle_trials: Vec<f64>,
}

/// Perturb each range in `trials` fresh rollouts and measure how much of the
/// downstream sequence changes under shared sampling randomness.
pub fn perturbation_study(params: &PolicyParams, shape: GridShape, spec: &PerturbationSpec) -> Result<PerturbationReport> {
    let n = shape.len();
    ensure!(spec.trials >= 1, "perturbation study needs at least one trial");
    for (name, r) in [("early", spec.early), ("middle", spec.middle)] {
        ensure!(r.count >= 1, "{name} range is empty");
        ensure!(r.end() < n, "{name} range [{}, {}) leaves no downstream positions in {n}", r.start, r.end());
    }
    ensure!(
        spec.early.end() <= spec.middle.start || spec.middle.end() <= spec.early.start,
        "early and middle ranges overlap"
    );
    let mut early_trials = Vec::with_capacity(spec.trials);
    let mut middle_trials = Vec::with_capacity(spec.trials);
    for trial in 0..spec.trials as u64 {
        let base = sample_rollout(params, shape, spec.prompt_id, spec.seed, trial)?;
        for (range, out) in [(spec.early, &mut early_trials), (spec.middle, &mut middle_trials)] {
            let perturbed = perturb_and_resample(params, &base, range.start, range.count, spec.noise_scale, spec.seed)?;
            out.push(base.grid.hamming_fraction_from(&perturbed, range.end()));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let early_divergence = mean(&early_trials);
    let middle_divergence = mean(&middle_trials);
    Ok(PerturbationReport {
        spec: *spec,
        early_divergence,
        middle_divergence,
        difference: early_divergence - middle_divergence,
        early_trials,
        middle_trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean_subject: f64,
    pub mean_background: f64,
    pub abs_difference: f64,
}

/// Mean entropy over `mask`-true (subject) and `mask`-false (background) cells.
pub fn entropy_region_stats(map: &EntropyMap, mask: &[bool]) -> Result<RegionStats> {
    ensure!(
        mask.len() == map.len(),
        "mask has {} cells, map has {}",
        mask.len(),
        map.len()
    );
    let (mut s_sum, mut s_n, mut b_sum, mut b_n) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.values().iter().zip(mask) {
        if m {
            s_sum += v;
            s_n += 1;
        } else {
            b_sum += v;
            b_n += 1;
        }
    }
    ensure!(s_n > 0 && b_n > 0, "mask must contain both subject and background cells");
    let mean_subject = s_sum / s_n as f64;
    let mean_background = b_sum / b_n as f64;
    Ok(RegionStats {
        mean_subject,
        mean_background,
        abs_difference: (mean_subject - mean_background).abs(),
    })
}

/// Paths written by [`export_maps`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExportedMaps {
    pub entropy: PathBuf,
    pub smoothed: PathBuf,
    pub gradient: PathBuf,
    pub similarity: PathBuf,
    pub selection: PathBuf,
    pub selection_sidecar: PathBuf,
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| GcpoError::io(&path, e))?;
    Ok(path)
}

/// Write the entropy, smoothed-entropy, gradient, similarity and selection
/// grids of `group[sample]` into `dir`.
pub fn export_maps(group: &[RolloutRecord], budget: &SelectionBudget, sample: usize, dir: &Path) -> Result<ExportedMaps> {
    ensure!(sample < group.len(), "sample {sample} not in a group of {}", group.len());
    let sel = select_group(group, budget)?;
    let shape = group[0].grid.shape;
    std::fs::create_dir_all(dir).map_err(|e| GcpoError::io(dir, e))?;
    let sidecar = serde_json::to_string_pretty(&sel.masks[sample].sidecar_json()).expect("json");
    Ok(ExportedMaps {
        entropy: write(dir.join("entropy_map.csv"), &sel.entropy_maps[sample].to_csv())?,
        smoothed: write(dir.join("smoothed_entropy_map.csv"), &sel.smoothed[sample].to_csv())?,
        gradient: write(dir.join("gradient_map.csv"), &sel.gradients[sample].to_csv())?,
        similarity: write(
            dir.join("similarity_map.csv"),
            &sel.similarity.to_grid(shape.height, shape.width)?.to_csv(),
        )?,
        selection: write(dir.join("selection_mask.csv"), &sel.masks[sample].to_csv(shape.width))?,
        selection_sidecar: write(dir.join("selection_mask.json"), &sidecar)?,
    })
}

/// Sample `group_size` rollouts for one prompt with consecutive sample indices.
pub fn sample_group(
    params: &PolicyParams,
    shape: GridShape,
    prompt_id: usize,
    group_size: usize,
    seed: u64,
) -> Result<Vec<RolloutRecord>> {
    (0..group_size as u64)
        .map(|i| sample_rollout(params, shape, prompt_id, seed, i))
        .collect()
}

/// Mean gradient magnitude on border cells and on interior cells.
pub fn border_interior_gradient(gradient: &EntropyMap) -> (f64, f64) {
    let shape = GridShape::new(gradient.height(), gradient.width());
    let (mut b, mut bn, mut i, mut inn) = (0.0, 0, 0.0, 0);
    for (t, &v) in gradient.values().iter().enumerate() {
        if shape.is_border(t) {
            b += v;
            bn += 1;
        } else {
            i += v;
            inn += 1;
        }
    }
    (b / bn.max(1) as f64, i / inn.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyDims;
    use crate::token_stats::ScalarGrid;

    fn params() -> PolicyParams {
        PolicyParams::init(
            PolicyDims {
                vocab: 5,
                seq_len: 16,
                prompts: 1,
                dim: 4,
            },
            0.1,
            3,
        )
        .unwrap()
    }

    #[test]
    fn default_ranges() {
        assert_eq!(PositionRange::early(36), PositionRange { start: 0, count: 4 });
        assert_eq!(PositionRange::middle(36), PositionRange { start: 16, count: 4 });
    }

    #[test]
    fn zero_noise_gives_zero_divergence() {
        let mut p = params();
        p.out_proj.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let mut spec = PerturbationSpec::defaults_for(16);
        spec.noise_scale = 0.0;
        let r = perturbation_study(&p, GridShape::new(4, 4), &spec).unwrap();
        assert_eq!(r.early_divergence, 0.0);
        assert_eq!(r.middle_divergence, 0.0);
    }

    #[test]
    fn uniform_policy_has_no_causal_propagation() {
        let r = perturbation_study(&params(), GridShape::new(4, 4), &PerturbationSpec::defaults_for(16)).unwrap();
        assert_eq!(r.early_divergence, 0.0);
        assert_eq!(r.middle_divergence, 0.0);
    }

    #[test]
    fn overlapping_or_out_of_range_rejected() {
        let shape = GridShape::new(4, 4);
        let mut spec = PerturbationSpec::defaults_for(16);
        spec.middle = PositionRange { start: 1, count: 3 };
        assert!(perturbation_study(&params(), shape, &spec).is_err());
        spec.middle = PositionRange { start: 14, count: 2 };
        assert!(perturbation_study(&params(), shape, &spec).is_err());
    }

    #[test]
    fn region_stats_examples() {
        let mask: Vec<bool> = (0..9).map(|t| t % 2 == 0).collect();
        let flat = ScalarGrid::new(3, 3, vec![0.4; 9]).unwrap();
        assert_eq!(entropy_region_stats(&flat, &mask).unwrap().abs_difference, 0.0);

        let ln_v = 8f64.ln();
        let extremal = ScalarGrid::new(3, 3, mask.iter().map(|&m| if m { 0.0 } else { ln_v }).collect()).unwrap();
        assert_eq!(entropy_region_stats(&extremal, &mask).unwrap().abs_difference, ln_v);

        // checkerboard on a ramp m[y][x] = x, enumerated by hand:
        // subject (even flat index) cells: x = 0,2,1,0,2 -> mean 1; background: x = 1,0,2,1 -> mean 1
        let ramp = ScalarGrid::new(3, 3, (0..9).map(|t| (t % 3) as f64).collect()).unwrap();
        let s = entropy_region_stats(&ramp, &mask).unwrap();
        assert_eq!(s.mean_subject, 1.0);
        assert_eq!(s.mean_background, 1.0);

        assert!(entropy_region_stats(&flat, &[true; 9]).is_err());
        assert!(entropy_region_stats(&flat, &[true; 4]).is_err());
    }

    #[test]
    fn exports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = params();
        p.out_proj.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).cos());
        let group = sample_group(&p, GridShape::new(4, 4), 0, 4, 9).unwrap();
        let paths = export_maps(&group, &SelectionBudget::default(), 0, dir.path()).unwrap();
        let sel = select_group(&group, &SelectionBudget::default()).unwrap();
        let back = ScalarGrid::from_csv(&std::fs::read_to_string(&paths.entropy).unwrap()).unwrap();
        for (a, b) in back.values().iter().zip(sel.entropy_maps[0].values()) {
            assert!((a - b).abs() <= 1e-6);
        }
        for path in [&paths.smoothed, &paths.gradient, &paths.similarity, &paths.selection] {
            assert!(path.exists());
        }
        let again = tempfile::tempdir().unwrap();
        let paths2 = export_maps(&group, &SelectionBudget::default(), 0, again.path()).unwrap();
        assert_eq!(
            std::fs::read(&paths.gradient).unwrap(),
            std::fs::read(&paths2.gradient).unwrap()
        );
    }

    #[test]
    fn identical_rollouts_are_fully_similar() {
        let dir = tempfile::tempdir().unwrap();
        let group = vec![sample_rollout(&params(), GridShape::new(4, 4), 0, 1, 0).unwrap(); 3];
        let paths = export_maps(&group, &SelectionBudget::default(), 1, dir.path()).unwrap();
        let sim = ScalarGrid::from_csv(&std::fs::read_to_string(&paths.similarity).unwrap()).unwrap();
        assert!(sim.values().iter().all(|&v| v == 1.0));
    }
}
