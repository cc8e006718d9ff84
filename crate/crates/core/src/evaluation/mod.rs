//! Scenario evaluation, per-marker SSIM reports and paired model comparison.

mod ssim;
mod wilcoxon;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ssim::{ssim, ssim_map, SsimParams};
pub use wilcoxon::{midranks, wilcoxon_signed_rank, PMethod, WilcoxonResult, EXACT_MAX_N, MIN_N};

use crate::autograd::Tensor;
use crate::dataset::PatchRecord;
use crate::error::{Error, Result};
use crate::gating::{binomial, gate_tensor, scenarios_with_missing, GateVector};
use crate::generator::GeneratorState;

/// Anything that maps a gated `[1, N, H, W]` stack to all N channels.
pub trait Synthesizer: Sync {
    fn n_channels(&self) -> usize;
    fn synthesize(&self, x: &Tensor, gate: &GateVector) -> Result<Tensor>;
}

impl Synthesizer for GeneratorState {
    fn n_channels(&self) -> usize {
        self.config.n_channels
    }

    fn synthesize(&self, x: &Tensor, _gate: &GateVector) -> Result<Tensor> {
        self.forward_tensor(x)
    }
}

/// Predicts zeros everywhere.
pub struct ZeroBaseline {
    pub n_channels: usize,
}

impl Synthesizer for ZeroBaseline {
    fn n_channels(&self) -> usize {
        self.n_channels
    }

    fn synthesize(&self, x: &Tensor, _gate: &GateVector) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// Predicts the per-channel pixelwise mean of the training patches.
pub struct MeanImageBaseline {
    pub mean: Tensor,
}

impl MeanImageBaseline {
    pub fn from_patches(patches: &[PatchRecord]) -> Result<Self> {
        let first = patches.first().ok_or(Error::Empty("training patches"))?;
        let mut mean = Tensor::zeros(first.to_tensor().shape());
        for p in patches {
            let t = p.to_tensor();
            if t.shape() != mean.shape() {
                return Err(Error::shape("training patches differ in shape"));
            }
            mean.add_assign(&t);
        }
        let k = patches.len() as f64;
        Ok(MeanImageBaseline {
            mean: mean.map(|v| v / k),
        })
    }
}

impl Synthesizer for MeanImageBaseline {
    fn n_channels(&self) -> usize {
        self.mean.channels()
    }

    fn synthesize(&self, x: &Tensor, _gate: &GateVector) -> Result<Tensor> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape("mean-image baseline built for another patch shape"));
        }
        Ok(self.mean.clone())
    }
}

/// One (patch, missing marker) score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimRow {
    pub marker: String,
    pub channel: usize,
    pub gate: GateVector,
    pub n_missing: usize,
    pub patch_id: String,
    pub sample_id: String,
    pub ssim: f64,
}

/// Where a report's numbers came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub config_hash: Option<String>,
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
    /// How scenarios were chosen, e.g. enumerated or sampled with a seed.
    pub scenarios: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerMean {
    pub marker: String,
    pub n: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub n_missing: usize,
    pub marker: String,
    pub n: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SsimReport {
    pub provenance: Provenance,
    pub markers: Vec<String>,
    pub gates: Vec<GateVector>,
    pub rows: Vec<SsimRow>,
}

fn mean_of<'a>(values: impl Iterator<Item = &'a f64>) -> (usize, f64) {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n, if n == 0 { f64::NAN } else { s / n as f64 })
}

impl SsimReport {
    /// Mean per marker, registry order, markers without rows omitted.
    pub fn marker_means(&self) -> Vec<MarkerMean> {
        self.markers
            .iter()
            .filter_map(|m| {
                let (n, mean) = mean_of(self.rows.iter().filter(|r| &r.marker == m).map(|r| &r.ssim));
                (n > 0).then(|| MarkerMean {
                    marker: m.clone(),
                    n,
                    mean,
                })
            })
            .collect()
    }

    /// Mean per (missing count, marker).
    pub fn group_means(&self) -> Vec<GroupMean> {
        let mut counts: Vec<usize> = self.rows.iter().map(|r| r.n_missing).collect();
        counts.sort_unstable();
        counts.dedup();
        let mut out = Vec::new();
        for m in counts {
            for marker in &self.markers {
                let (n, mean) = mean_of(
                    self.rows
                        .iter()
                        .filter(|r| r.n_missing == m && &r.marker == marker)
                        .map(|r| &r.ssim),
                );
                if n > 0 {
                    out.push(GroupMean {
                        n_missing: m,
                        marker: marker.clone(),
                        n,
                        mean,
                    });
                }
            }
        }
        out
    }

    pub fn overall_mean(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| &r.ssim)).1
    }

    /// One line per row, each carrying the report's provenance columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            marker: &'a str,
            channel: usize,
            gate: String,
            n_missing: usize,
            patch_id: &'a str,
            sample_id: &'a str,
            ssim: f64,
            model: &'a str,
            config_hash: &'a str,
            epoch: Option<usize>,
            seed: Option<u64>,
        }
        let p = &self.provenance;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.rows {
            w.serialize(Line {
                marker: &r.marker,
                channel: r.channel,
                gate: r.gate.to_string(),
                n_missing: r.n_missing,
                patch_id: &r.patch_id,
                sample_id: &r.sample_id,
                ssim: r.ssim,
                model: &p.model,
                config_hash: p.config_hash.as_deref().unwrap_or(""),
                epoch: p.epoch,
                seed: p.seed,
            })
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "provenance": self.provenance,
            "markers": self.markers,
            "gates": self.gates,
            "n_rows": self.rows.len(),
            "overall_mean": self.overall_mean(),
            "marker_means": self.marker_means(),
            "group_means": self.group_means(),
        })
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.summary())?)?;
        Ok(())
    }
}

/// Gate the inputs, synthesize and score every missing channel of every patch.
pub fn evaluate_scenario(
    model: &dyn Synthesizer,
    patches: &[PatchRecord],
    markers: &[String],
    gate: &GateVector,
    params: &SsimParams,
) -> Result<Vec<SsimRow>> {
    let n = model.n_channels();
    gate.validate(n)?;
    if markers.len() != n {
        return Err(Error::invalid(format!("{} marker names for {n} channels", markers.len())));
    }
    let missing = gate.closed_channels();
    let per_patch = patches
        .par_iter()
        .map(|p| {
            if p.n_channels() != n {
                return Err(Error::Gate(format!(
                    "patch {} has {} channels, model has {n}",
                    p.id,
                    p.n_channels()
                )));
            }
            let m = p.to_tensor();
            let x = gate_tensor(&m, std::slice::from_ref(gate))?;
            let out = model.synthesize(&x, gate)?;
            if out.shape() != m.shape() {
                return Err(Error::shape("synthesizer changed the stack shape"));
            }
            let (h, w) = (m.height(), m.width());
            missing
                .iter()
                .map(|&c| {
                    Ok(SsimRow {
                        marker: markers[c].clone(),
                        channel: c,
                        gate: gate.clone(),
                        n_missing: missing.len(),
                        patch_id: p.id.clone(),
                        sample_id: p.sample_id.clone(),
                        ssim: ssim(out.plane(0, c), m.plane(0, c), h, w, params)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_patch.into_iter().flatten().collect())
}

fn evaluate_gates(
    model: &dyn Synthesizer,
    patches: &[PatchRecord],
    markers: &[String],
    gates: Vec<GateVector>,
    params: &SsimParams,
) -> Result<SsimReport> {
    let mut rows = Vec::new();
    for g in &gates {
        rows.extend(evaluate_scenario(model, patches, markers, g, params)?);
    }
    Ok(SsimReport {
        provenance: Provenance::default(),
        markers: markers.to_vec(),
        gates,
        rows,
    })
}

/// Every single-missing scenario, one per channel.
pub fn run_missing_one_matrix(
    model: &dyn Synthesizer,
    patches: &[PatchRecord],
    markers: &[String],
    params: &SsimParams,
) -> Result<SsimReport> {
    let n = model.n_channels();
    let gates = (0..n)
        .map(|j| GateVector::with_missing(n, &[j]))
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_gates(model, patches, markers, gates, params)?;
    report.provenance.scenarios = Some("all single-missing gates".into());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiMissingOptions {
    /// Enumerate every gate when there are at most this many for a given m.
    pub max_enumerate: u64,
    /// Gates drawn per m otherwise.
    pub n_sampled: usize,
    pub seed: u64,
}

impl Default for MultiMissingOptions {
    fn default() -> Self {
        MultiMissingOptions {
            max_enumerate: 64,
            n_sampled: 64,
            seed: 0,
        }
    }
}

/// Gates with exactly `m` missing channels for each requested `m`.
pub fn multi_missing_gates(
    n: usize,
    m_values: &[usize],
    opts: &MultiMissingOptions,
) -> Result<(Vec<GateVector>, String)> {
    let mut gates = Vec::new();
    let mut notes = Vec::new();
    for &m in m_values {
        if m < 2 || m + 1 > n {
            return Err(Error::Gate(format!("m = {m} outside [2, {}]", n.saturating_sub(1))));
        }
        let total = binomial(n, m);
        if total <= opts.max_enumerate {
            gates.extend(scenarios_with_missing(n, m));
            notes.push(format!("m={m}: all {total} enumerated"));
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ m as u64);
            let mut drawn = std::collections::BTreeSet::new();
            let want = opts.n_sampled.min(total as usize);
            while drawn.len() < want {
                let mut missing: Vec<usize> = index::sample(&mut rng, n, m).into_vec();
                missing.sort_unstable();
                drawn.insert(missing);
            }
            for missing in drawn {
                gates.push(GateVector::with_missing(n, &missing)?);
            }
            notes.push(format!(
                "m={m}: {want} of {total} sampled with seed {}",
                opts.seed
            ));
        }
    }
    Ok((gates, notes.join("; ")))
}

/// Scenarios with 2..N-1 missing channels, grouped by `m`.
pub fn run_missing_multi_matrix(
    model: &dyn Synthesizer,
    patches: &[PatchRecord],
    markers: &[String],
    m_values: &[usize],
    opts: &MultiMissingOptions,
    params: &SsimParams,
) -> Result<SsimReport> {
    let (gates, note) = multi_missing_gates(model.n_channels(), m_values, opts)?;
    let mut report = evaluate_gates(model, patches, markers, gates, params)?;
    report.provenance.scenarios = Some(note);
    report.provenance.seed = Some(opts.seed);
    Ok(report)
}

/// Paired comparison of two reports on one marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerComparison {
    pub marker: String,
    pub n_pairs: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub test: Option<WilcoxonResult>,
    /// Why the test could not be run, if it could not.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: Provenance,
    pub b: Provenance,
    pub markers: Vec<MarkerComparison>,
}

impl ComparisonReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Pair rows by (patch, channel, gate) and run a signed-rank test per marker.
pub fn compare_reports(a: &SsimReport, b: &SsimReport) -> Result<ComparisonReport> {
    let key = |r: &SsimRow| (r.patch_id.clone(), r.channel, r.gate.to_string());
    let b_rows: HashMap<_, f64> = b.rows.iter().map(|r| (key(r), r.ssim)).collect();
    let mut paired: BTreeMap<usize, (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &a.rows {
        if let Some(&vb) = b_rows.get(&key(r)) {
            let e = paired
                .entry(r.channel)
                .or_insert_with(|| (r.marker.clone(), Vec::new(), Vec::new()));
            e.1.push(r.ssim);
            e.2.push(vb);
        }
    }
    if paired.is_empty() {
        return Err(Error::Empty("paired rows"));
    }
    let markers = paired
        .into_values()
        .map(|(marker, va, vb)| {
            let (n_pairs, mean_a) = mean_of(va.iter());
            let mean_b = mean_of(vb.iter()).1;
            let (test, note) = match wilcoxon_signed_rank(&va, &vb) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            MarkerComparison {
                marker,
                n_pairs,
                mean_a,
                mean_b,
                test,
                note,
            }
        })
        .collect();
    Ok(ComparisonReport {
        a: a.provenance.clone(),
        b: b.provenance.clone(),
        markers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Plane, Split};

    fn patch(id: &str, values: [f64; 3]) -> PatchRecord {
        PatchRecord {
            id: id.into(),
            origin: (0, 0),
            tiles: values
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let data = (0..16 * 16).map(|i| v * ((i + c) % 5) as f64 / 4.0).collect();
                    Plane::new(16, 16, data).unwrap()
                })
                .collect(),
            sample_id: "s".into(),
            split: Split::Test,
        }
    }

    fn markers() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn single_missing_rows_reference_only_that_marker() {
        let patches = vec![patch("p0", [1.0, 0.5, 0.8]), patch("p1", [0.3, 0.9, 0.6])];
        let base = MeanImageBaseline::from_patches(&patches).unwrap();
        let g = GateVector::with_missing(3, &[1]).unwrap();
        let rows = evaluate_scenario(&base, &patches, &markers(), &g, &SsimParams::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.marker == "b" && r.channel == 1));
    }

    #[test]
    fn aggregates_are_row_means() {
        let patches = vec![patch("p0", [1.0, 0.5, 0.8]), patch("p1", [0.3, 0.9, 0.6])];
        let base = MeanImageBaseline::from_patches(&patches).unwrap();
        let report = run_missing_one_matrix(&base, &patches, &markers(), &SsimParams::default()).unwrap();
        assert_eq!(report.gates.len(), 3);
        for m in report.marker_means() {
            let vals: Vec<f64> = report.rows.iter().filter(|r| r.marker == m.marker).map(|r| r.ssim).collect();
            assert_eq!(m.mean, vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }

    #[test]
    fn multi_missing_rejects_out_of_range() {
        assert!(multi_missing_gates(4, &[4], &MultiMissingOptions::default()).is_err());
        assert!(multi_missing_gates(4, &[1], &MultiMissingOptions::default()).is_err());
        let (g, _) = multi_missing_gates(4, &[2], &MultiMissingOptions::default()).unwrap();
        assert_eq!(g.len(), 6);
        let (g, note) = multi_missing_gates(11, &[5], &MultiMissingOptions::default()).unwrap();
        assert_eq!(g.len(), 64);
        assert!(g.iter().all(|g| g.closed_count() == 5));
        assert!(note.contains("sampled"));
    }

    #[test]
    fn gate_arity_mismatch_rejected() {
        let patches = vec![patch("p0", [1.0, 0.5, 0.8])];
        let z = ZeroBaseline { n_channels: 3 };
        let g = GateVector::with_missing(4, &[1]).unwrap();
        assert!(evaluate_scenario(&z, &patches, &markers(), &g, &SsimParams::default()).is_err());
    }
}
