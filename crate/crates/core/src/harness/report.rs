//! Result bundles and on-disk artifacts.
//!
//! Every experiment run emits the same fixed file set into one directory:
//!
//! * `report.json` — the full [`ResultsBundle`], pretty-printed.
//! * `manifest.json` — run id, creation time, config hash, input
//!   descriptions, and a sha256 per artifact.
//! * `disparity_summary.csv` — one row per audited group pair and
//!   checkpoint variant.
//! * `disparity_by_step.csv` — observed disparity per combined checkpoint.
//! * `amplification_records.csv` — one row per sampled task.
//! * `sweep_k.csv` — amplification factor per design-knob value.
//! * `mitigation.csv` — before/after observed disparity per pair.
//! * `pairwise_tau.csv` — rank agreement per model pair.
//! * `pairwise_pairs.csv` — per-class-pair accuracies and distances.
//!
//! CSVs for absent sections hold just their header row, so downstream
//! tooling can always open every file. Emission is deterministic: re-running
//! the same bundle reproduces every artifact byte for byte, with
//! `created_unix` in the manifest as the only moving part.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{
    AmplificationReport, AuditReport, MitigationReport, PairAudit, PairwiseReport, SweepResult,
};

/// Everything one experiment run produced. Exactly the sections that ran
/// are populated; the emitter handles any combination.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsBundle {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplification: Option<AmplificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mitigation: Option<MitigationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairwise: Option<PairwiseReport>,
    /// Hash of the resolved experiment config.
    pub config_sha256: String,
    /// Human-readable descriptions of the data inputs.
    pub inputs: Vec<String>,
}

impl ResultsBundle {
    /// Short label of the leading section, used as the run-id prefix.
    fn kind(&self) -> &'static str {
        if self.audit.is_some() {
            "audit"
        } else if self.amplification.is_some() {
            "amplify"
        } else if self.sweep.is_some() {
            "sweep"
        } else if self.mitigation.is_some() {
            "mitigate"
        } else if self.pairwise.is_some() {
            "pairwise"
        } else {
            "report"
        }
    }
}

/// One emitted file with its integrity hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Run-level metadata written alongside the artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `{kind}-{12 hex chars of the report.json hash}`; identical configs
    /// produce identical ids.
    pub run_id: String,
    /// Wall-clock seconds since the Unix epoch at emission time — the only
    /// non-reproducible field in the whole output directory.
    pub created_unix: u64,
    pub config_sha256: String,
    pub inputs: Vec<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Lowercase hex SHA-256 of `bytes`; the digest used for run ids and the
/// artifact checksums in [`Manifest`].
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").expect("writing to a String cannot fail");
    }
    hex
}

/// Format a float for CSV: shortest representation that round-trips.
fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn disparity_summary_csv(audit: Option<&AuditReport>) -> String {
    let mut out = String::from(
        "pair,variant,group_a,group_b,d_tilde,d_tilde_se,d,d_se,k_ratio,amplified\n",
    );
    let Some(audit) = audit else { return out };
    for pair in &audit.pairs {
        for (variant, report) in [("early", &pair.early), ("last", &pair.last)] {
            out.push_str(&format!(
                "{}-{},{},{},{},{},{},{},{},{},{}\n",
                pair.group_a,
                pair.group_b,
                variant,
                report.group_a,
                report.group_b,
                num(report.d_tilde),
                opt(report.d_tilde_se),
                num(report.d),
                opt(report.d_se),
                opt(report.k_ratio),
                report.amplified,
            ));
        }
    }
    out
}

fn by_step_rows(out: &mut String, arm: &str, pairs: &[PairAudit], names: &[String]) {
    for pair in pairs {
        for step in &pair.observed_by_step {
            out.push_str(&format!(
                "{arm},{},{},{},{},{}\n",
                names[pair.group_a],
                names[pair.group_b],
                step.step,
                num(step.d),
                opt(step.se),
            ));
        }
    }
}

fn disparity_by_step_csv(bundle: &ResultsBundle) -> String {
    let mut out = String::from("arm,group_a,group_b,step,d,se\n");
    if let Some(audit) = &bundle.audit {
        by_step_rows(&mut out, "audit", &audit.pairs, &audit.group_names);
    }
    if let Some(m) = &bundle.mitigation {
        by_step_rows(&mut out, "baseline", &m.baseline.pairs, &m.baseline.group_names);
        by_step_rows(&mut out, "mitigated", &m.mitigated.pairs, &m.mitigated.group_names);
    }
    out
}

fn amplification_records_csv(report: Option<&AmplificationReport>) -> String {
    let mut out = String::from(
        "task_id,frequency,d_tilde,d_tilde_se,d,d_se,d_tilde_last,d_last,\
         s_a0_a1,s_b0_b1,s_a0_b1,s_a1_b0\n",
    );
    let Some(report) = report else { return out };
    for r in &report.records {
        let s = r.separability.means();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.task_id,
            num(r.frequency),
            num(r.d_tilde),
            opt(r.d_tilde_se),
            num(r.d),
            opt(r.d_se),
            num(r.d_tilde_last),
            num(r.d_last),
            num(s[0]),
            num(s[1]),
            num(s[2]),
            num(s[3]),
        ));
    }
    out
}

fn sweep_k_csv(sweep: Option<&SweepResult>) -> String {
    let mut out = String::from("variable,value,k,k_se,r_squared\n");
    let Some(sweep) = sweep else { return out };
    for p in &sweep.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            sweep.variable,
            num(p.value),
            num(p.k),
            num(p.k_se),
            num(p.r_squared),
        ));
    }
    out
}

fn mitigation_csv(report: Option<&MitigationReport>) -> String {
    let mut out = String::from(
        "strategy,target_group,pair,observed_before,observed_after,delta_abs,reduced\n",
    );
    let Some(report) = report else { return out };
    for d in &report.deltas {
        out.push_str(&format!(
            "{},{},{}|{},{},{},{},{}\n",
            report.strategy,
            report.target_group,
            d.group_a,
            d.group_b,
            num(d.observed_before),
            num(d.observed_after),
            num(d.delta_abs),
            d.reduced,
        ));
    }
    out
}

fn pairwise_tau_csv(report: Option<&PairwiseReport>) -> String {
    let mut out = String::from("model_i,model_j,tau\n");
    let Some(report) = report else { return out };
    for i in 0..report.models.len() {
        for j in i + 1..report.models.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                report.models[i].name,
                report.models[j].name,
                num(report.tau[i][j]),
            ));
        }
    }
    out
}

fn pairwise_pairs_csv(report: Option<&PairwiseReport>) -> String {
    let Some(report) = report else {
        return String::from("class_i,class_j,cosine_distance\n");
    };
    let mut out = String::from("class_i,class_j,cosine_distance");
    for m in &report.models {
        out.push_str(&format!(",acc_{}", m.name));
    }
    out.push('\n');
    for (p, &(i, j)) in report.pairs.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}",
            report.class_names[i],
            report.class_names[j],
            num(report.cosine_distance[p]),
        ));
        for m in &report.models {
            out.push_str(&format!(",{}", num(m.pair_accuracy[p].mean)));
        }
        out.push('\n');
    }
    out
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Write the full artifact set for `bundle` into
/// `out_dir/{run_id}/` and return that directory.
///
/// The directory is created if missing and existing artifacts are
/// overwritten, which is safe because identical bundles map to the same
/// run id and identical bytes.
pub fn emit_report(bundle: &ResultsBundle, out_dir: &Path) -> Result<PathBuf> {
    let report_json = serde_json::to_string_pretty(bundle)
        .map_err(|e| Error::config(format!("cannot serialize results: {e}")))?
        + "\n";
    let run_id = format!("{}-{}", bundle.kind(), &sha256_hex(report_json.as_bytes())[..12]);
    let dir = out_dir.join(&run_id);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;

    let files: [(&str, String); 8] = [
        ("report.json", report_json),
        ("disparity_summary.csv", disparity_summary_csv(bundle.audit.as_ref())),
        ("disparity_by_step.csv", disparity_by_step_csv(bundle)),
        (
            "amplification_records.csv",
            amplification_records_csv(bundle.amplification.as_ref()),
        ),
        ("sweep_k.csv", sweep_k_csv(bundle.sweep.as_ref())),
        ("mitigation.csv", mitigation_csv(bundle.mitigation.as_ref())),
        ("pairwise_tau.csv", pairwise_tau_csv(bundle.pairwise.as_ref())),
        ("pairwise_pairs.csv", pairwise_pairs_csv(bundle.pairwise.as_ref())),
    ];

    let mut artifacts = Vec::with_capacity(files.len());
    for (name, contents) in &files {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(Error::io(&path))?;
        artifacts.push(ArtifactEntry {
            file: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len() as u64,
        });
    }

    let manifest = Manifest {
        run_id,
        created_unix: now_unix(),
        config_sha256: bundle.config_sha256.clone(),
        inputs: bundle.inputs.clone(),
        artifacts,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("cannot serialize manifest: {e}")))?
        + "\n";
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, manifest_json).map_err(Error::io(&manifest_path))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_teaser_task;
    use crate::harness::{audit, ExperimentConfig};

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("amplab-report-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn tiny_audit_bundle() -> ResultsBundle {
        let ds = gen_teaser_task(80, 0.1, 1.0, 0.0, 3).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.model.hidden_widths = vec![4];
        cfg.train.epochs = 3;
        cfg.train.batch_size = 32;
        cfg.train.eval_every = 2;
        cfg.protocol.n_runs = 2;
        ResultsBundle {
            audit: Some(audit(&ds, &cfg).unwrap()),
            config_sha256: cfg.sha256_hex(),
            inputs: cfg.task.describe(),
            ..ResultsBundle::default()
        }
    }

    #[test]
    fn empty_bundle_emits_headers_and_a_manifest() {
        let out = tmp_dir("empty");
        let bundle = ResultsBundle {
            config_sha256: "0".repeat(64),
            ..ResultsBundle::default()
        };
        let dir = emit_report(&bundle, &out).unwrap();
        assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("report-"));
        let summary = fs::read_to_string(dir.join("disparity_summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1);
        assert!(summary.starts_with("pair,variant,group_a"));
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.artifacts.len(), 8);
        // Hashes in the manifest match the bytes on disk.
        for a in &manifest.artifacts {
            let bytes = fs::read(dir.join(&a.file)).unwrap();
            assert_eq!(a.sha256, sha256_hex(&bytes), "{}", a.file);
            assert_eq!(a.bytes, bytes.len() as u64, "{}", a.file);
        }
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn reemission_is_byte_identical_except_creation_time() {
        let out = tmp_dir("stable");
        let bundle = tiny_audit_bundle();
        let dir_a = emit_report(&bundle, &out).unwrap();
        let manifest_a = fs::read_to_string(dir_a.join("manifest.json")).unwrap();
        let files_a: Vec<(String, Vec<u8>)> = {
            let mut names: Vec<String> = fs::read_dir(&dir_a)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            names.sort();
            names
                .into_iter()
                .map(|n| (n.clone(), fs::read(dir_a.join(&n)).unwrap()))
                .collect()
        };
        let dir_b = emit_report(&bundle, &out).unwrap();
        assert_eq!(dir_a, dir_b, "identical bundles share a run id");
        for (name, bytes_a) in &files_a {
            let bytes_b = fs::read(dir_b.join(name)).unwrap();
            if name == "manifest.json" {
                let mut a: serde_json::Value = serde_json::from_str(&manifest_a).unwrap();
                let mut b: serde_json::Value = serde_json::from_slice(&bytes_b).unwrap();
                a["created_unix"] = serde_json::Value::Null;
                b["created_unix"] = serde_json::Value::Null;
                assert_eq!(a, b);
            } else {
                assert_eq!(&bytes_b, bytes_a, "{name} changed between emissions");
            }
        }
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn audit_bundle_rows_match_the_report() {
        let out = tmp_dir("rows");
        let bundle = tiny_audit_bundle();
        let dir = emit_report(&bundle, &out).unwrap();
        let audit = bundle.audit.as_ref().unwrap();
        let summary = fs::read_to_string(dir.join("disparity_summary.csv")).unwrap();
        // Header plus early+last per pair.
        assert_eq!(summary.lines().count(), 1 + 2 * audit.pairs.len());
        assert!(summary.contains("0-1,early,group0,group1,"));
        let by_step = fs::read_to_string(dir.join("disparity_by_step.csv")).unwrap();
        let expect_rows: usize = audit.pairs.iter().map(|p| p.observed_by_step.len()).sum();
        assert_eq!(by_step.lines().count(), 1 + expect_rows);
        assert!(by_step.lines().nth(1).unwrap().starts_with("audit,group0,group1,0,"));
        // Absent sections are headers only.
        for name in ["sweep_k.csv", "mitigation.csv", "pairwise_tau.csv"] {
            assert_eq!(fs::read_to_string(dir.join(name)).unwrap().lines().count(), 1);
        }
        // report.json parses back into an identical bundle.
        let back: ResultsBundle =
            serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
        assert_eq!(&back, &bundle);
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn bundle_round_trips_through_json() {
        let bundle = tiny_audit_bundle();
        let json = serde_json::to_string(&bundle).unwrap();
        let back: ResultsBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(bundle, back);
    }
}
