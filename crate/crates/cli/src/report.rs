//! Markdown report stitched from analysis outputs.
//!
//! The report is a pure function of the files it reads, so identical inputs
//! give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lesionkit::records::{sha256_file, MANIFEST_FILE};
use serde_json::Value;

use crate::analyze::ANALYSES;
use crate::error::CliResult;
use crate::store::{RunInfo, RUN_FILE};

/// Rows shown inline per table; the full table is copied under `tables/`.
pub const MAX_INLINE_ROWS: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSummary {
    pub path: PathBuf,
    pub present: Vec<String>,
    pub absent: Vec<String>,
}

fn headline_fields(analysis: &str) -> &'static [(&'static str, &'static str)] {
    match analysis {
        "profile-contrast" => &[
            ("L2 distance (pp)", "/result/contrast/l2_distance_pp"),
            ("CI low (pp)", "/result/contrast/ci_low"),
            ("CI high (pp)", "/result/contrast/ci_high"),
            ("sign-flip p", "/result/contrast/p_signflip"),
            ("restricted permutation p", "/result/contrast/p_permutation"),
            ("strata", "/result/contrast/n_strata"),
            ("dropped strata", "/result/n_dropped_strata"),
        ],
        "cooccur" => &[
            ("sides", "/result/sides"),
            ("rows per side", "/result/n_rows"),
            ("Mantel r", "/result/mantel/r"),
            ("Mantel p", "/result/mantel/p_value"),
            ("permutations", "/result/mantel/n_perm"),
        ],
        "depth" => &[
            ("within-category r", "/result/depth/within_r"),
            ("cross-category r", "/result/depth/cross_r"),
            ("delta r", "/result/depth/delta_r"),
            ("permutation p", "/result/depth/p_value"),
            ("rows per bin", "/result/depth/bin_counts"),
        ],
        "match-visible" => &[
            ("matched L2 distance (pp)", "/result/match/contrast/l2_distance_pp"),
            ("sign-flip p", "/result/match/contrast/p_signflip"),
            ("mean match distance (z)", "/result/match/mean_match_distance"),
            ("strata", "/result/match/contrast/n_strata"),
            ("dropped strata", "/result/match/n_dropped"),
        ],
        "match-dose" => &[
            ("proxy", "/result/match/proxy"),
            ("scope", "/result/match/scope"),
            ("median log10 gap", "/result/match/median_gap"),
            ("median profile L2 (pp)", "/result/match/median_profile_l2_pp"),
            ("matches within 0.25 log10", "/result/match/n_within_quarter"),
            ("their median L2 (pp)", "/result/match/within_quarter_median_l2_pp"),
        ],
        "map-human" => &[
            ("best component per group", "/result/cosine/best_per_row"),
            ("undefined cells", "/result/cosine/n_undefined"),
            ("category bootstrap skipped", "/result/category_bootstrap_skipped"),
        ],
        "effect-size" => &[
            ("FFN partition rank", "/result/ffn_rank"),
            ("partitions", "/result/n_partitions"),
            ("FFN partition L2 (pp)", "/result/ffn_l2_pp"),
            ("median non-FFN L2 (pp)", "/result/median_non_ffn_l2_pp"),
            ("classifiers", "/result/classifiers"),
        ],
        "residualize" => &[
            ("raw L2 (pp)", "/result/raw/contrast/l2_distance_pp"),
            ("residualized L2 (pp)", "/result/residualized/contrast/l2_distance_pp"),
            ("residualized sign-flip p", "/result/residualized/contrast/p_signflip"),
            ("reduction", "/result/l2_reduction_fraction"),
        ],
        "likelihood" => &[("conditions", "/result/conditions")],
        _ => &[],
    }
}

fn compact(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

fn markdown_table(csv_text: &str, out: &mut String) -> CliResult<usize> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(cell).collect();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", vec!["---"; header.len()].join("|"));
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if n < MAX_INLINE_ROWS {
            let cells: Vec<String> = rec.iter().map(cell).collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        n += 1;
    }
    Ok(n)
}

fn provenance(stores: &[PathBuf], out: &mut String) -> CliResult<()> {
    let _ = writeln!(out, "## Provenance\n");
    if stores.is_empty() {
        let _ = writeln!(out, "No store given.\n");
        return Ok(());
    }
    for (i, dir) in stores.iter().enumerate() {
        let _ = writeln!(out, "Store {}:\n", i + 1);
        match fs::read_to_string(dir.join(RUN_FILE)) {
            Ok(text) => {
                let run: RunInfo = serde_json::from_str(&text)?;
                let _ = writeln!(out, "- model: {} (family {}, {} layers)", run.model_id, run.family, run.n_layers);
                let _ = writeln!(out, "- base seed: {}", run.base_seed);
                let _ = writeln!(out, "- config sha256: {}", run.config_sha256);
                let _ = writeln!(out, "- model checksum: {}", run.model_checksum);
                let _ = writeln!(out, "- decode: {}", run.decode_fingerprint);
                let _ = writeln!(out, "- records: {}", run.n_records);
            }
            Err(_) => {
                let _ = writeln!(out, "- run description: absent");
            }
        }
        match sha256_file(&dir.join(MANIFEST_FILE)) {
            Ok(d) => {
                let _ = writeln!(out, "- manifest sha256: {d}");
            }
            Err(_) => {
                let _ = writeln!(out, "- manifest: absent");
            }
        }
        out.push('\n');
    }
    Ok(())
}

/// Writes `report.md` and copies every present CSV into `tables/`.
pub fn cmd_report(stores: &[PathBuf], analyses: &Path, out_dir: &Path) -> CliResult<ReportSummary> {
    let tables = out_dir.join("tables");
    fs::create_dir_all(&tables)?;
    let mut md = String::from("# Lesion analysis report\n\n");
    provenance(stores, &mut md)?;
    let (mut present, mut absent) = (Vec::new(), Vec::new());
    for name in ANALYSES {
        let _ = writeln!(md, "## {name}\n");
        let json_path = analyses.join(format!("{name}.json"));
        let parsed: Option<Value> = fs::read_to_string(&json_path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let Some(doc) = parsed else {
            let _ = writeln!(md, "_Absent: no readable {name}.json._\n");
            absent.push(name.to_string());
            continue;
        };
        present.push(name.to_string());
        let _ = writeln!(md, "- seed: {}", doc.get("seed").map(compact).unwrap_or_default());
        if let Some(inputs) = doc.get("inputs").and_then(Value::as_array) {
            for inp in inputs {
                let _ = writeln!(md, "- input records sha256: {}", inp.get("records_sha256").map(compact).unwrap_or_default());
            }
        }
        let _ = writeln!(md, "- parameters: `{}`", doc.get("parameters").map(compact).unwrap_or_default());
        for (label, ptr) in headline_fields(name) {
            if let Some(v) = doc.pointer(ptr) {
                let _ = writeln!(md, "- {label}: {}", compact(v));
            }
        }
        md.push('\n');
        let csv_path = analyses.join(format!("{name}.csv"));
        if let Ok(text) = fs::read_to_string(&csv_path) {
            fs::write(tables.join(format!("{name}.csv")), &text)?;
            let n = markdown_table(&text, &mut md)?;
            if n > MAX_INLINE_ROWS {
                let _ = writeln!(md, "\n_{} of {n} rows shown; full table in tables/{name}.csv._", MAX_INLINE_ROWS);
            }
            md.push('\n');
        }
    }
    let path = out_dir.join("report.md");
    fs::write(&path, md)?;
    Ok(ReportSummary { path, present, absent })
}
