//! Analysis subcommands. Each writes `<name>.json` (seed, parameters, input
//! digests and the full result) and `<name>.csv` (the headline table).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use lesionkit::lesion::{LesionSpec, Severity, Strategy};
use lesionkit::model::{ComponentKind, Mechanism};
use lesionkit::records::{dedup, dedup_and_aggregate, pair_strata, ConditionProfile, RecordStatus, ScoredRecord};
use lesionkit::scoring::{Category, SurfaceFeatures, SymptomSchema};
use lesionkit_stats::calibration::CalibrationProfile;
use lesionkit_stats::describe::{cohens_d, mean};
use lesionkit_stats::{
    bootstrap_mean_ci, burden_adjust_profiles, clustered_bootstrap, cosine_map, depth_topography, dose_match,
    effect_size_calibration, mantel_test, paired_profile_test, phi_matrix, residualize_profiles,
    restricted_component_permutation, visible_damage_match, ClusteredRow, ContrastConfig, CosineConfig, DepthConfig,
    DepthRow, DoseCondition, DoseProxy, DoseScope, MatchCondition, ProfileContrastResult, RecordGroup, StatsError,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::SweepConfig;
use crate::error::{CliError, CliResult};
use crate::store::{InputDigest, LoadedStores};

/// Subcommand names in report order.
pub const ANALYSES: [&str; 9] = [
    "profile-contrast",
    "cooccur",
    "depth",
    "match-visible",
    "match-dose",
    "map-human",
    "effect-size",
    "residualize",
    "likelihood",
];

/// A CSV table: header plus rows of preformatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> CliResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Environment(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisOutput {
    pub analysis: String,
    pub seed: u64,
    pub parameters: Value,
    pub inputs: Vec<InputDigest>,
    pub result: Value,
    #[serde(skip)]
    pub table: Table,
}

impl AnalysisOutput {
    /// Writes both files and returns the JSON path.
    pub fn write(&self, out_dir: &Path) -> CliResult<PathBuf> {
        fs::create_dir_all(out_dir)?;
        let json_path = out_dir.join(format!("{}.json", self.analysis));
        fs::write(&json_path, serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(out_dir.join(format!("{}.csv", self.analysis)), self.table.to_csv()?)?;
        Ok(json_path)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("results serialize")
}

/// Resampling sizes shared by the contrast-style analyses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContrastOptions {
    pub n_resamples: usize,
    pub n_flips: usize,
    pub n_perm: usize,
    pub ci_level: f64,
    pub burden_adjust: bool,
    /// Keep only conditions at this severity.
    pub severity: Option<f64>,
}

impl Default for ContrastOptions {
    fn default() -> Self {
        Self {
            n_resamples: 5000,
            n_flips: 5000,
            n_perm: 5000,
            ci_level: 0.95,
            burden_adjust: false,
            severity: None,
        }
    }
}

impl ContrastOptions {
    fn config(&self, seed: u64) -> ContrastConfig {
        ContrastConfig {
            n_resamples: self.n_resamples,
            n_flips: self.n_flips,
            seed,
            ci_level: self.ci_level,
        }
    }
}

/// Lesion profiles at severity > 0 with at least one scored response.
fn lesion_profiles(stores: &LoadedStores, severity: Option<f64>) -> CliResult<Vec<ConditionProfile>> {
    let target = severity.map(Severity::new).transpose().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(dedup_and_aggregate(&stores.records, stores.schema.len())
        .into_iter()
        .filter(|p| p.key.component.is_some() && !p.key.severity.is_zero() && p.n_responses > 0)
        .filter(|p| target.is_none_or(|t| p.key.severity == t))
        .collect())
}

fn symptom_table(names: &[&str], c: &ProfileContrastResult) -> Table {
    let mut t = Table::new(&["symptom", "ffn_minus_attention_pp", "ci_low_pp", "ci_high_pp", "p_signflip", "q_bh"]);
    for (name, d) in names.iter().zip(&c.per_symptom) {
        t.push(vec![
            name.to_string(),
            num(d.diff_pp),
            num(d.ci_low),
            num(d.ci_high),
            num(d.p_signflip),
            num(d.q_bh),
        ]);
    }
    t
}

/// Paired stratum test plus the restricted component-label permutation.
fn contrast_of(profiles: &[ConditionProfile], opts: &ContrastOptions, seed: u64) -> CliResult<(Value, ProfileContrastResult)> {
    let paired = pair_strata(profiles);
    let mut contrast = paired_profile_test(&paired.pairs, &opts.config(seed))?;
    let perm = restricted_component_permutation(profiles, opts.n_perm, seed)?;
    contrast.p_permutation = Some(perm.p_value);
    let v = json!({
        "contrast": contrast,
        "restricted_permutation": perm,
        "n_dropped_strata": paired.dropped,
    });
    Ok((v, contrast))
}

pub fn profile_contrast(stores: &LoadedStores, opts: &ContrastOptions, seed: u64) -> CliResult<AnalysisOutput> {
    let mut profiles = lesion_profiles(stores, opts.severity)?;
    if opts.burden_adjust {
        profiles = burden_adjust_profiles(&profiles);
    }
    let (mut result, contrast) = contrast_of(&profiles, opts, seed)?;
    let names = stores.schema.names();
    result["symptoms"] = to_value(&names);
    Ok(AnalysisOutput {
        analysis: "profile-contrast".into(),
        seed,
        parameters: to_value(opts),
        inputs: stores.inputs.clone(),
        result,
        table: symptom_table(&names, &contrast),
    })
}

/// Deduplicated, scored lesion rows (severity > 0).
fn lesion_rows(stores: &LoadedStores) -> Vec<&ScoredRecord> {
    dedup(&stores.records)
        .into_iter()
        .filter(|r| r.status == RecordStatus::Ok && r.component.is_some() && r.severity > 0.0)
        .collect()
}

/// A reference table: optional `group` and `cluster` columns plus 0/1
/// symptom columns named as in the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    pub symptoms: Vec<String>,
    pub rows: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub group: Option<String>,
    pub cluster: Option<String>,
    pub values: Vec<bool>,
}

pub fn read_reference(path: &Path, schema: &SymptomSchema) -> CliResult<ReferenceTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("reference {}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |n: &str| header.iter().position(|h| h == n);
    let (g, c) = (col("group"), col("cluster"));
    let mut symptoms = Vec::new();
    let mut cols = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if Some(i) == g || Some(i) == c {
            continue;
        }
        if schema.index_of(h).is_none() {
            return Err(CliError::Usage(format!("reference column `{h}` is not a schema symptom")));
        }
        symptoms.push(h.clone());
        cols.push(i);
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut values = Vec::with_capacity(cols.len());
        for &i in &cols {
            values.push(match rec[i].trim() {
                "1" | "true" | "TRUE" => true,
                "0" | "false" | "FALSE" => false,
                v => return Err(CliError::Usage(format!("reference row {line}: `{v}` is not 0/1"))),
            });
        }
        rows.push(ReferenceRow {
            group: g.map(|i| rec[i].to_string()),
            cluster: c.map(|i| rec[i].to_string()),
            values,
        });
    }
    Ok(ReferenceTable { symptoms, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CooccurOptions {
    pub n_perm: usize,
    pub reference: Option<PathBuf>,
}

impl Default for CooccurOptions {
    fn default() -> Self {
        Self {
            n_perm: 50_000,
            reference: None,
        }
    }
}

/// Phi matrices over the common inventory and their Mantel correlation.
/// Without a reference the two sides are FFN- and attention-lesioned rows.
pub fn cooccur(stores: &LoadedStores, opts: &CooccurOptions, seed: u64) -> CliResult<AnalysisOutput> {
    let schema = &stores.schema;
    let rows = lesion_rows(stores);
    let (names, a_rows, b_rows, labels): (Vec<String>, Vec<Vec<bool>>, Vec<Vec<bool>>, [&str; 2]) = match &opts.reference {
        Some(path) => {
            let reference = read_reference(path, schema)?;
            let idx: Vec<usize> = reference
                .symptoms
                .iter()
                .map(|n| schema.index_of(n).unwrap())
                .filter(|&i| schema.symptoms()[i].in_common_inventory)
                .collect();
            let pos: Vec<usize> = idx
                .iter()
                .map(|&i| reference.symptoms.iter().position(|n| n == &schema.symptoms()[i].name).unwrap())
                .collect();
            let model = rows.iter().map(|r| idx.iter().map(|&i| r.symptoms.bits().unwrap()[i]).collect()).collect();
            let refr = reference.rows.iter().map(|r| pos.iter().map(|&p| r.values[p]).collect()).collect();
            let names = idx.iter().map(|&i| schema.symptoms()[i].name.clone()).collect();
            (names, model, refr, ["model", "reference"])
        }
        None => {
            let idx = schema.common_indices();
            let pick = |mech: Mechanism| -> Vec<Vec<bool>> {
                rows.iter()
                    .filter(|r| r.component.unwrap().mechanism() == mech)
                    .map(|r| idx.iter().map(|&i| r.symptoms.bits().unwrap()[i]).collect())
                    .collect()
            };
            let names = idx.iter().map(|&i| schema.symptoms()[i].name.clone()).collect();
            (names, pick(Mechanism::Ffn), pick(Mechanism::Attention), ["ffn", "attention"])
        }
    };
    let phi_a = phi_matrix(&a_rows)?;
    let phi_b = phi_matrix(&b_rows)?;
    let mantel = mantel_test(&phi_a.values, &phi_b.values, opts.n_perm, seed)?;
    let mut t = Table::new(&["symptom_a", "symptom_b", &format!("phi_{}", labels[0]), &format!("phi_{}", labels[1])]);
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            t.push(vec![names[i].clone(), names[j].clone(), num(phi_a.values[i][j]), num(phi_b.values[i][j])]);
        }
    }
    Ok(AnalysisOutput {
        analysis: "cooccur".into(),
        seed,
        parameters: json!({
            "n_perm": opts.n_perm,
            "reference_sha256": opts.reference.as_deref().map(lesionkit::records::sha256_file).transpose()?,
        }),
        inputs: stores.inputs.clone(),
        result: json!({
            "symptoms": names,
            "sides": labels,
            "n_rows": [a_rows.len(), b_rows.len()],
            "phi": [phi_a, phi_b],
            "mantel": mantel,
        }),
        table: t,
    })
}

pub fn depth(stores: &LoadedStores, cfg: &DepthConfig) -> CliResult<AnalysisOutput> {
    let n_layers = stores.n_layers();
    let rows: Vec<DepthRow> = lesion_profiles(stores, None)?
        .into_iter()
        .map(|p| DepthRow {
            n_layers: n_layers[&p.key.model_id],
            model_id: p.key.model_id,
            layer: p.key.layer.unwrap(),
            severity: p.key.severity.value(),
            rates: p.rates,
        })
        .collect();
    let cats = stores.schema.categories();
    let labels: Vec<usize> = cats.iter().map(|c| Category::ALL.iter().position(|x| x == c).unwrap()).collect();
    let result = depth_topography(&rows, &labels, cfg)?;
    let mut t = Table::new(&["symptom", "category", "bin", "depth_low", "depth_high", "n_rows", "prevalence", "normalized"]);
    let width = 1.0 / cfg.n_bins as f64;
    for (j, name) in stores.schema.names().iter().enumerate() {
        for b in 0..cfg.n_bins {
            t.push(vec![
                name.to_string(),
                cats[j].name().into(),
                b.to_string(),
                num(b as f64 * width),
                num((b + 1) as f64 * width),
                result.bin_counts[b].to_string(),
                opt(result.prevalence[j][b]),
                opt(result.normalized[j][b]),
            ]);
        }
    }
    Ok(AnalysisOutput {
        analysis: "depth".into(),
        seed: cfg.seed,
        parameters: to_value(cfg),
        inputs: stores.inputs.clone(),
        result: json!({
            "symptoms": stores.schema.names(),
            "categories": cats,
            "depth": result,
        }),
        table: t,
    })
}

fn feature_indices(names: &[String]) -> CliResult<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            SurfaceFeatures::NAMES
                .iter()
                .position(|f| f == n)
                .ok_or_else(|| CliError::Usage(format!("unknown surface feature `{n}`")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibleOptions {
    pub vars: Vec<String>,
    pub contrast: ContrastOptions,
}

impl Default for VisibleOptions {
    fn default() -> Self {
        Self {
            vars: SurfaceFeatures::NAMES.iter().map(|s| s.to_string()).collect(),
            contrast: ContrastOptions::default(),
        }
    }
}

pub fn match_visible(stores: &LoadedStores, opts: &VisibleOptions, seed: u64) -> CliResult<AnalysisOutput> {
    let fidx = feature_indices(&opts.vars)?;
    let conds: Vec<MatchCondition> = lesion_profiles(stores, opts.contrast.severity)?
        .into_iter()
        .map(|p| MatchCondition {
            vars: fidx.iter().map(|&i| p.feature_means[i]).collect(),
            key: p.key,
            rates: p.rates,
        })
        .collect();
    let result = visible_damage_match(&conds, &opts.contrast.config(seed))?;
    let mut t = Table::new(&["model_id", "layer", "severity", "strategy", "ffn", "attention", "z_distance"]);
    for m in &result.matches {
        t.push(vec![
            m.stratum.model_id.clone(),
            m.stratum.layer.to_string(),
            m.stratum.severity.canonical(),
            m.stratum.strategy.name().into(),
            m.ffn.name().into(),
            m.attention.name().into(),
            num(m.distance),
        ]);
    }
    Ok(AnalysisOutput {
        analysis: "match-visible".into(),
        seed,
        parameters: to_value(opts),
        inputs: stores.inputs.clone(),
        result: json!({ "symptoms": stores.schema.names(), "match": result }),
        table: t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoseOptions {
    pub proxy: DoseProxy,
    pub scope: DoseScope,
}

impl Default for DoseOptions {
    fn default() -> Self {
        Self {
            proxy: DoseProxy::Kl,
            scope: DoseScope::SameLayer,
        }
    }
}

pub fn match_dose(stores: &LoadedStores, opts: &DoseOptions) -> CliResult<AnalysisOutput> {
    if stores.proxies.is_empty() {
        return Err(CliError::Insufficient("no dose proxies recorded in the store".into()));
    }
    let profiles: BTreeMap<_, _> = lesion_profiles(stores, None)?.into_iter().map(|p| (p.key.clone(), p)).collect();
    let mut seen = BTreeSet::new();
    let (mut ffn, mut attn) = (Vec::new(), Vec::new());
    for row in &stores.proxies {
        let key = row.key();
        let Some(p) = profiles.get(&key) else { continue };
        if !seen.insert(key.clone()) {
            continue;
        }
        let c = DoseCondition {
            key,
            kl: row.next_token_kl,
            residual: row.residual_change,
            rates: p.rates.clone(),
        };
        match row.component.mechanism() {
            Mechanism::Ffn => ffn.push(c),
            Mechanism::Attention => attn.push(c),
        }
    }
    if ffn.is_empty() {
        return Err(CliError::Insufficient("dose matching needs at least one FFN condition with proxies".into()));
    }
    let result = dose_match(&ffn, &attn, opts.proxy, opts.scope)?;
    let mut t = Table::new(&[
        "model_id",
        "layer",
        "severity",
        "ffn",
        "attention_layer",
        "attention_severity",
        "attention",
        "kl_log10_gap",
        "residual_log10_gap",
        "gap",
        "profile_l2_pp",
    ]);
    for m in &result.matches {
        let (f, a) = (&ffn[m.ffn].key, &attn[m.attention].key);
        t.push(vec![
            f.model_id.clone(),
            f.layer.unwrap().to_string(),
            f.severity.canonical(),
            f.component.unwrap().name().into(),
            a.layer.unwrap().to_string(),
            a.severity.canonical(),
            a.component.unwrap().name().into(),
            num(m.kl_gap),
            num(m.residual_gap),
            num(m.gap),
            num(m.profile_l2_pp),
        ]);
    }
    Ok(AnalysisOutput {
        analysis: "match-dose".into(),
        seed: 0,
        parameters: to_value(opts),
        inputs: stores.inputs.clone(),
        result: json!({ "n_ffn": ffn.len(), "n_attention": attn.len(), "match": result }),
        table: t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HumanMapOptions {
    pub reference: PathBuf,
    pub n_boot: usize,
    pub n_perm: usize,
    pub n_cluster_resamples: usize,
    pub level: f64,
}

impl HumanMapOptions {
    pub fn new(reference: PathBuf) -> Self {
        Self {
            reference,
            n_boot: 5000,
            n_perm: 10_000,
            n_cluster_resamples: 5000,
            level: 0.95,
        }
    }
}

fn bits_f64(bits: impl IntoIterator<Item = bool>) -> Vec<f64> {
    bits.into_iter().map(|b| b as u8 as f64).collect()
}

/// Per-row category means over the listed symptom indices.
fn category_means(values: &[f64], cats: &[Category], present: &[Category]) -> Vec<f64> {
    present
        .iter()
        .map(|c| {
            let v: Vec<f64> = values.iter().zip(cats).filter(|(_, k)| *k == c).map(|(x, _)| *x).collect();
            mean(&v)
        })
        .collect()
}

/// Cosine map of reference groups against per-component lesion profiles on
/// the shared symptoms, plus a cluster bootstrap of category-mean
/// prevalence differences (reference clusters vs lesion model variants).
pub fn map_human(stores: &LoadedStores, opts: &HumanMapOptions, seed: u64) -> CliResult<AnalysisOutput> {
    let schema = &stores.schema;
    let reference = read_reference(&opts.reference, schema)?;
    let shared: Vec<usize> = reference
        .symptoms
        .iter()
        .enumerate()
        .filter(|(_, n)| schema.symptoms()[schema.index_of(n).unwrap()].in_common_inventory)
        .map(|(p, _)| p)
        .collect();
    if shared.len() < 2 {
        return Err(CliError::Insufficient(format!("map-human needs at least 2 shared symptoms, got {}", shared.len())));
    }
    let names: Vec<String> = shared.iter().map(|&p| reference.symptoms[p].clone()).collect();
    let sidx: Vec<usize> = names.iter().map(|n| schema.index_of(n).unwrap()).collect();
    let mut human: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &reference.rows {
        let g = r.group.clone().unwrap_or_else(|| "reference".into());
        human.entry(g).or_default().push(bits_f64(shared.iter().map(|&p| r.values[p])));
    }
    let rows = lesion_rows(stores);
    let mut lesion: BTreeMap<ComponentKind, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &rows {
        let bits = r.symptoms.bits().unwrap();
        lesion
            .entry(r.component.unwrap())
            .or_default()
            .push(bits_f64(sidx.iter().map(|&i| bits[i])));
    }
    let human_groups: Vec<RecordGroup> = human.into_iter().map(|(name, rows)| RecordGroup { name, rows }).collect();
    let lesion_groups: Vec<RecordGroup> = lesion
        .into_iter()
        .map(|(k, rows)| RecordGroup {
            name: k.name().into(),
            rows,
        })
        .collect();
    let cfg = CosineConfig {
        n_boot: opts.n_boot,
        n_perm: opts.n_perm,
        seed,
        level: opts.level,
    };
    let map = cosine_map(&human_groups, &lesion_groups, &cfg)?;

    let cats: Vec<Category> = sidx.iter().map(|&i| schema.symptoms()[i].category).collect();
    let present: Vec<Category> = Category::ALL.into_iter().filter(|c| cats.contains(c)).collect();
    let a: Vec<ClusteredRow> = reference
        .rows
        .iter()
        .map(|r| ClusteredRow {
            cluster: r.cluster.clone(),
            values: category_means(&bits_f64(shared.iter().map(|&p| r.values[p])), &cats, &present),
        })
        .collect();
    let b: Vec<ClusteredRow> = rows
        .iter()
        .map(|r| {
            let bits = r.symptoms.bits().unwrap();
            ClusteredRow {
                cluster: Some(r.model_id.clone()),
                values: category_means(&bits_f64(sidx.iter().map(|&i| bits[i])), &cats, &present),
            }
        })
        .collect();
    // Too few clusters leaves the cosine map valid; the reason is recorded.
    let (boot, boot_skipped) = match clustered_bootstrap(&a, &b, opts.n_cluster_resamples, seed, opts.level) {
        Ok(r) => (Some(r), None),
        Err(StatsError::InsufficientData(m)) => (None, Some(m)),
        Err(e) => return Err(e.into()),
    };

    let mut t = Table::new(&["group", "component", "cosine", "ci_low", "ci_high", "p_row_maxT", "p_table_maxT"]);
    for c in &map.cells {
        t.push(vec![
            c.group.clone(),
            c.component.clone(),
            opt(c.cosine),
            opt(c.ci_low),
            opt(c.ci_high),
            opt(c.p_row),
            opt(c.p_table),
        ]);
    }
    Ok(AnalysisOutput {
        analysis: "map-human".into(),
        seed,
        parameters: json!({
            "reference_sha256": lesionkit::records::sha256_file(&opts.reference)?,
            "n_boot": opts.n_boot,
            "n_perm": opts.n_perm,
            "n_cluster_resamples": opts.n_cluster_resamples,
            "level": opts.level,
        }),
        inputs: stores.inputs.clone(),
        result: json!({
            "symptoms": names,
            "cosine": map,
            "categories": present,
            "category_bootstrap": boot,
            "category_bootstrap_skipped": boot_skipped,
        }),
        table: t,
    })
}

pub fn effect_size(stores: &LoadedStores) -> CliResult<AnalysisOutput> {
    let profiles: Vec<CalibrationProfile> = lesion_profiles(stores, None)?
        .into_iter()
        .map(|p| CalibrationProfile {
            family: stores.family(&p.key.model_id),
            key: p.key,
            rates: p.rates,
        })
        .collect();
    let result = effect_size_calibration(&profiles)?;
    let mut t = Table::new(&["group", "l2_pp", "rank", "is_ffn"]);
    for p in &result.partitions {
        let g: Vec<&str> = p.group.iter().map(|k| k.name()).collect();
        t.push(vec![g.join("+"), num(p.l2_pp), p.rank.to_string(), p.is_ffn.to_string()]);
    }
    Ok(AnalysisOutput {
        analysis: "effect-size".into(),
        seed: 0,
        parameters: json!({ "classifier": "nearest-centroid (non-canonical)" }),
        inputs: stores.inputs.clone(),
        result: to_value(&result),
        table: t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualizeOptions {
    pub features: Vec<String>,
    pub contrast: ContrastOptions,
}

impl Default for ResidualizeOptions {
    fn default() -> Self {
        Self {
            features: ["word_count", "unique_word_ratio", "repeated_token_mass"].map(String::from).to_vec(),
            contrast: ContrastOptions::default(),
        }
    }
}

/// Regresses condition rates on surface features and reruns the paired
/// contrast on the residuals.
pub fn residualize(stores: &LoadedStores, opts: &ResidualizeOptions, seed: u64) -> CliResult<AnalysisOutput> {
    let fidx = feature_indices(&opts.features)?;
    let profiles = lesion_profiles(stores, opts.contrast.severity)?;
    let rates: Vec<Vec<f64>> = profiles.iter().map(|p| p.rates.clone()).collect();
    let feats: Vec<Vec<f64>> = profiles.iter().map(|p| fidx.iter().map(|&i| p.feature_means[i]).collect()).collect();
    let resid = residualize_profiles(&rates, &feats, &opts.features)?;
    let adjusted: Vec<ConditionProfile> = profiles
        .iter()
        .zip(resid)
        .map(|(p, r)| ConditionProfile { rates: r, ..p.clone() })
        .collect();
    let (raw, raw_c) = contrast_of(&profiles, &opts.contrast, seed)?;
    let (res, res_c) = contrast_of(&adjusted, &opts.contrast, seed)?;
    let names = stores.schema.names();
    Ok(AnalysisOutput {
        analysis: "residualize".into(),
        seed,
        parameters: to_value(opts),
        inputs: stores.inputs.clone(),
        result: json!({
            "symptoms": names,
            "raw": raw,
            "residualized": res,
            "l2_reduction_fraction": if raw_c.l2_distance_pp > 0.0 {
                Some(1.0 - res_c.l2_distance_pp / raw_c.l2_distance_pp)
            } else {
                None
            },
        }),
        table: symptom_table(&names, &res_c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikelihoodOptions {
    pub lesion: Option<String>,
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self {
            lesion: None,
            n_resamples: 5000,
            level: 0.95,
        }
    }
}

/// Parses `layer:component:severity[:strategy]`.
pub fn parse_lesion(text: &str, cfg: &SweepConfig) -> CliResult<LesionSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || CliError::Usage(format!("lesion `{text}` is not layer:component:severity[:strategy]"));
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let layer: usize = parts[0].parse().map_err(|_| bad())?;
    let kind: ComponentKind = parts[1].parse().map_err(|e: lesionkit::Error| CliError::Usage(e.to_string()))?;
    let sev = Severity::new(parts[2].parse().map_err(|_| bad())?).map_err(|e| CliError::Usage(e.to_string()))?;
    let strategy = match parts.get(3) {
        Some(s) => s.parse::<Strategy>().map_err(|e| CliError::Usage(e.to_string()))?,
        None => Strategy::Zero,
    };
    Ok(LesionSpec::new(cfg.model_id.clone(), layer, kind, sev, strategy, cfg.base_seed))
}

/// Rows of a `population,prompt,response` CSV.
pub fn read_texts(path: &Path) -> CliResult<Vec<(String, String, String)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("texts {}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |n: &str| {
        header
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| CliError::Usage(format!("texts file lacks a `{n}` column")))
    };
    let (p, q, r) = (col("population")?, col("prompt")?, col("response")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push((rec[p].to_string(), rec[q].to_string(), rec[r].to_string()));
    }
    Ok(out)
}

/// Mean per-token log-likelihood of reference texts under the intact model
/// and optionally one lesion, per population, with bootstrap CIs and
/// Cohen's d between the first two populations in name order.
pub fn likelihood(cfg: &SweepConfig, texts: &Path, opts: &LikelihoodOptions, seed: u64) -> CliResult<AnalysisOutput> {
    let mut model = cfg.load_model()?;
    let rows = read_texts(texts)?;
    let lesion = opts.lesion.as_deref().map(|l| parse_lesion(l, cfg)).transpose()?;
    let mut conditions: Vec<(String, Option<&LesionSpec>)> = vec![("intact".into(), None)];
    if let Some(l) = &lesion {
        conditions.push((format!("{}:{}:{}", l.layer, l.component.name(), l.severity.canonical()), Some(l)));
    }
    let mut by_pop: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (pop, prompt, response) in &rows {
        let mut vals = Vec::with_capacity(conditions.len());
        for (_, spec) in &conditions {
            vals.push(lesionkit::generation::mean_per_token_logprob(&mut model, *spec, prompt, response)?);
        }
        by_pop.entry(pop.clone()).or_default().push(vals);
    }
    if by_pop.is_empty() {
        return Err(CliError::Insufficient("texts file has no rows".into()));
    }
    let mut t = Table::new(&["population", "condition", "n", "mean_logprob", "ci_low", "ci_high"]);
    let mut summary = Vec::new();
    for (ci, (cname, _)) in conditions.iter().enumerate() {
        let mut per_pop = BTreeMap::new();
        for (pop, vals) in &by_pop {
            let xs: Vec<f64> = vals.iter().map(|v| v[ci]).collect();
            let (lo, hi) = bootstrap_mean_ci(&xs, opts.n_resamples, seed, opts.level)?;
            t.push(vec![pop.clone(), cname.clone(), xs.len().to_string(), num(mean(&xs)), num(lo), num(hi)]);
            per_pop.insert(pop.clone(), xs);
        }
        let pops: Vec<&String> = per_pop.keys().collect();
        let d = if pops.len() >= 2 {
            Some(json!({
                "x": pops[0],
                "y": pops[1],
                "cohens_d": cohens_d(&per_pop[pops[0]], &per_pop[pops[1]])?,
            }))
        } else {
            None
        };
        summary.push(json!({ "condition": cname, "contrast": d }));
    }
    Ok(AnalysisOutput {
        analysis: "likelihood".into(),
        seed,
        parameters: json!({
            "lesion": opts.lesion,
            "n_resamples": opts.n_resamples,
            "level": opts.level,
            "config_sha256": cfg.canonical_sha256(),
            "texts_sha256": lesionkit::records::sha256_file(texts)?,
        }),
        inputs: Vec::new(),
        result: json!({ "conditions": summary }),
        table: t,
    })
}
