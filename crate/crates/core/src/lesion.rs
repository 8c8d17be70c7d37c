//! Weight lesions: severities, masks, replacement strategies and controls.
//!
//! A lesion replaces a random subset of one weight matrix. Every entry is
//! independently retained with probability `1 - s` (`s` the severity); the
//! lesioned entries are zeroed or mean-replaced and the retained ones are
//! left exactly as they were (no `1/(1-s)` rescaling).

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Backend, ComponentKind};
use crate::rng::CounterRng;

/// Severity in `[0, 1]`, stored in units of 1e-4 so that equal severities
/// compare, hash and serialise identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Severity(u32);

impl Severity {
    const SCALE: u32 = 10_000;

    pub const ZERO: Severity = Severity(0);
    pub const FULL: Severity = Severity(Self::SCALE);

    /// The canonical sweep grid.
    pub const GRID: [Severity; 5] = [
        Severity(0),
        Severity(2_500),
        Severity(5_000),
        Severity(7_500),
        Severity(10_000),
    ];

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Input(format!("severity {value} outside [0, 1]")));
        }
        Ok(Severity((value * Self::SCALE as f64).round() as u32))
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self) -> bool {
        self.0 == Self::SCALE
    }

    /// Fixed four-decimal form, e.g. `0.7500`.
    pub fn canonical(self) -> String {
        format!("{}.{:04}", self.0 / Self::SCALE, self.0 % Self::SCALE)
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl Serialize for Severity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Severity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Severity::new(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Zero,
    GlobalMean,
    RowMean,
    ColumnMean,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Zero,
        Strategy::GlobalMean,
        Strategy::RowMean,
        Strategy::ColumnMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Zero => "zero",
            Strategy::GlobalMean => "global_mean",
            Strategy::RowMean => "row_mean",
            Strategy::ColumnMean => "column_mean",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown strategy `{s}`")))
    }
}

/// One targeted intervention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LesionSpec {
    pub model_id: String,
    pub layer: usize,
    pub component: ComponentKind,
    pub severity: Severity,
    pub strategy: Strategy,
    pub base_seed: u64,
    pub mask_seed: u64,
}

impl LesionSpec {
    pub fn new(
        model_id: impl Into<String>,
        layer: usize,
        component: ComponentKind,
        severity: Severity,
        strategy: Strategy,
        base_seed: u64,
    ) -> Self {
        let model_id = model_id.into();
        let mask_seed = derive_mask_seed(&model_id, component, layer, severity, strategy, base_seed);
        Self {
            model_id,
            layer,
            component,
            severity,
            strategy,
            base_seed,
            mask_seed,
        }
    }

    /// True when `mask_seed` matches the seed derived from the other fields.
    pub fn seed_is_consistent(&self) -> bool {
        self.mask_seed
            == derive_mask_seed(
                &self.model_id,
                self.component,
                self.layer,
                self.severity,
                self.strategy,
                self.base_seed,
            )
    }

    pub fn mask_for(&self, rows: usize, cols: usize) -> Mask {
        sample_mask(rows, cols, self.severity, self.mask_seed)
    }
}

/// Per-condition mask seed.
///
/// The UTF-8 string `model_id|component|layer|severity|strategy|base_seed`
/// (severity in fixed four-decimal form, component and strategy by their
/// canonical names) is hashed with SHA-256; the seed is the first eight
/// digest bytes read as a little-endian `u64`.
pub fn derive_mask_seed(
    model_id: &str,
    component: ComponentKind,
    layer: usize,
    severity: Severity,
    strategy: Strategy,
    base_seed: u64,
) -> u64 {
    let canonical = format!(
        "{model_id}|{}|{layer}|{}|{}|{base_seed}",
        component.name(),
        severity.canonical(),
        strategy.name()
    );
    let digest = Sha256::digest(canonical.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Binary mask; `true` = retained, `false` = lesioned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    retained: Vec<bool>,
}

impl Mask {
    pub fn all_retained(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            retained: vec![true; rows * cols],
        }
    }

    pub fn from_retained(rows: usize, cols: usize, retained: Vec<bool>) -> Result<Self> {
        if retained.len() != rows * cols {
            return Err(Error::Input("mask length does not match shape".into()));
        }
        Ok(Self { rows, cols, retained })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    pub fn is_retained(&self, r: usize, c: usize) -> bool {
        self.retained[r * self.cols + c]
    }

    pub fn zero_count(&self) -> usize {
        self.retained.iter().filter(|&&r| !r).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.retained.is_empty() {
            0.0
        } else {
            self.zero_count() as f64 / self.retained.len() as f64
        }
    }

    /// Flat indices (row-major) of lesioned entries.
    pub fn lesioned_positions(&self) -> Vec<usize> {
        self.retained
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (!r).then_some(i))
            .collect()
    }
}

/// Bernoulli mask with retention probability `1 - severity`.
///
/// Entry `i` (row-major) is retained iff the `i`-th uniform draw of the
/// counter stream keyed by `mask_seed` is below `1 - severity`. Severities 0
/// and 1 never touch the stream.
pub fn sample_mask(rows: usize, cols: usize, severity: Severity, mask_seed: u64) -> Mask {
    let n = rows * cols;
    let retained = if severity.is_zero() {
        vec![true; n]
    } else if severity.is_full() {
        vec![false; n]
    } else {
        let keep = 1.0 - severity.value();
        let mut rng = CounterRng::new(mask_seed);
        (0..n).map(|_| rng.next_f64() < keep).collect()
    };
    Mask { rows, cols, retained }
}

fn check_shapes(weights: &Matrix, mask: &Mask) -> Result<()> {
    if weights.shape() != mask.shape() {
        return Err(Error::Shape {
            expected: weights.shape(),
            got: mask.shape(),
        });
    }
    Ok(())
}

/// Replacement value for every position, computed from the original matrix.
fn replacement_values(weights: &Matrix, strategy: Strategy) -> Box<dyn Fn(usize, usize) -> f32 + '_> {
    let (rows, cols) = weights.shape();
    match strategy {
        Strategy::Zero => Box::new(|_, _| 0.0),
        Strategy::GlobalMean => {
            let n = (rows * cols).max(1) as f64;
            let mean = (weights.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
            Box::new(move |_, _| mean)
        }
        Strategy::RowMean => {
            let means: Vec<f32> = (0..rows)
                .map(|r| (weights.row(r).iter().map(|&v| v as f64).sum::<f64>() / cols.max(1) as f64) as f32)
                .collect();
            Box::new(move |r, _| means[r])
        }
        Strategy::ColumnMean => {
            let means: Vec<f32> = (0..cols)
                .map(|c| {
                    ((0..rows).map(|r| weights.get(r, c) as f64).sum::<f64>() / rows.max(1) as f64) as f32
                })
                .collect();
            Box::new(move |_, c| means[c])
        }
    }
}

/// Lesioned copy of `weights`: retained entries are copied bit-for-bit,
/// lesioned entries take the strategy's replacement value.
pub fn apply_lesion(weights: &Matrix, mask: &Mask, strategy: Strategy) -> Result<Matrix> {
    check_shapes(weights, mask)?;
    let mut out = weights.clone();
    if mask.zero_count() == 0 {
        return Ok(out);
    }
    let replace = replacement_values(weights, strategy);
    let cols = weights.cols();
    for i in mask.lesioned_positions() {
        let (r, c) = (i / cols, i % cols);
        out.set(r, c, replace(r, c));
    }
    Ok(out)
}

/// Norm of inserted replacement values over the norm of the removed
/// originals, both over lesioned positions. Zero when nothing is lesioned
/// or the strategy is `Zero`.
pub fn tensor_ratio(weights: &Matrix, mask: &Mask, strategy: Strategy) -> Result<f64> {
    check_shapes(weights, mask)?;
    let positions = mask.lesioned_positions();
    if positions.is_empty() {
        log::debug!("tensor_ratio: mask lesions no entries, returning 0");
        return Ok(0.0);
    }
    if strategy == Strategy::Zero {
        return Ok(0.0);
    }
    let replace = replacement_values(weights, strategy);
    let cols = weights.cols();
    let (mut inserted, mut removed) = (0.0f64, 0.0f64);
    for i in positions {
        let (r, c) = (i / cols, i % cols);
        inserted += (replace(r, c) as f64).powi(2);
        removed += (weights.get(r, c) as f64).powi(2);
    }
    if removed == 0.0 {
        return Ok(if inserted == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((inserted / removed).sqrt())
}

/// Which matrices a matched-random control may draw positions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlUniverse {
    /// All lesionable matrices of the model.
    #[default]
    WholeModel,
    /// Only the reference lesion's layer.
    SameLayer,
}

/// Sparsity-matched random control for `reference`.
///
/// Zeroes exactly as many parameters as the reference mask does, at
/// positions drawn uniformly without replacement (selection sampling) from
/// the universe. Only matrices that receive at least one zeroed position
/// are returned, in `(layer, ComponentKind::ALL)` order.
pub fn matched_random_lesion<B: Backend + ?Sized>(
    model: &B,
    reference: &LesionSpec,
    control_seed: u64,
    universe: ControlUniverse,
) -> Result<Vec<(usize, ComponentKind, Mask)>> {
    if reference.severity.is_zero() {
        return Err(Error::Input("matched-random control needs a reference severity above 0".into()));
    }
    let (rows, cols) = model.component(reference.layer, reference.component)?.shape();
    let target = reference.mask_for(rows, cols).zero_count();

    let layers: Vec<usize> = match universe {
        ControlUniverse::WholeModel => (0..model.n_layers()).collect(),
        ControlUniverse::SameLayer => vec![reference.layer],
    };
    let mut slots = Vec::new();
    for &layer in &layers {
        for kind in ComponentKind::ALL {
            slots.push((layer, kind, model.component(layer, kind)?.shape()));
        }
    }
    let total: usize = slots.iter().map(|(_, _, (r, c))| r * c).sum();
    if target > total {
        return Err(Error::Input(format!(
            "control needs {target} positions but the universe holds {total}"
        )));
    }

    let mut rng = CounterRng::new(control_seed);
    let mut remaining_needed = target;
    let mut remaining_pool = total;
    let mut masks = Vec::new();
    for (layer, kind, (r, c)) in slots {
        let mut retained = vec![true; r * c];
        let mut any = false;
        for slot in retained.iter_mut() {
            if remaining_needed > 0 && (rng.below(remaining_pool as u64) as usize) < remaining_needed {
                *slot = false;
                remaining_needed -= 1;
                any = true;
            }
            remaining_pool -= 1;
        }
        if any {
            masks.push((layer, kind, Mask { rows: r, cols: c, retained }));
        }
    }
    debug_assert_eq!(remaining_needed, 0);
    Ok(masks)
}

/// Applies lesions to a model and puts the original weights back when
/// dropped, including during unwinding.
pub struct LesionGuard<'a, B: Backend + ?Sized> {
    model: &'a mut B,
    saved: Vec<(usize, ComponentKind, Matrix)>,
}

impl<'a, B: Backend + ?Sized> LesionGuard<'a, B> {
    pub fn apply(model: &'a mut B, spec: &LesionSpec) -> Result<Self> {
        let (rows, cols) = model.component(spec.layer, spec.component)?.shape();
        let mask = spec.mask_for(rows, cols);
        Self::apply_masks(model, &[(spec.layer, spec.component, mask)], spec.strategy)
    }

    pub fn apply_masks(
        model: &'a mut B,
        masks: &[(usize, ComponentKind, Mask)],
        strategy: Strategy,
    ) -> Result<Self> {
        let mut guard = Self {
            model,
            saved: Vec::with_capacity(masks.len()),
        };
        for (layer, kind, mask) in masks {
            if mask.zero_count() == 0 {
                continue;
            }
            let original = guard.model.component(*layer, *kind)?;
            let lesioned = apply_lesion(original, mask, strategy)?;
            let previous = guard.model.replace_component(*layer, *kind, lesioned)?;
            guard.saved.push((*layer, *kind, previous));
        }
        Ok(guard)
    }

    pub fn model(&self) -> &B {
        self.model
    }

    /// Restore now and report any failure.
    pub fn restore(mut self) -> Result<()> {
        self.restore_all()
    }

    fn restore_all(&mut self) -> Result<()> {
        let mut first_err = None;
        while let Some((layer, kind, m)) = self.saved.pop() {
            if let Err(e) = self.model.restore_component(layer, kind, m) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}

impl<B: Backend + ?Sized> Drop for LesionGuard<'_, B> {
    fn drop(&mut self) {
        if let Err(e) = self.restore_all() {
            log::error!("failed to restore lesioned weights: {e}");
        }
    }
}
