//! Run configuration: one JSON document with a section per pipeline stage.
//!
//! Documents may be partial. Missing keys take their default values, unknown
//! keys are rejected and every offending path is listed, and each section is
//! validated before any work starts.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::metrics::RingMask;
use crate::phantom::PhantomSpec;
use crate::projector::ProjectorConfig;
use crate::rng;
use crate::sart::{AngleOrder, SartConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub mask: RingMask,
    /// Points per inference batch when rendering a volume.
    pub render_chunk: usize,
    /// Constraint counts enumerated by the combination study.
    pub combination_sizes: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let p = PhantomSpec::desk();
        MetricsConfig {
            mask: RingMask {
                inner: 0.0,
                outer: p.cylinder_radius,
            },
            render_chunk: 4096,
            combination_sizes: vec![4, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub energy_kev: f64,
    /// Projection angles as `Nxstart:stop` in degrees, both ends included.
    pub angles: String,
    /// Phantoms generated for a training dataset.
    pub dataset_size: usize,
    pub phantom: PhantomSpec,
    pub projector: ProjectorConfig,
    pub sart: SartConfig,
    pub field: FieldConfig,
    pub trainer: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            energy_kev: 18.0,
            angles: "8x0:140".into(),
            dataset_size: 1000,
            phantom: PhantomSpec::desk(),
            projector: ProjectorConfig::default(),
            sart: SartConfig::default(),
            field: FieldConfig::default(),
            trainer: TrainConfig::simulated(),
            metrics: MetricsConfig::default(),
        }
    }
}

const NOISE_DOMAIN: u64 = 101;
const SART_DOMAIN: u64 = 102;

/// Object keys present in `doc` but not in `template`, as dotted paths.
/// Positions where the template holds a non-object (`null` options, enums,
/// lists) are left to the typed parser.
fn unknown_keys(doc: &Value, template: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(t)) = (doc, template) else {
        return;
    };
    for (k, v) in d {
        let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match t.get(k) {
            None => out.push(p),
            Some(tv) => unknown_keys(v, tv, &p, out),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        if !doc.is_object() {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        }
        let mut full = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&doc, &full, "", &mut unknown);
        if !unknown.is_empty() {
            let list: Vec<String> = unknown.iter().map(|k| format!("unknown key `{k}`")).collect();
            return Err(Error::InvalidConfig(list.join("; ")));
        }
        merge(&mut full, doc);
        let cfg: RunConfig = serde_path_to_error::deserialize(full)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every failing check, one per line.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{section}: {e}"));
            }
        };
        check(
            "energy_kev",
            if self.energy_kev > 0.0 && self.energy_kev.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig("must be positive".into()))
            },
        );
        check("angles", crate::projector::parse_angle_spec(&self.angles).map(|_| ()));
        check("phantom", self.phantom.validate());
        check(
            "phantom.material",
            if self.phantom.material.energy_kev == self.energy_kev {
                Ok(())
            } else {
                Err(Error::InvalidConfig("energy_kev differs from the top-level energy".into()))
            },
        );
        check(
            "projector",
            if self.projector.n_depth >= 2 {
                Ok(())
            } else {
                Err(Error::InvalidConfig("n_depth must be >= 2".into()))
            },
        );
        check("sart", self.sart.validate());
        check("field", self.field.validate());
        check("trainer", self.trainer.validate());
        check("metrics.mask", RingMask::new(self.metrics.mask.inner, self.metrics.mask.outer).map(|_| ()));
        check(
            "metrics",
            if self.metrics.render_chunk > 0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig("render_chunk must be >= 1".into()))
            },
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }

    /// Reseeds every random component from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phantom.seed = seed;
        self.trainer.seed = seed;
        self.projector.noise_seed = rng::derive_seed(seed, NOISE_DOMAIN);
        if let AngleOrder::Shuffled(_) = self.sart.angle_order {
            self.sart.angle_order = AngleOrder::Shuffled(rng::derive_seed(seed, SART_DOMAIN));
        }
        self
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
