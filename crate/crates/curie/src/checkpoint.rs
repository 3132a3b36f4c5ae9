//! Model checkpoints: a JSON document holding the configuration, the input
//! signature, the seed and every weight. Weights are written as JSON numbers
//! in shortest round-trip form, so loading reproduces them bit for bit.

use serde::{Deserialize, Serialize};
use std::path::Path;

use curie_core::irreps::{IrrepsSignature, Wigner3j};
use curie_core::network::{Model, ModelConfig};

use crate::CliError;

pub const FORMAT: &str = "curie-checkpoint";

/// A replacement coupling tensor, row-major over `(m1, m2, m3)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Wigner3jOverride {
    pub degrees: [u32; 3],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub input_signature: IrrepsSignature,
    pub seed: u64,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wigner_3j_overrides: Vec<Wigner3jOverride>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let table = model.table();
        let wigner_3j_overrides = table
            .overridden()
            .into_iter()
            .map(|[a, b, c]| {
                let t = table.get(a, b, c).expect("overridden entries satisfy the triangle rule");
                Wigner3jOverride {
                    degrees: t.degrees,
                    data: t.data.clone(),
                }
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: 1,
            model: model.config.clone(),
            input_signature: model.input.clone(),
            seed: model.seed,
            params: model.params.clone(),
            wigner_3j_overrides,
        }
    }

    pub fn into_model(self) -> Result<Model, CliError> {
        let v = |e: curie_core::Error| CliError::Validation(format!("checkpoint: {e}"));
        if self.format != FORMAT || self.version != 1 {
            return Err(CliError::Validation(format!(
                "checkpoint: unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Model::new(&self.model, &self.input_signature, self.seed).map_err(v)?;
        if !self.wigner_3j_overrides.is_empty() {
            let mut table = model.table().clone();
            for o in self.wigner_3j_overrides {
                table
                    .override_entry(Wigner3j {
                        degrees: o.degrees,
                        data: o.data,
                    })
                    .map_err(v)?;
            }
            model.set_table(table);
        }
        model.set_params(&self.params).map_err(v)?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use curie_core::irreps::wigner_3j;
    use curie_core::scenarios::{make_square_rect_task, Deformation};

    fn model() -> Model {
        let task = make_square_rect_task(Deformation::SquareToRect).unwrap();
        Model::new(&ModelConfig::default(), &task.input_signature(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        let mut p = m.params.clone();
        p[0] = 0.1 + 0.2;
        p[1] = -1e-300;
        m.set_params(&p).unwrap();
        let ck = Checkpoint::from_model(&m);
        assert!(ck.wigner_3j_overrides.is_empty());
        let back: Checkpoint = serde_json::from_str(&ck.to_json()).unwrap();
        let m2 = back.into_model().unwrap();
        assert_eq!(
            m2.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            m.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn overrides_survive_the_round_trip() {
        let m = model();
        let mut table = m.table().clone();
        let mut t = wigner_3j(1, 1, 2).unwrap();
        t.data[2] += 0.1;
        table.override_entry(t.clone()).unwrap();
        let mut m = m;
        m.set_table(table);
        let ck = Checkpoint::from_model(&m);
        assert_eq!(ck.wigner_3j_overrides.len(), 1);
        let m2 = ck.into_model().unwrap();
        assert_eq!(m2.table().get(1, 1, 2).unwrap().data, t.data);
    }

    #[test]
    fn bad_override_shape_is_rejected() {
        let mut ck = Checkpoint::from_model(&model());
        ck.wigner_3j_overrides.push(Wigner3jOverride {
            degrees: [1, 1, 2],
            data: vec![0.0; 3],
        });
        assert!(matches!(ck.into_model(), Err(CliError::Validation(_))));
    }
}
