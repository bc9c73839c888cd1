//! Canonical model encoding.
//!
//! A compact UTF-8 JSON document whose parameter blobs are base64 of
//! little-endian `f32` in row-major order. Wire structs declare their fields
//! in sorted order, so serde emits sorted keys and the output is canonical
//! regardless of how `serde_json` maps are configured.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{
    shape_check, Activation, CompileInfo, LayerParams, LayerSpec, ModelArchitecture, ParameterSet,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWire {
    pub activation: Activation,
    #[serde(rename = "in")]
    pub input: usize,
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureWire {
    pub input_dim: usize,
    pub layers: Vec<LayerWire>,
    pub prediction_boundary: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParamsWire {
    pub bias_b64: String,
    pub weights_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub architecture: ArchitectureWire,
    pub compile: CompileInfo,
    pub parameters: Vec<LayerParamsWire>,
}

impl From<&ModelArchitecture> for ArchitectureWire {
    fn from(arch: &ModelArchitecture) -> Self {
        Self {
            input_dim: arch.input_dim(),
            layers: arch
                .layers()
                .iter()
                .map(|l| LayerWire {
                    activation: l.activation,
                    input: l.input_dim,
                    out: l.output_dim,
                })
                .collect(),
            prediction_boundary: arch.prediction_boundary(),
        }
    }
}

impl TryFrom<&ArchitectureWire> for ModelArchitecture {
    type Error = Error;

    fn try_from(wire: &ArchitectureWire) -> Result<Self> {
        let layers = wire
            .layers
            .iter()
            .map(|l| LayerSpec::new(l.input, l.out, l.activation))
            .collect();
        ModelArchitecture::new(wire.input_dim, layers, wire.prediction_boundary)
    }
}

impl ModelArchitecture {
    /// Canonical JSON of the architecture alone; this is what gets
    /// content-addressed in the registry.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(&ArchitectureWire::from(self)).expect("architecture serializes")
    }

    pub fn from_canonical_json(bytes: &[u8]) -> Result<Self> {
        let wire: ArchitectureWire =
            serde_json::from_slice(bytes).map_err(|e| Error::Parse(e.to_string()))?;
        ModelArchitecture::try_from(&wire)
    }
}

fn floats_to_b64(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn b64_to_floats(text: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Parse(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_parameters(params: &ParameterSet) -> Vec<LayerParamsWire> {
    params
        .layers
        .iter()
        .map(|l| LayerParamsWire {
            bias_b64: floats_to_b64(&l.bias),
            weights_b64: floats_to_b64(&l.weights),
        })
        .collect()
}

/// Decodes per-layer blobs against `arch`.
///
/// Bad base64 is a `parse_error`, wrong layer counts or lengths are a
/// `shape_mismatch`, non-finite values are an `invalid_model`.
pub fn decode_parameters(
    arch: &ModelArchitecture,
    layers: &[LayerParamsWire],
) -> Result<ParameterSet> {
    let decoded = layers
        .iter()
        .map(|l| Ok((b64_to_floats(&l.weights_b64)?, b64_to_floats(&l.bias_b64)?)))
        .collect::<Result<Vec<_>>>()?;
    if decoded.len() != arch.layers().len() {
        return Err(Error::ShapeMismatch);
    }
    let params = ParameterSet::new(
        arch.layers()
            .iter()
            .zip(decoded)
            .map(|(spec, (weights, bias))| {
                LayerParams::new(spec.output_dim, spec.input_dim, weights, bias)
            })
            .collect(),
    );
    if !shape_check(arch, &params) {
        return Err(Error::ShapeMismatch);
    }
    if !params.is_finite() {
        return Err(Error::InvalidModel("non-finite parameter value".into()));
    }
    Ok(params)
}

impl ModelDocument {
    pub fn new(arch: &ModelArchitecture, params: &ParameterSet, compile: &CompileInfo) -> Self {
        Self {
            architecture: arch.into(),
            compile: *compile,
            parameters: encode_parameters(params),
        }
    }

    /// Validates every invariant and returns the decoded triple.
    pub fn decode(&self) -> Result<(ModelArchitecture, ParameterSet, CompileInfo)> {
        let arch = ModelArchitecture::try_from(&self.architecture)?;
        self.compile.validate()?;
        let params = decode_parameters(&arch, &self.parameters).map_err(|e| match e {
            Error::ShapeMismatch => {
                Error::InvalidModel("parameters do not match the architecture".into())
            }
            other => other,
        })?;
        Ok((arch, params, self.compile))
    }
}

pub fn serialize_model(
    arch: &ModelArchitecture,
    params: &ParameterSet,
    compile: &CompileInfo,
) -> Result<Vec<u8>> {
    if !shape_check(arch, params) {
        return Err(Error::ShapeMismatch);
    }
    let doc = ModelDocument::new(arch, params, compile);
    Ok(serde_json::to_vec(&doc).expect("model document serializes"))
}

pub fn deserialize_model(bytes: &[u8]) -> Result<(ModelArchitecture, ParameterSet, CompileInfo)> {
    let doc: ModelDocument =
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(e.to_string()))?;
    doc.decode()
}
