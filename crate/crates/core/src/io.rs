//! Versioned JSON documents for every artifact, plus OBJ mesh export.
//!
//! Each document is `{format, version, header, meta, data}`. The header
//! repeats the dimensions of `data` and is checked on load; `meta` carries the
//! seed and the resolved configuration that produced the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::face_model::{ModelAsset, Parameters};
use crate::landmarks::ObservationSet;
use crate::math::Vec3;
use crate::metrics::FitMetrics;
use crate::priors::{GmmPrior, PriorFile};
use crate::solver::SolveReport;

pub const DOCUMENT_VERSION: u32 = 1;

/// Provenance embedded in every output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

impl Meta {
    pub fn new(seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self { seed: Some(seed), config: serde_json::to_value(config)? })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document<H, T> {
    pub format: String,
    pub version: u32,
    pub header: H,
    pub meta: Meta,
    pub data: T,
}

/// A payload that can be stored as a [`Document`].
pub trait Payload: Serialize + DeserializeOwned {
    const FORMAT: &'static str;
    type Header: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug;

    fn header(&self) -> Self::Header;

    fn check(&self) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetHeader {
    pub vertex_count: usize,
    pub n_beta: usize,
    pub n_psi: usize,
    pub joint_count: usize,
    pub landmarks: usize,
    pub faces: usize,
}

impl Payload for ModelAsset {
    const FORMAT: &'static str = "facefit-asset";
    type Header = AssetHeader;

    fn header(&self) -> AssetHeader {
        AssetHeader {
            vertex_count: self.vertex_count,
            n_beta: self.n_beta,
            n_psi: self.n_psi,
            joint_count: self.joint_count,
            landmarks: self.landmark_bindings.len(),
            faces: self.faces.len(),
        }
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationHeader {
    pub frames: usize,
    pub cameras: usize,
    pub landmarks: usize,
    pub image_sizes: Vec<[u32; 2]>,
    pub records: usize,
}

impl Payload for ObservationSet {
    const FORMAT: &'static str = "facefit-observations";
    type Header = ObservationHeader;

    fn header(&self) -> ObservationHeader {
        ObservationHeader {
            frames: self.frames,
            cameras: self.cameras,
            landmarks: self.landmarks,
            image_sizes: self.image_sizes.clone(),
            records: self.observations.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametersHeader {
    pub frames: usize,
    pub cameras: usize,
    pub n_beta: usize,
    pub n_psi: usize,
    pub theta_len: usize,
}

impl Payload for Parameters {
    const FORMAT: &'static str = "facefit-parameters";
    type Header = ParametersHeader;

    fn header(&self) -> ParametersHeader {
        ParametersHeader {
            frames: self.frames(),
            cameras: self.cameras(),
            n_beta: self.beta.len(),
            n_psi: self.psi.first().map_or(0, Vec::len),
            theta_len: self.theta.first().map_or(0, Vec::len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorHeader {
    pub components: usize,
    pub dim: usize,
}

impl Payload for PriorFile {
    const FORMAT: &'static str = "facefit-prior";
    type Header = PriorHeader;

    fn header(&self) -> PriorHeader {
        PriorHeader { components: self.components, dim: self.dim }
    }

    fn check(&self) -> Result<()> {
        GmmPrior::try_from(self.clone()).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigHeader {
    pub cameras: usize,
}

impl Payload for CameraRig {
    const FORMAT: &'static str = "facefit-rig";
    type Header = RigHeader;

    fn header(&self) -> RigHeader {
        RigHeader { cameras: self.count() }
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub iterations: usize,
    pub accepted_steps: usize,
}

impl Payload for SolveReport {
    const FORMAT: &'static str = "facefit-report";
    type Header = ReportHeader;

    fn header(&self) -> ReportHeader {
        ReportHeader { iterations: self.iterations.len(), accepted_steps: self.accepted_steps }
    }
}

impl Payload for FitMetrics {
    const FORMAT: &'static str = "facefit-metrics";
    type Header = ();

    fn header(&self) {}
}

pub fn encode<T: Payload>(data: &T, meta: &Meta) -> Result<String> {
    #[derive(Serialize)]
    struct Out<'a, H, T> {
        format: &'static str,
        version: u32,
        header: H,
        meta: &'a Meta,
        data: &'a T,
    }
    let mut s = serde_json::to_string_pretty(&Out {
        format: T::FORMAT,
        version: DOCUMENT_VERSION,
        header: data.header(),
        meta,
        data,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn decode<T: Payload>(text: &str) -> Result<(T, Meta)> {
    let doc: Document<serde_json::Value, serde_json::Value> = serde_json::from_str(text)?;
    if doc.format != T::FORMAT {
        return Err(Error::InvalidParameters(format!("expected a {} document, found {}", T::FORMAT, doc.format)));
    }
    if doc.version != DOCUMENT_VERSION {
        return Err(Error::Version { kind: T::FORMAT, found: doc.version, expected: DOCUMENT_VERSION });
    }
    let header: T::Header = serde_json::from_value(doc.header)?;
    let data: T = serde_json::from_value(doc.data)?;
    let actual = data.header();
    if actual != header {
        return Err(Error::InvalidParameters(format!(
            "{} header {:?} does not match its data {:?}",
            T::FORMAT,
            header,
            actual
        )));
    }
    data.check()?;
    Ok((data, doc.meta))
}

pub fn save<T: Payload>(path: impl AsRef<Path>, data: &T, meta: &Meta) -> Result<()> {
    fs::write(path, encode(data, meta)?)?;
    Ok(())
}

pub fn load<T: Payload>(path: impl AsRef<Path>) -> Result<(T, Meta)> {
    decode(&fs::read_to_string(path)?)
}

/// Wavefront OBJ text with vertices in asset order and 1-based faces.
pub fn obj_string(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(vertices.len() * 40 + faces.len() * 20);
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Parses the `v` and `f` lines written by [`obj_string`].
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let bad = |line: &str| Error::InvalidAsset(format!("malformed OBJ line: {line}"));
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|t| t.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad(line));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let c: Vec<usize> = it
                    .map(|t| t.parse::<usize>().ok().filter(|&i| i > 0).map(|i| i - 1).ok_or_else(|| bad(line)))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad(line));
                }
                faces.push([c[0], c[1], c[2]]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::mesh_generate;
    use crate::priors::toy_prior;
    use crate::testutil::{problem, small_asset};
    use crate::landmarks::NoiseSpec;

    #[test]
    fn asset_round_trips_with_header() {
        let a = small_asset();
        let meta = Meta::new(3, &"cfg").unwrap();
        let text = encode(&a, &meta).unwrap();
        let (b, m): (ModelAsset, _) = decode(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, meta);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["header"]["vertex_count"], a.vertex_count);
        assert_eq!(v["format"], "facefit-asset");
    }

    #[test]
    fn tampered_header_is_rejected() {
        let p = problem(2, 1, &NoiseSpec::noiseless(), 1);
        let text = encode(&p.obs, &Meta::default()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["header"]["frames"] = 5.into();
        assert!(decode::<ObservationSet>(&v.to_string()).is_err());
        v["header"]["frames"] = 2.into();
        v["version"] = 9.into();
        assert!(matches!(decode::<ObservationSet>(&v.to_string()), Err(Error::Version { .. })));
        assert!(decode::<Parameters>(&text).is_err());
    }

    #[test]
    fn parameters_and_prior_round_trip_exactly() {
        let p = problem(2, 2, &NoiseSpec::noiseless(), 4);
        let (q, _): (Parameters, _) = decode(&encode(&p.truth, &Meta::default()).unwrap()).unwrap();
        assert_eq!(p.truth, q);
        let prior = toy_prior(5, 3, 2).unwrap();
        let file = PriorFile::from(&prior);
        let (back, _): (PriorFile, _) = decode(&encode(&file, &Meta::default()).unwrap()).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn obj_export_is_one_based_in_asset_order() {
        let a = small_asset();
        let p = Parameters::zeros(&a, 1, 1, 700.0);
        let verts = mesh_generate(&a, &p, 0).unwrap();
        let text = obj_string(&verts, &a.faces);
        assert!(text.lines().any(|l| l.starts_with("f 1 ")));
        let (v, f) = parse_obj(&text).unwrap();
        assert_eq!(v, verts);
        assert_eq!(f, a.faces);
    }
}
