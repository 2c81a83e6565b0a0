//! Safetensors checkpoints carrying the channel manifest, model and head
//! configs, and run provenance in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::mcd::heads::HeadConfig;
use crate::mcd::trainer::DistillationState;
use crate::params::ParamStore;
use crate::schema::{parse_schema, GroupSchema};

pub const FORMAT_VERSION: &str = "c3r-ckpt/1";

const KEY_FORMAT: &str = "format_version";
const KEY_SCHEMA: &str = "schema";
const KEY_MODEL: &str = "model";
const KEY_HEAD: &str = "head";
const KEY_PROVENANCE: &str = "provenance";
const STUDENT: &str = "student.";
const TEACHER: &str = "teacher.";
const CENTER_CLS: &str = "center.cls";
const CENTER_PATCH: &str = "center.patch";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub git_revision: Option<String>,
    pub seed: u64,
    pub step: usize,
    pub config: Option<String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub schema: GroupSchema,
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub provenance: Provenance,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub center_cls: Tensor,
    pub center_patch: Tensor,
}

impl Checkpoint {
    pub fn from_state(state: &DistillationState, provenance: Provenance) -> Result<Self> {
        Ok(Self {
            schema: state.schema.clone(),
            model: state.model.clone(),
            head: state.head.clone(),
            provenance,
            student: state.student_params.deep_copy()?,
            teacher: state.teacher_params.deep_copy()?,
            center_cls: state.teacher.cls_head.center.copy()?,
            center_patch: state.teacher.patch_head.center.copy()?,
        })
    }

    /// Rebuild a training state; teacher parameters and centers are restored.
    pub fn into_state(self) -> Result<DistillationState> {
        let mut st = DistillationState::from_params(&self.model, &self.schema, &self.head, self.student)?;
        st.teacher_params.assign(&self.teacher.snapshot()?)?;
        let dtype = st.student_params.dtype();
        st.teacher.cls_head.center = self.center_cls.to_dtype(dtype)?;
        st.teacher.patch_head.center = self.center_patch.to_dtype(dtype)?;
        st.step = self.provenance.step;
        Ok(st)
    }
}

fn to_safetensors_dtype(dtype: DType) -> Result<Dtype> {
    match dtype {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn view_to_tensor(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (k, v) in ckpt.student.snapshot()? {
        tensors.insert(format!("{STUDENT}{k}"), v);
    }
    for (k, v) in ckpt.teacher.snapshot()? {
        tensors.insert(format!("{TEACHER}{k}"), v);
    }
    let dtype = ckpt.student.dtype();
    tensors.insert(CENTER_CLS.into(), ckpt.center_cls.to_dtype(dtype)?);
    tensors.insert(CENTER_PATCH.into(), ckpt.center_patch.to_dtype(dtype)?);

    let st_dtype = to_safetensors_dtype(dtype)?;
    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        buffers.push((name.clone(), t.dims().to_vec(), tensor_bytes(t)?));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(st_dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut meta = HashMap::new();
    meta.insert(KEY_FORMAT.to_string(), FORMAT_VERSION.to_string());
    meta.insert(KEY_SCHEMA.to_string(), ckpt.schema.to_manifest());
    meta.insert(KEY_MODEL.to_string(), to_json(&ckpt.model)?);
    meta.insert(KEY_HEAD.to_string(), to_json(&ckpt.head)?);
    meta.insert(KEY_PROVENANCE.to_string(), to_json(&ckpt.provenance)?);
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn meta_field<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("header metadata lacks `{key}`")))
}

fn from_json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("header has no metadata".into()))?;
    let version = meta_field(meta, KEY_FORMAT)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format {version:?}, expected {FORMAT_VERSION:?}"
        )));
    }
    let schema = parse_schema(meta_field(meta, KEY_SCHEMA)?)?;
    let model: ModelConfig = from_json(meta_field(meta, KEY_MODEL)?, "model config")?;
    let head: HeadConfig = from_json(meta_field(meta, KEY_HEAD)?, "head config")?;
    let provenance: Provenance = from_json(meta_field(meta, KEY_PROVENANCE)?, "provenance")?;
    model.validate()?;
    head.validate()?;

    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut dtype = None;
    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    let mut center_cls = None;
    let mut center_patch = None;
    for (name, view) in st.tensors() {
        let t = view_to_tensor(&view)?;
        match dtype {
            None => dtype = Some(t.dtype()),
            Some(d) if d != t.dtype() => {
                return Err(Error::Checkpoint(format!("tensor `{name}` has mixed dtype")))
            }
            _ => {}
        }
        if let Some(k) = name.strip_prefix(STUDENT) {
            student.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix(TEACHER) {
            teacher.insert(k.to_string(), t);
        } else if name == CENTER_CLS {
            center_cls = Some(t);
        } else if name == CENTER_PATCH {
            center_patch = Some(t);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
    }
    let dtype = dtype.ok_or_else(|| Error::Checkpoint("checkpoint holds no tensors".into()))?;
    if student.keys().ne(teacher.keys()) {
        return Err(Error::Checkpoint("student and teacher parameter names differ".into()));
    }
    let to_store = |m: BTreeMap<String, Tensor>| -> Result<ParamStore> {
        let mut s = ParamStore::new(dtype);
        for (k, v) in m {
            s.insert(k, &v)?;
        }
        Ok(s)
    };
    let center = |c: Option<Tensor>, which: &str| -> Result<Tensor> {
        let c = c.ok_or_else(|| Error::Checkpoint(format!("missing {which} center")))?;
        if c.dims() != [head.prototypes] {
            return Err(Error::Checkpoint(format!(
                "{which} center has shape {:?}, head has {} prototypes",
                c.dims(),
                head.prototypes
            )));
        }
        Ok(c)
    };
    Ok(Checkpoint {
        center_cls: center(center_cls, "cls")?,
        center_patch: center(center_patch, "patch")?,
        student: to_store(student)?,
        teacher: to_store(teacher)?,
        schema,
        model,
        head,
        provenance,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
