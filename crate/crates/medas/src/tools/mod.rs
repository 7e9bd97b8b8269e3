//! Tool runtime: execution context, plug and constructor adapters, and the
//! registry that maps tool contracts to built-in kernels or external
//! executables.

mod builtin;
pub mod external;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use medas_core::classifier::{ModelError, PixelClassifier};
use medas_core::dataset::{DatasetError, DatasetManifest};
use medas_core::graph::{ExternalCommand, MaterializePolicy, PortSpec, ToolCatalog, ToolSpec, ToolSpecError};
use medas_core::image::{Image, ImageError};
use medas_core::metrics::MetricError;
use medas_core::table::Table;
use medas_core::tensor::{DType, Tensor, TensorData, TensorError};
use medas_core::{coerce, ArtifactRef, CoercionError, MediaType, SemanticType, Value};

use crate::logging::Logger;
use crate::pngio;
use crate::store::{ArtifactStore, StoreError};

pub use builtin::builtin_specs;
pub use external::ExternalError;

pub const DEFAULT_TOOL_VERSION: &str = "1.0.0";

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: {reason}")]
    BadParam { name: String, reason: String },
    #[error("missing input {0}")]
    MissingInput(String),
    #[error("input {port}: {reason}")]
    BadInput { port: String, reason: String },
    #[error("output {0} was declared but not produced")]
    MissingDeclaredOutput(String),
    #[error("output {port} cannot be materialized as {semantic}")]
    ConstructorMismatch { port: String, semantic: SemanticType },
    #[error(transparent)]
    Coercion(#[from] CoercionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    External(#[from] ExternalError),
    #[error("cancelled")]
    Cancelled,
    #[error("{0}")]
    Failed(String),
}

/// A kernel result before it is materialized by the output constructor.
#[derive(Debug, Clone)]
pub enum Output {
    Scalar(Value),
    /// Stored as an `f32` tensor.
    Image(Image),
    /// Stored as a `u8` tensor of zeros and ones.
    Mask(Image),
    /// Stored as an `i64` tensor.
    LabelMap(Image),
    Png(Image),
    Table(Table),
    Dataset(DatasetManifest),
    Json(serde_json::Value),
    /// An artifact already in the store.
    Ref(ArtifactRef),
}

pub type Outputs = BTreeMap<String, Output>;
pub type Kernel = fn(&ToolContext) -> Result<Outputs, ToolError>;

/// Everything a tool invocation may read.
pub struct ToolContext<'a> {
    pub store: &'a ArtifactStore,
    pub node_id: String,
    pub inputs: BTreeMap<String, Value>,
    pub params: BTreeMap<String, Value>,
    pub seed: u64,
    pub workdir: PathBuf,
    pub logger: &'a Logger,
    pub gpu_ids: Vec<String>,
    pub cancel: Arc<AtomicBool>,
}

impl ToolContext<'_> {
    fn param(&self, name: &str) -> Result<&Value, ToolError> {
        self.params
            .get(name)
            .or_else(|| self.inputs.get(name))
            .ok_or_else(|| ToolError::MissingParam(name.into()))
    }

    pub fn f64(&self, name: &str) -> Result<f64, ToolError> {
        self.param(name)?.as_f64().ok_or_else(|| ToolError::BadParam {
            name: name.into(),
            reason: "not a number".into(),
        })
    }

    pub fn i64(&self, name: &str) -> Result<i64, ToolError> {
        match self.param(name)? {
            Value::Int(i) => Ok(*i),
            _ => Err(ToolError::BadParam {
                name: name.into(),
                reason: "not an integer".into(),
            }),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize, ToolError> {
        usize::try_from(self.i64(name)?).map_err(|_| ToolError::BadParam {
            name: name.into(),
            reason: "must be non-negative".into(),
        })
    }

    pub fn text(&self, name: &str) -> Result<&str, ToolError> {
        match self.param(name)? {
            Value::Text(s) => Ok(s),
            _ => Err(ToolError::BadParam {
                name: name.into(),
                reason: "not text".into(),
            }),
        }
    }

    pub fn bool(&self, name: &str) -> Result<bool, ToolError> {
        match self.param(name)? {
            Value::Bool(b) => Ok(*b),
            _ => Err(ToolError::BadParam {
                name: name.into(),
                reason: "not a boolean".into(),
            }),
        }
    }

    pub fn input(&self, port: &str) -> Result<&Value, ToolError> {
        self.inputs.get(port).ok_or_else(|| ToolError::MissingInput(port.into()))
    }

    pub fn artifact(&self, port: &str) -> Result<&ArtifactRef, ToolError> {
        match self.input(port)? {
            Value::Artifact { reference, .. } => Ok(reference),
            _ => Err(ToolError::BadInput {
                port: port.into(),
                reason: "expected an artifact".into(),
            }),
        }
    }

    pub fn dataset(&self, port: &str) -> Result<DatasetManifest, ToolError> {
        match self.input(port)? {
            Value::Dataset(d) => Ok(d.clone()),
            _ => Ok(self.store.get_dataset(self.artifact(port)?)?),
        }
    }

    pub fn image(&self, port: &str) -> Result<Image, ToolError> {
        Ok(self.store.get_image(self.artifact(port)?)?)
    }

    pub fn table(&self, port: &str) -> Result<Table, ToolError> {
        match self.input(port)? {
            Value::Table(t) => Ok(t.clone()),
            _ => Ok(self.store.get_table(self.artifact(port)?)?),
        }
    }

    pub fn model(&self, port: &str) -> Result<PixelClassifier, ToolError> {
        self.store
            .get_json(self.artifact(port)?)
            .map_err(|e| ToolError::Failed(format!("ModelCorrupt: {e}")))
    }

    pub fn check_cancelled(&self) -> Result<(), ToolError> {
        if self.cancel.load(Ordering::SeqCst) {
            Err(ToolError::Cancelled)
        } else {
            Ok(())
        }
    }

    /// Derived seed for the `i`-th random draw of this invocation.
    pub fn sub_seed(&self, i: u64) -> u64 {
        self.seed ^ (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Decodes an artifact as an image and reports the stored sample type.
pub fn load_role(store: &ArtifactStore, r: &ArtifactRef) -> Result<(Image, DType), ToolError> {
    match r.media {
        MediaType::PNG => Ok((store.get_image(r)?, DType::U8)),
        _ => {
            let t = store.get_tensor(r)?;
            Ok((Image::from_tensor(&t), t.dtype()))
        }
    }
}

/// Stores an image with the given sample type.
pub fn store_as(store: &ArtifactStore, img: &Image, dtype: DType) -> Result<ArtifactRef, ToolError> {
    let data = match dtype {
        DType::U8 => TensorData::U8(img.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()),
        DType::I64 => TensorData::I64(img.data.iter().map(|v| v.round() as i64).collect()),
        DType::F32 => TensorData::F32(img.data.iter().map(|&v| v as f32).collect()),
        DType::F64 => TensorData::F64(img.data.clone()),
    };
    Ok(store.put_tensor(&Tensor::new(img.shape.clone(), data)?)?)
}

/// Input plug: adapts an upstream value to the declared port type.
pub fn plug(store: &ArtifactStore, port: &PortSpec, value: &Value) -> Result<Value, ToolError> {
    let v = coerce(value, port.semantic)?;
    if let Value::Artifact { reference, .. } = &v {
        if !store.contains(&reference.hash) {
            return Err(StoreError::NotFound(reference.hash.clone()).into());
        }
    }
    Ok(v)
}

/// Output constructor: materializes a kernel result as a value of the
/// declared port type, writing artifacts to the store.
pub fn construct(store: &ArtifactStore, port: &PortSpec, out: Output) -> Result<Value, ToolError> {
    use SemanticType as S;
    let mismatch = || ToolError::ConstructorMismatch {
        port: port.name.clone(),
        semantic: port.semantic,
    };
    let artifact = |reference: ArtifactRef| Value::Artifact {
        reference,
        semantic: port.semantic,
    };
    let inline = port.constructor_policy == Some(MaterializePolicy::Inline);
    Ok(match (port.semantic, out) {
        (s, Output::Scalar(v)) if s.is_scalar() => coerce(&v, s)?,
        (S::Image | S::Tensor, Output::Image(img)) => artifact(store.put_tensor(&img.to_f32_tensor()?)?),
        (S::Mask | S::Image, Output::Mask(img)) => artifact(store.put_tensor(&img.to_mask_tensor()?)?),
        (S::LabelMap, Output::LabelMap(img)) => artifact(store.put_tensor(&img.to_label_tensor()?)?),
        (S::Image, Output::Png(img)) => {
            artifact(store.put(&pngio::encode(&img).map_err(ToolError::Failed)?, MediaType::PNG)?)
        }
        (S::Table, Output::Table(t)) if inline => Value::Table(t),
        (S::Table, Output::Table(t)) => artifact(store.put_table(&t)?),
        (S::Dataset, Output::Dataset(d)) if inline => Value::Dataset(d),
        (S::Dataset, Output::Dataset(d)) => artifact(store.put_dataset(&d)?),
        (S::ModelBlob, Output::Json(j)) => artifact(store.put_json(&j)?),
        (s, Output::Ref(r)) if !s.is_scalar() => artifact(r),
        _ => return Err(mismatch()),
    })
}

#[derive(Debug, Clone)]
pub enum Backend {
    Builtin(Kernel),
    External(ExternalCommand),
}

/// Tool contracts plus the code that runs them.
#[derive(Clone)]
pub struct Registry {
    catalog: ToolCatalog,
    backends: BTreeMap<String, Backend>,
}

impl Registry {
    pub fn empty() -> Registry {
        Registry {
            catalog: ToolCatalog::new(),
            backends: BTreeMap::new(),
        }
    }

    /// The built-in tool library.
    pub fn builtin() -> Registry {
        let mut r = Registry::empty();
        for (spec, kernel) in builtin_specs() {
            r.register(spec, Backend::Builtin(kernel)).expect("built-in specs are valid");
        }
        r
    }

    pub fn register(&mut self, spec: ToolSpec, backend: Backend) -> Result<(), ToolSpecError> {
        let id = spec.qualified_id();
        self.catalog.register(spec)?;
        self.backends.insert(id, backend);
        Ok(())
    }

    /// Registers a tool spec that declares an `executable`.
    pub fn register_external(&mut self, spec: ToolSpec) -> anyhow::Result<()> {
        let cmd = spec
            .executable
            .clone()
            .ok_or_else(|| anyhow::anyhow!("tool {} declares no executable", spec.qualified_id()))?;
        self.register(spec, Backend::External(cmd))?;
        Ok(())
    }

    /// Loads every `*.json` tool spec in a directory.
    pub fn load_dir(&mut self, dir: &Path) -> anyhow::Result<usize> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in &paths {
            let spec: ToolSpec = serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
            self.register_external(spec)?;
        }
        Ok(paths.len())
    }

    pub fn catalog(&self) -> &ToolCatalog {
        &self.catalog
    }

    pub fn resolve(&self, qualified: &str) -> Option<(&ToolSpec, &Backend)> {
        Some((self.catalog.resolve(qualified)?, self.backends.get(qualified)?))
    }

    /// Runs a tool's kernel or external executable.
    pub fn invoke(&self, spec: &ToolSpec, backend: &Backend, ctx: &ToolContext) -> Result<Outputs, ToolError> {
        match backend {
            Backend::Builtin(k) => k(ctx),
            Backend::External(cmd) => external::run_external_tool(spec, cmd, ctx),
        }
    }
}
