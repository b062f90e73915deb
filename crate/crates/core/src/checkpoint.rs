//! Named-tensor checkpoint container and model persistence.
//!
//! Layout (little-endian): magic `CDLNCKPT`, `u32` version, `u32` entry
//! count, then per entry a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank × u32` dims and `product(dims) × f32` values.
//!
//! Text (settings, vocabulary, TF-IDF terms) is stored as byte-valued
//! entries under `meta.*`; integers are stored exactly when below 2^24.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::baselines::{BinaryMachine, SvmModel};
use crate::error::{contract_err, Error, Result};
use crate::model::{Body, GradingModel, ModelKind, ModelSettings, SvmGrader};
use crate::text::Vocabulary;
use crate::tfidf::{SparseVector, TfidfModel};
use crate::Tensor;

pub const MAGIC: &[u8; 8] = b"CDLNCKPT";
pub const VERSION: u32 = 1;
const EXACT_INT_LIMIT: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl CheckpointEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != values.len() {
            return Err(contract_err!(
                "entry {name}: dims {dims:?} do not match {} values",
                values.len()
            ));
        }
        Ok(Self { name, dims, values })
    }

    fn from_f64(name: impl Into<String>, dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(name, dims, values.iter().map(|&v| v as f32).collect())
    }

    fn from_ints(name: &str, values: &[usize]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v >= EXACT_INT_LIMIT) {
            return Err(contract_err!(
                "entry {name}: integer {v} not representable exactly"
            ));
        }
        Self::new(
            name,
            vec![values.len()],
            values.iter().map(|&v| v as f32).collect(),
        )
    }

    fn from_text(name: &str, text: &str) -> Result<Self> {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        Self::new(name, vec![bytes.len()], bytes)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCheckpoint {
    pub entries: Vec<CheckpointEntry>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.pos, format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

impl ModelCheckpoint {
    pub fn push(&mut self, entry: CheckpointEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Result<&CheckpointEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| format_err(0, format!("missing entry '{name}'")))
    }

    fn text(&self, name: &str) -> Result<String> {
        let entry = self.get(name)?;
        let bytes: Vec<u8> = entry.values.iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes)
            .map_err(|_| format_err(0, format!("entry '{name}' is not UTF-8 text")))
    }

    fn ints(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.get(name)?.values.iter().map(|&v| v as usize).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.entries.len())
                .map_err(|_| contract_err!("too many entries"))?
                .to_le_bytes(),
        );
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(contract_err!("duplicate checkpoint entry '{}'", e.name));
            }
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| contract_err!("entry name too long: {}", e.name))?;
            let rank = u8::try_from(e.dims.len())
                .map_err(|_| contract_err!("entry {} has too many dims", e.name))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(rank);
            for &d in &e.dims {
                out.extend_from_slice(
                    &u32::try_from(d)
                        .map_err(|_| contract_err!("dimension {d} too large"))?
                        .to_le_bytes(),
                );
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(format_err(0, "bad magic; not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| format_err(at, "entry name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(format_err(at, format!("duplicate entry '{name}'")));
            }
            let rank = r.u8("rank")?;
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| format_err(at, format!("entry '{name}' dims overflow")))?;
            let raw = r.take(n, &format!("values of '{name}'"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(CheckpointEntry { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(format_err(
                r.pos,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn param_entries(store: &ParamStore, ckpt: &mut ModelCheckpoint) -> Result<()> {
    for (_, p) in store.iter() {
        ckpt.push(CheckpointEntry::from_f64(
            format!("param.{}", p.name()),
            p.value().shape().to_vec(),
            p.value().data(),
        )?);
    }
    Ok(())
}

fn svm_entries(g: &SvmGrader, ckpt: &mut ModelCheckpoint) -> Result<()> {
    let t = &g.tfidf;
    ckpt.push(CheckpointEntry::from_text(
        "tfidf.terms",
        &t.terms().join("\n"),
    )?);
    let df: Vec<usize> = t
        .document_frequencies()
        .iter()
        .map(|&d| d as usize)
        .collect();
    ckpt.push(CheckpointEntry::from_ints("tfidf.df", &df)?);
    ckpt.push(CheckpointEntry::from_ints(
        "tfidf.n_docs",
        &[t.n_docs() as usize],
    )?);

    let s = &g.svm;
    let labels: Vec<f64> = s.labels.iter().map(|&l| f64::from(l)).collect();
    ckpt.push(CheckpointEntry::from_f64(
        "svm.labels",
        vec![labels.len()],
        &labels,
    )?);
    ckpt.push(CheckpointEntry::from_f64("svm.gamma", vec![1], &[s.gamma])?);
    ckpt.push(CheckpointEntry::from_f64("svm.c", vec![1], &[s.c])?);
    ckpt.push(CheckpointEntry::from_ints(
        "svm.feature_count",
        &[s.feature_count],
    )?);
    let rho: Vec<f64> = s.machines.iter().map(|m| m.rho).collect();
    ckpt.push(CheckpointEntry::from_f64("svm.rho", vec![rho.len()], &rho)?);
    let coef: Vec<f64> = s
        .machines
        .iter()
        .flat_map(|m| m.coef.iter().copied())
        .collect();
    ckpt.push(CheckpointEntry::from_f64(
        "svm.coef",
        vec![s.machines.len(), s.support.len()],
        &coef,
    )?);
    let mut indptr = vec![0usize];
    let (mut indices, mut values) = (Vec::new(), Vec::new());
    for v in &s.support {
        for &(i, x) in &v.entries {
            indices.push(i);
            values.push(x);
        }
        indptr.push(indices.len());
    }
    ckpt.push(CheckpointEntry::from_ints("svm.sv.indptr", &indptr)?);
    ckpt.push(CheckpointEntry::from_ints("svm.sv.indices", &indices)?);
    ckpt.push(CheckpointEntry::from_f64(
        "svm.sv.values",
        vec![values.len()],
        &values,
    )?);
    Ok(())
}

/// Serializes a model with its settings and vocabulary.
pub fn checkpoint_save(model: &GradingModel, path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = ModelCheckpoint::default();
    ckpt.push(CheckpointEntry::from_text("meta.kind", model.kind.name())?);
    ckpt.push(CheckpointEntry::from_text(
        "meta.settings",
        &model.settings.to_text(),
    )?);
    ckpt.push(CheckpointEntry::from_text(
        "meta.vocab",
        &model.vocab.tokens().join("\n"),
    )?);
    match &model.body {
        Body::Neural { params, .. } => param_entries(params, &mut ckpt)?,
        Body::Svm(Some(g)) => svm_entries(g, &mut ckpt)?,
        Body::Svm(None) => return Err(contract_err!("cannot save an untrained svm")),
    }
    ckpt.write(path)
}

fn load_svm(ckpt: &ModelCheckpoint) -> Result<SvmGrader> {
    let terms_text = ckpt.text("tfidf.terms")?;
    let terms: Vec<String> = if terms_text.is_empty() {
        Vec::new()
    } else {
        terms_text.split('\n').map(str::to_string).collect()
    };
    let df: Vec<u32> = ckpt
        .ints("tfidf.df")?
        .into_iter()
        .map(|d| d as u32)
        .collect();
    let n_docs = *ckpt
        .ints("tfidf.n_docs")?
        .first()
        .ok_or_else(|| format_err(0, "empty tfidf.n_docs"))? as u32;
    let tfidf = TfidfModel::from_parts(terms, df, n_docs)?;

    let labels: Vec<i32> = ckpt
        .get("svm.labels")?
        .values
        .iter()
        .map(|&v| v as i32)
        .collect();
    let scalar = |name: &str| -> Result<f64> {
        ckpt.get(name)?
            .to_f64()
            .first()
            .copied()
            .ok_or_else(|| format_err(0, format!("empty entry '{name}'")))
    };
    let rho = ckpt.get("svm.rho")?.to_f64();
    let coef_entry = ckpt.get("svm.coef")?;
    let indptr = ckpt.ints("svm.sv.indptr")?;
    let indices = ckpt.ints("svm.sv.indices")?;
    let values = ckpt.get("svm.sv.values")?.to_f64();
    let n_sv = indptr.len().saturating_sub(1);
    if coef_entry.dims != [rho.len(), n_sv]
        || indices.len() != values.len()
        || indptr.last() != Some(&indices.len())
        || indptr.windows(2).any(|w| w[0] > w[1])
    {
        return Err(format_err(0, "inconsistent svm tensors"));
    }
    let support = indptr
        .windows(2)
        .map(|w| SparseVector {
            entries: (w[0]..w[1]).map(|k| (indices[k], values[k])).collect(),
            oov: Vec::new(),
        })
        .collect();
    let coef = coef_entry.to_f64();
    let machines = if rho.is_empty() {
        Vec::new()
    } else {
        if rho.len() != labels.len() {
            return Err(format_err(0, "svm labels and machines disagree"));
        }
        labels
            .iter()
            .zip(&rho)
            .enumerate()
            .map(|(m, (&label, &rho))| BinaryMachine {
                label,
                coef: coef[m * n_sv..(m + 1) * n_sv].to_vec(),
                rho,
            })
            .collect()
    };
    Ok(SvmGrader {
        tfidf,
        svm: SvmModel {
            labels,
            gamma: scalar("svm.gamma")?,
            c: scalar("svm.c")?,
            feature_count: *ckpt
                .ints("svm.feature_count")?
                .first()
                .ok_or_else(|| format_err(0, "empty svm.feature_count"))?,
            support,
            machines,
        },
    })
}

/// Restores a model saved by [`checkpoint_save`].
pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<GradingModel> {
    let ckpt = ModelCheckpoint::read(path)?;
    let kind: ModelKind = ckpt.text("meta.kind")?.parse()?;
    let settings = ModelSettings::from_text(&ckpt.text("meta.settings")?)?;
    let vocab = Vocabulary::from_tokens(
        ckpt.text("meta.vocab")?
            .split('\n')
            .map(str::to_string)
            .collect(),
    )?;
    let mut model = GradingModel::build(kind, settings, vocab, 0)?;
    match &mut model.body {
        Body::Neural { params, .. } => {
            let ids: Vec<_> = params.ids().collect();
            for id in ids {
                let name = format!("param.{}", params.get(id).name());
                let entry = ckpt.get(&name)?;
                if entry.dims != params.value(id).shape() {
                    return Err(format_err(
                        0,
                        format!(
                            "entry '{name}' has dims {:?}, model expects {:?}",
                            entry.dims,
                            params.value(id).shape()
                        ),
                    ));
                }
                params.set_value(id, Tensor::new(entry.dims.clone(), entry.to_f64())?)?;
            }
        }
        Body::Svm(slot) => *slot = Some(load_svm(&ckpt)?),
    }
    Ok(model)
}
