//! Translator checkpoints.
//!
//! Layout: the 21-byte container header (tag 254, count 1), a little-endian `u32`
//! length and that many bytes of JSON echoing the [`TranslatorSpec`], a `u64` value
//! count, then every parameter as `f32` in declaration order.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::mixer::{Mixer, MixerCache, MixerConfig};
use super::pilot::{PilotCache, PilotConfig, PilotModel};
use super::Translate;
use crate::error::{ensure, KtError, Result};
use crate::nn::{Param, Parameterized, Scalar};
use crate::pairs::format::{write_f32s, Header, HEADER_LEN, TRANSLATOR_TAG};

/// Architecture of a translator, enough to rebuild it with fresh weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranslatorSpec {
    Mixer(MixerConfig),
    Pilot(PilotConfig),
}

impl TranslatorSpec {
    pub fn channels(&self) -> usize {
        match self {
            TranslatorSpec::Mixer(c) => c.channels(),
            TranslatorSpec::Pilot(c) => c.channels,
        }
    }
}

#[derive(Clone, Debug)]
pub enum AnyTranslator<T = f32> {
    Mixer(Mixer<T>),
    Pilot(PilotModel<T>),
}

pub enum AnyCache<T> {
    Mixer(MixerCache<T>),
    Pilot(PilotCache<T>),
}

impl<T: Scalar> AnyTranslator<T> {
    pub fn build<R: Rng + ?Sized>(spec: &TranslatorSpec, rng: &mut R) -> Result<Self> {
        Ok(match spec {
            TranslatorSpec::Mixer(c) => AnyTranslator::Mixer(Mixer::new(c.clone(), rng)?),
            TranslatorSpec::Pilot(c) => AnyTranslator::Pilot(PilotModel::new(c.clone(), rng)?),
        })
    }

    pub fn spec(&self) -> TranslatorSpec {
        match self {
            AnyTranslator::Mixer(m) => TranslatorSpec::Mixer(m.config().clone()),
            AnyTranslator::Pilot(m) => TranslatorSpec::Pilot(m.config().clone()),
        }
    }
}

impl<T: Scalar> Parameterized<T> for AnyTranslator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            AnyTranslator::Mixer(m) => m.params(),
            AnyTranslator::Pilot(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            AnyTranslator::Mixer(m) => m.params_mut(),
            AnyTranslator::Pilot(m) => m.params_mut(),
        }
    }
}

impl<T: Scalar> Translate<T> for AnyTranslator<T> {
    type Cache = AnyCache<T>;

    fn in_len(&self) -> usize {
        match self {
            AnyTranslator::Mixer(m) => m.in_len(),
            AnyTranslator::Pilot(m) => m.in_len(),
        }
    }

    fn out_len(&self) -> usize {
        match self {
            AnyTranslator::Mixer(m) => m.out_len(),
            AnyTranslator::Pilot(m) => m.out_len(),
        }
    }

    fn forward(&self, x: &[T], batch: usize, rng: Option<&mut dyn RngCore>) -> (Vec<T>, AnyCache<T>) {
        match self {
            AnyTranslator::Mixer(m) => {
                let (y, c) = m.forward(x, batch, rng);
                (y, AnyCache::Mixer(c))
            }
            AnyTranslator::Pilot(m) => {
                let (y, c) = m.forward(x, batch, rng);
                (y, AnyCache::Pilot(c))
            }
        }
    }

    fn backward(&mut self, cache: &AnyCache<T>, dy: &[T]) {
        match (self, cache) {
            (AnyTranslator::Mixer(m), AnyCache::Mixer(c)) => m.backward(c, dy),
            (AnyTranslator::Pilot(m), AnyCache::Pilot(c)) => m.backward(c, dy),
            _ => panic!("translator cache does not match the model"),
        }
    }

    fn flops(&self) -> u64 {
        match self {
            AnyTranslator::Mixer(m) => m.flops(),
            AnyTranslator::Pilot(m) => m.flops(),
        }
    }
}

/// Writes `model` atomically to `path`.
pub fn save_translator(path: &Path, model: &AnyTranslator) -> Result<()> {
    let spec = serde_json::to_vec(&model.spec())?;
    let values = model.flat_values();
    let mut buf = Vec::with_capacity(HEADER_LEN + 12 + spec.len() + 4 * values.len());
    let header = Header {
        channels: model.spec().channels() as u32,
        tag: TRANSLATOR_TAG,
        count: 1,
    };
    buf.extend_from_slice(&header.encode());
    buf.write_u32::<LittleEndian>(spec.len() as u32).expect("vec write");
    buf.extend_from_slice(&spec);
    buf.write_u64::<LittleEndian>(values.len() as u64).expect("vec write");
    write_f32s(&mut buf, &values);

    let tmp = path.with_extension("part");
    let io = |e| KtError::io(&tmp, e);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| KtError::io(path, e))
}

pub fn load_translator(path: &Path) -> Result<AnyTranslator> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            KtError::Missing(path.to_path_buf())
        } else {
            KtError::io(path, e)
        }
    })?;
    let corrupt = |reason: String| KtError::Corrupt { path: path.to_path_buf(), reason };
    let header = Header::decode(&bytes, path)?;
    ensure!(
        header.tag == TRANSLATOR_TAG,
        corrupt(format!("variant tag {} is not a translator checkpoint", header.tag))
    );
    let mut r = &bytes[HEADER_LEN..];
    let n = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated config length".into()))? as usize;
    ensure!(r.len() >= n, corrupt("truncated config".into()));
    let spec: TranslatorSpec =
        serde_json::from_slice(&r[..n]).map_err(|e| corrupt(format!("config echo: {e}")))?;
    r = &r[n..];
    ensure!(
        spec.channels() == header.channels as usize,
        corrupt(format!("header C={} but config C={}", header.channels, spec.channels()))
    );
    let count = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated value count".into()))? as usize;
    // weights are overwritten below, so any generator will do for construction
    let mut model = AnyTranslator::build(&spec, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    ensure!(
        count == model.param_count() && r.len() == 4 * count,
        corrupt(format!(
            "{count} values and {} bytes for a model of {} parameters",
            r.len(),
            model.param_count()
        ))
    );
    let values: Vec<f32> = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    model.set_flat_values(&values)?;
    Ok(model)
}
