//! Synthetic measurement-pair datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.toml` plus one subdirectory per split
//! with stacked DCLT tensors: `y_r`, `y_m` (complex k-space), `mask_r`,
//! `mask_m` (0/1 rows), and, for synthesized pairs, `x_r`, `x_m` and `field`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{self, synthesize_field, DisplacementField, SyntheticFieldConfig};
use crate::error::{Error, Result};
use crate::mri::{add_noise, make_cartesian_mask, MeasurementModel, MeasurementPair, SamplingMask};
use crate::phantom::make_phantom;
use crate::tensor::Tensor;
use crate::tensor::{read_dclt, write_dclt};

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// `x_m = warp(x_r, φ)` with a stored oracle field.
    Synthetic,
    /// Two related phantoms; no oracle images or field are kept.
    RealPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub acceleration: f64,
    pub center_lines: usize,
    pub pair_mode: PairMode,
    pub field: SyntheticFieldConfig,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 200,
            n_val: 20,
            n_test: 20,
            size: 64,
            acceleration: 3.0,
            center_lines: 4,
            pair_mode: PairMode::Synthetic,
            field: SyntheticFieldConfig::new(2000, (-10.0, 10.0), 10.0),
            snr_db: 40.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl DatasetSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!(
                "dataset size must be >= 32, got {}",
                self.size
            )));
        }
        if !(self.acceleration >= 1.0) {
            return Err(Error::Config(format!(
                "acceleration must be >= 1, got {}",
                self.acceleration
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        if self.n_train.max(self.n_val).max(self.n_test) >= 1 << 24 {
            return Err(Error::Config("split sizes must be below 2^24".into()));
        }
        if self.seed >= 1 << 37 {
            return Err(Error::Config("dataset seed must be below 2^37".into()));
        }
        self.field.validate()
    }

    /// Seed of sample `i` of `split`. Splits occupy disjoint ranges, and the
    /// result fits in 63 bits so manifests can store it as a TOML integer.
    pub fn sample_seed(&self, split: Split, i: usize) -> u64 {
        (self.seed << 26) ^ (split.index() << 24) ^ i as u64
    }
}

/// Seeds drawn for one pair, each 63-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSeeds {
    pub sample: u64,
    pub phantom: u64,
    pub field: u64,
    pub mask_r: u64,
    pub mask_m: u64,
    pub noise_r: u64,
    pub noise_m: u64,
}

impl PairSeeds {
    pub fn derive(sample: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sample);
        PairSeeds {
            sample,
            phantom: rng.gen::<u64>() >> 1,
            field: rng.gen::<u64>() >> 1,
            mask_r: rng.gen::<u64>() >> 1,
            mask_m: rng.gen::<u64>() >> 1,
            noise_r: rng.gen::<u64>() >> 1,
            noise_m: rng.gen::<u64>() >> 1,
        }
    }
}

fn to_complex(real: &Tensor) -> Result<Tensor> {
    let im = vec![0.0; real.numel()];
    Tensor::complex_from_planes(real.shape(), real.data(), &im)
}

/// One unregistered pair: phantom, deformation, independent masks and noise.
pub fn synthesize_pair(spec: &DatasetSpec, sample_seed: u64) -> Result<MeasurementPair> {
    let s = PairSeeds::derive(sample_seed);
    let n = spec.size;
    let x_r = to_complex(&make_phantom(s.phantom, n)?)?;
    let field = synthesize_field(&spec.field, n, n, s.field)?;
    let x_m = match spec.pair_mode {
        PairMode::Synthetic => deformation::warp(&x_r, &field)?,
        PairMode::RealPair => {
            // A second, related acquisition: deformed and mildly rescaled.
            let gain = ChaCha8Rng::seed_from_u64(s.field ^ 0x5eed).gen_range(0.95..1.05);
            deformation::warp(&x_r, &field)?.scale(gain)
        }
    };
    let mask_r = make_cartesian_mask(n, n, spec.acceleration, spec.center_lines, s.mask_r)?;
    let mask_m = make_cartesian_mask(n, n, spec.acceleration, spec.center_lines, s.mask_m)?;
    let model_r = MeasurementModel::new(mask_r);
    let model_m = MeasurementModel::new(mask_m);
    let y_r = add_noise(
        &model_r.forward(&x_r)?,
        &model_r.mask,
        spec.snr_db,
        s.noise_r,
    )?;
    let y_m = add_noise(
        &model_m.forward(&x_m)?,
        &model_m.mask,
        spec.snr_db,
        s.noise_m,
    )?;
    let synthetic = spec.pair_mode == PairMode::Synthetic;
    Ok(MeasurementPair {
        y_r,
        y_m,
        model_r,
        model_m,
        oracle_x_r: synthetic.then_some(x_r),
        oracle_x_m: synthetic.then_some(x_m),
        oracle_field: synthetic.then_some(field),
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<MeasurementPair>,
    pub val: Vec<MeasurementPair>,
    pub test: Vec<MeasurementPair>,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    seed: u64,
    mask_r_seed: u64,
    mask_m_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    count: usize,
    samples: Vec<MaskRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    tool_version: String,
    spec: DatasetSpec,
    train: SplitRecord,
    val: SplitRecord,
    test: SplitRecord,
}

impl Dataset {
    pub fn synthesize(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let make = |split: Split| -> Result<Vec<MeasurementPair>> {
            (0..spec.count(split))
                .map(|i| synthesize_pair(spec, spec.sample_seed(split, i)))
                .collect()
        };
        Ok(Dataset {
            spec: spec.clone(),
            train: make(Split::Train)?,
            val: make(Split::Val)?,
            test: make(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[MeasurementPair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let record = |split: Split| SplitRecord {
            count: self.split(split).len(),
            samples: self
                .split(split)
                .iter()
                .enumerate()
                .map(|(i, p)| MaskRecord {
                    seed: self.spec.sample_seed(split, i),
                    mask_r_seed: p.model_r.mask.seed,
                    mask_m_seed: p.model_m.mask.seed,
                })
                .collect(),
        };
        let manifest = Manifest {
            format: DATASET_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            spec: self.spec.clone(),
            train: record(Split::Train),
            val: record(Split::Val),
            test: record(Split::Test),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("manifest.toml"), text)?;
        for split in Split::ALL {
            let pairs = self.split(split);
            let sub = dir.join(split.name());
            fs::create_dir_all(&sub)?;
            if pairs.is_empty() {
                continue;
            }
            let stack = |f: &dyn Fn(&MeasurementPair) -> Tensor| -> Result<Tensor> {
                Tensor::stack(&pairs.iter().map(f).collect::<Vec<_>>())
            };
            write_dclt(&sub.join("y_r.dclt"), &stack(&|p| p.y_r.clone())?)?;
            write_dclt(&sub.join("y_m.dclt"), &stack(&|p| p.y_m.clone())?)?;
            write_dclt(
                &sub.join("mask_r.dclt"),
                &stack(&|p| p.model_r.mask_tensor().clone())?,
            )?;
            write_dclt(
                &sub.join("mask_m.dclt"),
                &stack(&|p| p.model_m.mask_tensor().clone())?,
            )?;
            if pairs
                .iter()
                .all(|p| p.oracle_x_r.is_some() && p.oracle_x_m.is_some())
            {
                write_dclt(
                    &sub.join("x_r.dclt"),
                    &stack(&|p| p.oracle_x_r.clone().unwrap())?,
                )?;
                write_dclt(
                    &sub.join("x_m.dclt"),
                    &stack(&|p| p.oracle_x_m.clone().unwrap())?,
                )?;
            }
            if pairs.iter().all(|p| p.oracle_field.is_some()) {
                let f = stack(&|p| p.oracle_field.as_ref().unwrap().tensor().clone())?;
                write_dclt(&sub.join("field.dclt"), &f)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.toml"))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "unsupported dataset format {}",
                m.format
            )));
        }
        let load_split = |split: Split, rec: &SplitRecord| -> Result<Vec<MeasurementPair>> {
            if rec.count == 0 {
                return Ok(Vec::new());
            }
            let sub = dir.join(split.name());
            let y_r = read_dclt(&sub.join("y_r.dclt"))?;
            let y_m = read_dclt(&sub.join("y_m.dclt"))?;
            let mask_r = read_dclt(&sub.join("mask_r.dclt"))?;
            let mask_m = read_dclt(&sub.join("mask_m.dclt"))?;
            let opt = |name: &str| -> Result<Option<Tensor>> {
                let p = sub.join(name);
                if p.exists() {
                    Ok(Some(read_dclt(&p)?))
                } else {
                    Ok(None)
                }
            };
            let (x_r, x_m, field) = (opt("x_r.dclt")?, opt("x_m.dclt")?, opt("field.dclt")?);
            if y_r.shape()[0] != rec.count || rec.samples.len() != rec.count {
                return Err(Error::Format(format!(
                    "{} split count mismatch",
                    split.name()
                )));
            }
            let mut out = Vec::with_capacity(rec.count);
            for (i, s) in rec.samples.iter().enumerate() {
                let mr = SamplingMask::from_tensor(
                    &mask_r.index0(i)?,
                    m.spec.acceleration,
                    m.spec.center_lines,
                    s.mask_r_seed,
                )?;
                let mm = SamplingMask::from_tensor(
                    &mask_m.index0(i)?,
                    m.spec.acceleration,
                    m.spec.center_lines,
                    s.mask_m_seed,
                )?;
                let pair = MeasurementPair {
                    y_r: y_r.index0(i)?,
                    y_m: y_m.index0(i)?,
                    model_r: MeasurementModel::new(mr),
                    model_m: MeasurementModel::new(mm),
                    oracle_x_r: x_r.as_ref().map(|t| t.index0(i)).transpose()?,
                    oracle_x_m: x_m.as_ref().map(|t| t.index0(i)).transpose()?,
                    oracle_field: field
                        .as_ref()
                        .map(|t| t.index0(i).and_then(DisplacementField::from_tensor))
                        .transpose()?,
                };
                pair.validate()?;
                out.push(pair);
            }
            Ok(out)
        };
        Ok(Dataset {
            train: load_split(Split::Train, &m.train)?,
            val: load_split(Split::Val, &m.val)?,
            test: load_split(Split::Test, &m.test)?,
            spec: m.spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 3,
            n_val: 2,
            n_test: 2,
            size: 32,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn zero_range_gives_identical_images() {
        let mut spec = small_spec();
        spec.field = SyntheticFieldConfig::new(2000, (0.0, 0.0), 10.0);
        let p = synthesize_pair(&spec, 5).unwrap();
        assert_eq!(p.oracle_x_r, p.oracle_x_m);
        assert_ne!(p.model_r.mask.kept_lines, p.model_m.mask.kept_lines);
    }

    #[test]
    fn oracle_field_reproduces_moving_image() {
        let spec = small_spec();
        let p = synthesize_pair(&spec, 9).unwrap();
        let w = deformation::warp(
            p.oracle_x_r.as_ref().unwrap(),
            p.oracle_field.as_ref().unwrap(),
        )
        .unwrap();
        assert_eq!(&w, p.oracle_x_m.as_ref().unwrap());
        p.validate().unwrap();
    }

    #[test]
    fn real_pair_mode_has_no_oracles() {
        let spec = DatasetSpec {
            pair_mode: PairMode::RealPair,
            ..small_spec()
        };
        let p = synthesize_pair(&spec, 1).unwrap();
        assert!(p.oracle_x_r.is_none() && p.oracle_x_m.is_none() && p.oracle_field.is_none());
    }

    #[test]
    fn split_seeds_disjoint() {
        let spec = DatasetSpec::default();
        let mut seen = std::collections::HashSet::new();
        for split in Split::ALL {
            for i in 0..spec.count(split) {
                assert!(seen.insert(spec.sample_seed(split, i)));
            }
        }
    }

    #[test]
    fn save_load_roundtrip_is_byte_identical() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = Dataset::synthesize(&spec).unwrap();
        ds.save(a.path()).unwrap();
        Dataset::synthesize(&spec).unwrap().save(b.path()).unwrap();
        for f in [
            "manifest.toml",
            "train/y_r.dclt",
            "test/field.dclt",
            "val/mask_m.dclt",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let back = Dataset::load(a.path()).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.train.len(), 3);
        assert_eq!(back.test[1].y_m, ds.test[1].y_m);
        assert_eq!(back.test[1].model_m.mask, ds.test[1].model_m.mask);
        assert_eq!(back.val[0].oracle_field, ds.val[0].oracle_field);
    }
}
