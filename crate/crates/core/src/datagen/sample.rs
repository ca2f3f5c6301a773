use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::world::GenerativeWorld;
use crate::error::{Error, Result};
use crate::ndcompute::{mix_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub x: Vec<f64>,
    /// Binary ground-truth concepts stored as 0.0 / 1.0.
    pub c: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.records.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }

    /// Writes columns `x0..x{d-1}, c0..c{k-1}, y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|i| format!("x{i}")).collect();
        header.extend((0..self.num_concepts).map(|i| format!("c{i}")));
        header.push("y".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
            row.extend(r.c.iter().map(|v| format!("{}", *v as u8)));
            row.push(r.y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        let d = header.iter().filter(|h| h.starts_with('x')).count();
        let k = header.iter().filter(|h| h.starts_with('c')).count();
        if header.len() != d + k + 1 || header.get(d + k) != Some("y") {
            return Err(Error::field("csv header", "expected x*, c*, y columns"));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::field("csv value", format!("{s}: {e}")))
            };
            let x = (0..d).map(|i| parse(&row[i])).collect::<Result<Vec<_>>>()?;
            let c = (d..d + k).map(|i| parse(&row[i])).collect::<Result<Vec<_>>>()?;
            if c.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::field("csv concepts", "concept columns must be 0 or 1"));
            }
            let y: usize = row[d + k]
                .parse()
                .map_err(|e| Error::field("csv label", format!("{e}")))?;
            if y >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: num_classes,
                });
            }
            records.push(SampleRecord { x, c, y });
        }
        Ok(Self {
            input_dim: d,
            num_concepts: k,
            num_classes,
            records,
        })
    }
}

/// Draws `n` records; reproducible for a given `(world, seed)`.
pub fn sample(world: &GenerativeWorld, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::field("n", "must be >= 1"));
    }
    let mut rng = rng_for(mix_seed(world.seed(), seed), 0xDA7A);
    let prior = world.class_prior();
    let k = world.num_concepts();
    let sigma = world.noise_sigma();
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut y = prior.len() - 1;
        for (i, p) in prior.iter().enumerate() {
            acc += p;
            if u < acc {
                y = i;
                break;
            }
        }
        let template = world.template(y);
        let c: Vec<f64> = (0..k)
            .map(|i| {
                let flip = rng.random::<f64>() < world.flip_rate()[i];
                let bit = (template[i] == 1) != flip;
                if bit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut x = world.emit_mean(&c);
        if sigma > 0.0 {
            for v in &mut x {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        records.push(SampleRecord { x, c, y });
    }
    Ok(Dataset {
        input_dim: world.input_dim(),
        num_concepts: k,
        num_classes: world.num_classes(),
        records,
    })
}

/// Train / validation / test splits drawn with independent seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn sample_splits(world: &GenerativeWorld, sizes: (usize, usize, usize), seed: u64) -> Result<Splits> {
    Ok(Splits {
        train: sample(world, sizes.0, mix_seed(seed, 1))?,
        val: sample(world, sizes.1, mix_seed(seed, 2))?,
        test: sample(world, sizes.2, mix_seed(seed, 3))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_world, Preset, WorldSpec};

    #[test]
    fn noiseless_records_match_template() {
        let w = GenerativeWorld::preset(Preset::SmallNoiseless, 3);
        let ds = sample(&w, 200, 1).unwrap();
        for r in &ds.records {
            let t: Vec<f64> = w.template(r.y).iter().map(|b| *b as f64).collect();
            assert_eq!(r.c, t);
            assert_eq!(r.x, w.emit_mean(&r.c));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let w = GenerativeWorld::preset(Preset::Small, 3);
        assert_eq!(sample(&w, 50, 9).unwrap(), sample(&w, 50, 9).unwrap());
        assert_ne!(sample(&w, 50, 9).unwrap(), sample(&w, 50, 10).unwrap());
    }

    #[test]
    fn empirical_flip_frequency_tracks_rate() {
        let mut spec = WorldSpec::preset(Preset::Small, 5);
        spec.flip_rate = vec![0.1; 6];
        let w = build_world(spec).unwrap();
        let ds = sample(&w, 10_000, 2).unwrap();
        for i in 0..6 {
            let flips = ds
                .records
                .iter()
                .filter(|r| (r.c[i] == 1.0) != (w.template(r.y)[i] == 1))
                .count();
            let f = flips as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&f), "concept {i}: {f}");
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let w = GenerativeWorld::preset(Preset::Small, 3);
        assert!(sample(&w, 0, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let w = GenerativeWorld::preset(Preset::Small, 3);
        let ds = sample(&w, 20, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        ds.write_csv(&p).unwrap();
        let back = Dataset::read_csv(&p, w.num_classes()).unwrap();
        assert_eq!(ds, back);
    }
}
