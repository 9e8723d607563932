use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{synthesize_snapshot, ArmConfig, JointState, OtherObject, Pixel, SensorSnapshot};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub theta: JointState,
    pub snapshot: SensorSnapshot,
}

/// Aligned joint states and readings from one acquisition run.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub other: Option<OtherObject>,
    pub taxels: usize,
    pub samples: Vec<Sample>,
}

/// JSON sidecar written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub arm: ArmConfig,
    pub seed: u64,
    pub n: usize,
    pub other: Option<OtherObject>,
}

/// Samples `n` joint states uniformly inside the limits and reads the sensors
/// once at each.
pub fn acquire_dataset(
    config: &ArmConfig,
    other: Option<&OtherObject>,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    acquire_with_rng(config, other, n, seed, &mut stage_rng(seed, Stage::Acquire))
}

/// Like [`acquire_dataset`] but draws from a caller-supplied generator.
pub fn acquire_with_rng<R: Rng>(
    config: &ArmConfig,
    other: Option<&OtherObject>,
    n: usize,
    seed: u64,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::domain("dataset size must be at least 1"));
    }
    config.validate()?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let theta = JointState(Vector3::from_fn(|j, _| {
            let [lo, hi] = config.joint_limits[j];
            lo + (hi - lo) * rng.gen::<f64>()
        }));
        let snapshot = synthesize_snapshot(&theta, other, config, i as u64, rng)?;
        samples.push(Sample { theta, snapshot });
    }
    Ok(Dataset {
        seed,
        other: other.copied(),
        taxels: config.taxel_count(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sensed joint angles, one row per sample.
    pub fn proprio_inputs(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 3, |i, j| self.samples[i].snapshot.proprio[j])
    }

    /// Rows with an in-frame visual reading: (proprio inputs, pixel outputs).
    pub fn visual_pairs(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let rows: Vec<(&Vector3<f64>, &Pixel)> = self
            .samples
            .iter()
            .filter_map(|s| {
                s.snapshot
                    .visual_self
                    .as_ref()
                    .map(|v| (&s.snapshot.proprio, v))
            })
            .collect();
        let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i].0[j]);
        let y = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i].1[j]);
        (x, y)
    }

    pub fn tactile_pairs(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let y = DMatrix::from_fn(self.len(), self.taxels, |i, j| {
            self.samples[i].snapshot.tactile[j]
        });
        (self.proprio_inputs(), y)
    }

    pub fn header(taxels: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "theta0", "theta1", "theta2", "proprio0", "proprio1", "proprio2", "u_self", "v_self",
            "u_other", "v_other",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..taxels).map(|t| format!("taxel{t}")));
        h
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(Self::header(self.taxels))
            .expect("in-memory write");
        let opt = |p: Option<f64>| p.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.samples {
            let snap = &s.snapshot;
            let mut rec: Vec<String> = s
                .theta
                .0
                .iter()
                .chain(snap.proprio.iter())
                .map(|v| v.to_string())
                .collect();
            rec.push(opt(snap.visual_self.map(|p| p.x)));
            rec.push(opt(snap.visual_self.map(|p| p.y)));
            rec.push(opt(snap.visual_other.map(|p| p.x)));
            rec.push(opt(snap.visual_other.map(|p| p.y)));
            rec.extend(snap.tactile.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Parses a dataset CSV. `seed` and `other` are not stored in the CSV and
    /// come back as 0 / `None` unless taken from the sidecar.
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Dataset, String> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| format!("unreadable header: {e}"))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| format!("missing column `{name}`"))
        };
        let fixed = Self::header(0);
        let idx: Vec<usize> = fixed
            .iter()
            .map(|n| col(n))
            .collect::<std::result::Result<_, _>>()?;
        let taxels = headers.iter().filter(|h| h.starts_with("taxel")).count();
        if taxels == 0 {
            return Err("missing tactile columns `taxel0..`".into());
        }
        let tax_idx: Vec<usize> = (0..taxels)
            .map(|t| col(&format!("taxel{t}")))
            .collect::<std::result::Result<_, _>>()?;

        let mut samples = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let row = row + 1;
            let rec = rec.map_err(|e| format!("row {row}: {e}"))?;
            let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
                let cell = rec.get(i).unwrap_or("");
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("row {row}: column `{name}` has invalid value `{cell}`"))
            };
            let opt = |i: usize, name: &str| -> std::result::Result<Option<f64>, String> {
                match rec.get(i).unwrap_or("") {
                    "" => Ok(None),
                    _ => num(i, name).map(Some),
                }
            };
            let pair = |a: usize, b: usize| -> std::result::Result<Option<Pixel>, String> {
                match (opt(idx[a], &fixed[a])?, opt(idx[b], &fixed[b])?) {
                    (Some(u), Some(v)) => Ok(Some(Pixel::new(u, v))),
                    (None, None) => Ok(None),
                    _ => Err(format!(
                        "row {row}: half-empty pixel pair `{}`/`{}`",
                        fixed[a], fixed[b]
                    )),
                }
            };
            let theta = Vector3::new(
                num(idx[0], "theta0")?,
                num(idx[1], "theta1")?,
                num(idx[2], "theta2")?,
            );
            let proprio = Vector3::new(
                num(idx[3], "proprio0")?,
                num(idx[4], "proprio1")?,
                num(idx[5], "proprio2")?,
            );
            let tactile = tax_idx
                .iter()
                .enumerate()
                .map(|(t, &i)| {
                    let v = num(i, &format!("taxel{t}"))?;
                    if v == 0.0 || v == 1.0 {
                        Ok(v)
                    } else {
                        Err(format!("row {row}: taxel{t} must be 0 or 1, got {v}"))
                    }
                })
                .collect::<std::result::Result<Vec<f64>, String>>()?;
            samples.push(Sample {
                theta: JointState(theta),
                snapshot: SensorSnapshot {
                    proprio,
                    visual_self: pair(6, 7)?,
                    visual_other: pair(8, 9)?,
                    tactile,
                    timestamp: (row - 1) as u64,
                },
            });
        }
        if samples.is_empty() {
            return Err("dataset has no rows".into());
        }
        Ok(Dataset {
            seed: 0,
            other: None,
            taxels,
            samples,
        })
    }
}

impl DatasetMeta {
    pub fn read(path: &Path) -> Result<DatasetMeta> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_is_aligned() {
        let d = acquire_dataset(&ArmConfig::default(), None, 1, 1).unwrap();
        assert_eq!(d.len(), 1);
        let (x, y) = d.tactile_pairs();
        assert_eq!((x.nrows(), y.nrows(), y.ncols()), (1, 1, 8));
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(matches!(
            acquire_dataset(&ArmConfig::default(), None, 0, 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = ArmConfig::default();
        let o = OtherObject::new(0.2, 0.3);
        let a = acquire_dataset(&cfg, Some(&o), 500, 42).unwrap();
        let b = acquire_dataset(&cfg, Some(&o), 500, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv_string(), b.to_csv_string());
    }

    #[test]
    fn marginals_are_uniform() {
        // Kolmogorov-Smirnov statistic against U(lo, hi) per joint.
        let cfg = ArmConfig::default();
        let d = acquire_dataset(&cfg, None, 10_000, 9).unwrap();
        for j in 0..3 {
            let [lo, hi] = cfg.joint_limits[j];
            let mut v: Vec<f64> = d
                .samples
                .iter()
                .map(|s| (s.theta.0[j] - lo) / (hi - lo))
                .collect();
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            let ks = v
                .iter()
                .enumerate()
                .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
                .fold(0.0, f64::max);
            assert!(ks < 0.02, "joint {j} KS {ks}");
        }
    }

    #[test]
    fn csv_round_trip_and_absent_cells() {
        let cfg = ArmConfig::default();
        let d = acquire_dataset(&cfg, Some(&OtherObject::new(5.0, 5.0)), 20, 3).unwrap();
        let text = d.to_csv_string();
        assert_eq!(text.lines().count(), 21);
        // The far object projects out of frame and serializes as empty cells.
        assert!(text.lines().nth(1).unwrap().contains(",,,"));
        let back = Dataset::parse_csv(&text).unwrap();
        assert_eq!(back.samples, d.samples);
    }

    #[test]
    fn parse_errors_name_the_problem() {
        let missing = "theta0,theta1,theta2,proprio0,proprio1,proprio2,u_other,v_other,taxel0\n";
        assert!(Dataset::parse_csv(missing).unwrap_err().contains("u_self"));
        let mut text = acquire_dataset(&ArmConfig::default(), None, 3, 1)
            .unwrap()
            .to_csv_string();
        text = text.replacen("\n", "\nnot-a-number", 2);
        let err = Dataset::parse_csv(&text).unwrap_err();
        assert!(err.starts_with("row "), "{err}");
    }
}
