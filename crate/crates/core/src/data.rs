//! Synthetic face-like dataset: identities, poses, keypoints.
//!
//! Each identity owns a latent vector `z`, each sample draws a pose `p`.
//! Features mix both linearly; keypoints follow a fixed template displaced
//! strongly by pose and weakly by identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "distillforge-dataset";
const FORMAT_VERSION: &str = "v1";
/// Fraction of every identity's samples held out for testing.
pub const TEST_FRACTION: f64 = 0.2;
/// Spread of the keypoint displacement matrices before scaling.
const KEYPOINT_SPREAD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub identity: usize,
    /// Flattened `(x, y)` pairs.
    pub keypoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub pose_dim: usize,
    pub num_keypoints: usize,
    pub identity_keypoint_scale: f64,
    pub pose_keypoint_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            num_identities: 32,
            samples_per_identity: 50,
            input_dim: 64,
            latent_dim: 8,
            pose_dim: 4,
            num_keypoints: 5,
            identity_keypoint_scale: 0.1,
            pose_keypoint_scale: 1.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("samples_per_identity", self.samples_per_identity),
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("pose_dim", self.pose_dim),
            ("num_keypoints", self.num_keypoints),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.num_keypoints < 2 {
            return Err(Error::Parameter("at least two keypoints are needed for normalization".into()));
        }
        if !(self.identity_keypoint_scale >= 0.0) {
            return Err(Error::Parameter("identity_keypoint_scale must be nonnegative".into()));
        }
        if !(self.pose_keypoint_scale > self.identity_keypoint_scale) {
            return Err(Error::Parameter(
                "pose_keypoint_scale must exceed identity_keypoint_scale".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Parameter("noise_std must be a nonnegative finite number".into()));
        }
        Ok(())
    }

    pub fn num_keypoint_coords(&self) -> usize {
        self.num_keypoints * 2
    }
}

/// Keypoint template. Points 0 and 1 play the role of the eyes and set the
/// normalization distance.
pub fn keypoint_template(num_keypoints: usize) -> Vec<f64> {
    const FIVE: [f64; 10] = [-1.0, 1.0, 1.0, 1.0, 0.0, 0.0, -0.8, -1.2, 0.8, -1.2];
    let mut out: Vec<f64> = FIVE.iter().copied().take(num_keypoints * 2).collect();
    // extra points on a ring below the eyes
    for k in 5..num_keypoints {
        let angle = std::f64::consts::PI * (1.0 + (k - 5) as f64 / (num_keypoints - 4) as f64);
        out.push(1.5 * angle.cos());
        out.push(1.5 * angle.sin());
    }
    out
}

/// The fixed random projections behind one generator seed.
#[derive(Debug, Clone)]
pub struct LatentModel {
    params: GeneratorParams,
    /// `[input_dim × latent_dim]`
    feature_identity: Vec<f64>,
    /// `[input_dim × pose_dim]`
    feature_pose: Vec<f64>,
    /// `[coords × pose_dim]`
    keypoint_pose: Vec<f64>,
    /// `[coords × latent_dim]`
    keypoint_identity: Vec<f64>,
    template: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn mat_vec<'a>(m: &'a [f64], v: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    let cols = v.len();
    m.chunks_exact(cols)
        .map(move |row| row.iter().zip(v).map(|(a, b)| a * b).sum())
}

impl LatentModel {
    pub fn new(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> Result<Self> {
        params.validate()?;
        let (d, l, q, c) = (
            params.input_dim,
            params.latent_dim,
            params.pose_dim,
            params.num_keypoint_coords(),
        );
        Ok(Self {
            params: params.clone(),
            feature_identity: gaussian_matrix(rng, d, l, (1.0 / l as f64).sqrt()),
            feature_pose: gaussian_matrix(rng, d, q, (1.0 / q as f64).sqrt()),
            keypoint_pose: gaussian_matrix(rng, c, q, KEYPOINT_SPREAD / (q as f64).sqrt()),
            keypoint_identity: gaussian_matrix(rng, c, l, KEYPOINT_SPREAD / (l as f64).sqrt()),
            template: keypoint_template(params.num_keypoints),
        })
    }

    /// Noise-free features and keypoints for latent `z` and pose `p`.
    pub fn render(&self, z: &[f64], pose: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let features = mat_vec(&self.feature_identity, z)
            .zip(mat_vec(&self.feature_pose, pose))
            .map(|(a, b)| a + b)
            .collect();
        let keypoints = self
            .template
            .iter()
            .zip(mat_vec(&self.keypoint_pose, pose))
            .zip(mat_vec(&self.keypoint_identity, z))
            .map(|((base, p), i)| {
                base + self.params.pose_keypoint_scale * p + self.params.identity_keypoint_scale * i
            })
            .collect();
        (features, keypoints)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Present when the dataset came from [`generate`].
    pub generator: Option<GeneratorParams>,
}

/// Draws a dataset; a pure function of `params`.
pub fn generate(params: &GeneratorParams) -> Result<SplitDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let model = LatentModel::new(params, &mut rng)?;
    let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::Parameter(e.to_string()))?;
    let n = params.samples_per_identity;
    let n_test = ((n as f64) * TEST_FRACTION).round() as usize;
    let n_test = if n >= 2 { n_test.clamp(1, n - 1) } else { 0 };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for identity in 0..params.num_identities {
        let z: Vec<f64> = (0..params.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        for s in 0..n {
            let pose: Vec<f64> = (0..params.pose_dim).map(|_| rng.sample(StandardNormal)).collect();
            let (mut features, mut keypoints) = model.render(&z, &pose);
            features.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            keypoints.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            let sample = Sample {
                features,
                identity,
                keypoints,
            };
            if s < n - n_test {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(SplitDataset {
        train,
        test,
        generator: Some(params.clone()),
    })
}

/// Train-split indices `(anchor, positive, negative)`.
pub type Triplet = (usize, usize, usize);

/// Uniformly random valid triplets over the training split.
pub fn make_triplets(ds: &SplitDataset, count: usize, seed: u64) -> Result<Vec<Triplet>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let by_identity = group_by_identity(&ds.train);
    if let Some((id, members)) = by_identity.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Data(format!(
            "identity {id} has {} training sample(s); triplets need at least 2",
            members.len()
        )));
    }
    if by_identity.len() < 2 {
        return Err(Error::Data("triplets need at least two identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ds.train.len();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = rng.random_range(0..n);
        let id = ds.train[anchor].identity;
        let same = &by_identity[&id];
        let positive = loop {
            let p = same[rng.random_range(0..same.len())];
            if p != anchor {
                break p;
            }
        };
        let negative = loop {
            let c = rng.random_range(0..n);
            if ds.train[c].identity != id {
                break c;
            }
        };
        out.push((anchor, positive, negative));
    }
    Ok(out)
}

pub fn group_by_identity(samples: &[Sample]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        map.entry(s.identity).or_default().push(i);
    }
    map
}

impl SplitDataset {
    pub fn input_dim(&self) -> usize {
        self.train.first().or(self.test.first()).map_or(0, |s| s.features.len())
    }

    pub fn num_keypoint_coords(&self) -> usize {
        self.train.first().or(self.test.first()).map_or(0, |s| s.keypoints.len())
    }

    pub fn num_identities(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| s.identity + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SplitDataset> {
        let text = std::fs::read_to_string(path)?;
        SplitDataset::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{FORMAT_TAG} {FORMAT_VERSION} {} {} {}",
            self.train.len() + self.test.len(),
            self.input_dim(),
            self.num_keypoint_coords()
        );
        for (flag, samples) in [("train", &self.train), ("test", &self.test)] {
            for s in samples {
                out.push_str(flag);
                let _ = write!(out, " {}", s.identity);
                for v in s.features.iter().chain(&s.keypoints) {
                    // `{}` on f64 prints the shortest string that parses back exactly
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<SplitDataset> {
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != FORMAT_TAG || fields[1] != FORMAT_VERSION {
            return Err(parse_err(1, format!("bad header `{header}`")));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| parse_err(1, format!("bad header field `{}`", fields[i])))
        };
        let (count, input_dim, coords) = (num(2)?, num(3)?, num(4)?);

        let mut ds = SplitDataset {
            train: Vec::new(),
            test: Vec::new(),
            generator: None,
        };
        let mut rows = 0;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            rows += 1;
            if rows > count {
                return Err(parse_err(lineno, format!("more rows than the {count} declared")));
            }
            let mut tok = line.split_whitespace();
            let flag = tok.next().unwrap_or_default();
            let identity: usize = tok
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err(lineno, format!("row {rows}: missing or bad identity")))?;
            let values = tok
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(lineno, format!("row {rows}: {e}")))?;
            if values.len() != input_dim + coords {
                return Err(parse_err(
                    lineno,
                    format!(
                        "row {rows} has {} values, header declares {input_dim} features + {coords} keypoint coords",
                        values.len()
                    ),
                ));
            }
            let sample = Sample {
                features: values[..input_dim].to_vec(),
                identity,
                keypoints: values[input_dim..].to_vec(),
            };
            match flag {
                "train" => ds.train.push(sample),
                "test" => ds.test.push(sample),
                other => return Err(parse_err(lineno, format!("row {rows}: unknown split `{other}`"))),
            }
        }
        if rows != count {
            let last = text.lines().count();
            return Err(parse_err(last, format!("file ends after {rows} of {count} declared rows")));
        }
        Ok(ds)
    }
}

/// Row-stacked features of `samples`.
pub fn feature_matrix(samples: &[Sample]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    Tensor::from_rows(&rows)
}

pub fn keypoint_matrix(samples: &[Sample]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.keypoints.as_slice()).collect();
    Tensor::from_rows(&rows)
}

pub fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.identity).collect()
}
