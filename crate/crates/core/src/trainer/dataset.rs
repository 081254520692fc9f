//! Labeled datasets: container I/O and seeded synthetic generators.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{Container, ContainerItem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid(format!("need >= 2 classes, got {}", self.num_classes)));
        }
        let (c, h, w) = self.input_shape;
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if split.inputs.len() != split.labels.len() {
                return Err(Error::Invalid(format!(
                    "{name} split has {} inputs but {} labels",
                    split.inputs.len(),
                    split.labels.len()
                )));
            }
            for t in &split.inputs {
                if t.shape != [c, h, w] {
                    return Err(Error::ShapeMismatch {
                        expected: format!("[{c}, {h}, {w}]"),
                        got: format!("{:?}", t.shape),
                    });
                }
            }
            if let Some(&bad) = split.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::Invalid(format!(
                    "{name} split label {bad} out of range 0..{}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Two-class set that a linear classifier separates perfectly: class 0
/// pixels cluster around -0.6, class 1 around +0.6, with +-0.3 noise. The
/// sign of the pixel mean is a closed-form separator.
pub fn separable_two_class(
    seed: u64,
    n_train: usize,
    n_val: usize,
    input_shape: (usize, usize, usize),
) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = input_shape;
    let mut gen_split = |n: usize| -> Split {
        let mut split = Split::default();
        for i in 0..n {
            let label = i % 2;
            let mean = if label == 0 { -0.6 } else { 0.6 };
            let data = (0..c * h * w).map(|_| mean + rng.gen_range(-0.3..0.3)).collect();
            split.inputs.push(Tensor { shape: vec![c, h, w], data });
            split.labels.push(label);
        }
        split
    };
    let train = gen_split(n_train);
    let val = gen_split(n_val);
    LabeledDataset { num_classes: 2, input_shape, train, val, test: Split::default() }
}

fn pack_split(container: &mut Container, name: &str, split: &Split, shape: (usize, usize, usize)) {
    let (c, h, w) = shape;
    let n = split.len();
    let mut inputs = Vec::with_capacity(n * c * h * w);
    for t in &split.inputs {
        inputs.extend_from_slice(&t.data);
    }
    container.items.insert(
        format!("inputs_{name}"),
        ContainerItem::Real(Tensor { shape: vec![n, c, h, w], data: inputs }),
    );
    container.items.insert(
        format!("labels_{name}"),
        ContainerItem::Real(Tensor {
            shape: vec![n],
            data: split.labels.iter().map(|&l| l as f64).collect(),
        }),
    );
}

fn unpack_split(container: &Container, name: &str, num_classes: usize) -> Result<(Split, Option<(usize, usize, usize)>)> {
    let inputs = match container.items.get(&format!("inputs_{name}")) {
        Some(ContainerItem::Real(t)) => t,
        Some(_) => return Err(Error::Invalid(format!("inputs_{name} must be real32"))),
        None => return Ok((Split::default(), None)),
    };
    let labels = match container.items.get(&format!("labels_{name}")) {
        Some(ContainerItem::Real(t)) => t,
        _ => return Err(Error::Invalid(format!("labels_{name} missing or not real32"))),
    };
    if inputs.shape.len() != 4 {
        return Err(Error::Invalid(format!("inputs_{name} must be rank 4 (n, c, h, w)")));
    }
    let (n, c, h, w) = (inputs.shape[0], inputs.shape[1], inputs.shape[2], inputs.shape[3]);
    if labels.shape != [n] {
        return Err(Error::Invalid(format!("labels_{name} must have shape [{n}]")));
    }
    let mut split = Split::default();
    for i in 0..n {
        let start = i * c * h * w;
        split.inputs.push(Tensor {
            shape: vec![c, h, w],
            data: inputs.data[start..start + c * h * w].to_vec(),
        });
        let raw = labels.data[i];
        if raw < 0.0 || raw.fract() != 0.0 || raw as usize >= num_classes {
            return Err(Error::Invalid(format!("labels_{name}[{i}] = {raw} is not a valid class")));
        }
        split.labels.push(raw as usize);
    }
    Ok((split, Some((c, h, w))))
}

pub fn save_dataset(ds: &LabeledDataset, manifest_path: &std::path::Path) -> Result<()> {
    ds.validate()?;
    let mut container = Container::default();
    container.meta.insert("content".into(), "dataset".into());
    container.meta.insert("num_classes".into(), ds.num_classes.to_string());
    pack_split(&mut container, "train", &ds.train, ds.input_shape);
    pack_split(&mut container, "val", &ds.val, ds.input_shape);
    pack_split(&mut container, "test", &ds.test, ds.input_shape);
    container.save(manifest_path)
}

pub fn load_dataset(manifest_path: &std::path::Path) -> Result<LabeledDataset> {
    let container = Container::load(manifest_path)?;
    let num_classes: usize = container
        .meta
        .get("num_classes")
        .ok_or_else(|| Error::Invalid("dataset container lacks num_classes metadata".into()))?
        .parse()
        .map_err(|_| Error::Invalid("num_classes metadata is not an integer".into()))?;
    let (train, s1) = unpack_split(&container, "train", num_classes)?;
    let (val, s2) = unpack_split(&container, "val", num_classes)?;
    let (test, s3) = unpack_split(&container, "test", num_classes)?;
    let input_shape = s1
        .or(s2)
        .or(s3)
        .ok_or_else(|| Error::Invalid("dataset container has no splits".into()))?;
    let ds = LabeledDataset { num_classes, input_shape, train, val, test };
    ds.validate()?;
    Ok(ds)
}
