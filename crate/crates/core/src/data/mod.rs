//! Datasets: images, labeled samples, manifest files, the procedural
//! two-domain generator and deterministic batch iteration.

mod batch;
mod image;
mod manifest;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use self::batch::BatchIterator;
pub use self::image::{images_to_tensor, Image};
pub use self::manifest::{load_manifest, DatasetManifest, ManifestEntry, ManifestLabel, DATA_ROOT_ENV};
pub use self::synthetic::{
    generate_synthetic_pair, BackgroundTexture, DomainShift, SyntheticPair, SyntheticShiftSpec,
};

use crate::error::{shape_err, Error, Result};

/// Label-map value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    /// Discriminator label: 0 = target, 1 = source.
    pub fn disc_label(self) -> u8 {
        match self {
            Domain::Target => 0,
            Domain::Source => 1,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::InvalidInput(format!("unknown domain '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Per-pixel class map; values in `[0, C)` or [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Map(LabelMap),
}

impl Label {
    pub fn validate(&self, num_classes: usize, image: &Image) -> Result<()> {
        match self {
            Label::Class(c) if *c >= num_classes => {
                Err(Error::LabelOutOfRange { label: *c, num_classes })
            }
            Label::Class(_) => Ok(()),
            Label::Map(m) => {
                if m.height != image.height || m.width != image.width {
                    return Err(shape_err("label-map shape differs from image shape"));
                }
                match m.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= num_classes) {
                    Some(&v) => Err(Error::LabelOutOfRange { label: v as usize, num_classes }),
                    None => Ok(()),
                }
            }
        }
    }
}

/// An image with its ground truth and domain tag.
///
/// Labels of target-domain samples are tainted: training code must obtain
/// supervision through [`crate::training::supervision`], which refuses them
/// outside the target-supervised reference mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image: Image,
    label: Label,
    pub domain: Domain,
}

impl LabeledSample {
    pub fn new(image: Image, label: Label, domain: Domain) -> Self {
        Self { image, label, domain }
    }

    /// Ground truth for evaluation code paths.
    pub fn eval_label(&self) -> &Label {
        &self.label
    }

    pub fn label_is_tainted(&self) -> bool {
        self.domain == Domain::Target
    }

    pub(crate) fn raw_label(&self) -> &Label {
        &self.label
    }

    #[doc(hidden)]
    pub fn label_mut_for_tests(&mut self) -> &mut Label {
        &mut self.label
    }
}

/// An in-memory dataset loaded from a manifest or produced by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: Task,
    pub num_classes: usize,
    pub split: Split,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.samples.iter().filter(|s| s.domain == domain).count()
    }

    pub fn domain_subset(&self, domain: Domain) -> Dataset {
        Dataset {
            task: self.task,
            num_classes: self.num_classes,
            split: self.split,
            samples: self.samples.iter().filter(|s| s.domain == domain).cloned().collect(),
        }
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.label.validate(self.num_classes, &s.image)?;
        }
        Ok(())
    }
}
