use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Dataset, Domain, Image, Label, LabelMap, LabeledSample, Split, Task};
use crate::error::{Error, Result};

/// Overrides the base directory that relative manifest paths resolve against.
pub const DATA_ROOT_ENV: &str = "SSDA_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestLabel {
    Class(usize),
    Map(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved image path.
    pub image: PathBuf,
    pub label: ManifestLabel,
    pub domain: Domain,
}

/// A validated manifest file.
///
/// Format: a header line `task,num_classes` (e.g. `segmentation,4`) followed by
/// one `image_path,label,domain` row per entry, where `label` is an integer
/// class or a label-map image path. Relative paths resolve against the
/// manifest's directory, or against `$SSDA_DATA_ROOT` when set. The split is
/// `test` when the file stem ends in `test`, `train` otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub task: Task,
    pub num_classes: usize,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub path: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry counts `(N_s, N_t)`.
    pub fn domain_counts(&self) -> (usize, usize) {
        let ns = self.entries.iter().filter(|e| e.domain == Domain::Source).count();
        (ns, self.entries.len() - ns)
    }

    /// Reads every image and label into memory.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let image = Image::load_png(&e.image)?;
            let label = match &e.label {
                ManifestLabel::Class(c) => Label::Class(*c),
                ManifestLabel::Map(p) => {
                    let m = image::open(p)?.to_luma8();
                    Label::Map(LabelMap {
                        height: m.height() as usize,
                        width: m.width() as usize,
                        data: m.into_raw(),
                    })
                }
            };
            label.validate(self.num_classes, &image)?;
            samples.push(LabeledSample::new(image, label, e.domain));
        }
        Ok(Dataset { task: self.task, num_classes: self.num_classes, split: self.split, samples })
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

fn resolve(base: &Path, rel: &str, line: usize) -> Result<PathBuf> {
    let p = Path::new(rel);
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if full.is_file() {
        Ok(full)
    } else {
        Err(Error::UnresolvablePath { line, path: full })
    }
}

/// Loads and validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::ManifestMissing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::EmptyManifest)?;
    let mut head = header.split(',');
    let malformed = |line: usize, reason: &str| Error::MalformedRow { line, reason: reason.to_string() };
    let task: Task = head
        .next()
        .ok_or_else(|| malformed(1, "missing task"))?
        .parse()
        .map_err(|_| malformed(1, "header must be `task,num_classes`"))?;
    let num_classes: usize = head
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| malformed(1, "header must be `task,num_classes`"))?;
    if head.next().is_some() || num_classes < 2 {
        return Err(malformed(1, "header must be `task,num_classes` with num_classes >= 2"));
    }
    let base = base_dir(path);
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(malformed(lineno, "expected `image_path,label,domain`"));
        }
        let domain: Domain = cols[2].parse().map_err(|_| malformed(lineno, "domain must be source or target"))?;
        let image = resolve(&base, cols[0], lineno)?;
        let label = match task {
            Task::Classification => {
                let c: usize = cols[1].parse().map_err(|_| malformed(lineno, "class label must be an integer"))?;
                if c >= num_classes {
                    return Err(Error::LabelOutOfRange { label: c, num_classes });
                }
                ManifestLabel::Class(c)
            }
            Task::Segmentation => ManifestLabel::Map(resolve(&base, cols[1], lineno)?),
        };
        entries.push(ManifestEntry { image, label, domain });
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let split = match path.file_stem().and_then(|s| s.to_str()) {
        Some(stem) if stem.ends_with("test") => Split::Test,
        _ => Split::Train,
    };
    Ok(DatasetManifest { task, num_classes, split, entries, path: path.to_path_buf() })
}

/// Writes `dataset` as lossless PNGs plus `<root>/<domain>_<split>.csv`.
pub(crate) fn write_manifest(dataset: &Dataset, root: &Path, domain: Domain, split: Split) -> Result<PathBuf> {
    let rel_dir = PathBuf::from(domain.as_str()).join(split.as_str());
    std::fs::create_dir_all(root.join(&rel_dir).join("images"))?;
    if dataset.task == Task::Segmentation {
        std::fs::create_dir_all(root.join(&rel_dir).join("labels"))?;
    }
    let mut text = format!("{},{}\n", dataset.task.as_str(), dataset.num_classes);
    for (i, s) in dataset.samples.iter().enumerate() {
        let img_rel = rel_dir.join("images").join(format!("{i:05}.png"));
        s.image.save_png(&root.join(&img_rel))?;
        let label = match s.raw_label() {
            Label::Class(c) => c.to_string(),
            Label::Map(m) => {
                let rel = rel_dir.join("labels").join(format!("{i:05}.png"));
                image::save_buffer(
                    root.join(&rel),
                    &m.data,
                    m.width as u32,
                    m.height as u32,
                    image::ExtendedColorType::L8,
                )?;
                rel.to_string_lossy().into_owned()
            }
        };
        let _ = writeln!(text, "{},{},{}", img_rel.to_string_lossy(), label, s.domain.as_str());
    }
    let path = root.join(format!("{}_{}.csv", domain.as_str(), split.as_str()));
    std::fs::write(&path, text)?;
    Ok(path)
}
