use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exec::{mix_seed, Exec};

use super::annotation::parse_label_text;
use super::image::{load_png, save_png};
use super::synth::{generate_synthetic_scene, Palette, SyntheticSceneSpec};
use super::{AnnotatedImage, BoxAnnotation};

/// Image list plus class names. Each image's labels live next to it with
/// the extension replaced by `.txt`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub images: Vec<PathBuf>,
    pub class_names: Vec<String>,
}

pub fn label_path(image: &Path) -> PathBuf {
    image.with_extension("txt")
}

/// `<manifest>.names` beside the manifest file.
pub fn names_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("names")
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    /// Reads newline-separated image paths (relative ones resolve against
    /// the manifest's directory) and, if present, the `.names` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let images = read(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| base.join(l))
            .collect();
        let names = names_path(path);
        let class_names = if names.exists() {
            read(&names)?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            Vec::new()
        };
        Ok(DatasetManifest { images, class_names })
    }

    /// Writes image paths relative to the manifest's directory when possible,
    /// and the names file when there are names.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut text = String::new();
        for img in &self.images {
            let rel = img.strip_prefix(base).unwrap_or(img);
            text.push_str(&rel.to_string_lossy());
            text.push('\n');
        }
        write(path, &text)?;
        if !self.class_names.is_empty() {
            write(&names_path(path), &(self.class_names.join("\n") + "\n"))?;
        }
        Ok(())
    }

    /// Loads every image with its labels; a missing or empty label file
    /// makes the image a hard negative.
    pub fn load_samples(&self, exec: Exec) -> Result<Vec<AnnotatedImage>> {
        exec.map(self.images.len(), |i| load_sample(&self.images[i]))
            .into_iter()
            .collect()
    }
}

pub fn load_sample(image: &Path) -> Result<AnnotatedImage> {
    let pixels = load_png(image)?;
    let labels = label_path(image);
    let boxes = if labels.exists() {
        parse_label_text(&read(&labels)?)
            .map_err(|e| Error::data(format!("{}: {e}", labels.display())))?
    } else {
        Vec::new()
    };
    Ok(AnnotatedImage {
        is_hard_negative: boxes.is_empty(),
        pixels,
        boxes,
    })
}

pub fn label_text(boxes: &[BoxAnnotation]) -> String {
    boxes.iter().map(|b| b.to_line() + "\n").collect()
}

/// Requested images for one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCount {
    pub name: String,
    pub train: usize,
    pub validation: usize,
}

/// Layout of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub classes: Vec<ClassCount>,
    /// Canvas size, size range and palette; `box_classes`, `distractors`
    /// and `seed` are overridden per image.
    pub template: SyntheticSceneSpec,
    /// Boxes per image: the image's own class first, then random classes.
    pub max_boxes_per_image: usize,
    pub distractors_per_image: usize,
    /// Extra training images holding only distractors.
    pub hard_negatives: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_VALIDATION: u64 = 2;
const SPLIT_HARD_NEGATIVE: u64 = 3;

/// Scene for image `index` of class `class_id` in one split. Splits draw
/// from disjoint seed namespaces.
pub fn synthetic_scene_spec(spec: &SyntheticDatasetSpec, split: u64, class_id: Option<usize>, index: usize) -> SyntheticSceneSpec {
    let key = (class_id.map_or(0, |c| c as u64 + 1) << 32) | index as u64;
    let seed = mix_seed(mix_seed(spec.seed, split), key);
    let mut scene = spec.template.clone();
    scene.seed = seed;
    scene.distractors = spec.distractors_per_image;
    scene.box_classes.clear();
    if let Some(c) = class_id {
        let extra = mix_seed(seed, 7) as usize % spec.max_boxes_per_image.max(1);
        let n = spec.classes.len() as u64;
        scene.box_classes.push(c);
        for k in 0..extra {
            scene.box_classes.push((mix_seed(seed, 100 + k as u64) % n) as usize);
        }
        if scene.palette == Palette::Generic {
            scene.box_classes.iter_mut().for_each(|c| *c = 0);
        }
    }
    scene
}

/// Renders the train and validation splits into `out_dir`:
/// `train/`, `val/` with a PNG and a label file per image, plus
/// `train.txt`, `val.txt` and their `.names` files.
pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec, out_dir: impl AsRef<Path>, exec: Exec) -> Result<SyntheticDataset> {
    let out_dir = out_dir.as_ref();
    let names: Vec<String> = spec.classes.iter().map(|c| c.name.clone()).collect();
    let mut result = SyntheticDataset {
        train: DatasetManifest {
            images: Vec::new(),
            class_names: names.clone(),
        },
        validation: DatasetManifest {
            images: Vec::new(),
            class_names: names,
        },
    };
    if spec.classes.is_empty() && spec.hard_negatives == 0 {
        return Ok(result);
    }
    let mut jobs = Vec::new();
    for (dir, split) in [("train", SPLIT_TRAIN), ("val", SPLIT_VALIDATION)] {
        for (c, count) in spec.classes.iter().enumerate() {
            let n = if split == SPLIT_TRAIN { count.train } else { count.validation };
            for i in 0..n {
                let file = out_dir.join(dir).join(format!("{}_{i:04}.png", sanitize(&count.name)));
                jobs.push((split, Some(c), i, file));
            }
        }
    }
    for i in 0..spec.hard_negatives {
        jobs.push((SPLIT_HARD_NEGATIVE, None, i, out_dir.join("train").join(format!("negative_{i:04}.png"))));
    }
    for dir in ["train", "val"] {
        let d = out_dir.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let written: Result<Vec<()>> = exec
        .map(jobs.len(), |j| {
            let (split, class, index, ref file) = jobs[j];
            let scene = generate_synthetic_scene(&synthetic_scene_spec(spec, split, class, index));
            save_png(&scene.pixels, file)?;
            write(&label_path(file), &label_text(&scene.boxes))
        })
        .into_iter()
        .collect();
    written?;
    for (split, _, _, file) in jobs {
        match split {
            SPLIT_VALIDATION => result.validation.images.push(file),
            _ => result.train.images.push(file),
        }
    }
    result.train.save(out_dir.join("train.txt"))?;
    result.validation.save(out_dir.join("val.txt"))?;
    Ok(result)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: Vec<ClassCount>) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            classes,
            template: SyntheticSceneSpec::new(48, 48, 0),
            max_boxes_per_image: 2,
            distractors_per_image: 1,
            hard_negatives: 0,
            seed: 11,
        }
    }

    #[test]
    fn exact_counts_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(vec![ClassCount {
            name: "classA".into(),
            train: 15,
            validation: 3,
        }]);
        let ds = generate_synthetic_dataset(&s, dir.path(), Exec::Sequential).unwrap();
        assert_eq!(ds.train.images.len(), 15);
        let loaded = DatasetManifest::load(dir.path().join("train.txt")).unwrap();
        assert_eq!(loaded.images, ds.train.images);
        assert_eq!(loaded.class_names, vec!["classA".to_string()]);
        for (img, sample) in loaded.images.iter().zip(loaded.load_samples(Exec::Sequential).unwrap()) {
            assert!(sample.boxes.iter().any(|b| b.class_id == 0));
            let scene = generate_synthetic_scene(&synthetic_scene_spec(
                &s,
                SPLIT_TRAIN,
                Some(0),
                img.file_stem().unwrap().to_str().unwrap()[7..].parse().unwrap(),
            ));
            assert_eq!(sample, scene);
        }
    }

    #[test]
    fn empty_counts_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&spec(vec![]), dir.path(), Exec::Sequential).unwrap();
        assert!(ds.train.images.is_empty() && ds.validation.images.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn missing_label_is_hard_negative() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&crate::tensor::Tensor::full(&[3, 4, 4], 0.2), &p).unwrap();
        let s = load_sample(&p).unwrap();
        assert!(s.is_hard_negative && s.boxes.is_empty());
    }
}
