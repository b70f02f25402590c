//! Synthetic attribute-grid benchmark.
//!
//! The image is tiled into square cells. A seeded subset of cells carries
//! attribute evidence: attribute `a` lives in one of those cells on channel
//! `a mod C` as a Walsh–Hadamard pattern (row `a+1`) scaled by the class's value
//! `z[a]`. All other cells hold Gaussian clutter. Unseen classes reuse the same
//! attribute vocabulary in novel combinations.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Sample, Split, ZslDataset, IMAGES_DIR};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prototypes::{ClassPrototype, PrototypeTable};

const LAYOUT_STREAM: u64 = 1;
const PROTOTYPE_STREAM: u64 = 2;
const IMAGE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub attr_dim: usize,
    pub train_per_seen: usize,
    pub test_per_seen: usize,
    pub test_per_unseen: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Side of one grid cell in pixels; a power of two dividing `image_size`.
    pub cell_size: usize,
    pub signal_strength: f64,
    pub background_noise_std: f64,
    /// Fraction of grid cells that carry attribute evidence.
    pub attr_patch_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_seen: 20,
            num_unseen: 5,
            attr_dim: 16,
            train_per_seen: 40,
            test_per_seen: 20,
            test_per_unseen: 20,
            image_size: 32,
            channels: 3,
            cell_size: 8,
            signal_strength: 1.0,
            background_noise_std: 1.0,
            attr_patch_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_seen", self.num_seen),
            ("num_unseen", self.num_unseen),
            ("attr_dim", self.attr_dim),
            ("train_per_seen", self.train_per_seen),
            ("test_per_seen", self.test_per_seen),
            ("test_per_unseen", self.test_per_unseen),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("cell_size", self.cell_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if !self.cell_size.is_power_of_two() || self.image_size % self.cell_size != 0 {
            return Err(Error::config(
                "cell_size",
                format!("{} must be a power of two dividing image_size {}", self.cell_size, self.image_size),
            ));
        }
        if self.attr_dim >= self.cell_size * self.cell_size {
            return Err(Error::config(
                "attr_dim",
                format!("at most {} attributes fit a {}-pixel cell", self.cell_size * self.cell_size - 1, self.cell_size),
            ));
        }
        if !(self.attr_patch_fraction > 0.0 && self.attr_patch_fraction < 1.0) {
            return Err(Error::config("attr_patch_fraction", "must lie in (0, 1)"));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::config("signal_strength", "must be positive"));
        }
        if !(self.background_noise_std >= 0.0 && self.background_noise_std.is_finite()) {
            return Err(Error::config("background_noise_std", "must be non-negative"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_unseen
    }

    /// Attributes switched on per class.
    pub fn active_per_class(&self) -> usize {
        ((self.attr_dim as f64 / 4.0).round() as usize).clamp(1, self.attr_dim)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    /// Where each attribute is rendered.
    pub fn layout(&self) -> Result<AttributeLayout> {
        self.validate()?;
        let grid = self.image_size / self.cell_size;
        let total = grid * grid;
        let m = ((self.attr_patch_fraction * total as f64).round() as usize).clamp(1, total);
        let mut cells: Vec<usize> = sample(&mut self.rng(LAYOUT_STREAM), total, m).into_vec();
        cells.sort_unstable();
        let sites = (0..self.attr_dim)
            .map(|a| {
                let cell = cells[a % m];
                AttributeSite {
                    channel: a % self.channels,
                    top: (cell / grid) * self.cell_size,
                    left: (cell % grid) * self.cell_size,
                    pattern: a + 1,
                }
            })
            .collect();
        Ok(AttributeLayout {
            cell_size: self.cell_size,
            grid,
            attr_cells: cells,
            sites,
        })
    }
}

/// Placement of one attribute's evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeSite {
    pub channel: usize,
    pub top: usize,
    pub left: usize,
    /// Walsh–Hadamard row of the pattern.
    pub pattern: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeLayout {
    pub cell_size: usize,
    /// Cells per side.
    pub grid: usize,
    /// Row-major indices of the evidence-bearing cells, ascending.
    pub attr_cells: Vec<usize>,
    pub sites: Vec<AttributeSite>,
}

impl AttributeLayout {
    pub fn is_attr_cell(&self, cell: usize) -> bool {
        self.attr_cells.binary_search(&cell).is_ok()
    }

    /// Clean rendering of attribute values `z`; background cells are zero.
    pub fn render(&self, z: &[f64], channels: usize, signal: f64) -> Tensor {
        let side = self.grid * self.cell_size;
        let mut img = Tensor::zeros(&[channels, side, side]);
        let data = img.data_mut();
        let cs = self.cell_size;
        for (site, &v) in self.sites.iter().zip(z) {
            for dy in 0..cs {
                for dx in 0..cs {
                    let idx = (site.channel * side + site.top + dy) * side + site.left + dx;
                    data[idx] += v * signal * hadamard_sign(site.pattern, dy * cs + dx);
                }
            }
        }
        img
    }

    /// Fills every background cell with samples of `dist`.
    pub fn add_clutter<R: Rng + ?Sized>(&self, img: &mut Tensor, dist: &Normal<f64>, rng: &mut R) {
        let (channels, side) = (img.shape()[0], img.shape()[1]);
        let cs = self.cell_size;
        let data = img.data_mut();
        for cell in 0..self.grid * self.grid {
            if self.is_attr_cell(cell) {
                continue;
            }
            let (top, left) = ((cell / self.grid) * cs, (cell % self.grid) * cs);
            for c in 0..channels {
                for dy in 0..cs {
                    for dx in 0..cs {
                        data[(c * side + top + dy) * side + left + dx] = dist.sample(rng);
                    }
                }
            }
        }
    }
}

/// Entry `(row, col)` of the Sylvester-ordered Walsh–Hadamard matrix.
pub fn hadamard_sign(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn binomial_at_least(n: usize, k: usize, target: usize) -> bool {
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c >= target as u128 {
            return true;
        }
    }
    c >= target as u128
}

fn prototypes(spec: &SynthSpec) -> Result<Vec<ClassPrototype>> {
    let classes = spec.num_classes();
    let active = spec.active_per_class();
    if !binomial_at_least(spec.attr_dim, active, classes) {
        return Err(Error::Generation(format!(
            "{} attributes with {active} active per class cannot give {classes} distinct classes",
            spec.attr_dim
        )));
    }
    let mut rng = spec.rng(PROTOTYPE_STREAM);
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(classes);
    for class_id in 0..classes {
        let set = loop {
            let mut s = sample(&mut rng, spec.attr_dim, active).into_vec();
            s.sort_unstable();
            if used.insert(s.clone()) {
                break s;
            }
        };
        let z = (0..spec.attr_dim)
            .map(|a| {
                if set.binary_search(&a).is_ok() {
                    rng.gen_range(0.5..=1.0)
                } else {
                    rng.gen_range(0.0..0.1)
                }
            })
            .collect();
        out.push(ClassPrototype {
            class_id,
            z,
            seen: class_id < spec.num_seen,
        });
    }
    Ok(out)
}

/// Builds the dataset described by `spec`; identical specs give identical datasets.
pub fn generate(spec: &SynthSpec) -> Result<ZslDataset> {
    let layout = spec.layout()?;
    let table = PrototypeTable::new(prototypes(spec)?)?;
    let noise = Normal::new(0.0, spec.background_noise_std).map_err(|e| Error::Generation(e.to_string()))?;
    let mut rng = spec.rng(IMAGE_STREAM);
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for class in table.classes() {
        let plan: &[(Split, usize)] = if class.seen {
            &[(Split::TrainSeen, spec.train_per_seen), (Split::TestSeen, spec.test_per_seen)]
        } else {
            &[(Split::TestUnseen, spec.test_per_unseen)]
        };
        for &(split, count) in plan {
            for _ in 0..count {
                let image_file = format!("{IMAGES_DIR}/{:05}.zvt", samples.len());
                let mut img = layout.render(&class.z, spec.channels, spec.signal_strength);
                layout.add_clutter(&mut img, &noise, &mut rng);
                images.push(img);
                samples.push(Sample {
                    image_file,
                    class_id: class.class_id,
                    split,
                });
            }
        }
    }
    Ok(ZslDataset {
        prototypes: table,
        samples,
        images,
        channels: spec.channels,
        image_size: spec.image_size,
        spec: Some(spec.clone()),
    })
}
