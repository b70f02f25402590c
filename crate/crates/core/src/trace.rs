//! Per-layer token-selection traces for attention-map visualizations.
//!
//! One record per image per semantic layer, one line per record:
//!
//! ```text
//! image=3 layer=2 grid=8 scores=0.01,… kept=0,4,… dropped=1,2,… provenance=p0,p1,…,f5;9 mask=0110…
//! ```
//!
//! Positions in `kept`/`dropped` index the tokens entering the layer; `provenance`
//! names the original patches behind each of those tokens (`pI` a single patch,
//! `fI;J;…` a fused token). `mask` is the row-major patch grid, `1` for every
//! original patch no longer carried by its own token once the layer is done.

use std::fmt;
use std::str::FromStr;

use crate::backbone::Provenance;
use crate::error::{Error, Result};
use crate::model::ZslVit;
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub image: usize,
    pub layer: usize,
    /// Patches per side of the original grid.
    pub grid: usize,
    pub scores: Vec<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub mask: Vec<bool>,
}

impl LayerTrace {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Original patches that still own a token after a layer keeps `kept` out of
/// tokens with provenance `prov`.
pub fn surviving_patches(prov: &[Provenance], kept: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = kept
        .iter()
        .filter_map(|&i| match &prov[i] {
            Provenance::Patch(p) => Some(*p),
            Provenance::Fused(_) => None,
        })
        .collect();
    out.sort_unstable();
    out
}

/// Inference pass over `images` recording every semantic layer.
/// `ids` labels the records and must align with `images`.
pub fn trace(model: &ZslVit, images: &[&Tensor], ids: &[usize]) -> Result<Vec<LayerTrace>> {
    if ids.len() != images.len() {
        return Err(Error::Contract(format!("{} ids for {} images", ids.len(), images.len())));
    }
    let bcfg = &model.config().backbone;
    let grid = bcfg.image_size / bcfg.patch_size;
    let mut g = Graph::new();
    let pv = model.params().attach(&mut g, false);
    let out = model.forward(&mut g, &pv, images, None, false)?;
    let mut records = Vec::new();
    for (b, &id) in ids.iter().enumerate() {
        for layer in &out.layers {
            let prov = &layer.provenance_in[b];
            let kept = layer.vie.kept[b].clone();
            let alive = surviving_patches(prov, &kept);
            let mut mask = vec![true; grid * grid];
            for p in alive {
                mask[p] = false;
            }
            records.push(LayerTrace {
                image: id,
                layer: layer.set.layer,
                grid,
                scores: g.value(layer.set.attention.a).row(b).to_vec(),
                kept,
                dropped: layer.vie.dropped[b].clone(),
                provenance: prov.clone(),
                mask,
            });
        }
    }
    Ok(records)
}

fn join<T: fmt::Display>(xs: &[T], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn fmt_provenance(p: &Provenance) -> String {
    match p {
        Provenance::Patch(i) => format!("p{i}"),
        Provenance::Fused(v) => format!("f{}", join(v, ";")),
    }
}

impl fmt::Display for LayerTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prov: Vec<String> = self.provenance.iter().map(fmt_provenance).collect();
        let mask: String = self.mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
        write!(
            f,
            "image={} layer={} grid={} scores={} kept={} dropped={} provenance={} mask={}",
            self.image,
            self.layer,
            self.grid,
            join(&self.scores, ","),
            join(&self.kept, ","),
            join(&self.dropped, ","),
            prov.join(","),
            mask
        )
    }
}

fn list<T: FromStr>(s: &str, sep: char) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep)
        .map(|x| x.parse().map_err(|_| format!("bad list element {x:?}")))
        .collect()
}

fn parse_provenance(s: &str) -> std::result::Result<Provenance, String> {
    if let Some(i) = s.strip_prefix('p') {
        i.parse().map(Provenance::Patch).map_err(|_| format!("bad patch tag {s:?}"))
    } else if let Some(v) = s.strip_prefix('f') {
        list(v, ';').map(Provenance::Fused)
    } else {
        Err(format!("bad provenance tag {s:?}"))
    }
}

impl FromStr for LayerTrace {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("field {part:?} lacks '='"))?;
            if fields.insert(k, v).is_some() {
                return Err(format!("duplicate field {k}"));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing field {k}"));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| format!("bad {k}"));
        let grid = num("grid")?;
        let mask: Vec<bool> = get("mask")?
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(format!("bad mask character {c:?}")),
            })
            .collect::<std::result::Result<_, _>>()?;
        if grid.checked_mul(grid) != Some(mask.len()) {
            return Err(format!("mask of {} cells for a {grid}x{grid} grid", mask.len()));
        }
        let prov = get("provenance")?;
        let provenance = if prov.is_empty() {
            Vec::new()
        } else {
            prov.split(',').map(parse_provenance).collect::<std::result::Result<_, _>>()?
        };
        Ok(LayerTrace {
            image: num("image")?,
            layer: num("layer")?,
            grid,
            scores: list(get("scores")?, ',')?,
            kept: list(get("kept")?, ',')?,
            dropped: list(get("dropped")?, ',')?,
            provenance,
            mask,
        })
    }
}

pub fn format_traces(records: &[LayerTrace]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

/// Parses trace text; errors carry the 1-based line number.
pub fn parse_traces(text: &str) -> std::result::Result<Vec<LayerTrace>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.parse().map_err(|e| (i + 1, e)))
        .collect()
}

#[cfg(test)]
mod tests;
