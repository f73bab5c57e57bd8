//! Token grids, the planted-motif corpus generator, and the ground-truth
//! similarity used to stratify grid pairs.
//!
//! Vocabulary layout of a flattened sequence:
//!
//! ```text
//! [0, V)                 image tokens
//! [V, V + V_pre)         prefix tokens: classes, then the null class, then aux slots
//! V + V_pre              out-of-grid sentinel (never emitted as a real token)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng;

/// Prefix vocabulary: one token per class, a null class for guidance, then
/// one fixed token per auxiliary slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixLayout {
    pub num_classes: usize,
    pub aux_tokens: usize,
}

impl PrefixLayout {
    pub fn len(&self) -> usize {
        1 + self.aux_tokens
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vocab_size(&self) -> usize {
        self.num_classes + 1 + self.aux_tokens
    }

    pub fn class_token(&self, class_id: usize) -> u32 {
        class_id as u32
    }

    pub fn null_token(&self) -> u32 {
        self.num_classes as u32
    }

    pub fn aux_token(&self, slot: usize) -> u32 {
        (self.num_classes + 1 + slot) as u32
    }

    /// Prefix for a class (or the null class when `class_id` is `None`).
    pub fn prefix(&self, class_id: Option<usize>) -> Vec<u32> {
        let mut p = Vec::with_capacity(self.len());
        p.push(class_id.map_or(self.null_token(), |c| self.class_token(c)));
        p.extend((0..self.aux_tokens).map(|j| self.aux_token(j)));
        p
    }
}

/// Position of one planted motif: slot index on the placement lattice and the
/// class-local motif id stamped there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotifInstance {
    pub slot: u32,
    pub motif: u32,
}

/// Generation metadata carried by corpus grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridOrigin {
    pub spec_fingerprint: u64,
    pub sample_index: u64,
    pub instances: Vec<MotifInstance>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Row-major image tokens in `[0, vocab_size)`.
    pub cells: Vec<u32>,
    pub class_id: usize,
    /// Prefix-local ids in `[0, V_pre)`.
    pub prefix: Vec<u32>,
    pub origin: Option<GridOrigin>,
}

impl TokenGrid {
    pub fn new(
        height: usize,
        width: usize,
        vocab_size: usize,
        layout: PrefixLayout,
        class_id: usize,
        cells: Vec<u32>,
    ) -> Result<Self> {
        let grid = TokenGrid {
            height,
            width,
            vocab_size,
            num_classes: layout.num_classes,
            cells,
            class_id,
            prefix: layout.prefix(Some(class_id)),
            origin: None,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn prefix_layout(&self) -> PrefixLayout {
        PrefixLayout {
            num_classes: self.num_classes,
            aux_tokens: self.prefix.len().saturating_sub(1),
        }
    }

    pub fn prefix_vocab(&self) -> usize {
        self.num_classes + self.prefix.len()
    }

    /// Id used for out-of-grid neighbours in hash contexts.
    pub fn sentinel(&self) -> u32 {
        (self.vocab_size + self.prefix_vocab()) as u32
    }

    pub fn cell(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.width + col]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.vocab_size == 0 {
            return config_err("grid dimensions and vocabulary must be positive");
        }
        if self.cells.len() != self.height * self.width {
            return Err(Error::Shape {
                op: "TokenGrid",
                lhs: vec![self.cells.len()],
                rhs: vec![self.height, self.width],
            });
        }
        if self.prefix.is_empty() {
            return config_err("prefix must contain the class token");
        }
        if self.class_id >= self.num_classes {
            return Err(Error::OutOfRange {
                what: "class_id",
                value: self.class_id,
                limit: self.num_classes,
            });
        }
        if let Some(&bad) = self.cells.iter().find(|&&c| c as usize >= self.vocab_size) {
            return Err(Error::OutOfRange {
                what: "cell token",
                value: bad as usize,
                limit: self.vocab_size,
            });
        }
        let vpre = self.prefix_vocab();
        if let Some(&bad) = self.prefix.iter().find(|&&p| p as usize >= vpre) {
            return Err(Error::OutOfRange {
                what: "prefix token",
                value: bad as usize,
                limit: vpre,
            });
        }
        let first = self.prefix[0] as usize;
        if first != self.class_id && first != self.num_classes {
            return config_err(format!(
                "prefix[0] = {first} does not encode class {}",
                self.class_id
            ));
        }
        Ok(())
    }
}

/// Flatten to `prefix ++ cells` in raster order, in the global vocabulary
/// (prefix ids shifted by the image vocabulary size).
pub fn raster_flatten(grid: &TokenGrid) -> Vec<u32> {
    let offset = grid.vocab_size as u32;
    grid.prefix
        .iter()
        .map(|&p| p + offset)
        .chain(grid.cells.iter().copied())
        .collect()
}

/// Inverse of [`raster_flatten`]. Generation metadata is not recoverable from
/// the token sequence and is left empty.
pub fn raster_unflatten(
    seq: &[u32],
    height: usize,
    width: usize,
    vocab_size: usize,
    layout: PrefixLayout,
) -> Result<TokenGrid> {
    let p = layout.len();
    if seq.len() != p + height * width {
        return Err(Error::Shape {
            op: "raster_unflatten",
            lhs: vec![seq.len()],
            rhs: vec![p, height, width],
        });
    }
    let offset = vocab_size as u32;
    let mut prefix = Vec::with_capacity(p);
    for &t in &seq[..p] {
        if t < offset {
            return Err(Error::Format(format!("prefix token {t} inside image vocabulary")));
        }
        prefix.push(t - offset);
    }
    let first = prefix[0] as usize;
    let class_id = if first < layout.num_classes { first } else { 0 };
    let grid = TokenGrid {
        height,
        width,
        vocab_size,
        num_classes: layout.num_classes,
        cells: seq[p..].to_vec(),
        class_id,
        prefix,
        origin: None,
    };
    grid.validate()?;
    Ok(grid)
}

fn default_motif_shapes() -> Vec<(usize, usize)> {
    vec![(2, 2)]
}

/// Parameters of the synthetic planted-motif corpus.
///
/// The grid is tiled by a lattice of slots sized to the largest motif shape.
/// Each class owns `motifs_per_class` motifs and a canonical slot-to-motif
/// layout; each sample stamps a seeded subset of `round(fill * slots)` slots
/// with their canonical motif over a class background, then replaces every
/// cell with a uniform token with probability `noise_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub vocab_size: usize,
    pub motifs_per_class: usize,
    #[serde(default = "default_motif_shapes")]
    pub motif_shapes: Vec<(usize, usize)>,
    pub motif_fill_fraction: f64,
    pub noise_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub aux_tokens: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_classes: 8,
            grid_height: 8,
            grid_width: 8,
            vocab_size: 64,
            motifs_per_class: 4,
            motif_shapes: default_motif_shapes(),
            motif_fill_fraction: 0.6,
            noise_rate: 0.1,
            seed: 42,
            aux_tokens: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > 1 << 16 {
            return config_err(format!("vocab_size {} must be in [1, 65536]", self.vocab_size));
        }
        if self.num_classes == 0 || self.grid_height == 0 || self.grid_width == 0 {
            return config_err("num_classes and grid dimensions must be positive");
        }
        if self.motifs_per_class == 0 || self.motif_shapes.is_empty() {
            return config_err("each class needs at least one motif shape");
        }
        for &(r, c) in &self.motif_shapes {
            if r == 0 || c == 0 || r > self.grid_height || c > self.grid_width {
                return config_err(format!(
                    "motif shape {r}x{c} does not fit a {}x{} grid",
                    self.grid_height, self.grid_width
                ));
            }
        }
        for (name, v) in [
            ("motif_fill_fraction", self.motif_fill_fraction),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return config_err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.num_classes + 1 + self.aux_tokens > 1 << 16 {
            return config_err("prefix vocabulary exceeds 16-bit ids");
        }
        Ok(())
    }

    pub fn prefix_layout(&self) -> PrefixLayout {
        PrefixLayout {
            num_classes: self.num_classes,
            aux_tokens: self.aux_tokens,
        }
    }

    /// Stable identity of the spec, used to refuse cross-corpus similarity.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        rng::fnv1a(&json)
    }

    fn slot_shape(&self) -> (usize, usize) {
        let r = self.motif_shapes.iter().map(|s| s.0).max().unwrap_or(1);
        let c = self.motif_shapes.iter().map(|s| s.1).max().unwrap_or(1);
        (r, c)
    }

    /// Slot lattice: `(slot rows, slot cols, lattice rows, lattice cols)`.
    pub fn lattice(&self) -> (usize, usize, usize, usize) {
        let (sr, sc) = self.slot_shape();
        (sr, sc, self.grid_height / sr, self.grid_width / sc)
    }

    pub fn num_slots(&self) -> usize {
        let (_, _, lr, lc) = self.lattice();
        lr * lc
    }

    fn motif_shape(&self, motif: usize) -> (usize, usize) {
        self.motif_shapes[motif % self.motif_shapes.len()]
    }

    fn motif_tokens(&self, class_id: usize, motif: usize) -> Vec<u32> {
        let (r, c) = self.motif_shape(motif);
        let mut rng = rng::stream(self.seed, "motif", &[class_id as u64, motif as u64]);
        (0..r * c)
            .map(|_| rng.random_range(0..self.vocab_size as u32))
            .collect()
    }

    fn background_token(&self, class_id: usize) -> u32 {
        let mut rng = rng::stream(self.seed, "background", &[class_id as u64]);
        rng.random_range(0..self.vocab_size as u32)
    }

    /// Canonical motif id for every slot of a class.
    fn class_layout(&self, class_id: usize) -> Vec<usize> {
        let s = self.num_slots();
        let mut order: Vec<usize> = (0..s).collect();
        let mut rng = rng::stream(self.seed, "layout", &[class_id as u64]);
        for i in (1..s).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.into_iter().map(|o| o % self.motifs_per_class).collect()
    }

    fn stamped_slots(&self, sample_index: u64) -> Vec<usize> {
        let s = self.num_slots();
        let n = ((self.motif_fill_fraction * s as f64).round() as usize).min(s);
        let mut order: Vec<usize> = (0..s).collect();
        let mut rng = rng::stream(self.seed, "placement", &[sample_index]);
        for i in 0..n {
            let j = rng.random_range(i..s);
            order.swap(i, j);
        }
        let mut chosen = order[..n].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Motif instances planted in sample `index` (before noise).
    pub fn instances(&self, sample_index: u64) -> Vec<MotifInstance> {
        let class_id = (sample_index % self.num_classes as u64) as usize;
        let layout = self.class_layout(class_id);
        self.stamped_slots(sample_index)
            .into_iter()
            .map(|slot| MotifInstance {
                slot: slot as u32,
                motif: layout[slot] as u32,
            })
            .collect()
    }

    /// Sample `index` of the corpus. A pure function of `(self, index)`.
    pub fn generate(&self, sample_index: u64) -> Result<TokenGrid> {
        self.validate()?;
        let class_id = (sample_index % self.num_classes as u64) as usize;
        let (h, w) = (self.grid_height, self.grid_width);
        let (sr, sc, _, lc) = self.lattice();
        let mut cells = vec![self.background_token(class_id); h * w];
        let instances = self.instances(sample_index);
        for inst in &instances {
            let (r0, c0) = ((inst.slot as usize / lc) * sr, (inst.slot as usize % lc) * sc);
            let (mr, mc) = self.motif_shape(inst.motif as usize);
            let toks = self.motif_tokens(class_id, inst.motif as usize);
            for dr in 0..mr {
                for dc in 0..mc {
                    cells[(r0 + dr) * w + c0 + dc] = toks[dr * mc + dc];
                }
            }
        }
        if self.noise_rate > 0.0 {
            let mut rng = rng::stream(self.seed, "noise", &[sample_index]);
            for c in cells.iter_mut() {
                // Both draws are taken for every cell so the stream stays aligned.
                let hit = rng.random::<f64>() < self.noise_rate;
                let tok = rng.random_range(0..self.vocab_size as u32);
                if hit {
                    *c = tok;
                }
            }
        }
        Ok(TokenGrid {
            height: h,
            width: w,
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            cells,
            class_id,
            prefix: self.prefix_layout().prefix(Some(class_id)),
            origin: Some(GridOrigin {
                spec_fingerprint: self.fingerprint(),
                sample_index,
                instances,
            }),
        })
    }
}

/// Generate samples `[0, count)`; classes cycle round-robin.
pub fn generate_corpus(spec: &CorpusSpec, count: usize) -> Result<Vec<TokenGrid>> {
    generate_range(spec, 0, count)
}

/// Generate samples `[start, start + count)`.
pub fn generate_range(spec: &CorpusSpec, start: u64, count: usize) -> Result<Vec<TokenGrid>> {
    spec.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| spec.generate(start + i))
        .collect()
}

/// Ground-truth semantic similarity of two corpus grids.
///
/// `0.5 * [same class] + 0.5 * shared / max(|A|, |B|)`, where `shared` counts
/// motif instances with identical (class, motif, slot). Grids without planted
/// instances share everything with same-class grids and nothing otherwise.
pub fn pair_similarity(a: &TokenGrid, b: &TokenGrid) -> Result<f64> {
    let (oa, ob) = match (&a.origin, &b.origin) {
        (Some(x), Some(y)) => (x, y),
        _ => return config_err("pair_similarity needs grids with generation metadata"),
    };
    if oa.spec_fingerprint != ob.spec_fingerprint {
        return config_err("grids come from different corpus specs");
    }
    let same = a.class_id == b.class_id;
    let denom = oa.instances.len().max(ob.instances.len());
    let frac = if denom == 0 {
        if same {
            1.0
        } else {
            0.0
        }
    } else if !same {
        0.0
    } else {
        let shared = oa
            .instances
            .iter()
            .filter(|i| ob.instances.contains(i))
            .count();
        shared as f64 / denom as f64
    };
    Ok(0.5 * f64::from(u8::from(same)) + 0.5 * frac)
}

// Serialization: records of (H, W, V, P, class_id) as u32 LE followed by
// P prefix ids and H*W cell ids as u16 LE, plus a JSON manifest.

pub const CORPUS_FILE: &str = "corpus.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub kind: String,
    pub count: usize,
    pub num_classes: usize,
    pub start_index: u64,
    pub spec: Option<CorpusSpec>,
    #[serde(default)]
    pub notes: serde_json::Value,
}

pub fn encode_record(grid: &TokenGrid, out: &mut Vec<u8>) {
    for v in [
        grid.height,
        grid.width,
        grid.vocab_size,
        grid.prefix.len(),
        grid.class_id,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &t in grid.prefix.iter().chain(grid.cells.iter()) {
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
}

pub fn decode_records(bytes: &[u8], num_classes: usize) -> Result<Vec<TokenGrid>> {
    let mut grids = Vec::new();
    let mut pos = 0usize;
    let word = |p: usize| -> Result<u32> {
        bytes
            .get(p..p + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("truncated record header".into()))
    };
    while pos < bytes.len() {
        let h = word(pos)? as usize;
        let w = word(pos + 4)? as usize;
        let v = word(pos + 8)? as usize;
        let p = word(pos + 12)? as usize;
        let class_id = word(pos + 16)? as usize;
        pos += 20;
        let n = p + h * w;
        let body = bytes
            .get(pos..pos + 2 * n)
            .ok_or_else(|| Error::Format("truncated record body".into()))?;
        let ids: Vec<u32> = body
            .chunks_exact(2)
            .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        pos += 2 * n;
        let grid = TokenGrid {
            height: h,
            width: w,
            vocab_size: v,
            num_classes,
            prefix: ids[..p].to_vec(),
            cells: ids[p..].to_vec(),
            class_id,
            origin: None,
        };
        grid.validate()?;
        grids.push(grid);
    }
    Ok(grids)
}

pub fn write_corpus(dir: &Path, manifest: &CorpusManifest, grids: &[TokenGrid]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    for g in grids {
        encode_record(g, &mut bytes);
    }
    fs::File::create(dir.join(CORPUS_FILE))?.write_all(&bytes)?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

/// Read a corpus directory. When the manifest carries a spec, generation
/// metadata is restored by regenerating each sample's layout.
pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<TokenGrid>)> {
    let manifest: CorpusManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join(CORPUS_FILE))?.read_to_end(&mut bytes)?;
    let mut grids = decode_records(&bytes, manifest.num_classes)?;
    if grids.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest lists {} grids, file holds {}",
            manifest.count,
            grids.len()
        )));
    }
    if let Some(spec) = &manifest.spec {
        let fp = spec.fingerprint();
        for (i, g) in grids.iter_mut().enumerate() {
            let index = manifest.start_index + i as u64;
            g.origin = Some(GridOrigin {
                spec_fingerprint: fp,
                sample_index: index,
                instances: spec.instances(index),
            });
        }
    }
    Ok((manifest, grids))
}
