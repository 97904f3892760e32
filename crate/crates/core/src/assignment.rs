//! Caption assignment for retrieved in-context images and rendering of the
//! interleaved demonstration prompt.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::Role;
use crate::text_metrics::{cider, DocumentFrequency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaptionSource {
    /// First human-labelled caption.
    Fhl,
    #[serde(rename = "MGC_TF_60")]
    MgcTf60,
    #[serde(rename = "MGC_TF_80")]
    MgcTf80,
    #[serde(rename = "MGC_TF_135")]
    MgcTf135,
    #[serde(rename = "MGC_LMM_0")]
    MgcLmm0,
    #[serde(rename = "MGC_LMM_32")]
    MgcLmm32,
    /// Human caption closest (by CIDEr) to the converged small-captioner output.
    MhlTf,
    /// Human caption closest to the LMM's own 32-shot output.
    MhlLmm,
    /// Human caption farthest from the converged small-captioner output.
    InvMhlTf,
}

impl CaptionSource {
    pub const ALL: [CaptionSource; 9] = [
        CaptionSource::Fhl,
        CaptionSource::MgcTf60,
        CaptionSource::MgcTf80,
        CaptionSource::MgcTf135,
        CaptionSource::MgcLmm0,
        CaptionSource::MgcLmm32,
        CaptionSource::MhlTf,
        CaptionSource::MhlLmm,
        CaptionSource::InvMhlTf,
    ];

    pub fn is_machine_tier(self) -> bool {
        matches!(
            self,
            CaptionSource::MgcTf60
                | CaptionSource::MgcTf80
                | CaptionSource::MgcTf135
                | CaptionSource::MgcLmm0
                | CaptionSource::MgcLmm32
        )
    }

    /// Machine tier an MHL strategy compares against, and the direction.
    pub fn mhl_anchor(self) -> Option<(CaptionSource, MhlMode)> {
        match self {
            CaptionSource::MhlTf => Some((CaptionSource::MgcTf135, MhlMode::Maximize)),
            CaptionSource::MhlLmm => Some((CaptionSource::MgcLmm32, MhlMode::Maximize)),
            CaptionSource::InvMhlTf => Some((CaptionSource::MgcTf135, MhlMode::Minimize)),
            _ => None,
        }
    }
}

impl fmt::Display for CaptionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string tag"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MhlMode {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    #[serde(default)]
    pub human_captions: Vec<String>,
    #[serde(default)]
    pub machine_captions: BTreeMap<CaptionSource, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_objects: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetFile {
    images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionDataset {
    images: Vec<ImageEntry>,
    index: HashMap<String, usize>,
}

impl CaptionDataset {
    pub fn new(images: Vec<ImageEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate image id `{}` in caption dataset", img.id)));
            }
            if let Some(tag) = img.machine_captions.keys().find(|t| !t.is_machine_tier()) {
                return Err(Error::data(format!(
                    "image `{}`: `{tag}` is not a machine caption tier",
                    img.id
                )));
            }
        }
        Ok(Self { images, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(file.images)
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.images
    }

    /// Mutable access for fixture construction; ids must not be changed.
    pub fn images_mut(&mut self) -> &mut [ImageEntry] {
        &mut self.images
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImageEntry> {
        self.index.get(id).map(|&i| &self.images[i])
    }

    fn entry(&self, id: &str) -> Result<&ImageEntry> {
        self.get(id)
            .ok_or_else(|| Error::data(format!("image `{id}` not in caption dataset")))
    }

    pub fn gt_objects(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.get(id).and_then(|e| e.gt_objects.as_ref())
    }

    fn human_captions(&self, id: &str) -> Result<&[String]> {
        let entry = self.entry(id)?;
        if entry.human_captions.is_empty() {
            return Err(Error::data(format!("image `{id}` has no human captions")));
        }
        Ok(&entry.human_captions)
    }
}

pub fn assign_fhl(image_id: &str, ds: &CaptionDataset) -> Result<String> {
    Ok(ds.human_captions(image_id)?[0].clone())
}

pub fn assign_mgc(image_id: &str, tier: CaptionSource, ds: &CaptionDataset) -> Result<String> {
    if !tier.is_machine_tier() {
        return Err(Error::domain(format!("`{tier}` is not a machine caption tier")));
    }
    ds.entry(image_id)?
        .machine_captions
        .get(&tier)
        .cloned()
        .ok_or_else(|| Error::data(format!("image `{image_id}` has no `{tier}` caption")))
}

/// Sentence-level CIDEr of each human caption (candidate) against the
/// machine caption (sole reference), with the image's human captions as the
/// document-frequency corpus, one caption per document.
pub fn mhl_scores(image_id: &str, anchor_tier: CaptionSource, ds: &CaptionDataset) -> Result<Vec<f64>> {
    let humans = ds.human_captions(image_id)?;
    let machine = assign_mgc(image_id, anchor_tier, ds)?;
    let df = DocumentFrequency::from_documents(humans.iter().map(|h| [h.as_str()]));
    Ok(humans.iter().map(|h| cider(h, &[machine.as_str()], &df)).collect())
}

pub fn assign_mhl(image_id: &str, anchor_tier: CaptionSource, ds: &CaptionDataset, mode: MhlMode) -> Result<String> {
    let scores = mhl_scores(image_id, anchor_tier, ds)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let better = match mode {
            MhlMode::Maximize => s > scores[best],
            MhlMode::Minimize => s < scores[best],
        };
        if better {
            best = i;
        }
    }
    Ok(ds.human_captions(image_id)?[best].clone())
}

/// Dispatches on `source` to the matching strategy.
pub fn assign(image_id: &str, source: CaptionSource, ds: &CaptionDataset) -> Result<String> {
    match source {
        CaptionSource::Fhl => assign_fhl(image_id, ds),
        s if s.is_machine_tier() => assign_mgc(image_id, s, ds),
        s => {
            let (tier, mode) = s.mhl_anchor().expect("remaining sources are MHL");
            assign_mhl(image_id, tier, ds, mode)
        }
    }
}

/// Trims surrounding whitespace and ensures exactly one terminal period.
pub fn normalize_caption(caption: &str) -> Result<String> {
    let body = caption.trim().trim_end_matches(|c: char| c == '.' || c.is_whitespace());
    if body.is_empty() {
        return Err(Error::data(format!("caption {caption:?} is empty after normalization")));
    }
    Ok(format!("{body}."))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IceItem {
    pub image_id: String,
    pub caption: String,
    pub source: CaptionSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSequence {
    pub ices: Vec<IceItem>,
    pub query_image_id: String,
    pub shot_count: usize,
}

/// Prompt rendering rules. The three format strings are filled from the
/// marker fields; placeholders are `{bos}`, `{image}`, `{caption}`,
/// `{delimiter}` and `{cue}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub bos: String,
    pub image: String,
    pub delimiter: String,
    pub cue: String,
    pub prefix: String,
    pub item: String,
    pub query: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            bos: "<BOS>".into(),
            image: "<image>".into(),
            delimiter: "<endofchunk>".into(),
            cue: "Caption:".into(),
            prefix: "{bos}".into(),
            item: "{image}{caption}{delimiter}".into(),
            query: "{image}{cue}".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Bos,
    Image,
    Caption,
    Delimiter,
    Cue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

fn parse_format(format: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = format;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_owned()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed placeholder in template {format:?}")))?
            + open;
        let slot = match &rest[open + 1..close] {
            "bos" => Slot::Bos,
            "image" => Slot::Image,
            "caption" => Slot::Caption,
            "delimiter" => Slot::Delimiter,
            "cue" => Slot::Cue,
            other => return Err(Error::Config(format!("unknown template placeholder {{{other}}}"))),
        };
        pieces.push(Piece::Slot(slot));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_owned()));
    }
    Ok(pieces)
}

fn require_slots(name: &str, pieces: &[Piece], required: &[Slot]) -> Result<()> {
    let count = |slot| pieces.iter().filter(|p| **p == Piece::Slot(slot)).count();
    for &slot in required {
        if count(slot) != 1 {
            return Err(Error::Config(format!(
                "template `{name}` must contain {slot:?} exactly once"
            )));
        }
    }
    let allowed: BTreeSet<_> = required.iter().map(|s| format!("{s:?}")).collect();
    if let Some(Piece::Slot(extra)) = pieces
        .iter()
        .find(|p| matches!(p, Piece::Slot(s) if !allowed.contains(&format!("{s:?}"))))
    {
        return Err(Error::Config(format!("template `{name}` may not use {extra:?}")));
    }
    Ok(())
}

struct ParsedTemplate {
    prefix: Vec<Piece>,
    item: Vec<Piece>,
    query: Vec<Piece>,
}

impl PromptTemplate {
    fn parse(&self) -> Result<ParsedTemplate> {
        let prefix = parse_format(&self.prefix)?;
        let item = parse_format(&self.item)?;
        let query = parse_format(&self.query)?;
        require_slots("prefix", &prefix, &[Slot::Bos])?;
        require_slots("item", &item, &[Slot::Image, Slot::Caption, Slot::Delimiter])?;
        require_slots("query", &query, &[Slot::Image, Slot::Cue])?;
        for (name, marker) in [("bos", &self.bos), ("image", &self.image), ("delimiter", &self.delimiter)] {
            if marker.is_empty() {
                return Err(Error::Config(format!("template marker `{name}` is empty")));
            }
        }
        Ok(ParsedTemplate { prefix, item, query })
    }

    pub fn validate(&self) -> Result<()> {
        self.parse().map(|_| ())
    }
}

/// Byte range of the rendered prompt carrying one role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpan {
    pub role: Role,
    pub ice_index: Option<usize>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSequence {
    pub sequence: DemoSequence,
    pub prompt: String,
    pub layout: Vec<RoleSpan>,
}

struct Renderer<'a> {
    template: &'a PromptTemplate,
    text: String,
    layout: Vec<RoleSpan>,
}

impl Renderer<'_> {
    fn push(&mut self, s: &str, role: Role, ice_index: Option<usize>) {
        let start = self.text.len();
        self.text.push_str(s);
        if role != Role::Other && !s.is_empty() {
            self.layout.push(RoleSpan {
                role,
                ice_index,
                start,
                end: self.text.len(),
            });
        }
    }

    fn render(&mut self, pieces: &[Piece], ice_index: Option<usize>, caption: Option<&str>) {
        let t = self.template;
        for piece in pieces {
            match piece {
                Piece::Text(s) => self.push(s, Role::Other, ice_index),
                Piece::Slot(Slot::Bos) => self.push(&t.bos, Role::Bos, None),
                Piece::Slot(Slot::Image) => self.push(&t.image, Role::ImageMark, ice_index),
                Piece::Slot(Slot::Delimiter) => self.push(&t.delimiter, Role::Delim, ice_index),
                Piece::Slot(Slot::Cue) => self.push(&t.cue, Role::Query, None),
                Piece::Slot(Slot::Caption) => {
                    let caption = caption.expect("caption slot only in item format");
                    let body = &caption[..caption.len() - 1];
                    self.push(body, Role::ContextText, ice_index);
                    self.push(".", Role::Period, ice_index);
                }
            }
        }
    }
}

/// Renders `ices` followed by the query image. Captions are normalized first.
pub fn build_sequence(ices: &[IceItem], query_image_id: &str, template: &PromptTemplate) -> Result<RenderedSequence> {
    if ices.is_empty() {
        return Err(Error::domain("a demonstration sequence needs at least one in-context example"));
    }
    if ices.iter().any(|ice| ice.image_id == query_image_id) {
        return Err(Error::domain(format!(
            "query image `{query_image_id}` also appears as an in-context example"
        )));
    }
    let parsed = template.parse()?;
    let ices = ices
        .iter()
        .map(|ice| {
            Ok(IceItem {
                caption: normalize_caption(&ice.caption)?,
                ..ice.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut r = Renderer {
        template,
        text: String::new(),
        layout: Vec::new(),
    };
    r.render(&parsed.prefix, None, None);
    for (k, ice) in ices.iter().enumerate() {
        r.render(&parsed.item, Some(k), Some(&ice.caption));
    }
    r.render(&parsed.query, None, None);

    let shot_count = ices.len();
    Ok(RenderedSequence {
        sequence: DemoSequence {
            ices,
            query_image_id: query_image_id.to_owned(),
            shot_count,
        },
        prompt: r.text,
        layout: r.layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ice(id: &str, caption: &str) -> IceItem {
        IceItem {
            image_id: id.into(),
            caption: caption.into(),
            source: CaptionSource::Fhl,
        }
    }

    fn entry(id: &str, humans: &[&str], machine: &[(CaptionSource, &str)]) -> ImageEntry {
        ImageEntry {
            id: id.into(),
            human_captions: humans.iter().map(|s| (*s).to_owned()).collect(),
            machine_captions: machine.iter().map(|(t, c)| (*t, (*c).to_owned())).collect(),
            gt_objects: None,
        }
    }

    #[test]
    fn fhl_is_positional() {
        let ds = CaptionDataset::new(vec![entry("a", &["A", "B", "C"], &[]), entry("b", &["A"], &[])]).unwrap();
        assert_eq!(assign_fhl("a", &ds).unwrap(), "A");
        assert_eq!(assign_fhl("b", &ds).unwrap(), "A");
        let empty = CaptionDataset::new(vec![entry("c", &[], &[])]).unwrap();
        assert!(matches!(assign_fhl("c", &empty), Err(Error::Data(_))));
    }

    #[test]
    fn mgc_lookup() {
        let ds = CaptionDataset::new(vec![entry("a", &["h"], &[(CaptionSource::MgcTf135, "tf135 caption")])]).unwrap();
        assert_eq!(assign_mgc("a", CaptionSource::MgcTf135, &ds).unwrap(), "tf135 caption");
        let err = assign_mgc("a", CaptionSource::MgcLmm0, &ds).unwrap_err();
        assert!(err.to_string().contains("MGC_LMM_0") && err.to_string().contains('a'));
    }

    #[test]
    fn dataset_rejects_non_machine_tags() {
        assert!(CaptionDataset::new(vec![entry("a", &["h"], &[(CaptionSource::Fhl, "x")])]).is_err());
    }

    #[test]
    fn mhl_exact_match_wins() {
        let humans = [
            "a man riding a wave on a surfboard",
            "a surfer in the ocean",
            "a person on a board in the water",
            "a dog sitting on a red couch",
            "people at the beach",
        ];
        let ds = CaptionDataset::new(vec![entry(
            "a",
            &humans,
            &[(CaptionSource::MgcTf135, "a person on a board in the water")],
        )])
        .unwrap();
        assert_eq!(
            assign_mhl("a", CaptionSource::MgcTf135, &ds, MhlMode::Maximize).unwrap(),
            humans[2]
        );
        let min = assign_mhl("a", CaptionSource::MgcTf135, &ds, MhlMode::Minimize).unwrap();
        assert_ne!(min, humans[2]);
        assert_eq!(assign("a", CaptionSource::MhlTf, &ds).unwrap(), humans[2]);
        assert_eq!(assign("a", CaptionSource::InvMhlTf, &ds).unwrap(), min);
    }

    #[test]
    fn mhl_single_caption() {
        let ds = CaptionDataset::new(vec![entry("a", &["only"], &[(CaptionSource::MgcTf135, "x y")])]).unwrap();
        for mode in [MhlMode::Maximize, MhlMode::Minimize] {
            assert_eq!(assign_mhl("a", CaptionSource::MgcTf135, &ds, mode).unwrap(), "only");
        }
    }

    #[test]
    fn caption_normalization() {
        assert_eq!(normalize_caption("  a cat sits ").unwrap(), "a cat sits.");
        assert_eq!(normalize_caption("a cat sits.").unwrap(), "a cat sits.");
        assert_eq!(normalize_caption("A Cat sits... ").unwrap(), "A Cat sits.");
        assert!(normalize_caption(" . ").is_err());
    }

    #[test]
    fn single_item_render() {
        let out = build_sequence(&[ice("cat.jpg", "a cat sits.")], "q.jpg", &PromptTemplate::default()).unwrap();
        assert_eq!(out.prompt, "<BOS><image>a cat sits.<endofchunk><image>Caption:");
        let roles: Vec<_> = out.layout.iter().map(|s| (s.role, s.ice_index)).collect();
        assert_eq!(
            roles,
            vec![
                (Role::Bos, None),
                (Role::ImageMark, Some(0)),
                (Role::ContextText, Some(0)),
                (Role::Period, Some(0)),
                (Role::Delim, Some(0)),
                (Role::ImageMark, None),
                (Role::Query, None),
            ]
        );
        let text_of = |i: usize| &out.prompt[out.layout[i].start..out.layout[i].end];
        assert_eq!(text_of(2), "a cat sits");
        assert_eq!(text_of(3), ".");
    }

    #[test]
    fn missing_period_appended_once() {
        let out = build_sequence(&[ice("a", "a dog")], "q", &PromptTemplate::default()).unwrap();
        assert!(out.prompt.contains("a dog.<endofchunk>"));
        assert_eq!(out.sequence.ices[0].caption, "a dog.");
    }

    #[test]
    fn rejects_empty_and_collision() {
        let t = PromptTemplate::default();
        assert!(build_sequence(&[], "q", &t).is_err());
        assert!(build_sequence(&[ice("q", "x")], "q", &t).is_err());
    }

    #[test]
    fn template_validation() {
        let mut t = PromptTemplate {
            item: "{image}{caption}".into(),
            ..Default::default()
        };
        assert!(t.validate().is_err());
        t.item = "{image}{caption}{delimiter}{cue}".into();
        assert!(t.validate().is_err());
        t.item = "{image}{caption}{delimiter}{oops}".into();
        assert!(t.validate().is_err());
        t.item = "{image} {caption}\n{delimiter}".into();
        assert!(t.validate().is_ok());
    }

    #[test]
    fn source_tags_serialize() {
        let names: Vec<String> = CaptionSource::ALL.iter().map(|s| s.to_string()).collect();
        assert_eq!(
            names,
            ["FHL", "MGC_TF_60", "MGC_TF_80", "MGC_TF_135", "MGC_LMM_0", "MGC_LMM_32", "MHL_TF", "MHL_LMM", "INV_MHL_TF"]
        );
    }
}
