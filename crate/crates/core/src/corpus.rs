//! Corpus ingestion and the canonical document model.
//!
//! Documents arrive as a JSON manifest (page rasters + OCR + anchor layout)
//! produced by upstream tooling; this module loads them into an immutable
//! in-memory model and provides anchor grounding, caption-name extraction,
//! related-text retrieval and page-subset retrieval.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Pixel budget for the low-resolution ("fast reading") tier.
pub const LOW_TIER_PIXELS: u64 = 262_144;
/// Pixel budget for the high-resolution ("focused thinking") tier.
pub const HIGH_TIER_PIXELS: u64 = 1_204_224;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("missing page image for doc {doc_id} page {page_no}: {path}")]
    MissingPage {
        doc_id: String,
        page_no: u32,
        path: PathBuf,
    },
    #[error("bbox out of bounds for doc {doc_id} page {page_no}: {detail}")]
    BBoxOutOfBounds {
        doc_id: String,
        page_no: u32,
        detail: String,
    },
    #[error("page {page_no} out of range for doc {doc_id} ({page_count} pages)")]
    PageOutOfRange {
        doc_id: String,
        page_no: u32,
        page_count: u32,
    },
    #[error("unknown document {0}")]
    UnknownDocument(String),
}

/// Resolution tier a page image is requested at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Low,
    High,
}

/// Opaque handle to a decoded raster. Cheap to clone, immutable after load.
#[derive(Clone)]
pub struct ImageHandle {
    image: Arc<DynamicImage>,
}

impl ImageHandle {
    pub fn new(image: DynamicImage) -> Self {
        Self {
            image: Arc::new(image),
        }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn pixel_count(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn as_image(&self) -> &DynamicImage {
        &self.image
    }

    /// Stable digest of the raw pixel bytes, used by the mock backend and
    /// for run fingerprints.
    pub fn content_hash(&self) -> String {
        let rgb = self.image.to_rgb8();
        let mut hasher = Sha256::new();
        hasher.update(self.width().to_le_bytes());
        hasher.update(self.height().to_le_bytes());
        hasher.update(rgb.as_raw());
        hex_digest(hasher)
    }

    /// Downscale so the pixel count fits `budget`, preserving aspect ratio.
    /// Images already within budget are returned unchanged.
    pub fn fit_budget(&self, budget: u64) -> ImageHandle {
        if self.pixel_count() <= budget {
            return self.clone();
        }
        let scale = (budget as f64 / self.pixel_count() as f64).sqrt();
        let w = ((self.width() as f64 * scale).floor() as u32).max(1);
        let h = ((self.height() as f64 * scale).floor() as u32).max(1);
        ImageHandle::new(self.image.resize_exact(w, h, image::imageops::FilterType::Triangle))
    }
}

impl fmt::Debug for ImageHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageHandle({}x{})", self.width(), self.height())
    }
}

/// Axis-aligned rectangle in original page pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).map_or(false, |r| r <= width)
            && self.y.checked_add(self.h).map_or(false, |b| b <= height)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcrBlock {
    pub text: String,
    pub bbox: BBox,
}

/// A single document page with both resolution tiers pre-rendered.
#[derive(Debug, Clone)]
pub struct Page {
    pub page_no: u32,
    pub image_low: ImageHandle,
    pub image_high: ImageHandle,
    /// Original raster, kept for anchor crops (bboxes are in original coords).
    pub image_original: ImageHandle,
    pub ocr_text: String,
    pub ocr_blocks: Vec<OcrBlock>,
}

impl Page {
    pub fn image(&self, tier: Tier) -> &ImageHandle {
        match tier {
            Tier::Low => &self.image_low,
            Tier::High => &self.image_high,
        }
    }

    /// Blank-line-delimited OCR paragraphs with their char offsets.
    pub fn paragraphs(&self) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        let mut start = 0usize;
        let mut current = String::new();
        let mut offset = 0usize;
        for line in self.ocr_text.split('\n') {
            if line.trim().is_empty() {
                if !current.trim().is_empty() {
                    out.push((start, current.trim().to_string()));
                }
                current.clear();
                start = offset + line.len() + 1;
            } else {
                if current.is_empty() {
                    start = offset;
                }
                if !current.is_empty() {
                    current.push('\n');
                }
                current.push_str(line);
            }
            offset += line.len() + 1;
        }
        if !current.trim().is_empty() {
            out.push((start, current.trim().to_string()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Figure,
    Chart,
    Table,
    PureText,
}

/// A salient layout element used to seed query synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Anchor {
    pub anchor_id: String,
    pub doc_id: String,
    pub page_no: u32,
    pub kind: AnchorKind,
    pub bbox: BBox,
    pub caption: String,
    /// Canonical name extracted from the caption, e.g. "Figure 5".
    pub name: Option<String>,
    /// Textual parse of the table contents (table anchors only).
    pub ocr_parse: Option<String>,
}

/// Sorted, deduplicated set of 1-based page numbers within one document.
/// Serializes as a plain array, e.g. `[3, 8, 20]`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<u32>", into = "Vec<u32>")]
pub struct PageSet {
    pages: BTreeSet<u32>,
}

impl From<Vec<u32>> for PageSet {
    fn from(pages: Vec<u32>) -> Self {
        Self::from_pages(pages)
    }
}

impl From<PageSet> for Vec<u32> {
    fn from(set: PageSet) -> Self {
        set.pages.into_iter().collect()
    }
}

impl PageSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pages<I: IntoIterator<Item = u32>>(pages: I) -> Self {
        Self {
            pages: pages.into_iter().filter(|&p| p > 0).collect(),
        }
    }

    pub fn insert(&mut self, page: u32) {
        if page > 0 {
            self.pages.insert(page);
        }
    }

    pub fn contains(&self, page: u32) -> bool {
        self.pages.contains(&page)
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.pages.iter().copied()
    }

    pub fn is_subset(&self, other: &PageSet) -> bool {
        self.pages.is_subset(&other.pages)
    }

    pub fn union(&self, other: &PageSet) -> PageSet {
        PageSet {
            pages: self.pages.union(&other.pages).copied().collect(),
        }
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.pages.iter().copied().collect()
    }
}

impl fmt::Display for PageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.pages.iter().map(|p| p.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

impl FromIterator<u32> for PageSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        PageSet::from_pages(iter)
    }
}

#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    pub source_uri: String,
    pub pages: Vec<Page>,
    pub anchors: Vec<Anchor>,
}

impl Document {
    pub fn page_count(&self) -> u32 {
        self.pages.len() as u32
    }

    pub fn page(&self, page_no: u32) -> Result<&Page, CorpusError> {
        if page_no == 0 || page_no > self.page_count() {
            return Err(CorpusError::PageOutOfRange {
                doc_id: self.doc_id.clone(),
                page_no,
                page_count: self.page_count(),
            });
        }
        Ok(&self.pages[(page_no - 1) as usize])
    }

    pub fn all_pages(&self) -> PageSet {
        PageSet::from_pages(1..=self.page_count())
    }
}

/// Immutable corpus, keyed by doc_id.
#[derive(Debug, Default)]
pub struct Corpus {
    docs: BTreeMap<String, Document>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Result<&Document, CorpusError> {
        self.docs
            .get(doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument(doc_id.to_string()))
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    pub fn insert(&mut self, doc: Document) {
        self.docs.insert(doc.doc_id.clone(), doc);
    }
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRoot {
    docs: Vec<ManifestDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    doc_id: String,
    source_uri: String,
    pages: Vec<ManifestPage>,
    #[serde(default)]
    anchors: Vec<ManifestAnchor>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPage {
    page_no: u32,
    image_low: String,
    image_high: String,
    #[serde(default)]
    ocr_text: String,
    #[serde(default)]
    ocr_blocks: Vec<ManifestBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBlock {
    text: String,
    bbox: [u32; 4],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestAnchor {
    anchor_id: String,
    page_no: u32,
    kind: AnchorKind,
    bbox: [u32; 4],
    caption: String,
    #[serde(default)]
    ocr_parse: Option<String>,
}

fn bbox_from(raw: [u32; 4]) -> BBox {
    BBox {
        x: raw[0],
        y: raw[1],
        w: raw[2],
        h: raw[3],
    }
}

/// Load a corpus manifest (see the repository README for the schema) into
/// the canonical model. Page rasters are decoded once and pre-rendered at
/// both tiers; anchors are validated against their page extents.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus, CorpusError> {
    load_corpus_with_budgets(manifest_path, LOW_TIER_PIXELS, HIGH_TIER_PIXELS)
}

pub fn load_corpus_with_budgets(
    manifest_path: &Path,
    low_budget: u64,
    high_budget: u64,
) -> Result<Corpus, CorpusError> {
    let raw = std::fs::read_to_string(manifest_path).map_err(|e| CorpusError::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let manifest: ManifestRoot =
        serde_json::from_str(&raw).map_err(|e| CorpusError::MalformedManifest {
            path: manifest_path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut corpus = Corpus::default();
    for doc in manifest.docs {
        if doc.pages.is_empty() {
            return Err(CorpusError::MalformedManifest {
                path: manifest_path.to_path_buf(),
                reason: format!("doc {} has no pages", doc.doc_id),
            });
        }
        let mut pages = Vec::with_capacity(doc.pages.len());
        for (idx, mp) in doc.pages.iter().enumerate() {
            if mp.page_no != idx as u32 + 1 {
                return Err(CorpusError::MalformedManifest {
                    path: manifest_path.to_path_buf(),
                    reason: format!(
                        "doc {}: pages must be 1-indexed and contiguous, found page_no {} at position {}",
                        doc.doc_id,
                        mp.page_no,
                        idx + 1
                    ),
                });
            }
            // image_high may reference the same file as image_low; both are
            // budget-fitted from whatever was provided.
            let original = load_image(base, &mp.image_high, &doc.doc_id, mp.page_no)?;
            let low_src = if mp.image_low == mp.image_high {
                original.clone()
            } else {
                load_image(base, &mp.image_low, &doc.doc_id, mp.page_no)?
            };
            let mut blocks = Vec::with_capacity(mp.ocr_blocks.len());
            for block in &mp.ocr_blocks {
                let bbox = bbox_from(block.bbox);
                if !bbox.fits_within(original.width(), original.height()) {
                    return Err(CorpusError::BBoxOutOfBounds {
                        doc_id: doc.doc_id.clone(),
                        page_no: mp.page_no,
                        detail: format!("ocr block bbox {:?} exceeds page extent", bbox),
                    });
                }
                blocks.push(OcrBlock {
                    text: block.text.clone(),
                    bbox,
                });
            }
            pages.push(Page {
                page_no: mp.page_no,
                image_low: low_src.fit_budget(low_budget),
                image_high: original.fit_budget(high_budget),
                image_original: original,
                ocr_text: mp.ocr_text.clone(),
                ocr_blocks: blocks,
            });
        }
        let mut anchors = Vec::with_capacity(doc.anchors.len());
        for ma in &doc.anchors {
            let page = pages
                .get(ma.page_no.wrapping_sub(1) as usize)
                .ok_or_else(|| CorpusError::PageOutOfRange {
                    doc_id: doc.doc_id.clone(),
                    page_no: ma.page_no,
                    page_count: pages.len() as u32,
                })?;
            let bbox = bbox_from(ma.bbox);
            if !bbox.fits_within(page.image_original.width(), page.image_original.height()) {
                return Err(CorpusError::BBoxOutOfBounds {
                    doc_id: doc.doc_id.clone(),
                    page_no: ma.page_no,
                    detail: format!("anchor {} bbox {:?} exceeds page extent", ma.anchor_id, bbox),
                });
            }
            anchors.push(Anchor {
                anchor_id: ma.anchor_id.clone(),
                doc_id: doc.doc_id.clone(),
                page_no: ma.page_no,
                kind: ma.kind,
                bbox,
                caption: ma.caption.clone(),
                name: extract_name(&ma.caption),
                ocr_parse: ma.ocr_parse.clone(),
            });
        }
        corpus.insert(Document {
            doc_id: doc.doc_id,
            source_uri: doc.source_uri,
            pages,
            anchors,
        });
    }
    Ok(corpus)
}

fn load_image(
    base: &Path,
    rel: &str,
    doc_id: &str,
    page_no: u32,
) -> Result<ImageHandle, CorpusError> {
    let path = base.join(rel);
    let img = image::open(&path).map_err(|_| CorpusError::MissingPage {
        doc_id: doc_id.to_string(),
        page_no,
        path,
    })?;
    Ok(ImageHandle::new(img))
}

// ---------------------------------------------------------------------------
// Anchor grounding
// ---------------------------------------------------------------------------

/// Extract the canonical anchor name from a caption: a leading
/// Figure/Fig./Table/Chart token plus a number, case-insensitive, with
/// optional trailing punctuation. Canonicalized to "<Kind> <N>". Captions
/// with any other shape yield `None`.
pub fn extract_name(caption: &str) -> Option<String> {
    let trimmed = caption.trim_start();
    let lower = trimmed.to_lowercase();
    let (kind, rest) = if let Some(rest) = lower.strip_prefix("figure") {
        ("Figure", rest)
    } else if let Some(rest) = lower.strip_prefix("fig") {
        ("Figure", rest.strip_prefix('.').unwrap_or(rest))
    } else if let Some(rest) = lower.strip_prefix("table") {
        ("Table", rest)
    } else if let Some(rest) = lower.strip_prefix("chart") {
        ("Chart", rest)
    } else {
        return None;
    };
    let rest = rest.trim_start();
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    Some(format!("{kind} {digits}"))
}

/// Short form a document body might use to cite an anchor ("Fig. 5" for
/// "Figure 5"). Tables and charts have no conventional abbreviation.
fn abbreviated(name: &str) -> Option<String> {
    name.strip_prefix("Figure ").map(|n| format!("Fig. {n}"))
}

/// Related-text retrieval: every OCR paragraph in the document containing
/// the anchor name (canonical or abbreviated, case-insensitive), ordered by
/// page then offset. The caption paragraph itself matches like any other.
pub fn retrieve_related_text(doc: &Document, name: &str) -> Vec<(u32, String)> {
    let needles: Vec<String> = std::iter::once(name.to_lowercase())
        .chain(abbreviated(name).map(|a| a.to_lowercase()))
        .collect();
    let mut hits = Vec::new();
    for page in &doc.pages {
        for (_offset, para) in page.paragraphs() {
            let lower = para.to_lowercase();
            if needles.iter().any(|n| lower.contains(n.as_str())) {
                hits.push((page.page_no, para));
            }
        }
    }
    hits
}

/// A page as seen at a specific resolution tier.
#[derive(Debug, Clone)]
pub struct PageView<'a> {
    pub page_no: u32,
    pub tier: Tier,
    pub image: &'a ImageHandle,
    pub ocr_text: &'a str,
}

/// Page-subset retrieval at the requested tier, ascending page order.
pub fn retrieve<'a>(
    doc: &'a Document,
    pages: &PageSet,
    tier: Tier,
) -> Result<Vec<PageView<'a>>, CorpusError> {
    let mut out = Vec::with_capacity(pages.len());
    for page_no in pages.iter() {
        let page = doc.page(page_no)?;
        out.push(PageView {
            page_no,
            tier,
            image: page.image(tier),
            ocr_text: &page.ocr_text,
        });
    }
    Ok(out)
}

/// Crop the anchor's bbox from its page at the high tier. The bbox is given
/// in original page coordinates and scaled to the high-tier raster.
pub fn crop_anchor(doc: &Document, anchor: &Anchor) -> Result<ImageHandle, CorpusError> {
    let page = doc.page(anchor.page_no)?;
    let orig = &page.image_original;
    if anchor.bbox.area() == 0 || !anchor.bbox.fits_within(orig.width(), orig.height()) {
        return Err(CorpusError::BBoxOutOfBounds {
            doc_id: doc.doc_id.clone(),
            page_no: anchor.page_no,
            detail: format!("anchor {} bbox {:?}", anchor.anchor_id, anchor.bbox),
        });
    }
    let high = &page.image_high;
    let sx = high.width() as f64 / orig.width() as f64;
    let sy = high.height() as f64 / orig.height() as f64;
    let x = (anchor.bbox.x as f64 * sx).round() as u32;
    let y = (anchor.bbox.y as f64 * sy).round() as u32;
    let w = ((anchor.bbox.w as f64 * sx).round() as u32).max(1);
    let h = ((anchor.bbox.h as f64 * sy).round() as u32).max(1);
    let w = w.min(high.width() - x.min(high.width()));
    let h = h.min(high.height() - y.min(high.height()));
    Ok(ImageHandle::new(high.as_image().crop_imm(x, y, w, h)))
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
