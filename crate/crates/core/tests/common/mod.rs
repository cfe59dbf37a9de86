//! Shared on-disk corpus fixture for integration tests: two documents with
//! generated page rasters, OCR text, and layout anchors.

use std::fs;
use std::path::PathBuf;

use image::{ImageBuffer, Rgb};
use serde_json::json;
use tempfile::TempDir;

pub struct Fixture {
    /// Holding the tempdir keeps the fixture files alive.
    #[allow(dead_code)]
    pub dir: TempDir,
    pub manifest: PathBuf,
}

/// Deterministic small raster whose pixels depend on (doc, page) so image
/// hashes are distinct across pages.
pub fn write_page_png(path: &PathBuf, doc_tag: u8, page_no: u32) {
    let img = ImageBuffer::from_fn(64, 80, |x, y| {
        let v = (x as u32 * 7 + y as u32 * 13 + page_no * 31 + doc_tag as u32 * 101) % 251;
        Rgb([v as u8, (v * 3 % 251) as u8, (v * 7 % 251) as u8])
    });
    img.save(path).expect("write fixture png");
}

/// Build the fixture corpus:
/// - doc-a: 8 pages; a figure anchor with cross-page related text (pages 3
///   and 7), a table anchor, a pure-text anchor, and a "planted" figure
///   anchor on page 6 whose caption marks it for unsolvable-verdict
///   scripting in tests.
/// - doc-b: 25 pages, no anchors (page-count slicing, pipeline sweeps).
pub fn build_fixture() -> Fixture {
    let dir = TempDir::new().expect("fixture tempdir");
    let root = dir.path();
    let mut docs = Vec::new();

    let mut pages_a = Vec::new();
    for page_no in 1..=8u32 {
        let file = root.join(format!("a-{page_no}.png"));
        write_page_png(&file, 1, page_no);
        let ocr_text = match page_no {
            1 => "Introduction. This report summarizes the fiscal year.\n\nMethods follow the prior annual report.".to_string(),
            3 => "Figure 2: Quarterly revenue by region\n\nRevenue is broken out by region and quarter.".to_string(),
            5 => "Table 1: Headcount by office\n\nStaffing stayed flat through the year.".to_string(),
            6 => "Figure 9: Corrupted scan\n\nThe source image is illegible.".to_string(),
            7 => "As Figure 2 shows, revenue grew in every region.\n\nThe outlook remains stable.".to_string(),
            other => format!("Filler prose for page {other}.\n\nNothing of note here."),
        };
        pages_a.push(json!({
            "page_no": page_no,
            "image_low": file.display().to_string(),
            "image_high": file.display().to_string(),
            "ocr_text": ocr_text,
        }));
    }
    docs.push(json!({
        "doc_id": "doc-a",
        "source_uri": "fixture://doc-a",
        "pages": pages_a,
        "anchors": [
            {
                "anchor_id": "a-fig2",
                "page_no": 3,
                "kind": "figure",
                "bbox": [4, 4, 40, 30],
                "caption": "Figure 2: Quarterly revenue by region"
            },
            {
                "anchor_id": "a-tab1",
                "page_no": 5,
                "kind": "table",
                "bbox": [2, 10, 50, 40],
                "caption": "Table 1: Headcount by office",
                "ocr_parse": "office,count\nParis,10\nOslo,12"
            },
            {
                "anchor_id": "a-intro",
                "page_no": 1,
                "kind": "pure_text",
                "bbox": [0, 0, 64, 40],
                "caption": "Introduction"
            },
            {
                "anchor_id": "a-planted",
                "page_no": 6,
                "kind": "figure",
                "bbox": [8, 8, 30, 30],
                "caption": "Figure 9: Corrupted scan"
            }
        ]
    }));

    let mut pages_b = Vec::new();
    for page_no in 1..=25u32 {
        let file = root.join(format!("b-{page_no}.png"));
        write_page_png(&file, 2, page_no);
        pages_b.push(json!({
            "page_no": page_no,
            "image_low": file.display().to_string(),
            "image_high": file.display().to_string(),
            "ocr_text": format!("Body text of page {page_no}."),
        }));
    }
    docs.push(json!({
        "doc_id": "doc-b",
        "source_uri": "fixture://doc-b",
        "pages": pages_b,
        "anchors": []
    }));

    let manifest = root.join("manifest.json");
    fs::write(
        &manifest,
        serde_json::to_string_pretty(&json!({ "docs": docs })).unwrap(),
    )
    .expect("write fixture manifest");
    Fixture { dir, manifest }
}
