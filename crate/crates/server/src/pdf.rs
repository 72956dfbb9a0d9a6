//! PDF import: content hashing and per-page text extraction.

use lopdf::content::{Content, Operation};
use lopdf::{dictionary, Object, Stream};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum PdfError {
    #[error("not a readable PDF: {0}")]
    Parse(#[from] lopdf::Error),
    #[error("PDF has no pages")]
    NoPages,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    /// Lowercase hex SHA-256 of the file bytes.
    pub content_hash: String,
    pub pages: Vec<String>,
}

impl Extracted {
    pub fn text_layer_empty(&self) -> bool {
        self.pages.iter().all(|p| p.trim().is_empty())
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Extracts one string per page. A page whose text cannot be decoded yields
/// an empty string rather than failing the whole import.
pub fn extract(bytes: &[u8]) -> Result<Extracted, PdfError> {
    let doc = lopdf::Document::load_mem(bytes)?;
    let pages = doc.get_pages();
    if pages.is_empty() {
        return Err(PdfError::NoPages);
    }
    let pages = pages
        .keys()
        .map(|&n| doc.extract_text(&[n]).map(|t| t.trim().to_string()).unwrap_or_default())
        .collect();
    Ok(Extracted { content_hash: content_hash(bytes), pages })
}

/// Builds a small PDF with one line of Courier text per page. An empty
/// string produces a page with no text operators at all.
pub fn build_text_pdf(pages: &[&str]) -> Vec<u8> {
    let mut doc = lopdf::Document::with_version("1.5");
    let pages_id = doc.new_object_id();
    let font_id = doc.add_object(dictionary! {
        "Type" => "Font",
        "Subtype" => "Type1",
        "BaseFont" => "Courier",
    });
    let resources_id = doc.add_object(dictionary! {
        "Font" => dictionary! { "F1" => font_id },
    });
    let mut kids = Vec::new();
    for text in pages {
        let operations = if text.is_empty() {
            vec![Operation::new("re", vec![10.into(), 10.into(), 50.into(), 50.into()]), Operation::new("f", vec![])]
        } else {
            vec![
                Operation::new("BT", vec![]),
                Operation::new("Tf", vec!["F1".into(), 12.into()]),
                Operation::new("Td", vec![50.into(), 700.into()]),
                Operation::new("Tj", vec![Object::string_literal(*text)]),
                Operation::new("ET", vec![]),
            ]
        };
        let content = Content { operations }.encode().expect("encode content");
        let content_id = doc.add_object(Stream::new(dictionary! {}, content));
        let page_id = doc.add_object(dictionary! {
            "Type" => "Page",
            "Parent" => pages_id,
            "Contents" => content_id,
        });
        kids.push(page_id.into());
    }
    let count = kids.len() as i64;
    doc.objects.insert(
        pages_id,
        Object::Dictionary(dictionary! {
            "Type" => "Pages",
            "Kids" => kids,
            "Count" => count,
            "Resources" => resources_id,
            "MediaBox" => vec![0.into(), 0.into(), 595.into(), 842.into()],
        }),
    );
    let catalog_id = doc.add_object(dictionary! {
        "Type" => "Catalog",
        "Pages" => pages_id,
    });
    doc.trailer.set("Root", catalog_id);
    let mut out = Vec::new();
    doc.save_to(&mut out).expect("write PDF to memory");
    out
}
