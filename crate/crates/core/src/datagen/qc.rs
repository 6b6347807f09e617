use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::objective::cosine;

/// Maximum cosine similarity a new caption may have to existing ones.
pub const DEDUP_THRESHOLD: f64 = 0.9;

/// Element a caption must mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Element {
    /// An imaging modality.
    Modality,
    /// A region descriptor: an anatomical category or a location word.
    Category,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QcReport {
    pub passed: bool,
    pub missing: Vec<Element>,
}

/// Keyword tables used by [`qc_required_elements`]. Keywords may span
/// several words; matching is case-insensitive on whole words.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordRegistry {
    pub modalities: Vec<String>,
    pub categories: Vec<String>,
    pub locations: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| String::from(*s)).collect()
}

impl Default for KeywordRegistry {
    fn default() -> Self {
        Self {
            modalities: strings(&[
                "ct", "mri", "mr", "x-ray", "xray", "radiograph", "ultrasound", "pet", "spect",
                "computed tomography", "magnetic resonance", "mammography", "fundus", "oct", "endoscopy",
                "dermoscopy", "histopathology",
            ]),
            categories: strings(&[
                "liver", "kidney", "spleen", "pancreas", "lesion", "tumor", "tumour", "mass", "nodule", "lung",
                "heart", "aorta", "stomach", "gallbladder", "bladder", "prostate", "brain", "bone", "vessel",
                "cyst", "polyp", "colon", "esophagus", "adrenal", "duodenum", "uterus", "breast",
            ]),
            locations: strings(&[
                "upper-left", "upper-center", "upper-right", "middle-left", "center", "middle-right",
                "lower-left", "lower-center", "lower-right", "left", "right", "upper", "lower", "central",
                "middle", "anterior", "posterior", "superior", "inferior",
            ]),
        }
    }
}

impl KeywordRegistry {
    /// Add a category keyword if it is not already known.
    pub fn add_category(&mut self, category: &str) {
        let c = category.to_lowercase();
        if !self.categories.contains(&c) {
            self.categories.push(c);
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

fn contains_any(caption_words: &[String], keywords: &[String]) -> bool {
    keywords.iter().any(|k| {
        let kw = words(k);
        !kw.is_empty() && caption_words.windows(kw.len()).any(|w| w == kw.as_slice())
    })
}

/// Pass iff the caption names a modality and a category or location.
pub fn qc_required_elements(caption: &str, registry: &KeywordRegistry) -> QcReport {
    let w = words(caption);
    let mut missing = Vec::new();
    if !contains_any(&w, &registry.modalities) {
        missing.push(Element::Modality);
    }
    if !contains_any(&w, &registry.categories) && !contains_any(&w, &registry.locations) {
        missing.push(Element::Category);
    }
    QcReport { passed: missing.is_empty(), missing }
}

/// Outcome of the semantic duplicate check.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupDecision {
    pub max_similarity: f64,
    pub threshold: f64,
    pub accepted: bool,
    pub regeneration_count: usize,
}

/// Compare a candidate embedding against a corpus of embeddings. An empty
/// corpus accepts with `max_similarity = -1`.
pub fn dedup_decision(candidate: &[f64], corpus: &[Vec<f64>]) -> Result<DedupDecision> {
    let mut max = -1.0f64;
    for v in corpus {
        max = max.max(cosine(candidate, v)?);
    }
    Ok(DedupDecision { max_similarity: max, threshold: DEDUP_THRESHOLD, accepted: max <= DEDUP_THRESHOLD, regeneration_count: 0 })
}

/// Embed `candidate` and `corpus` with `embed` and run [`dedup_decision`].
pub fn qc_dedup(
    candidate: &str,
    corpus: &[&str],
    embed: &mut dyn FnMut(&str) -> Result<Vec<f64>>,
) -> Result<DedupDecision> {
    let c = embed(candidate)?;
    let vs = corpus.iter().map(|t| embed(t)).collect::<Result<Vec<_>>>()?;
    dedup_decision(&c, &vs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn required_elements() {
        let reg = KeywordRegistry::default();
        assert!(qc_required_elements("The CT image shows the liver in the upper-left region", &reg).passed);
        let r = qc_required_elements("A nice picture", &reg);
        assert!(!r.passed);
        assert_eq!(r.missing, alloc::vec![Element::Modality, Element::Category]);
        // Whole words only: "struct" is not "us", "liverish" is not "liver".
        assert!(!qc_required_elements("a liverish structure", &reg).passed);
        assert!(qc_required_elements("Computed Tomography of the LEFT side", &reg).passed);
    }

    #[test]
    fn dedup_edges() {
        let a = alloc::vec![1.0, 0.0];
        let d = dedup_decision(&a, &[a.clone()]).unwrap();
        assert!(!d.accepted);
        assert!((d.max_similarity - 1.0).abs() < 1e-12);
        let d = dedup_decision(&a, &[alloc::vec![0.0, 3.0]]).unwrap();
        assert!(d.accepted && d.max_similarity == 0.0);
        let d = dedup_decision(&a, &[]).unwrap();
        assert!(d.accepted && d.max_similarity == -1.0);
    }
}
