use alloc::string::String;
use alloc::vec::Vec;

use super::stats::MaskStats;
use crate::error::{invalid, Result};

/// Caption templates. Slots: `{modality}`, `{category}`, `{location}`,
/// `{size}`, `{shape}` plus the synonym slots `{shows}`, `{marked}` and
/// `{marks}`.
pub const TEMPLATES: [&str; 9] = [
    "The {modality} image {shows} the {size} {category} in the {location} region {marked} by the overlaid mask.",
    "A {modality} scan {shows} a {size}, {shape} {category} located in the {location} region.",
    "{category} in the {location} region of this {modality} image, {marked} by the mask.",
    "In the {location} region of the {modality} image, the mask {marks} a {shape} {category}.",
    "The overlaid mask on this {modality} image {marks} the {category}, a {size} {shape} structure in the {location} region.",
    "{modality} image: {size} {category} with a {shape} outline in the {location} region.",
    "The {category} appears {size} and {shape} in the {location} region of the {modality} image.",
    "This {modality} image {shows} the {category} occupying the {location} region.",
    "a {modality} image of the {category}",
];

/// Index of the short category-only template.
pub const CLASS_TEMPLATE: usize = 8;

const SHOWS: [&str; 4] = ["shows", "depicts", "displays", "presents"];
const MARKED: [&str; 4] = ["highlighted", "outlined", "delineated", "marked"];
const MARKS: [&str; 4] = ["highlights", "outlines", "delineates", "marks"];

/// Slot values for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSlots<'a> {
    pub modality: &'a str,
    pub category: &'a str,
    pub stats: &'a MaskStats,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic 64-bit combination of two seeds.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    mix(a ^ mix(b))
}

fn synonym(table: &[&'static str], variant_seed: u64, slot: u64) -> &'static str {
    if variant_seed == 0 {
        table[0]
    } else {
        table[(derive_seed(variant_seed, slot) % table.len() as u64) as usize]
    }
}

/// Fill a template. Variant seed 0 uses the first synonym of every slot.
pub fn synth_caption(slots: &CaptionSlots<'_>, template_id: usize, variant_seed: u64) -> Result<String> {
    let template = TEMPLATES
        .get(template_id)
        .ok_or_else(|| invalid!("unknown template {template_id}; {} templates available", TEMPLATES.len()))?;
    let mut out = String::from(*template);
    let fills: [(&str, &str); 8] = [
        ("{modality}", slots.modality),
        ("{category}", slots.category),
        ("{location}", slots.stats.bucket.as_str()),
        ("{size}", slots.stats.size_word()),
        ("{shape}", slots.stats.shape_word()),
        ("{shows}", synonym(&SHOWS, variant_seed, 1)),
        ("{marked}", synonym(&MARKED, variant_seed, 2)),
        ("{marks}", synonym(&MARKS, variant_seed, 3)),
    ];
    for (k, v) in fills {
        out = out.replace(k, v);
    }
    Ok(capitalize_first(&out))
}

fn capitalize_first(s: &str) -> String {
    if s.starts_with("a ") {
        return String::from(s);
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// All template ids in registry order.
pub fn template_ids() -> Vec<usize> {
    (0..TEMPLATES.len()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::stats::LocationBucket;

    fn stats(area: f64, bucket: LocationBucket) -> MaskStats {
        MaskStats { area_fraction: area, centroid: [0.2, 0.2], bbox: [0.0, 0.0, 0.4, 0.4], elongation: 1.0, bucket }
    }

    #[test]
    fn canonical_template_fill() {
        let s = stats(0.15, LocationBucket::UpperLeft);
        let slots = CaptionSlots { modality: "CT", category: "liver", stats: &s };
        assert_eq!(
            synth_caption(&slots, 0, 0).unwrap(),
            "The CT image shows the large liver in the upper-left region highlighted by the overlaid mask."
        );
        assert_eq!(synth_caption(&slots, 3, 17).unwrap(), synth_caption(&slots, 3, 17).unwrap());
        assert!(synth_caption(&slots, TEMPLATES.len(), 0).is_err());
    }

    #[test]
    fn leading_slot_is_capitalized() {
        let s = stats(0.01, LocationBucket::Center);
        let slots = CaptionSlots { modality: "MRI", category: "kidney", stats: &s };
        assert!(synth_caption(&slots, 2, 0).unwrap().starts_with("Kidney in the center region"));
        assert_eq!(synth_caption(&slots, CLASS_TEMPLATE, 0).unwrap(), "a MRI image of the kidney");
    }
}
