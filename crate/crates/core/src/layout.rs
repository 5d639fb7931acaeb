//! Page understanding: geometric grouping of UI nodes into sections,
//! surrounding-text disambiguation, token-bounded text digests, and
//! class-agnostic average precision for scoring any section detector.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ui::{PageSnapshot, UiNode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        debug_assert!(width >= 0.0 && height >= 0.0);
        Self { x, y, width, height }
    }

    pub fn of(node: &UiNode) -> Self {
        Self::new(node.x.into(), node.y.into(), node.width.into(), node.height.into())
    }

    pub fn right(&self) -> f64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn union(&self, other: &Self) -> Self {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Self::new(x, y, self.right().max(other.right()) - x, self.bottom().max(other.bottom()) - y)
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Gap along each axis; negative values mean the projections overlap.
    fn gaps(&self, other: &Self) -> (f64, f64) {
        (
            self.x.max(other.x) - self.right().min(other.right()),
            self.y.max(other.y) - self.bottom().min(other.bottom()),
        )
    }

    fn reading_order(&self, other: &Self) -> Ordering {
        self.y.total_cmp(&other.y).then(self.x.total_cmp(&other.x))
    }
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    /// Maximum pixel gap between adjacent boxes that still merges them.
    pub gap_threshold: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self { gap_threshold: 8.0 }
    }
}

/// Surrounding-text disambiguator attached to sections whose text collides.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Qualifier {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<usize>,
}

impl fmt::Display for Qualifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.heading, self.ordinal) {
            (Some(h), Some(n)) => write!(f, "under: {h} #{n}"),
            (Some(h), None) => write!(f, "under: {h}"),
            (None, Some(n)) => write!(f, "#{n}"),
            (None, None) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub section_id: String,
    #[serde(rename = "box")]
    pub bounds: BoundingBox,
    pub member_node_ids: Vec<String>,
    pub member_texts: Vec<String>,
    pub representative_node_id: String,
    pub representative_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualifier: Option<Qualifier>,
}

impl Section {
    fn suffix(&self) -> String {
        match &self.qualifier {
            Some(Qualifier { heading: Some(h), ordinal }) => {
                let mut s = format!(" (under: {h})");
                if let Some(n) = ordinal {
                    s.push_str(&format!(" #{n}"));
                }
                s
            }
            Some(Qualifier { heading: None, ordinal: Some(n) }) => format!(" #{n}"),
            _ => String::new(),
        }
    }

    /// The text a predictor sees and names when it acts on this section.
    pub fn display_text(&self) -> String {
        let mut s = self.representative_text.clone();
        s.push_str(&self.suffix());
        s
    }

    /// All member texts once, followed by the qualifier.
    pub fn digest_text(&self) -> String {
        let mut s = self.member_texts.join(" ");
        s.push_str(&self.suffix());
        s
    }
}

/// Anything that turns a page into sections: the bundled gap detector, or a learned model.
pub trait SectionDetector {
    fn detect(&self, page: &PageSnapshot) -> Vec<Section>;
}

/// Gap-threshold clustering of sibling nodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct GapDetector {
    pub params: GroupingParams,
}

impl SectionDetector for GapDetector {
    fn detect(&self, page: &PageSnapshot) -> Vec<Section> {
        group_sections(page, &self.params)
    }
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn adjacent(a: &BoundingBox, b: &BoundingBox, gap: f64) -> bool {
    let (gx, gy) = a.gaps(b);
    (gx <= 0.0 && gy <= gap) || (gy <= 0.0 && gx <= gap)
}

fn build_section(members: &[&UiNode]) -> Section {
    let top_left = |a: &&&UiNode, b: &&&UiNode| BoundingBox::of(a).reading_order(&BoundingBox::of(b));
    let rep = members
        .iter()
        .filter(|n| n.is_interactable())
        .min_by(top_left)
        .or_else(|| members.iter().min_by(top_left))
        .expect("sections have at least one member");
    let bounds = members
        .iter()
        .map(|n| BoundingBox::of(n))
        .reduce(|a, b| a.union(&b))
        .expect("sections have at least one member");
    Section {
        section_id: String::new(),
        bounds,
        member_node_ids: members.iter().map(|n| n.node_id.clone()).collect(),
        member_texts: members.iter().map(|n| String::from(n.text.trim())).collect(),
        representative_node_id: rep.node_id.clone(),
        representative_text: String::from(rep.text.trim()),
        qualifier: None,
    }
}

fn finish(mut sections: Vec<(usize, Section)>) -> Vec<Section> {
    sections.sort_by(|(ia, a), (ib, b)| a.bounds.reading_order(&b.bounds).then(ia.cmp(ib)));
    sections
        .into_iter()
        .enumerate()
        .map(|(k, (_, mut s))| {
            s.section_id = format!("s{}", k + 1);
            s
        })
        .collect()
}

/// Partitions the non-empty-text nodes of `page` into sections. Two nodes
/// merge when they share a parent container and their boxes are vertically
/// or horizontally adjacent within the gap threshold; merging is transitive.
pub fn group_sections(page: &PageSnapshot, params: &GroupingParams) -> Vec<Section> {
    let flat = page.flatten_indexed();
    let texted: Vec<usize> = (0..flat.len()).filter(|&i| !flat[i].node.text.trim().is_empty()).collect();
    let boxes: Vec<BoundingBox> = texted.iter().map(|&i| BoundingBox::of(flat[i].node)).collect();
    let mut sets = DisjointSet::new(texted.len());
    for a in 0..texted.len() {
        for b in a + 1..texted.len() {
            let (pa, pb) = (flat[texted[a]].parent, flat[texted[b]].parent);
            if pa.is_some() && pa == pb && adjacent(&boxes[a], &boxes[b], params.gap_threshold) {
                sets.union(a, b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..texted.len() {
        let root = sets.find(k);
        groups.entry(root).or_default().push(k);
    }
    let sections = groups
        .values()
        .map(|ks| {
            let members: Vec<&UiNode> = ks.iter().map(|&k| flat[texted[k]].node).collect();
            (texted[ks[0]], build_section(&members))
        })
        .collect();
    finish(sections)
}

/// One section per non-empty-text node, with no merging and no qualifiers.
pub fn singleton_sections(page: &PageSnapshot) -> Vec<Section> {
    let sections = page
        .flatten()
        .into_iter()
        .enumerate()
        .filter(|(_, n)| !n.text.trim().is_empty())
        .map(|(i, n)| (i, build_section(&[n])))
        .collect();
    finish(sections)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disambiguated {
    pub sections: Vec<Section>,
    /// Collisions that surrounding text could not resolve.
    pub warnings: Vec<String>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Gives sections that share a representative text a qualifier naming the
/// nearest preceding heading-like node (non-interactable, at least 1.2x the
/// median text-node height). Collisions that survive get ordinal suffixes.
pub fn disambiguate(mut sections: Vec<Section>, page: &PageSnapshot) -> Disambiguated {
    let flat = page.flatten();
    let position: BTreeMap<&str, usize> = flat.iter().enumerate().map(|(i, n)| (n.node_id.as_str(), i)).collect();
    let mut heights: Vec<f64> = flat
        .iter()
        .filter(|n| !n.text.trim().is_empty())
        .map(|n| f64::from(n.height))
        .collect();
    let median_height = median(&mut heights);
    let heading_like = |n: &UiNode| {
        !n.is_interactable() && !n.text.trim().is_empty() && f64::from(n.height) >= 1.2 * median_height
    };

    let mut by_text: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in sections.iter().enumerate() {
        by_text.entry(s.representative_text.clone()).or_default().push(i);
    }
    for group in by_text.values().filter(|g| g.len() > 1) {
        for &si in group {
            let members: BTreeSet<&str> = sections[si].member_node_ids.iter().map(String::as_str).collect();
            let first = sections[si]
                .member_node_ids
                .iter()
                .filter_map(|id| position.get(id.as_str()).copied())
                .min()
                .unwrap_or(0);
            let heading = flat[..first]
                .iter()
                .rev()
                .find(|n| heading_like(n) && !members.contains(n.node_id.as_str()))
                .map(|n| String::from(n.text.trim()));
            if heading.is_some() {
                sections[si].qualifier = Some(Qualifier { heading, ordinal: None });
            }
        }
    }

    let mut warnings = Vec::new();
    let mut by_display: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in sections.iter().enumerate() {
        by_display.entry(s.display_text()).or_default().push(i);
    }
    for (text, group) in by_display.into_iter().filter(|(_, g)| g.len() > 1) {
        let ids: Vec<&str> = group.iter().map(|&i| sections[i].section_id.as_str()).collect();
        warnings.push(format!(
            "sections {} share text `{text}` and surroundings; ordinal suffixes added",
            ids.join(", ")
        ));
        for (k, &si) in group.iter().enumerate() {
            let q = sections[si].qualifier.get_or_insert_with(Qualifier::default);
            q.ordinal = Some(k + 1);
        }
    }
    if !warnings.is_empty() {
        log::warn!("page {}: {}", page.page_id, warnings.join("; "));
    }
    Disambiguated { sections, warnings }
}

/// Grouping followed by disambiguation.
pub fn page_sections(page: &PageSnapshot, params: &GroupingParams) -> Disambiguated {
    disambiguate(group_sections(page, params), page)
}

/// Newline-separated section digests in reading order, dropping whole trailing
/// sections so the result never exceeds `budget` characters.
pub fn extract_text(sections: &[Section], budget: usize) -> String {
    let mut ordered: Vec<&Section> = sections.iter().collect();
    ordered.sort_by(|a, b| a.bounds.reading_order(&b.bounds));
    let mut out = String::new();
    let mut used = 0;
    for s in ordered {
        let line = s.digest_text();
        let sep = usize::from(!out.is_empty());
        let len = line.chars().count();
        if used + sep + len > budget {
            break;
        }
        if sep == 1 {
            out.push('\n');
        }
        out.push_str(&line);
        used += sep + len;
    }
    out
}

/// Maps element texts named by actions back to page nodes.
#[derive(Debug, Clone)]
pub struct PageIndex {
    pub sections: Vec<Section>,
}

impl PageIndex {
    pub fn build(page: &PageSnapshot, params: &GroupingParams) -> Self {
        Self { sections: page_sections(page, params).sections }
    }

    /// Node ids an element text refers to: a section's members when the text
    /// is a section display text, otherwise the first node with that raw text
    /// plus the rest of its section.
    pub fn resolve(&self, page: &PageSnapshot, element: &str) -> Option<Vec<String>> {
        let element = element.trim();
        if let Some(s) = self.sections.iter().find(|s| s.display_text() == element) {
            return Some(s.member_node_ids.clone());
        }
        let node = page.flatten().into_iter().find(|n| n.text.trim() == element)?;
        let mut ids = alloc::vec![node.node_id.clone()];
        if let Some(s) = self.sections.iter().find(|s| s.member_node_ids.contains(&node.node_id)) {
            ids.extend(s.member_node_ids.iter().filter(|id| **id != node.node_id).cloned());
        }
        Some(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionPrediction {
    #[serde(rename = "box")]
    pub bounds: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("iou threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
}

impl DetectionPrediction {
    pub fn new(bounds: BoundingBox, confidence: f64) -> Result<Self, DetectionError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DetectionError::Confidence(confidence));
        }
        Ok(Self { bounds, confidence })
    }
}

/// Detection-evaluation fixture: labeled boxes plus a detector's scored boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFixture {
    pub ground_truth: Vec<BoundingBox>,
    pub predictions: Vec<DetectionPrediction>,
}

/// Full-confidence predictions from a detector's sections.
pub fn section_predictions(sections: &[Section]) -> Vec<DetectionPrediction> {
    sections.iter().map(|s| DetectionPrediction { bounds: s.bounds, confidence: 1.0 }).collect()
}

/// Single-class average precision at one IoU threshold with all-points
/// interpolation. Predictions are ranked by descending confidence (stable),
/// each greedily matched to the unmatched ground-truth box of highest IoU.
pub fn evaluate_detector(
    predictions: &[DetectionPrediction],
    ground_truth: &[BoundingBox],
    iou_threshold: f64,
) -> Result<f64, DetectionError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(DetectionError::Threshold(iou_threshold));
    }
    if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(&p.confidence)) {
        return Err(DetectionError::Confidence(p.confidence));
    }
    if ground_truth.is_empty() {
        if predictions.is_empty() {
            log::info!("degenerate detection evaluation: no ground truth and no predictions, AP = 1");
            return Ok(1.0);
        }
        return Ok(0.0);
    }

    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].confidence.total_cmp(&predictions[a].confidence));

    let mut matched = alloc::vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let mut curve: Vec<(usize, f64)> = Vec::with_capacity(order.len());
    let mut hits = Vec::with_capacity(order.len());
    for (rank, &p) in order.iter().enumerate() {
        let best = ground_truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !matched[*g])
            .map(|(g, gt)| (g, iou(&predictions[p].bounds, gt)))
            .fold(None, |best: Option<(usize, f64)>, (g, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= iou_threshold {
                matched[g] = true;
                tp += 1;
            }
        }
        let hit = curve.last().map_or(tp > 0, |&(prev, _)| tp > prev);
        curve.push((tp, tp as f64 / (rank + 1) as f64));
        hits.push(hit);
    }

    // Precision envelope: best precision at any equal-or-higher recall.
    let mut envelope = 0.0f64;
    for point in curve.iter_mut().rev() {
        envelope = envelope.max(point.1);
        point.1 = envelope;
    }
    // Recall rises by 1/|GT| at each true positive.
    let total: f64 = curve.iter().zip(&hits).filter(|(_, hit)| **hit).map(|(point, _)| point.1).sum();
    Ok(total / ground_truth.len() as f64)
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.section_id, self.display_text())
    }
}
