//! Deterministic synthetic literature corpus covering every target area.
//!
//! Each area gets a signature of descriptors so that statements about
//! different areas are distinguishable without their names. Per area there
//! are two documents: one naming the area in its title, one only in its
//! abstract. Some documents are reachable from the seeds only at citation
//! depth 2, and one off-topic document is not reachable at all.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};

use super::{CitationGraph, Document, Sidecar};
use crate::lexicon::{AreaId, LabelLexicon, NUM_TARGET_AREAS};
use crate::rng;

/// Citation depth needed to reach every area document from the seeds.
pub const DEPTH: usize = 2;

/// Id of the document that no seed reaches.
pub const UNREACHABLE_DOC: &str = "zz-offtopic";

const DESCRIPTORS: &[&str] = &[
    "prominent", "thin", "broad", "dense", "sparse", "sharply delineated", "blurred", "columnar",
    "patchy", "homogeneous", "heterogeneous", "conspicuous", "narrow", "wide", "poorly differentiated",
    "well differentiated", "clustered", "regular", "irregular", "faint", "granular", "agranular",
    "dysgranular", "striated", "compact", "loose", "radially organized", "tangentially oriented",
    "bilaminar", "trilaminar", "cell sparse", "cell rich", "bulky", "slender", "ragged", "smooth",
    "undulating", "interrupted", "continuous", "stratified", "mottled", "speckled", "uniform",
    "graded", "abrupt", "gradual", "pale", "dark", "crowded", "scattered", "elongated", "rounded",
    "triangular", "fusiform", "polymorphic", "monotonous", "layered", "fragmented", "vertical",
    "oblique", "tufted", "beaded", "swollen", "shrunken", "ordered", "disordered", "thickened",
    "attenuated", "expanded", "reduced", "doubled", "split", "merged", "stippled", "serrated",
    "lobulated", "hooked", "curved", "flattened", "tapered",
];

const FEATURES: &[&str] = &[
    "layer II", "layer III", "layer IV", "layer V", "layer VI", "the laminar pattern",
    "the cell density", "the pyramidal cells", "the granular layers", "the white matter border",
    "the columnar arrangement", "the cell size gradient", "layer I", "the inner stripe",
];

const TEMPLATES: &[&str] = &[
    "In area {a}, {f} is {d}.",
    "Area {a} shows {d} {f}.",
    "{F} of {a} appears {d}.",
    "Compared with neighboring cortex, {a} has {d} {f}.",
    "A hallmark of {a} is {d} {f}.",
];

const GENERAL: &[&str] = &[
    "Cell bodies were stained with a silver method.",
    "Borders were detected with an observer independent procedure.",
    "The sections were digitized at high resolution.",
    "Profiles were extracted perpendicular to the cortical surface.",
    "Cytoarchitectonic maps were registered to a common reference space.",
    "Interindividual variability was considerable.",
    "The analysis combined histology with quantitative image analysis.",
    "Previous maps disagreed on the extent of this region.",
    "Several postmortem brains were examined.",
    "The findings support a parcellation into distinct areas.",
    "Microstructural criteria guided the delineation.",
    "The results were compared with functional imaging studies.",
];

/// The descriptors and features that characterize `area`.
pub fn signature(area: AreaId, seed: u64) -> (Vec<&'static str>, Vec<&'static str>) {
    let mut r = rng::stream(seed, "fixture-signature", area.index() as u64);
    let d: Vec<&str> = DESCRIPTORS.choose_multiple(&mut r, 5).copied().collect();
    let f: Vec<&str> = FEATURES.choose_multiple(&mut r, 4).copied().collect();
    (d, f)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|h| h.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn render(template: &str, name: &str, feature: &str, desc: &str) -> String {
    capitalize(
        &template
            .replace("{a}", name)
            .replace("{F}", &capitalize(feature))
            .replace("{f}", feature)
            .replace("{d}", desc),
    )
}

/// Ten distinct statements about `area`, some using aliases.
pub fn area_statements(area: AreaId, seed: u64) -> Vec<String> {
    let (descs, feats) = signature(area, seed);
    let names = LabelLexicon::aliases(area);
    let mut out = Vec::new();
    for i in 0..10 {
        let name = if i % 3 == 2 { names[(i / 3) % names.len()] } else { names[0] };
        let t = TEMPLATES[(i + area.index()) % TEMPLATES.len()];
        let d = descs[i % descs.len()];
        let f = feats[(i + i / 5) % feats.len()];
        let s = render(t, name, f, d);
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

pub struct FixtureCorpus {
    pub documents: Vec<Document>,
    pub citations: CitationGraph,
    pub seeds: Vec<String>,
}

fn doc_id(area: AreaId, part: char) -> String {
    format!("d{:02}{part}", area.index())
}

/// Builds the corpus. Output is a pure function of `seed`.
pub fn generate(seed: u64) -> FixtureCorpus {
    let mut documents = Vec::new();
    let mut citations = CitationGraph::new();
    let mut seeds = Vec::new();
    for area in AreaId::all() {
        let i = area.index();
        let name = area.name();
        let next = AreaId(((i + 1) % NUM_TARGET_AREAS) as u16);
        let stmts = area_statements(area, seed);
        let (_, feats) = signature(area, seed);
        let mut r = rng::stream(seed, "fixture-doc", i as u64);
        let mut general: Vec<&str> = GENERAL.to_vec();
        general.shuffle(&mut r);

        let mut body_a = vec![general[0].to_string()];
        body_a.extend(stmts[..5].iter().cloned());
        body_a.push(format!("Measurements in {name} were taken from sections 20 µm thick."));
        body_a.push(format!("The border between {name} and {} is marked by a change in {}.", next.name(), feats[0]));
        body_a.extend(general[1..].iter().map(|s| s.to_string()));
        documents.push(Document {
            doc_id: doc_id(area, 'a'),
            title: format!("Cytoarchitecture of area {name} in the human brain"),
            abstract_text: format!("We mapped area {name} in serial histological sections."),
            body: body_a.join(" "),
            year: Some(2000 + (i % 20) as u32),
            source: Some("fixture".into()),
        });

        let mut body_b = vec![general[9].to_string()];
        body_b.extend(stmts[5..].iter().cloned());
        body_b.push(stmts[0].clone());
        body_b.push(format!("Neuron density in {name} reached 45 % of the maximum."));
        body_b.push(general[10].to_string());
        documents.push(Document {
            doc_id: doc_id(area, 'b'),
            title: format!("Laminar patterns of the human cortex, part {}", i + 1),
            abstract_text: format!("This study revisits the microstructure of {}.", LabelLexicon::aliases(area).last().unwrap()),
            body: body_b.join(" "),
            year: Some(2005 + (i % 15) as u32),
            source: Some("fixture".into()),
        });

        citations.add_edge(&doc_id(area, 'a'), &doc_id(area, 'b')).expect("distinct ids");
        if i % 3 == 2 {
            // reached through the previous area's title document
            let prev = AreaId((i - 1) as u16);
            citations.add_edge(&doc_id(prev, 'a'), &doc_id(area, 'a')).expect("distinct ids");
        } else {
            seeds.push(doc_id(area, 'a'));
        }
        if i % 5 == 0 {
            citations.add_edge(&doc_id(area, 'b'), &format!("ext-{i:02}")).expect("distinct ids");
        }
    }
    documents.push(Document {
        doc_id: UNREACHABLE_DOC.into(),
        title: "Notes on area hOc1".into(),
        abstract_text: "An unrelated commentary.".into(),
        body: "In area hOc1, the inner stripe is glittering. Area hOc1 shows luminous layer IV.".into(),
        year: Some(1999),
        source: Some("fixture".into()),
    });
    documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    FixtureCorpus { documents, citations, seeds }
}

impl FixtureCorpus {
    /// Writes `docs/<id>.txt` with `.json` sidecars, `citations.tsv` and `seeds.txt`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let docs = dir.join("docs");
        fs::create_dir_all(&docs)?;
        for d in &self.documents {
            fs::write(docs.join(format!("{}.txt", d.doc_id)), &d.body)?;
            let side = Sidecar {
                title: d.title.clone(),
                abstract_text: d.abstract_text.clone(),
                year: d.year,
                source: d.source.clone(),
            };
            fs::write(docs.join(format!("{}.json", d.doc_id)), serde_json::to_string_pretty(&side)?)?;
        }
        let mut tsv = String::from("# citing\tcited\n");
        for (a, b) in self.citations.edges() {
            tsv.push_str(&format!("{a}\t{b}\n"));
        }
        fs::write(dir.join("citations.tsv"), tsv)?;
        fs::write(dir.join("seeds.txt"), self.seeds.join("\n") + "\n")?;
        Ok(())
    }
}

/// Reads a seed list: one id per line, blank lines and `#` comments ignored.
pub fn parse_seeds(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect()
}
