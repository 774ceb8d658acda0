//! Synthetic training corpora: a fact world of countries and persons with
//! paraphrased templates, held-out probes, two-hop queries and entity
//! descriptions, plus the copy corpus.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

const COUNTRIES: [&str; 50] = [
    "franconia", "veldoria", "astrania", "morvania", "keltia", "zandor", "ulmeria", "brisca", "cordana", "pellar",
    "quorvia", "rhenwald", "sarvonia", "tessaly", "umbria", "valdesh", "wrenland", "xandria", "yorvik", "zephyria",
    "aldmark", "belgrove", "caspia", "dornland", "elvaria", "fennmark", "galdor", "hesperia", "istria", "jorvania",
    "kalmar", "lorvath", "mirandia", "norvale", "ostmark", "pradonia", "quessel", "rovania", "solmar", "thyria",
    "ustrava", "varnholm", "westmere", "yllaria", "zorvania", "arkadia", "borealis", "cyrene", "delmaria", "estovia",
];

const CITIES: [&str; 50] = [
    "halden", "torvik", "amsel", "brenna", "calder", "dunmore", "ellow", "farrow", "gilden", "harrow",
    "ivel", "jasper", "kestrel", "lumen", "marrow", "nesbit", "orwell", "pemble", "quill", "rookwood",
    "stellan", "thorne", "upton", "varro", "wexley", "yarrow", "zell", "ashby", "birch", "corwin",
    "dalton", "emberly", "fenwick", "garrick", "holt", "inglis", "kerrow", "linden", "merrick", "norcross",
    "oakden", "prescott", "redmere", "selby", "tamsin", "ulric", "vesper", "whitby", "yardley", "zennor",
];

const LANGUAGES: [&str; 8] = ["veltish", "moran", "caldic", "sorvic", "ennish", "tarvic", "ulmic", "brannic"];
const REGIONS: [&str; 4] = ["north", "south", "east", "west"];
const CURRENCIES: [&str; 6] = ["crown", "mark", "dinar", "florin", "thaler", "ducat"];

const PERSONS: [&str; 20] = [
    "alice", "bruno", "clara", "dmitri", "elena", "felix", "greta", "hugo", "ingrid", "jonas",
    "katya", "lars", "mila", "nils", "olga", "pavel", "rosa", "sven", "tilda", "viktor",
];

const NAME_PREFIXES: [&str; 5] = ["new", "old", "upper", "lower", "great"];

/// Tokens every fact tokenizer carries besides the corpus words.
pub const EXTRA_TOKENS: [&str; 5] = ["x", ",", ":", "→", ";"];

/// `(σ, ρ, ω)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// One relation of a subject family. Templates contain `{s}` and end with
/// `{o}`; `phrase` is a noun phrase containing `{s}` ("the capital of {s}").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub templates: Vec<String>,
    pub phrase: String,
    /// Fragment used in entity descriptions, containing `{o}`.
    pub describe: String,
    pub objects: Vec<String>,
    /// Every subject gets a distinct object.
    pub unique_objects: bool,
}

impl RelationSpec {
    /// Template text before `{o}`, with the subject filled in.
    pub fn prompt(&self, template: usize, subject: &str) -> String {
        let t = &self.templates[template];
        let head = t.split("{o}").next().unwrap_or("");
        head.replace("{s}", subject).trim().to_string()
    }

    pub fn render(&self, template: usize, subject: &str, object: &str) -> String {
        self.templates[template].replace("{s}", subject).replace("{o}", object)
    }

    /// Phrase prefix before `{s}` ("the capital of").
    pub fn phrase_head(&self) -> String {
        self.phrase.split("{s}").next().unwrap_or("").trim().to_string()
    }

    /// Query prompt over the placeholder `x` ("the capital of x is").
    pub fn placeholder_prompt(&self) -> String {
        self.prompt(0, "x")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    /// Noun opening each description ("country").
    pub noun: String,
    pub subjects: Vec<String>,
    pub relations: Vec<RelationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub families: Vec<FamilySpec>,
    /// Relation of the first family whose objects are subjects of the
    /// second-hop family, e.g. `homeland` (person → country).
    pub bridge_relation: Option<String>,
    pub two_hop_chains: usize,
    /// Explicitly supplied facts, checked for consistency.
    pub extra_facts: Vec<FactTriplet>,
    /// Few-shot description lines per entity (the entity comes last).
    pub description_lines: usize,
    /// Render every subject as two tokens.
    pub multi_token_entities: bool,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    /// Built-in world: `n_countries` countries with capital, language,
    /// region and currency, and `n_persons` persons with a homeland.
    pub fn standard(n_countries: usize, n_persons: usize, seed: u64) -> Result<Self> {
        if n_countries > COUNTRIES.len() || n_countries == 0 {
            return Err(Error::spec("n_subjects", format!("countries must be in 1..={}", COUNTRIES.len())));
        }
        if n_persons > PERSONS.len() {
            return Err(Error::spec("n_subjects", format!("persons must be in 0..={}", PERSONS.len())));
        }
        let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let rel = |name: &str, templates: [&str; 3], phrase: &str, describe: &str, objects: Vec<String>, unique: bool| RelationSpec {
            name: name.into(),
            templates: templates.iter().map(|s| s.to_string()).collect(),
            phrase: phrase.into(),
            describe: describe.into(),
            objects,
            unique_objects: unique,
        };
        let countries = strings(&COUNTRIES[..n_countries]);
        let mut families = vec![FamilySpec {
            name: "country".into(),
            noun: "country".into(),
            subjects: countries.clone(),
            relations: vec![
                rel(
                    "capital",
                    ["the capital of {s} is {o}", "the largest city in {s} is {o}", "{s} is governed from {o}"],
                    "the capital of {s}",
                    "with capital {o}",
                    strings(&CITIES),
                    true,
                ),
                rel(
                    "language",
                    ["the language of {s} is {o}", "people in {s} speak {o}", "the main tongue of {s} is {o}"],
                    "the language of {s}",
                    "speaking {o}",
                    strings(&LANGUAGES),
                    false,
                ),
                rel(
                    "region",
                    ["the region of {s} is the {o}", "{s} lies in the {o}", "{s} is located in the {o}"],
                    "the region of {s}",
                    "in the {o}",
                    strings(&REGIONS),
                    false,
                ),
                rel(
                    "currency",
                    ["the currency of {s} is the {o}", "in {s} people pay with the {o}", "the money of {s} is the {o}"],
                    "the currency of {s}",
                    "paying with the {o}",
                    strings(&CURRENCIES),
                    false,
                ),
            ],
        }];
        if n_persons > 0 {
            families.push(FamilySpec {
                name: "person".into(),
                noun: "person".into(),
                subjects: strings(&PERSONS[..n_persons]),
                relations: vec![rel(
                    "homeland",
                    ["the homeland of {s} is {o}", "{s} was born in {o}", "{s} comes from {o}"],
                    "the homeland of {s}",
                    "born in {o}",
                    countries,
                    false,
                )],
            });
        }
        Ok(Self {
            families,
            bridge_relation: (n_persons > 0).then(|| "homeland".to_string()),
            two_hop_chains: 0,
            extra_facts: Vec::new(),
            description_lines: 1,
            multi_token_entities: false,
            seed,
        })
    }
}

/// Single-hop probe on a held-out template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactProbe {
    pub prompt: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub template: usize,
}

/// `π₁` (a prompt whose continuation is `ω₁`), `π₂` (relation prefix) and the
/// expected answer `ω₂` to the composed query `π₂ π₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHopQuery {
    pub pi1: String,
    pub pi2: String,
    pub subject: String,
    pub first_relation: String,
    pub bridge: String,
    pub second_relation: String,
    pub answer: String,
}

impl TwoHopQuery {
    pub fn composed(&self) -> String {
        format!("{} {}", self.pi2, self.pi1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityDescription {
    pub entity: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCorpus {
    pub facts: Vec<FactTriplet>,
    pub lines: Vec<String>,
    pub probes: Vec<FactProbe>,
    pub two_hop: Vec<TwoHopQuery>,
    pub descriptions: Vec<EntityDescription>,
    /// Every word used anywhere, sorted, plus [`EXTRA_TOKENS`].
    pub vocab: Vec<String>,
    pub relations: Vec<RelationSpec>,
}

impl FactCorpus {
    pub fn relation(&self, name: &str) -> Option<&RelationSpec> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn object_of(&self, subject: &str, relation: &str) -> Option<&str> {
        self.facts
            .iter()
            .find(|f| f.subject == subject && f.relation == relation)
            .map(|f| f.object.as_str())
    }

    /// Entity description as a TSV fixture (`entity<TAB>description`).
    pub fn descriptions_tsv(&self) -> String {
        let mut out = String::new();
        for d in &self.descriptions {
            out.push_str(&d.entity);
            out.push('\t');
            out.push_str(&d.description);
            out.push('\n');
        }
        out
    }
}

fn validate_relation(r: &RelationSpec) -> Result<()> {
    if r.templates.len() < 2 {
        return Err(Error::spec(
            format!("relations.{}.templates", r.name),
            "every relation needs at least two templates",
        ));
    }
    for t in &r.templates {
        if !t.contains("{s}") || !t.trim_end().ends_with("{o}") || t.matches("{o}").count() != 1 {
            return Err(Error::spec(
                format!("relations.{}.templates", r.name),
                format!("template {t:?} must contain {{s}} and end with a single {{o}}"),
            ));
        }
    }
    if !r.phrase.contains("{s}") {
        return Err(Error::spec(format!("relations.{}.phrase", r.name), "phrase must contain {s}"));
    }
    if r.objects.is_empty() {
        return Err(Error::spec(format!("relations.{}.objects", r.name), "object pool is empty"));
    }
    Ok(())
}

/// Builds the fact world. Each fact is rendered with every template except
/// one held out for its probe (rotating by subject index).
pub fn gen_fact_corpus(spec: &SyntheticCorpusSpec) -> Result<FactCorpus> {
    let mut rng = Rng::new(spec.seed);
    let mut facts: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut relations = Vec::new();
    let mut lines = Vec::new();
    let mut probes = Vec::new();
    let mut rendered_subject: BTreeMap<String, String> = BTreeMap::new();

    for fam in &spec.families {
        for s in &fam.subjects {
            let name = if spec.multi_token_entities {
                format!("{} {s}", NAME_PREFIXES[rng.below(NAME_PREFIXES.len())])
            } else {
                s.clone()
            };
            rendered_subject.insert(s.clone(), name);
        }
    }

    for fam in &spec.families {
        for rel in &fam.relations {
            validate_relation(rel)?;
            if rel.unique_objects && rel.objects.len() < fam.subjects.len() {
                return Err(Error::spec(
                    format!("relations.{}.objects", rel.name),
                    format!(
                        "{} unique objects requested for {} subjects",
                        rel.objects.len(),
                        fam.subjects.len()
                    ),
                ));
            }
            let mut frng = rng.derive(relations.len() as u64 + 1);
            // unique objects are assigned in list order: subject k gets object k
            let assignment: Vec<usize> = if rel.unique_objects {
                (0..fam.subjects.len()).collect()
            } else {
                (0..fam.subjects.len()).map(|_| frng.below(rel.objects.len())).collect()
            };
            for (si, s) in fam.subjects.iter().enumerate() {
                let o = &rel.objects[assignment[si]];
                let o = rendered_subject.get(o).cloned().unwrap_or_else(|| o.clone());
                facts.insert((s.clone(), rel.name.clone()), o);
            }
            relations.push(rel.clone());
        }
    }

    for f in &spec.extra_facts {
        match facts.get(&(f.subject.clone(), f.relation.clone())) {
            Some(o) if *o != f.object => {
                return Err(Error::spec(
                    "extra_facts",
                    format!(
                        "({}, {}) maps to both {o:?} and {:?}",
                        f.subject, f.relation, f.object
                    ),
                ));
            }
            Some(_) => {}
            None => {
                if !relations.iter().any(|r| r.name == f.relation) {
                    return Err(Error::spec(
                        "extra_facts",
                        format!("unknown relation {:?}", f.relation),
                    ));
                }
                facts.insert((f.subject.clone(), f.relation.clone()), f.object.clone());
            }
        }
    }

    let subject_index: BTreeMap<&str, usize> = spec
        .families
        .iter()
        .flat_map(|f| f.subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i)))
        .collect();
    for ((s, r), o) in &facts {
        let rel = relations.iter().find(|x| &x.name == r).expect("known relation");
        let shown = rendered_subject.get(s).cloned().unwrap_or_else(|| s.clone());
        let held = subject_index.get(s.as_str()).copied().unwrap_or(0) % rel.templates.len();
        for t in 0..rel.templates.len() {
            if t != held {
                lines.push(rel.render(t, &shown, o));
            }
        }
        probes.push(FactProbe {
            prompt: rel.prompt(held, &shown),
            subject: shown.clone(),
            relation: r.clone(),
            object: o.clone(),
            template: held,
        });
    }

    // descriptions
    let mut descriptions = Vec::new();
    for fam in &spec.families {
        for s in &fam.subjects {
            let mut parts = vec![fam.noun.clone()];
            for rel in fam.relations.iter().take(2) {
                if let Some(o) = facts.get(&(s.clone(), rel.name.clone())) {
                    parts.push(rel.describe.replace("{o}", o));
                }
            }
            descriptions.push(EntityDescription {
                entity: rendered_subject[s].clone(),
                description: parts.join(" "),
            });
        }
    }
    let mut drng = rng.derive(0xD5);
    if descriptions.len() >= 4 {
        for _ in 0..spec.description_lines {
            for (i, target) in descriptions.iter().enumerate() {
                let mut others: Vec<usize> = Vec::new();
                while others.len() < 3 {
                    let j = drng.below(descriptions.len());
                    if j != i && !others.contains(&j) {
                        others.push(j);
                    }
                }
                let mut entries: Vec<String> = others
                    .iter()
                    .map(|&j| format!("{} : {}", descriptions[j].entity, descriptions[j].description))
                    .collect();
                entries.push(format!("{} : {}", target.entity, target.description));
                lines.push(entries.join(" , "));
            }
        }
    }

    // two-hop chains through the bridge relation
    let mut two_hop = Vec::new();
    if spec.two_hop_chains > 0 {
        let bridge_name = spec
            .bridge_relation
            .as_ref()
            .ok_or_else(|| Error::spec("bridge_relation", "two-hop chains need a bridge relation"))?;
        let bridge = relations
            .iter()
            .find(|r| &r.name == bridge_name)
            .ok_or_else(|| Error::spec("bridge_relation", format!("unknown relation {bridge_name:?}")))?
            .clone();
        let first_family = spec
            .families
            .iter()
            .find(|f| f.relations.iter().any(|r| &r.name == bridge_name))
            .expect("bridge family");
        let second: Vec<&RelationSpec> = spec
            .families
            .iter()
            .filter(|f| f.name != first_family.name)
            .flat_map(|f| f.relations.iter())
            .collect();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for si in 0..first_family.subjects.len() {
            for ri in 0..second.len() {
                pairs.push((si, ri));
            }
        }
        if spec.two_hop_chains > pairs.len() {
            return Err(Error::spec(
                "two_hop_chains",
                format!("{} chains requested, only {} exist", spec.two_hop_chains, pairs.len()),
            ));
        }
        let mut crng = rng.derive(0x2407);
        for idx in crng.sample_distinct(pairs.len(), spec.two_hop_chains) {
            let (si, ri) = pairs[idx];
            let s = &first_family.subjects[si];
            let r2 = second[ri];
            let omega1 = facts[&(s.clone(), bridge.name.clone())].clone();
            let bridge_key = rendered_subject
                .iter()
                .find(|(_, v)| **v == omega1)
                .map(|(k, _)| k.clone())
                .unwrap_or(omega1.clone());
            let answer = facts
                .get(&(bridge_key, r2.name.clone()))
                .cloned()
                .ok_or_else(|| Error::spec("two_hop_chains", format!("{omega1} has no {}", r2.name)))?;
            two_hop.push(TwoHopQuery {
                pi1: bridge.prompt(0, &rendered_subject[s]),
                pi2: r2.phrase_head(),
                subject: rendered_subject[s].clone(),
                first_relation: bridge.name.clone(),
                bridge: omega1,
                second_relation: r2.name.clone(),
                answer,
            });
        }
        for q in &two_hop {
            let composed = q.composed();
            if let Some(line) = lines.iter().find(|l| l.contains(&composed)) {
                return Err(Error::spec(
                    "two_hop_chains",
                    format!("composed query {composed:?} appears in training line {line:?}"),
                ));
            }
        }
    }

    let mut words: BTreeSet<String> = BTreeSet::new();
    let texts = lines
        .iter()
        .chain(probes.iter().map(|p| &p.prompt))
        .chain(probes.iter().map(|p| &p.object))
        .chain(descriptions.iter().map(|d| &d.description))
        .chain(descriptions.iter().map(|d| &d.entity));
    for t in texts {
        words.extend(t.split_whitespace().map(str::to_string));
    }
    for q in &two_hop {
        words.extend(q.composed().split_whitespace().map(str::to_string));
        words.extend(q.answer.split_whitespace().map(str::to_string));
    }
    for r in &relations {
        words.extend(r.placeholder_prompt().split_whitespace().map(str::to_string));
    }
    words.extend(EXTRA_TOKENS.iter().map(|s| s.to_string()));

    let mut shuffled = lines;
    rng.derive(0x11E5).shuffle(&mut shuffled);
    Ok(FactCorpus {
        facts: facts
            .into_iter()
            .map(|((subject, relation), object)| FactTriplet {
                subject: rendered_subject.get(&subject).cloned().unwrap_or(subject),
                relation,
                object,
            })
            .collect(),
        lines: shuffled,
        probes,
        two_hop,
        descriptions,
        vocab: words.into_iter().collect(),
        relations,
    })
}

/// Copy-task lines `a → a ; b → b ; ...` with `k ∈ [1, 10]` pairs drawn
/// uniformly (with replacement) from `tokens`.
pub fn gen_copy_corpus(tokens: &[String], n_lines: usize, seed: u64) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(Error::Argument("copy corpus needs at least one token".into()));
    }
    let mut rng = Rng::new(seed);
    Ok((0..n_lines)
        .map(|_| {
            let k = rng.range_inclusive(1, 10);
            (0..k)
                .map(|_| {
                    let t = &tokens[rng.below(tokens.len())];
                    format!("{t} → {t}")
                })
                .collect::<Vec<_>>()
                .join(" ; ")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticCorpusSpec {
        let mut s = SyntheticCorpusSpec::standard(12, 6, 4).unwrap();
        s.two_hop_chains = 8;
        s
    }

    #[test]
    fn facts_are_functional_and_rendered_twice() {
        let c = gen_fact_corpus(&spec()).unwrap();
        let mut seen = BTreeSet::new();
        for f in &c.facts {
            assert!(seen.insert((f.subject.clone(), f.relation.clone())));
            let rel = c.relation(&f.relation).unwrap();
            let renders = (0..rel.templates.len())
                .filter(|&t| c.lines.contains(&rel.render(t, &f.subject, &f.object)))
                .count();
            assert!(renders >= 2, "{f:?}");
        }
        assert_eq!(c.facts.len(), 12 * 4 + 6);
    }

    #[test]
    fn probes_use_held_out_templates() {
        let c = gen_fact_corpus(&spec()).unwrap();
        for p in &c.probes {
            let rel = c.relation(&p.relation).unwrap();
            let full = rel.render(p.template, &p.subject, &p.object);
            assert!(!c.lines.contains(&full));
            assert!(full.starts_with(&p.prompt));
        }
    }

    #[test]
    fn capitals_are_unique() {
        let c = gen_fact_corpus(&spec()).unwrap();
        let caps: BTreeSet<_> = c.facts.iter().filter(|f| f.relation == "capital").map(|f| &f.object).collect();
        assert_eq!(caps.len(), 12);
        assert_eq!(c.object_of("franconia", "capital"), Some("halden"));
    }

    #[test]
    fn two_hop_queries_are_unseen_and_resolve() {
        let c = gen_fact_corpus(&spec()).unwrap();
        assert_eq!(c.two_hop.len(), 8);
        for q in &c.two_hop {
            assert!(c.lines.iter().all(|l| !l.contains(&q.composed())));
            assert_eq!(c.object_of(&q.subject, &q.first_relation), Some(q.bridge.as_str()));
            assert_eq!(c.object_of(&q.bridge, &q.second_relation), Some(q.answer.as_str()));
        }
    }

    #[test]
    fn inconsistent_extra_fact_is_a_spec_error() {
        let c = gen_fact_corpus(&spec()).unwrap();
        let f = c.facts[0].clone();
        let mut s = spec();
        s.extra_facts.push(FactTriplet {
            object: format!("{}x", f.object),
            ..f
        });
        assert!(matches!(gen_fact_corpus(&s), Err(Error::Spec { .. })));
    }

    #[test]
    fn bad_template_is_a_spec_error() {
        let mut s = spec();
        s.families[0].relations[0].templates[1] = "{o} is where {s} sits".into();
        assert!(matches!(gen_fact_corpus(&s), Err(Error::Spec { .. })));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(gen_fact_corpus(&spec()).unwrap(), gen_fact_corpus(&spec()).unwrap());
        let mut other = spec();
        other.seed = 5;
        assert_ne!(gen_fact_corpus(&spec()).unwrap().facts, gen_fact_corpus(&other).unwrap().facts);
    }

    #[test]
    fn multi_token_entities_have_two_words() {
        let mut s = spec();
        s.multi_token_entities = true;
        let c = gen_fact_corpus(&s).unwrap();
        assert!(c.descriptions.iter().all(|d| d.entity.split_whitespace().count() == 2));
    }

    #[test]
    fn copy_lines() {
        let toks: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let lines = gen_copy_corpus(&toks, 50, 1).unwrap();
        for l in &lines {
            let pairs: Vec<&str> = l.split(" ; ").collect();
            assert!((1..=10).contains(&pairs.len()));
            for p in pairs {
                let w: Vec<&str> = p.split(' ').collect();
                assert_eq!(w.len(), 3);
                assert_eq!(w[0], w[2]);
                assert_eq!(w[1], "→");
            }
        }
    }
}
