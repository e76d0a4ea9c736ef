//! Seeded synthetic multi-style corpus.
//!
//! Every example starts from a content fact (subject, action, object,
//! location, day). The source is a one-sentence news article whose clause
//! order and leading tag depend on the style; the target is a headline
//! rendered through the style's template and lexicon.
//!
//! Spec files hold one `[style NAME]` section per style:
//!
//! ```text
//! [style herald]
//! template = {subj} {verb} {obj} in {loc}
//! lexicon = buy:acquires sell:sells
//! source_tag = herald-wire --
//! clause_order = main loc date attrib
//! signature_noise = 0.1
//! out_of_domain = false
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::RawExample;
use crate::error::{Error, Result};

pub const SUBJECTS: &[&str] = &[
    "police", "rebels", "ministers", "farmers", "doctors", "students", "workers", "lawmakers",
    "investors", "judges", "voters", "soldiers", "pilots", "teachers", "scientists", "bankers",
    "engineers", "miners", "nurses", "officials", "regulators", "diplomats", "traders", "unions",
    "protesters", "firefighters", "prosecutors", "senators", "activists", "researchers",
];

pub const OBJECTS: &[&str] = &[
    "plans", "taxes", "elections", "reforms", "budgets", "prices", "exports", "contracts",
    "talks", "borders", "subsidies", "loans", "tariffs", "vaccines", "pipelines", "railways",
    "factories", "bridges", "wages", "pensions", "licenses", "mergers", "sanctions", "quotas",
    "ports", "airports", "banks", "schools", "hospitals", "refineries",
];

pub const LOCATIONS: &[&str] = &[
    "cairo", "lima", "oslo", "delhi", "nairobi", "hanoi", "madrid", "ankara", "quito", "dhaka",
    "manila", "riga", "accra", "kabul", "dakar", "seoul", "tunis", "sofia", "bogota", "lagos",
];

pub const DAYS: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];

/// `(action, article form, default headline form)`.
pub const VERBS: &[(&str, &str, &str)] = &[
    ("approve", "approved", "approve"),
    ("reject", "rejected", "reject"),
    ("cut", "cut", "cut"),
    ("raise", "raised", "raise"),
    ("block", "blocked", "block"),
    ("back", "backed", "back"),
    ("delay", "delayed", "delay"),
    ("review", "reviewed", "review"),
    ("expand", "expanded", "expand"),
    ("suspend", "suspended", "suspend"),
    ("defend", "defended", "defend"),
    ("criticize", "criticized", "criticize"),
    ("announce", "announced", "announce"),
    ("fund", "funded", "fund"),
    ("cancel", "canceled", "cancel"),
    ("extend", "extended", "extend"),
];

pub const ATTRIBUTIONS: &[&str] = &["officials", "sources", "witnesses", "reports"];

pub const SLOTS: &[&str] = &["subj", "verb", "obj", "loc", "date"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clause {
    Main,
    Loc,
    Date,
    Attrib,
}

impl Clause {
    const ALL: [Clause; 4] = [Clause::Main, Clause::Loc, Clause::Date, Clause::Attrib];

    fn parse(s: &str) -> Option<Self> {
        match s {
            "main" => Some(Clause::Main),
            "loc" => Some(Clause::Loc),
            "date" => Some(Clause::Date),
            "attrib" => Some(Clause::Attrib),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Clause::Main => "main",
            Clause::Loc => "loc",
            Clause::Date => "date",
            Clause::Attrib => "attrib",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TemplatePart {
    Slot(String),
    Word(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthStyleSpec {
    pub name: String,
    pub template: Vec<TemplatePart>,
    /// Replacements for headline words, keyed by action or slot word.
    pub lexicon: HashMap<String, String>,
    pub source_tag: Vec<String>,
    pub clause_order: Vec<Clause>,
    /// Probability that an article drops the tag and shuffles its clauses.
    pub signature_noise: f64,
    pub out_of_domain: bool,
}

impl SynthStyleSpec {
    /// Parses a `{slot} word ...` template.
    pub fn parse_template(text: &str) -> Result<Vec<TemplatePart>> {
        let mut parts = Vec::new();
        for tok in text.split_whitespace() {
            match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                Some(slot) => {
                    if !SLOTS.contains(&slot) {
                        return Err(Error::InvalidArgument(format!(
                            "template references unknown slot {{{slot}}}"
                        )));
                    }
                    parts.push(TemplatePart::Slot(slot.to_string()));
                }
                None => parts.push(TemplatePart::Word(tok.to_lowercase())),
            }
        }
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty template".into()));
        }
        Ok(parts)
    }

    fn validate(&self) -> Result<()> {
        let mut order = self.clause_order.clone();
        order.sort_by_key(|c| c.name());
        let mut all = Clause::ALL.to_vec();
        all.sort_by_key(|c| c.name());
        if order != all {
            return Err(Error::InvalidArgument(
                "clause_order must list main, loc, date and attrib once each".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.signature_noise) {
            return Err(Error::InvalidArgument("signature_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Parses a spec file; errors carry the offending line.
pub fn parse_specs(source: &str, text: &str) -> Result<Vec<SynthStyleSpec>> {
    struct Partial {
        line: usize,
        name: String,
        keys: HashMap<String, (usize, String)>,
    }
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut sections: Vec<Partial> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let n = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(head) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = match head.split_whitespace().collect::<Vec<_>>()[..] {
                ["style", name] => name.to_string(),
                _ => return Err(err(n, format!("expected [style NAME], got {line:?}"))),
            };
            if sections.iter().any(|s| s.name == name) {
                return Err(err(n, format!("duplicate style {name}")));
            }
            sections.push(Partial {
                line: n,
                name,
                keys: HashMap::new(),
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(n, format!("expected key = value, got {line:?}")))?;
        let sec = sections
            .last_mut()
            .ok_or_else(|| err(n, "key outside a [style] section".into()))?;
        let key = k.trim().to_string();
        if !matches!(
            key.as_str(),
            "template" | "lexicon" | "source_tag" | "clause_order" | "signature_noise" | "out_of_domain"
        ) {
            return Err(err(n, format!("unknown key {key:?}")));
        }
        if sec.keys.insert(key.clone(), (n, v.trim().to_string())).is_some() {
            return Err(err(n, format!("duplicate key {key:?}")));
        }
    }
    if sections.is_empty() {
        return Err(err(1, "no [style] sections".into()));
    }
    let mut specs = Vec::with_capacity(sections.len());
    for mut sec in sections {
        let (tline, ttext) = sec
            .keys
            .remove("template")
            .ok_or_else(|| err(sec.line, format!("style {} has no template", sec.name)))?;
        let template = SynthStyleSpec::parse_template(&ttext).map_err(|e| err(tline, e.to_string()))?;
        let mut lexicon = HashMap::new();
        if let Some((l, text)) = sec.keys.remove("lexicon") {
            for pair in text.split_whitespace() {
                let (a, b) = pair
                    .split_once(':')
                    .filter(|(a, b)| !a.is_empty() && !b.is_empty())
                    .ok_or_else(|| err(l, format!("bad lexicon entry {pair:?}")))?;
                lexicon.insert(a.to_lowercase(), b.to_lowercase());
            }
        }
        let source_tag = sec
            .keys
            .remove("source_tag")
            .map(|(_, t)| t.split_whitespace().map(str::to_lowercase).collect())
            .unwrap_or_default();
        let clause_order = match sec.keys.remove("clause_order") {
            None => Clause::ALL.to_vec(),
            Some((l, t)) => t
                .split_whitespace()
                .map(|c| Clause::parse(c).ok_or_else(|| err(l, format!("unknown clause {c:?}"))))
                .collect::<Result<Vec<_>>>()?,
        };
        let signature_noise = match sec.keys.remove("signature_noise") {
            None => 0.0,
            Some((l, t)) => t.parse().map_err(|e| err(l, format!("signature_noise: {e}")))?,
        };
        let out_of_domain = match sec.keys.remove("out_of_domain") {
            None => false,
            Some((l, t)) => t.parse().map_err(|e| err(l, format!("out_of_domain: {e}")))?,
        };
        let spec = SynthStyleSpec {
            name: sec.name,
            template,
            lexicon,
            source_tag,
            clause_order,
            signature_noise,
            out_of_domain,
        };
        spec.validate().map_err(|e| err(sec.line, e.to_string()))?;
        specs.push(spec);
    }
    Ok(specs)
}

pub fn read_specs(path: impl AsRef<Path>) -> Result<Vec<SynthStyleSpec>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_specs(&path.display().to_string(), &text)
}

/// The built-in style suite: four in-domain styles and two out-of-domain
/// blends. `chronicle` writes in the `herald` template with the `courier`
/// lexicon, and its sources carry the `herald` tag behind a desk word never
/// seen in training. `ledger` mixes `gazette` and `tribune`.
pub const DEFAULT_SPECS: &str = "\
[style herald]
template = {subj} {verb} {obj} in {loc}
lexicon = approve:endorse reject:snub cut:slash raise:hike block:halt back:support delay:stall review:probe expand:widen suspend:freeze defend:guard criticize:slam announce:unveil fund:bankroll cancel:scrap extend:prolong
source_tag = herald-wire --
clause_order = main loc date attrib
signature_noise = 0.06

[style courier]
template = {loc} : {subj} {verb} {obj}
lexicon = approve:ratify reject:refuse cut:trim raise:boost block:bar back:endorse delay:postpone review:examine expand:enlarge suspend:halt defend:uphold criticize:blast announce:declare fund:finance cancel:axe extend:lengthen
source_tag = courier-service :
clause_order = loc main attrib date
signature_noise = 0.06

[style gazette]
template = {subj} {verb} {obj} on {date}
lexicon = approve:pass reject:spurn cut:reduce raise:lift block:stop back:champion delay:defer review:study expand:grow suspend:pause defend:protect criticize:attack announce:reveal fund:sponsor cancel:drop extend:stretch
source_tag = gazette-desk |
clause_order = date main loc attrib
signature_noise = 0.06

[style tribune]
template = {obj} : {subj} {verb} in {loc} {date}
lexicon = approve:accept reject:deny cut:lower raise:increase block:prevent back:favor delay:hold review:assess expand:extend suspend:drop defend:shield criticize:condemn announce:report fund:pay cancel:end extend:renew
source_tag = tribune-news ::
clause_order = attrib main date loc
signature_noise = 0.06

[style chronicle]
template = {subj} {verb} {obj} in {loc}
lexicon = approve:ratify reject:refuse cut:trim raise:boost block:bar back:endorse delay:postpone review:examine expand:enlarge suspend:halt defend:uphold criticize:blast announce:declare fund:finance cancel:axe extend:lengthen
source_tag = chronicle-desk herald-wire --
clause_order = main loc date attrib
signature_noise = 0
out_of_domain = true

[style ledger]
template = {obj} : {subj} {verb} on {date}
lexicon = approve:pass reject:deny cut:reduce raise:increase block:stop back:favor delay:defer review:assess expand:grow suspend:drop defend:protect criticize:condemn announce:reveal fund:pay cancel:drop extend:renew
source_tag = tribune-news ::
clause_order = date main attrib loc
signature_noise = 0.06
out_of_domain = true
";

pub fn default_specs() -> Vec<SynthStyleSpec> {
    parse_specs("<default specs>", DEFAULT_SPECS).expect("built-in specs parse")
}

/// One sampled content fact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub subj: &'static str,
    pub verb: usize,
    pub obj: &'static str,
    pub loc: &'static str,
    pub date: &'static str,
    pub attrib: &'static str,
}

impl Fact {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Fact {
            subj: SUBJECTS.choose(rng).unwrap(),
            verb: rng.gen_range(0..VERBS.len()),
            obj: OBJECTS.choose(rng).unwrap(),
            loc: LOCATIONS.choose(rng).unwrap(),
            date: DAYS.choose(rng).unwrap(),
            attrib: ATTRIBUTIONS.choose(rng).unwrap(),
        }
    }

    fn clause(&self, c: Clause) -> Vec<&'static str> {
        match c {
            Clause::Main => vec![self.subj, VERBS[self.verb].1, self.obj],
            Clause::Loc => vec!["in", self.loc],
            Clause::Date => vec!["on", self.date],
            Clause::Attrib => vec![self.attrib, "said"],
        }
    }
}

/// Renders the article. `noisy` drops the tag and uses `order` as given.
pub fn render_source(fact: &Fact, tag: &[String], order: &[Clause]) -> String {
    let mut words: Vec<&str> = tag.iter().map(String::as_str).collect();
    for (i, &c) in order.iter().enumerate() {
        if i > 0 {
            words.push(",");
        }
        words.extend(fact.clause(c));
    }
    words.push(".");
    words.join(" ")
}

pub fn render_target(fact: &Fact, spec: &SynthStyleSpec) -> String {
    let lex = |key: &str, default: &str| -> String {
        spec.lexicon
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    };
    spec.template
        .iter()
        .map(|part| match part {
            TemplatePart::Word(w) => w.clone(),
            TemplatePart::Slot(s) => match s.as_str() {
                "subj" => lex(fact.subj, fact.subj),
                "verb" => {
                    let (action, _, headline) = VERBS[fact.verb];
                    lex(action, headline)
                }
                "obj" => lex(fact.obj, fact.obj),
                "loc" => lex(fact.loc, fact.loc),
                "date" => lex(fact.date, fact.date),
                _ => unreachable!("validated slot"),
            },
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n_per_style` examples per spec, in spec order. Style `i` draws from RNG
/// stream `i` of the seed, so adding a style never changes the others.
/// Out-of-domain styles are written unlabelled.
pub fn synth_corpus(specs: &[SynthStyleSpec], n_per_style: usize, seed: u64) -> Result<Vec<RawExample>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no style specs".into()));
    }
    if n_per_style == 0 {
        return Err(Error::InvalidArgument("n_per_style must be at least 1".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let mut out = Vec::with_capacity(specs.len() * n_per_style);
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for _ in 0..n_per_style {
            let fact = Fact::sample(&mut rng);
            let noisy = spec.signature_noise > 0.0 && rng.gen_bool(spec.signature_noise);
            let source = if noisy {
                let mut order = Clause::ALL.to_vec();
                order.shuffle(&mut rng);
                render_source(&fact, &[], &order)
            } else {
                render_source(&fact, &spec.source_tag, &spec.clause_order)
            };
            out.push(RawExample {
                source,
                target: render_target(&fact, spec),
                style: (!spec.out_of_domain).then(|| spec.name.clone()),
            });
        }
    }
    Ok(out)
}

/// Per-style splits of a corpus produced by [`synth_corpus`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
    pub test: Vec<RawExample>,
    /// All examples of each out-of-domain style, by name.
    pub out_of_domain: Vec<(String, Vec<RawExample>)>,
}

/// 80/10/10 split within each in-domain style (dev and test get
/// `floor(n / 10)` each).
pub fn split_corpus(specs: &[SynthStyleSpec], corpus: &[RawExample], n_per_style: usize) -> Result<Splits> {
    if corpus.len() != specs.len() * n_per_style {
        return Err(Error::InvalidArgument(format!(
            "corpus has {} examples, expected {} x {}",
            corpus.len(),
            specs.len(),
            n_per_style
        )));
    }
    let mut s = Splits::default();
    let held = n_per_style / 10;
    let n_train = n_per_style - 2 * held;
    for (spec, chunk) in specs.iter().zip(corpus.chunks(n_per_style)) {
        if spec.out_of_domain {
            s.out_of_domain.push((spec.name.clone(), chunk.to_vec()));
            continue;
        }
        s.train.extend_from_slice(&chunk[..n_train]);
        s.dev.extend_from_slice(&chunk[n_train..n_train + held]);
        s.test.extend_from_slice(&chunk[n_train + held..]);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let specs = default_specs();
        assert_eq!(specs.len(), 6);
        assert_eq!(specs.iter().filter(|s| !s.out_of_domain).count(), 4);
    }

    #[test]
    fn unknown_slot_rejected_with_line() {
        let err = parse_specs("s", "[style a]\n\ntemplate = {subj} {weather}\n").unwrap_err();
        assert!(err.to_string().starts_with("s:3:"), "{err}");
        assert!(err.to_string().contains("weather"), "{err}");
    }

    #[test]
    fn spec_errors_name_lines() {
        let cases = [
            ("template = {subj}\n", 1),
            ("[style a]\ntemplate = {subj}\ncolour = red\n", 3),
            ("[style a]\ntemplate = {subj}\nclause_order = main loc\n", 1),
            ("[style a]\nlexicon = x:y\n", 1),
            ("[style a]\ntemplate = {obj}\n[style a]\ntemplate = {obj}\n", 3),
            ("[style a]\ntemplate = {obj}\nlexicon = broken\n", 3),
        ];
        for (text, line) in cases {
            match parse_specs("s", text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn rendering() {
        let spec = &parse_specs("s", "[style a]\ntemplate = {loc} : {subj} {verb} {obj}\nlexicon = cut:slash police:cops\nsource_tag = a-wire --\nclause_order = loc main date attrib\n").unwrap()[0];
        let fact = Fact {
            subj: "police",
            verb: 2,
            obj: "taxes",
            loc: "lima",
            date: "monday",
            attrib: "sources",
        };
        assert_eq!(
            render_source(&fact, &spec.source_tag, &spec.clause_order),
            "a-wire -- in lima , police cut taxes , on monday , sources said ."
        );
        assert_eq!(render_target(&fact, spec), "lima : cops slash taxes");
    }

    #[test]
    fn deterministic_and_labelled() {
        let specs = default_specs();
        let a = synth_corpus(&specs, 20, 5).unwrap();
        assert_eq!(a, synth_corpus(&specs, 20, 5).unwrap());
        assert_ne!(a, synth_corpus(&specs, 20, 6).unwrap());
        assert_eq!(a[0].style.as_deref(), Some("herald"));
        assert!(a[4 * 20..].iter().all(|e| e.style.is_none()));
    }

    #[test]
    fn splits_are_80_10_10() {
        let specs = default_specs();
        let c = synth_corpus(&specs, 50, 1).unwrap();
        let s = split_corpus(&specs, &c, 50).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (160, 20, 20));
        assert_eq!(s.out_of_domain.len(), 2);
        let one = split_corpus(&specs, &synth_corpus(&specs, 1, 1).unwrap(), 1).unwrap();
        assert_eq!(one.train.len(), 4);
    }
}
