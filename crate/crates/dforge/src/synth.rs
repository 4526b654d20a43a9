//! Synthetic English-like text and gold disfluency annotations.
//!
//! The generator is a small probabilistic grammar with subject-verb
//! agreement, tense, negation, modals, prepositional phrases, embedded
//! clauses and coordination over a vocabulary of roughly 400 words. It
//! stands in for a news corpus when none is at hand, and gives a labeled
//! benchmark with known reparandum types for fine-tuning experiments.
//!
//! Raw sentences are emitted with capitalization and punctuation so they
//! pass through the normal text pipeline.

use dforge_core::corruptor::{Tag, TagSequence};
use dforge_core::rng::{seeded, DetRng};
use dforge_core::textproc::{normalize, Sentence};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Number {
    Singular,
    Plural,
}

/// Third-person singular subjects take `-s` verb forms in the present.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Person {
    FirstSingular,
    ThirdSingular,
    Other,
}

impl Person {
    fn copula(self) -> &'static str {
        match self {
            Person::FirstSingular => "am",
            Person::ThirdSingular => "is",
            Person::Other => "are",
        }
    }
}

struct Noun {
    singular: &'static str,
    plural: &'static str,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Frame {
    /// Takes a noun-phrase object.
    Transitive,
    /// Takes no object.
    Intransitive,
    /// Takes a clause, optionally introduced by `that`.
    Clausal,
    /// Takes `to` plus a base-form verb phrase.
    Control,
}

struct Verb {
    base: &'static str,
    third: &'static str,
    past: &'static str,
    frame: Frame,
}

macro_rules! nouns {
    ($($s:literal $p:literal),* $(,)?) => { &[$(Noun { singular: $s, plural: $p }),*] };
}

macro_rules! verbs {
    ($frame:ident: $($b:literal $t:literal $p:literal),* $(,)?) => {
        &[$(Verb { base: $b, third: $t, past: $p, frame: Frame::$frame }),*]
    };
}

const PEOPLE: &[Noun] = nouns![
    "man" "men", "woman" "women", "child" "children", "teacher" "teachers", "doctor" "doctors",
    "student" "students", "friend" "friends", "neighbor" "neighbors", "driver" "drivers", "farmer" "farmers",
    "lawyer" "lawyers", "nurse" "nurses", "worker" "workers", "officer" "officers", "player" "players",
    "manager" "managers", "brother" "brothers", "sister" "sisters", "parent" "parents", "customer" "customers",
    "reporter" "reporters", "soldier" "soldiers", "judge" "judges", "pilot" "pilots", "cook" "cooks",
];

const THINGS: &[Noun] = nouns![
    "car" "cars", "house" "houses", "book" "books", "dog" "dogs", "cat" "cats", "job" "jobs",
    "school" "schools", "company" "companies", "city" "cities", "program" "programs", "problem" "problems",
    "idea" "ideas", "plan" "plans", "letter" "letters", "computer" "computers", "phone" "phones",
    "game" "games", "movie" "movies", "story" "stories", "question" "questions", "report" "reports",
    "meeting" "meetings", "project" "projects", "garden" "gardens", "road" "roads", "river" "rivers",
    "bridge" "bridges", "truck" "trucks", "store" "stores", "office" "offices", "church" "churches",
    "law" "laws", "tax" "taxes", "price" "prices", "bill" "bills", "machine" "machines", "picture" "pictures",
    "box" "boxes", "horse" "horses", "tree" "trees", "team" "teams", "market" "markets", "war" "wars",
    "system" "systems", "paper" "papers", "key" "keys", "bag" "bags", "table" "tables", "window" "windows",
];

const PLACES: &[&str] = &[
    "town",
    "park",
    "kitchen",
    "station",
    "hospital",
    "library",
    "country",
    "village",
    "yard",
    "garage",
    "airport",
    "restaurant",
    "hotel",
    "factory",
    "farm",
    "beach",
    "mountain",
    "street",
    "building",
    "room",
];

const NAMES: &[&str] = &[
    "john", "mary", "david", "susan", "michael", "linda", "robert", "karen", "james", "nancy", "paul", "lisa", "mark",
    "sarah", "peter", "laura", "tom", "anna", "george", "helen", "frank", "ruth", "steve", "carol", "brian", "emma",
    "kevin", "julia", "eric", "diane",
];

const ADJECTIVES: &[&str] = &[
    "big",
    "small",
    "old",
    "new",
    "good",
    "bad",
    "long",
    "short",
    "young",
    "red",
    "blue",
    "green",
    "black",
    "white",
    "happy",
    "nice",
    "strange",
    "quiet",
    "loud",
    "cheap",
    "expensive",
    "important",
    "local",
    "public",
    "private",
    "little",
    "large",
    "early",
    "late",
    "hard",
    "easy",
    "real",
    "simple",
    "busy",
    "famous",
    "dark",
    "bright",
    "warm",
    "cold",
    "empty",
];

const TRANSITIVE: &[Verb] = verbs![Transitive:
    "see" "sees" "saw", "like" "likes" "liked", "want" "wants" "wanted", "need" "needs" "needed",
    "buy" "buys" "bought", "sell" "sells" "sold", "find" "finds" "found", "take" "takes" "took",
    "make" "makes" "made", "build" "builds" "built", "watch" "watches" "watched", "help" "helps" "helped",
    "call" "calls" "called", "visit" "visits" "visited", "bring" "brings" "brought", "use" "uses" "used",
    "fix" "fixes" "fixed", "read" "reads" "read", "write" "writes" "wrote", "move" "moves" "moved",
    "clean" "cleans" "cleaned", "open" "opens" "opened", "pay" "pays" "paid", "meet" "meets" "met",
    "lose" "loses" "lost", "keep" "keeps" "kept", "follow" "follows" "followed", "change" "changes" "changed",
    "love" "loves" "loved", "hate" "hates" "hated", "carry" "carries" "carried", "check" "checks" "checked",
];

const INTRANSITIVE: &[Verb] = verbs![Intransitive:
    "work" "works" "worked", "live" "lives" "lived", "sleep" "sleeps" "slept", "run" "runs" "ran",
    "wait" "waits" "waited", "arrive" "arrives" "arrived", "leave" "leaves" "left", "stay" "stays" "stayed",
    "talk" "talks" "talked", "smile" "smiles" "smiled", "laugh" "laughs" "laughed", "travel" "travels" "traveled",
    "win" "wins" "won", "fail" "fails" "failed", "grow" "grows" "grew", "sit" "sits" "sat", "swim" "swims" "swam",
    "cry" "cries" "cried", "rest" "rests" "rested", "return" "returns" "returned",
];

const CLAUSAL: &[Verb] = verbs![Clausal:
    "think" "thinks" "thought", "say" "says" "said", "know" "knows" "knew", "believe" "believes" "believed",
    "hope" "hopes" "hoped", "guess" "guesses" "guessed", "feel" "feels" "felt", "hear" "hears" "heard",
];

const CONTROL: &[Verb] = verbs![Control:
    "try" "tries" "tried", "decide" "decides" "decided", "plan" "plans" "planned", "like" "likes" "liked",
    "start" "starts" "started", "forget" "forgets" "forgot", "promise" "promises" "promised",
];

const SINGULAR_DETS: &[&str] =
    &["the", "a", "this", "that", "my", "your", "his", "her", "our", "their", "every", "one"];
const PLURAL_DETS: &[&str] =
    &["the", "these", "those", "my", "your", "his", "her", "our", "their", "some", "many", "two", "three", "all"];
const PREPOSITIONS: &[&str] =
    &["in", "at", "near", "behind", "from", "with", "for", "by", "on", "under", "to", "after"];
const ADVERBS: &[&str] = &[
    "today",
    "yesterday",
    "again",
    "now",
    "later",
    "often",
    "never",
    "always",
    "really",
    "quickly",
    "slowly",
    "together",
    "tonight",
    "there",
    "here",
];
const MODALS: &[&str] = &["will", "can", "should", "could", "would", "might", "must"];
const INTENSIFIERS: &[&str] = &["very", "quite", "so", "too", "pretty"];
const CONJUNCTIONS: &[&str] = &["and", "but", "because", "so", "when", "while", "if", "although"];
const OPENERS: &[&str] = &["well", "so", "actually", "now", "and", "but", "okay", "yes", "no", "oh"];

fn pick<'a, T>(rng: &mut DetRng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty word list")
}

struct Builder<'r> {
    rng: &'r mut DetRng,
    out: Vec<String>,
}

impl Builder<'_> {
    fn push(&mut self, w: impl Into<String>) {
        self.out.push(w.into());
    }

    fn word(&mut self, list: &'static [&'static str]) {
        let w = *pick(self.rng, list);
        self.push(w);
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn noun_phrase(&mut self, depth: usize) -> (Number, Person) {
        let roll: f64 = self.rng.gen();
        if roll < 0.12 {
            self.word(NAMES);
            return (Number::Singular, Person::ThirdSingular);
        }
        let number = if self.chance(0.35) { Number::Plural } else { Number::Singular };
        let dets = if number == Number::Plural { PLURAL_DETS } else { SINGULAR_DETS };
        let det = *pick(self.rng, dets);
        // "a" before a vowel-initial word becomes "an".
        let det_at = self.out.len();
        self.push(det);
        if self.chance(0.35) {
            if self.chance(0.15) {
                self.word(INTENSIFIERS);
            }
            self.word(ADJECTIVES);
        }
        let pool = if self.chance(0.4) { PEOPLE } else { THINGS };
        let noun = pick(self.rng, pool);
        self.push(if number == Number::Plural { noun.plural } else { noun.singular });
        if det == "a" && self.out[det_at + 1].starts_with(['a', 'e', 'i', 'o', 'u']) {
            self.out[det_at] = "an".into();
        }
        if depth < 2 && self.chance(0.12) {
            self.prepositional_phrase(depth + 1);
        }
        let person = if number == Number::Singular { Person::ThirdSingular } else { Person::Other };
        (number, person)
    }

    fn subject(&mut self, depth: usize) -> Person {
        if self.chance(0.4) {
            let (w, p) = *pick(
                self.rng,
                &[
                    ("i", Person::FirstSingular),
                    ("you", Person::Other),
                    ("we", Person::Other),
                    ("they", Person::Other),
                    ("he", Person::ThirdSingular),
                    ("she", Person::ThirdSingular),
                    ("it", Person::ThirdSingular),
                ],
            );
            self.push(w);
            p
        } else {
            self.noun_phrase(depth).1
        }
    }

    fn object(&mut self, depth: usize) {
        if self.chance(0.2) {
            self.word(&["me", "you", "him", "her", "us", "them", "it"]);
        } else {
            self.noun_phrase(depth);
        }
    }

    fn prepositional_phrase(&mut self, depth: usize) {
        self.word(PREPOSITIONS);
        if self.chance(0.5) {
            self.push("the");
            self.word(PLACES);
        } else {
            self.noun_phrase(depth + 1);
        }
    }

    /// Picks the verb and writes its inflected form, returning its frame.
    fn verb(&mut self, person: Person) -> Frame {
        let pool = *pick(self.rng, &[TRANSITIVE, TRANSITIVE, INTRANSITIVE, CLAUSAL, CONTROL]);
        let verb = pick(self.rng, pool);
        let roll: f64 = self.rng.gen();
        if roll < 0.35 {
            self.push(verb.past);
        } else if roll < 0.55 {
            self.word(MODALS);
            if self.chance(0.15) {
                self.push("not");
            }
            self.push(verb.base);
        } else if roll < 0.65 {
            let aux = match (person, self.chance(0.5)) {
                (_, true) => "didn't",
                (Person::ThirdSingular, false) => "doesn't",
                (_, false) => "don't",
            };
            self.push(aux);
            self.push(verb.base);
        } else if roll < 0.72 {
            self.push(person.copula());
            self.push(progressive(verb.base));
        } else {
            self.push(if person == Person::ThirdSingular { verb.third } else { verb.base });
        }
        verb.frame
    }

    fn verb_phrase_base(&mut self, depth: usize) {
        let pool = *pick(self.rng, &[TRANSITIVE, INTRANSITIVE]);
        let verb = pick(self.rng, pool);
        self.push(verb.base);
        if verb.frame == Frame::Transitive {
            self.object(depth + 1);
        }
    }

    fn clause(&mut self, depth: usize) {
        let person = self.subject(depth);
        if self.chance(0.08) {
            // Copula with an adjective.
            self.push(person.copula());
            if self.chance(0.3) {
                self.word(INTENSIFIERS);
            }
            self.word(ADJECTIVES);
        } else {
            match self.verb(person) {
                Frame::Transitive => self.object(depth),
                Frame::Intransitive => {}
                Frame::Clausal if depth < 2 => {
                    if self.chance(0.5) {
                        self.push("that");
                    }
                    self.clause(depth + 1);
                    return;
                }
                Frame::Clausal => self.word(&["so", "it"]),
                Frame::Control => {
                    self.push("to");
                    self.verb_phrase_base(depth);
                }
            }
        }
        if self.chance(0.3) {
            self.prepositional_phrase(depth);
        }
        if self.chance(0.2) {
            self.word(ADVERBS);
        }
        if depth == 0 && self.chance(0.2) {
            self.word(CONJUNCTIONS);
            self.clause(depth + 1);
        }
    }
}

fn progressive(base: &'static str) -> String {
    const DOUBLED: &[&str] = &["run", "sit", "swim", "win", "plan", "forget"];
    if DOUBLED.contains(&base) {
        format!("{base}{}ing", &base[base.len() - 1..])
    } else if base.ends_with('e') && !base.ends_with("ee") {
        format!("{}ing", &base[..base.len() - 1])
    } else {
        format!("{base}ing")
    }
}

/// One sentence as lowercase tokens.
pub fn sentence_tokens(rng: &mut DetRng) -> Vec<String> {
    let mut b = Builder { rng, out: Vec::new() };
    if b.chance(0.08) {
        b.word(OPENERS);
    }
    b.clause(0);
    b.out
}

/// One raw text line with capitalization and punctuation.
pub fn raw_sentence(rng: &mut DetRng) -> String {
    let tokens = sentence_tokens(rng);
    let mut line = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        if i == 0 || t == "i" || NAMES.contains(&t.as_str()) {
            let mut cs = t.chars();
            if let Some(c) = cs.next() {
                line.extend(c.to_uppercase());
                line.push_str(cs.as_str());
            }
        } else {
            line.push_str(t);
        }
        if i == 0 && OPENERS.contains(&t.as_str()) && tokens.len() > 1 {
            line.push(',');
        }
    }
    line.push(if rng.gen_bool(0.1) { '?' } else { '.' });
    line
}

/// `n` raw lines, deterministic in `seed`.
pub fn raw_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = seeded(seed, 0x7e47);
    (0..n).map(|_| raw_sentence(&mut rng)).collect()
}

/// `n` normalized sentences, deterministic in `seed`.
pub fn corpus(n: usize, seed: u64) -> Vec<Sentence> {
    raw_corpus(n, seed).iter().filter_map(|l| normalize(l)).collect()
}

/// Reparandum categories produced by [`disfluent`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Disfluency {
    /// The reparandum is repeated verbatim.
    Repetition,
    /// The reparandum is corrected: a copy of the preceding words plus a
    /// different word of the same kind.
    Repair,
    /// An abandoned sentence start.
    Restart,
}

const INTERREGNA: &[&str] = &["you_know", "i_mean", "well", "like"];

/// Words interchangeable with `w` in a repair, if any.
fn substitutes(w: &str) -> Option<Vec<&'static str>> {
    let lists: [&[&str]; 6] = [NAMES, ADJECTIVES, PLACES, PREPOSITIONS, ADVERBS, MODALS];
    for list in lists {
        if list.contains(&w) {
            return Some(list.iter().copied().filter(|x| *x != w).collect());
        }
    }
    for pool in [PEOPLE, THINGS] {
        if pool.iter().any(|n| n.singular == w) {
            return Some(pool.iter().map(|n| n.singular).filter(|x| *x != w).collect());
        }
        if pool.iter().any(|n| n.plural == w) {
            return Some(pool.iter().map(|n| n.plural).filter(|x| *x != w).collect());
        }
    }
    for pool in [TRANSITIVE, INTRANSITIVE, CLAUSAL, CONTROL] {
        for pick in [|v: &Verb| v.base, |v: &Verb| v.third, |v: &Verb| v.past] {
            if pool.iter().any(|v| pick(v) == w) {
                return Some(pool.iter().map(pick).filter(|x| *x != w).collect());
            }
        }
    }
    None
}

/// Inserts one disfluency of `kind` into `tokens`, returning the labeled
/// sequence, or `None` when the sentence offers no site for that kind.
pub fn inject(
    tokens: &[String],
    labels: &[Tag],
    kind: Disfluency,
    rng: &mut DetRng,
) -> Option<(Vec<String>, Vec<Tag>)> {
    // Sites are boundaries between fluent tokens outside existing reparanda.
    let fluent: Vec<usize> = (0..tokens.len()).filter(|&i| labels[i] == Tag::O).collect();
    if fluent.is_empty() {
        return None;
    }
    let (at, reparandum): (usize, Vec<String>) = match kind {
        Disfluency::Repetition => {
            let start = rng.gen_range(0..fluent.len());
            let m = (*[1, 1, 1, 2, 2, 3].choose(rng).unwrap()).min(fluent.len() - start);
            let span: Vec<String> = fluent[start..start + m].iter().map(|&i| tokens[i].clone()).collect();
            (fluent[start], span)
        }
        Disfluency::Repair => {
            let sites: Vec<usize> = (0..fluent.len()).filter(|&j| substitutes(&tokens[fluent[j]]).is_some()).collect();
            let &j = sites.choose(rng)?;
            let keep = rng.gen_range(0..=2usize.min(j));
            let mut span: Vec<String> = fluent[j - keep..j].iter().map(|&i| tokens[i].clone()).collect();
            span.push((*substitutes(&tokens[fluent[j]])?.choose(rng)?).to_string());
            (fluent[j - keep], span)
        }
        Disfluency::Restart => {
            let other = sentence_tokens(rng);
            let m = rng.gen_range(1..=4usize.min(other.len()));
            let span = other[..m].to_vec();
            if span.iter().zip(tokens).all(|(a, b)| a == b) {
                return None;
            }
            (0, span)
        }
    };
    // Keep reparanda apart so each stays its own span.
    if labels[at] == Tag::D || (at > 0 && labels[at - 1] == Tag::D) {
        return None;
    }
    let mut out_t = tokens[..at].to_vec();
    let mut out_l = labels[..at].to_vec();
    out_l.extend(std::iter::repeat_n(Tag::D, reparandum.len()));
    out_t.extend(reparandum);
    // An interregnum would sit between a repetition and its copy.
    if kind != Disfluency::Repetition && rng.gen_bool(0.3) {
        out_t.push(pick(rng, INTERREGNA).to_string());
        out_l.push(Tag::O);
    }
    out_t.extend_from_slice(&tokens[at..]);
    out_l.extend_from_slice(&labels[at..]);
    Some((out_t, out_l))
}

/// Gold annotated sentences: about 60% carry one or two disfluencies, split
/// roughly 50/30/20 between repetitions, repairs and restarts.
pub fn gold_corpus(n: usize, seed: u64) -> Vec<TagSequence> {
    let mut rng = seeded(seed, 0x901d);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let raw = raw_sentence(&mut rng);
        let Some(sentence) = normalize(&raw) else { continue };
        let mut tokens: Vec<String> = sentence.into_tokens();
        let mut labels = vec![Tag::O; tokens.len()];
        if rng.gen_bool(0.6) {
            let count = if rng.gen_bool(0.25) { 2 } else { 1 };
            for _ in 0..count {
                let roll: f64 = rng.gen();
                let kind = if roll < 0.5 {
                    Disfluency::Repetition
                } else if roll < 0.8 {
                    Disfluency::Repair
                } else {
                    Disfluency::Restart
                };
                if let Some((t, l)) = inject(&tokens, &labels, kind, &mut rng) {
                    tokens = t;
                    labels = l;
                }
            }
        }
        out.push(TagSequence::new(tokens, labels).expect("parallel"));
    }
    out
}
