use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SlpRng;
use crate::slu_codec::{SemanticFrame, Slot};

/// One element of a production.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    /// Literal text; one alternative is chosen uniformly. May be empty.
    Words(Vec<String>),
    /// Filled from the lexicon of this slot type and recorded in the frame.
    Slot(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Production {
    pub intents: Vec<String>,
    pub pieces: Vec<Piece>,
}

/// A sampled production with its rendered transcript and frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub transcript: String,
    pub frame: SemanticFrame,
}

impl Instance {
    /// Key identifying the slot-value combination, independent of phrasing.
    pub fn combination(&self) -> String {
        let mut parts: Vec<String> = self
            .frame
            .slots
            .iter()
            .map(|s| format!("{}={}", s.slot_type, s.value))
            .collect();
        parts.sort();
        format!("{}|{}", self.frame.intents.join("+"), parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateGrammar {
    pub name: String,
    pub productions: Vec<Production>,
    pub lexicons: BTreeMap<String, Vec<String>>,
    /// Whether dev/test slot-value combinations must be unseen in train.
    pub held_out_combinations: bool,
}

fn words(alts: &[&str]) -> Piece {
    Piece::Words(alts.iter().map(|s| s.to_string()).collect())
}

fn slot(t: &str) -> Piece {
    Piece::Slot(t.to_string())
}

fn lit(s: &str) -> Piece {
    words(&[s])
}

impl TemplateGrammar {
    pub fn validate(&self) -> Result<()> {
        if self.productions.is_empty() {
            return Err(Error::Data(format!("grammar {} has no productions", self.name)));
        }
        for p in &self.productions {
            if p.intents.is_empty() {
                return Err(Error::Data("production without an intent".into()));
            }
            for piece in &p.pieces {
                match piece {
                    Piece::Words(alts) if alts.is_empty() => {
                        return Err(Error::Data("empty alternative list".into()))
                    }
                    Piece::Slot(t) => match self.lexicons.get(t) {
                        Some(l) if !l.is_empty() => {}
                        _ => return Err(Error::Data(format!("no lexicon for slot type {t}"))),
                    },
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "fsc-like" => Ok(Self::fsc_like()),
            "atis-like" => Ok(Self::atis_like()),
            other => Err(Error::Config(format!("unknown grammar {other:?}"))),
        }
    }

    /// Every intent label the grammar can emit.
    pub fn intent_labels(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .productions
            .iter()
            .flat_map(|p| p.intents.iter().cloned())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn slot_types(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .productions
            .iter()
            .flat_map(|p| p.pieces.iter())
            .filter_map(|p| match p {
                Piece::Slot(t) => Some(t.clone()),
                Piece::Words(_) => None,
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Samples one production (uniformly) and renders it.
    pub fn sample(&self, rng: &mut SlpRng) -> Instance {
        let p = &self.productions[rng.random_range(0..self.productions.len())];
        let mut out: Vec<&str> = Vec::new();
        let mut slots = Vec::new();
        for piece in &p.pieces {
            match piece {
                Piece::Words(alts) => {
                    let w = &alts[rng.random_range(0..alts.len())];
                    if !w.is_empty() {
                        out.push(w);
                    }
                }
                Piece::Slot(t) => {
                    let lex = &self.lexicons[t];
                    let v = &lex[rng.random_range(0..lex.len())];
                    out.push(v);
                    slots.push(Slot::new(t.clone(), v.clone()));
                }
            }
        }
        Instance {
            transcript: out.join(" "),
            frame: SemanticFrame::new(p.intents.clone(), slots),
        }
    }

    /// Voice-command style grammar: one intent per action/object/location
    /// triple, no slots.
    pub fn fsc_like() -> Self {
        let on = ["turn on", "switch on", "put on"];
        let off = ["turn off", "switch off"];
        let up = ["turn up", "increase", "raise"];
        let down = ["turn down", "decrease", "lower"];
        type Phr = (&'static str, &'static str, Vec<Vec<&'static str>>);
        let rows: Vec<Phr> = vec![
            ("activate", "lights", vec![on.to_vec(), vec!["the lights", "lights"]]),
            ("deactivate", "lights", vec![off.to_vec(), vec!["the lights", "lights"]]),
            ("increase", "heat", vec![up.to_vec(), vec!["the heat", "the temperature"]]),
            ("decrease", "heat", vec![down.to_vec(), vec!["the heat", "the temperature"]]),
        ];
        let mut productions = Vec::new();
        let locs = [("kitchen", "in the kitchen"), ("bedroom", "in the bedroom"), ("washroom", "in the washroom")];
        for (action, object, phr) in &rows {
            for (loc, loc_phr) in &locs {
                let mut pieces: Vec<Piece> = phr.iter().map(|a| words(a)).collect();
                pieces.push(lit(loc_phr));
                productions.push(Production {
                    intents: vec![format!("{action}_{object}_{loc}")],
                    pieces,
                });
            }
            let pieces: Vec<Piece> = phr.iter().map(|a| words(a)).collect();
            productions.push(Production {
                intents: vec![format!("{action}_{object}_none")],
                pieces,
            });
        }
        let simple: Vec<(&str, Vec<&str>)> = vec![
            ("activate_music_none", vec!["play music", "put on some music", "start the music"]),
            ("deactivate_music_none", vec!["stop the music", "pause music", "turn the music off"]),
            ("increase_volume_none", vec!["volume up", "make it louder", "increase the volume"]),
            ("decrease_volume_none", vec!["volume down", "make it quieter", "lower the volume"]),
            ("activate_lamp_none", vec!["turn the lamp on", "switch on the lamp"]),
            ("deactivate_lamp_none", vec!["turn the lamp off", "switch off the lamp"]),
            ("bring_newspaper_none", vec!["bring me the newspaper", "get the newspaper"]),
            ("bring_juice_none", vec!["bring me some juice", "get me juice"]),
            ("bring_socks_none", vec!["bring my socks", "get me my socks"]),
            ("bring_shoes_none", vec!["bring my shoes", "get me my shoes"]),
            ("change_language_chinese_none", vec!["switch the language to chinese", "use chinese"]),
            ("change_language_korean_none", vec!["switch the language to korean", "use korean"]),
            ("change_language_english_none", vec!["switch the language to english", "use english"]),
            ("change_language_german_none", vec!["switch the language to german", "use german"]),
            ("change_language_none_none", vec!["change the language", "switch language"]),
        ];
        for (intent, alts) in simple {
            productions.push(Production {
                intents: vec![intent.to_string()],
                pieces: vec![words(&alts)],
            });
        }
        TemplateGrammar {
            name: "fsc-like".into(),
            productions,
            lexicons: BTreeMap::new(),
            held_out_combinations: false,
        }
    }

    /// Flight-information style grammar with typed slots and occasional
    /// double intents.
    pub fn atis_like() -> Self {
        let mut lexicons = BTreeMap::new();
        let cities = [
            "boston", "denver", "dallas", "atlanta", "pittsburgh", "baltimore", "seattle",
            "oakland", "chicago", "miami", "phoenix", "houston",
        ];
        let lex = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        lexicons.insert("from_city".to_string(), lex(&cities));
        lexicons.insert("to_city".to_string(), lex(&cities));
        lexicons.insert("city_name".to_string(), lex(&cities));
        lexicons.insert(
            "depart_date".to_string(),
            lex(&["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]),
        );
        lexicons.insert(
            "depart_time".to_string(),
            lex(&["morning", "afternoon", "evening", "night"]),
        );
        lexicons.insert(
            "airline_name".to_string(),
            lex(&["delta", "united", "american", "continental"]),
        );
        lexicons.insert(
            "class_type".to_string(),
            lex(&["first class", "coach", "business class"]),
        );

        let show = words(&["show me", "list", "i want", "give me"]);
        let route = || vec![lit("from"), slot("from_city"), lit("to"), slot("to_city")];
        let mut productions = Vec::new();
        let mut add = |intents: &[&str], pieces: Vec<Piece>| {
            productions.push(Production {
                intents: intents.iter().map(|s| s.to_string()).collect(),
                pieces,
            })
        };
        let flights = |extra: Vec<Piece>| {
            let mut p = vec![show.clone(), lit("flights")];
            p.extend(route());
            p.extend(extra);
            p
        };
        add(&["flight"], flights(vec![]));
        add(&["flight"], flights(vec![lit("on"), slot("depart_date")]));
        add(&["flight"], flights(vec![lit("on"), slot("depart_date"), slot("depart_time")]));
        add(&["flight"], flights(vec![lit("in the"), slot("depart_time")]));
        add(&["flight"], flights(vec![lit("on"), slot("airline_name")]));
        add(
            &["flight"],
            vec![show.clone(), slot("airline_name"), lit("flights")]
                .into_iter()
                .chain(route())
                .chain([lit("on"), slot("depart_date")])
                .collect(),
        );
        add(
            &["airfare"],
            vec![words(&["what is the fare", "how much is a ticket", "fares"])]
                .into_iter()
                .chain(route())
                .collect(),
        );
        add(
            &["airfare"],
            vec![words(&["what is the fare", "how much is a ticket"])]
                .into_iter()
                .chain([lit("in"), slot("class_type")])
                .chain(route())
                .collect(),
        );
        add(
            &["ground_service"],
            vec![
                words(&["what ground transportation is there in", "ground transportation in"]),
                slot("city_name"),
            ],
        );
        add(
            &["airline"],
            vec![words(&["which airlines fly", "what airlines go"])]
                .into_iter()
                .chain(route())
                .collect(),
        );
        add(
            &["flight_time"],
            vec![words(&["when do flights leave", "what time do flights leave"])]
                .into_iter()
                .chain(route())
                .chain([lit("on"), slot("depart_date")])
                .collect(),
        );
        add(
            &["flight", "airfare"],
            vec![show.clone(), lit("flights and fares")]
                .into_iter()
                .chain(route())
                .collect(),
        );
        add(
            &["flight", "airfare"],
            vec![show, lit("flights and fares")]
                .into_iter()
                .chain(route())
                .chain([lit("on"), slot("depart_date")])
                .collect(),
        );
        TemplateGrammar {
            name: "atis-like".into(),
            productions,
            lexicons,
            held_out_combinations: true,
        }
    }
}
