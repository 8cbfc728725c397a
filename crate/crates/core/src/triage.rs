//! Pre-participation self-assessment: questionnaire answers to a risk class
//! and participation routes.
//!
//! The outcome is non-binding guidance. Questionnaire and rules are data in
//! the block format (`questionnaire { ... }` and `rules { ... }`), with a
//! default set embedded from `data/triage_default.sbx`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dsl::reader::{expect_identifier, identifier_label, no_label, Reader};
use crate::dsl::syntax::{parse_blocks, parse_single, Block, Field, Literal};
use crate::dsl::ParseError;
use crate::vocab::{AnswerKind, RiskClass, Route};

pub const DEFAULT_MODEL: &str = include_str!("../data/triage_default.sbx");

/// Label carried by every rendering of a triage outcome.
pub const GUIDANCE_LABEL: &str = "non-binding guidance";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Bool(bool),
    Choice(String),
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Answer::Bool(b) => write!(f, "{b}"),
            Answer::Choice(c) => write!(f, "{c:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub text: String,
    pub answer_kind: AnswerKind,
    #[serde(default)]
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub version: String,
    pub questions: Vec<Question>,
}

impl Questionnaire {
    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == id)
    }
}

/// Fires when the answer to `question` equals `equals`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: String,
    pub question: String,
    pub equals: Answer,
    pub class: RiskClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageModel {
    pub questionnaire: Questionnaire,
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub questionnaire_version: String,
    pub answers: BTreeMap<String, Answer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageOutcome {
    pub risk_class: RiskClass,
    pub routes: Vec<Route>,
    /// Every fired rule, sorted by id.
    pub rationale: Vec<String>,
    pub guidance: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TriageError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid triage model: {0}")]
    Model(String),
    #[error("answers are for questionnaire version `{found}`, expected `{expected}`")]
    UnknownVersion { expected: String, found: String },
    #[error("answers are incomplete; missing: {}", .0.join(", "))]
    Incomplete(Vec<String>),
    #[error("answers name unknown questions: {}", .0.join(", "))]
    UnknownQuestion(Vec<String>),
    #[error("answer to `{question}` must be {expected}, found {found}")]
    BadAnswer { question: String, expected: String, found: String },
}

/// The fixed routing table.
pub fn route(class: RiskClass) -> Vec<Route> {
    match class {
        RiskClass::Minimal => vec![Route::Helpdesk],
        RiskClass::Limited => vec![Route::Helpdesk, Route::CoreAirs],
        RiskClass::High => vec![Route::ExtendedAirs],
        RiskClass::Prohibited => vec![Route::CeaseOrRedesign],
    }
}

fn answer_literal(f: &Field) -> Result<Answer, ParseError> {
    match &f.value {
        Literal::Bool(b) => Ok(Answer::Bool(*b)),
        Literal::Str(s) | Literal::Ident(s) => Ok(Answer::Choice(s.clone())),
        other => Err(crate::dsl::reader::mismatch(f, "a boolean or a choice", other)),
    }
}

impl TriageModel {
    pub fn default_model() -> Self {
        Self::parse(DEFAULT_MODEL).expect("embedded triage model is valid")
    }

    pub fn parse(source: &str) -> Result<Self, TriageError> {
        let blocks = parse_blocks(source)?;
        let find = |head: &str| -> Result<&Block, TriageError> {
            let mut it = blocks.iter().filter(|b| b.head.text == head);
            let b = it.next().ok_or_else(|| TriageError::Model(format!("missing `{head}` block")))?;
            if it.next().is_some() {
                return Err(TriageError::Model(format!("more than one `{head}` block")));
            }
            Ok(b)
        };
        if let Some(other) = blocks.iter().find(|b| b.head.text != "questionnaire" && b.head.text != "rules") {
            return Err(TriageError::Model(format!("{}: unexpected block `{}`", other.head.pos, other.head.text)));
        }

        let qb = find("questionnaire")?;
        no_label(qb)?;
        let mut r = Reader::new(qb, "questionnaire")?;
        let version = r.required_string("version")?;
        let mut questions: Vec<Question> = Vec::new();
        for b in r.blocks("question") {
            let (pos, question_id) = identifier_label(b)?;
            if question_id == "questionnaire_version" || questions.iter().any(|q| q.question_id == question_id) {
                return Err(TriageError::Model(format!("{pos}: duplicate or reserved question id `{question_id}`")));
            }
            let mut qr = Reader::new(b, format!("questionnaire/{question_id}"))?;
            let text = qr.required_string("text")?;
            let answer_kind: AnswerKind = qr.required_keyword("kind")?;
            let choices = qr.list("choices", |f, lit| crate::dsl::reader::expect_str(f, lit))?.unwrap_or_default();
            qr.finish_strict()?;
            match answer_kind {
                AnswerKind::Boolean if !choices.is_empty() => {
                    return Err(TriageError::Model(format!("boolean question `{question_id}` must not list choices")))
                }
                AnswerKind::SingleChoice if choices.len() < 2 => {
                    return Err(TriageError::Model(format!("question `{question_id}` needs at least two choices")))
                }
                _ => {}
            }
            questions.push(Question { question_id, text, answer_kind, choices });
        }
        r.finish_strict()?;
        let questionnaire = Questionnaire { version, questions };

        let rb = find("rules")?;
        no_label(rb)?;
        let mut r = Reader::new(rb, "rules")?;
        let mut rules: Vec<Rule> = Vec::new();
        for b in r.blocks("rule") {
            let (pos, rule_id) = identifier_label(b)?;
            if rules.iter().any(|x| x.rule_id == rule_id) {
                return Err(TriageError::Model(format!("{pos}: duplicate rule `{rule_id}`")));
            }
            let mut rr = Reader::new(b, format!("rules/{rule_id}"))?;
            let qf = rr.required("question")?;
            let question = expect_identifier(qf, &qf.value)?;
            let equals = match rr.field("equals") {
                Some(f) => answer_literal(f)?,
                None => Answer::Bool(true),
            };
            let class: RiskClass = rr.required_keyword("class")?;
            rr.finish_strict()?;
            let q = questionnaire
                .question(&question)
                .ok_or_else(|| TriageError::Model(format!("rule `{rule_id}` references unknown question `{question}`")))?;
            check_answer(q, &equals).map_err(|e| TriageError::Model(format!("rule `{rule_id}`: {e}")))?;
            rules.push(Rule { rule_id, question, equals, class });
        }
        r.finish_strict()?;
        Ok(TriageModel { questionnaire, rules })
    }
}

fn check_answer(q: &Question, a: &Answer) -> Result<(), TriageError> {
    let ok = match (q.answer_kind, a) {
        (AnswerKind::Boolean, Answer::Bool(_)) => true,
        (AnswerKind::SingleChoice, Answer::Choice(c)) => q.choices.contains(c),
        _ => false,
    };
    if ok {
        return Ok(());
    }
    let expected = match q.answer_kind {
        AnswerKind::Boolean => "true or false".to_string(),
        AnswerKind::SingleChoice => format!("one of {}", q.choices.join(", ")),
    };
    Err(TriageError::BadAnswer { question: q.question_id.clone(), expected, found: a.to_string() })
}

impl AnswerSet {
    /// Parses an `answers { questionnaire_version: "..." <question>: <answer> ... }` file.
    pub fn parse(source: &str) -> Result<Self, TriageError> {
        let b = parse_single(source, "answers")?;
        no_label(&b)?;
        let mut r = Reader::new(&b, "answers")?;
        let questionnaire_version = r.required_string("questionnaire_version")?;
        let mut answers = BTreeMap::new();
        for f in r.remaining_fields() {
            answers.insert(f.key.clone(), answer_literal(f)?);
        }
        r.finish_strict()?;
        Ok(AnswerSet { questionnaire_version, answers })
    }

    /// Every question answered `false`, or with its first choice.
    pub fn negative(q: &Questionnaire) -> Self {
        let answers = q
            .questions
            .iter()
            .map(|q| {
                let a = match q.answer_kind {
                    AnswerKind::Boolean => Answer::Bool(false),
                    AnswerKind::SingleChoice => Answer::Choice(q.choices[0].clone()),
                };
                (q.question_id.clone(), a)
            })
            .collect();
        AnswerSet { questionnaire_version: q.version.clone(), answers }
    }
}

/// Risk class is the most severe class among fired rules (minimal if none).
pub fn classify(answers: &AnswerSet, model: &TriageModel) -> Result<TriageOutcome, TriageError> {
    let q = &model.questionnaire;
    if answers.questionnaire_version != q.version {
        return Err(TriageError::UnknownVersion { expected: q.version.clone(), found: answers.questionnaire_version.clone() });
    }
    let known: BTreeSet<&str> = q.questions.iter().map(|q| q.question_id.as_str()).collect();
    let unknown: Vec<String> = answers.answers.keys().filter(|k| !known.contains(k.as_str())).cloned().collect();
    if !unknown.is_empty() {
        return Err(TriageError::UnknownQuestion(unknown));
    }
    let missing: Vec<String> =
        q.questions.iter().filter(|x| !answers.answers.contains_key(&x.question_id)).map(|x| x.question_id.clone()).collect();
    if !missing.is_empty() {
        return Err(TriageError::Incomplete(missing));
    }
    for question in &q.questions {
        check_answer(question, &answers.answers[&question.question_id])?;
    }
    let fired: Vec<&Rule> = model.rules.iter().filter(|r| answers.answers.get(&r.question) == Some(&r.equals)).collect();
    let risk_class = fired.iter().map(|r| r.class).max().unwrap_or(RiskClass::Minimal);
    let mut rationale: Vec<String> = fired.iter().map(|r| r.rule_id.clone()).collect();
    rationale.sort();
    Ok(TriageOutcome { risk_class, routes: route(risk_class), rationale, guidance: GUIDANCE_LABEL.to_string() })
}

/// Plain-text rendering.
pub fn render_text(outcome: &TriageOutcome) -> String {
    let routes: Vec<&str> = outcome.routes.iter().map(|r| r.as_str()).collect();
    let mut out = format!(
        "Triage result ({GUIDANCE_LABEL})\nrisk class: {}\nroutes: {}\n",
        outcome.risk_class,
        routes.join(", ")
    );
    if outcome.rationale.is_empty() {
        out.push_str("fired rules: none\n");
    } else {
        out.push_str(&format!("fired rules: {}\n", outcome.rationale.join(", ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answers_with(model: &TriageModel, yes: &[(&str, Answer)]) -> AnswerSet {
        let mut a = AnswerSet::negative(&model.questionnaire);
        for (k, v) in yes {
            a.answers.insert(k.to_string(), v.clone());
        }
        a
    }

    #[test]
    fn default_model_shape() {
        let m = TriageModel::default_model();
        assert_eq!(m.questionnaire.questions.len(), 13);
        let classes: BTreeSet<RiskClass> = m.rules.iter().map(|r| r.class).collect();
        assert_eq!(classes.len(), 3);
    }

    #[test]
    fn all_negative_is_minimal() {
        let m = TriageModel::default_model();
        let out = classify(&AnswerSet::negative(&m.questionnaire), &m).unwrap();
        assert_eq!(out.risk_class, RiskClass::Minimal);
        assert_eq!(out.routes, [Route::Helpdesk]);
        assert!(out.rationale.is_empty());
        assert_eq!(out.guidance, GUIDANCE_LABEL);
    }

    #[test]
    fn recruitment_is_high() {
        let m = TriageModel::default_model();
        let out = classify(&answers_with(&m, &[("h-employment", Answer::Bool(true))]), &m).unwrap();
        assert_eq!(out.risk_class, RiskClass::High);
        assert_eq!(out.routes, [Route::ExtendedAirs]);
        assert_eq!(out.rationale, ["r-employment"]);
    }

    #[test]
    fn prohibited_dominates_limited() {
        let m = TriageModel::default_model();
        let a = answers_with(
            &m,
            &[("l-interaction", Answer::Choice("text".into())), ("p-social-scoring", Answer::Bool(true))],
        );
        let out = classify(&a, &m).unwrap();
        assert_eq!(out.risk_class, RiskClass::Prohibited);
        assert_eq!(out.routes, [Route::CeaseOrRedesign]);
        assert_eq!(out.rationale, ["r-chatbot-text", "r-social-scoring"]);
    }

    #[test]
    fn routing_table_is_exact() {
        assert_eq!(route(RiskClass::Minimal), [Route::Helpdesk]);
        assert_eq!(route(RiskClass::Limited), [Route::Helpdesk, Route::CoreAirs]);
        assert_eq!(route(RiskClass::High), [Route::ExtendedAirs]);
        assert_eq!(route(RiskClass::Prohibited), [Route::CeaseOrRedesign]);
    }

    #[test]
    fn incomplete_and_version_errors() {
        let m = TriageModel::default_model();
        let mut a = AnswerSet::negative(&m.questionnaire);
        a.answers.remove("h-education");
        a.answers.remove("p-vulnerability");
        assert_eq!(
            classify(&a, &m).unwrap_err(),
            TriageError::Incomplete(vec!["p-vulnerability".into(), "h-education".into()])
        );
        let mut b = AnswerSet::negative(&m.questionnaire);
        b.questionnaire_version = "1999.1".into();
        assert!(matches!(classify(&b, &m), Err(TriageError::UnknownVersion { .. })));
        let mut c = AnswerSet::negative(&m.questionnaire);
        c.answers.insert("l-interaction".into(), Answer::Choice("telepathy".into()));
        assert!(matches!(classify(&c, &m), Err(TriageError::BadAnswer { .. })));
    }

    #[test]
    fn answer_file_parses() {
        let a = AnswerSet::parse(
            "answers {\n questionnaire_version: \"2025.1\"\n h-employment: true\n l-interaction: \"voice\"\n}\n",
        )
        .unwrap();
        assert_eq!(a.answers["h-employment"], Answer::Bool(true));
        assert_eq!(a.answers["l-interaction"], Answer::Choice("voice".into()));
    }

    #[test]
    fn rendering_is_labelled() {
        let m = TriageModel::default_model();
        let out = classify(&AnswerSet::negative(&m.questionnaire), &m).unwrap();
        assert!(render_text(&out).contains(GUIDANCE_LABEL));
    }

    #[test]
    fn rules_must_reference_known_questions() {
        let src = "questionnaire { version: \"1\" question a { text: \"?\" kind: boolean } }\nrules { rule r { question: b class: high } }";
        assert!(matches!(TriageModel::parse(src), Err(TriageError::Model(_))));
    }
}
