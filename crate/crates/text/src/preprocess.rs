//! Per-task preprocessing of raw dialog samples and postprocessing of
//! generated responses.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::sample::{
    DialogSample, KnowledgeItem, Placeholder, PlaceholderMap, ProcessedSample, Task, SCHEMA_VERSION,
};
use crate::vocab::{pieces, GOAL_TOKEN, RESERVED, SEP_TOKEN, SPEAKER1_TOKEN, SPEAKER2_TOKEN, UNAME_TOKEN};
use crate::TextError;

const MOVIE_PLACEHOLDERS: [&str; 2] = ["[movie1]", "[movie2]"];
const STAR_PLACEHOLDERS: [&str; 2] = ["[star1]", "[star2]"];

/// A regex substitution applied to generated text (pronoun and figure fixes).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRule {
    pub pattern: String,
    pub replacement: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonaFilterConfig {
    pub threshold: f64,
    pub drop_prob: f64,
    pub length_cap: usize,
    pub keywords: Vec<String>,
    pub vector_dim: usize,
    pub window: usize,
    pub epochs: usize,
}

impl Default for PersonaFilterConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            drop_prob: 1.0,
            length_cap: 50,
            keywords: vec!["工作".to_string()],
            vector_dim: 32,
            window: 2,
            epochs: 5,
        }
    }
}

/// Pipeline settings, normally loaded from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Prepend dialog goals to the knowledge sequence in the knowledge task.
    pub knowledge_goals: bool,
    /// Token budget for the flattened history.
    pub max_history_tokens: usize,
    pub persona_filter: PersonaFilterConfig,
    pub rules: Vec<RewriteRule>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            knowledge_goals: true,
            max_history_tokens: 64,
            persona_filter: PersonaFilterConfig::default(),
            rules: Vec::new(),
        }
    }
}

/// Compiled rewrite rules.
#[derive(Clone, Debug, Default)]
pub struct Rewriter {
    rules: Vec<(Regex, String)>,
}

impl Rewriter {
    pub fn new(rules: &[RewriteRule]) -> Result<Self, TextError> {
        let rules = rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (re, r.replacement.clone()))
                    .map_err(|e| TextError::Config(format!("rule {:?}: {e}", r.pattern)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rules })
    }

    pub fn apply(&self, text: &str) -> String {
        let mut out = text.to_string();
        for (re, rep) in &self.rules {
            out = re.replace_all(&out, rep.as_str()).into_owned();
        }
        out
    }
}

/// Finds movie and star topic entities among triple subjects, typed by a
/// `领域`/`field` triple, and assigns up to two placeholders per kind in order
/// of first appearance.
pub fn detect_topics(items: &[KnowledgeItem]) -> PlaceholderMap {
    let mut subjects: Vec<&str> = Vec::new();
    for item in items {
        if let KnowledgeItem::Triple(t) = item {
            if let Some(s) = t.first() {
                if !s.is_empty() && !subjects.contains(&s.as_str()) {
                    subjects.push(s);
                }
            }
        }
    }
    let kind_of = |subject: &str| -> Option<bool> {
        items.iter().find_map(|item| match item {
            KnowledgeItem::Triple(t) if t.len() == 3 && t[0] == subject => {
                match (t[1].as_str(), t[2].as_str()) {
                    ("领域" | "field" | "domain", "电影" | "movie") => Some(true),
                    ("领域" | "field" | "domain", "明星" | "star") => Some(false),
                    _ => None,
                }
            }
            _ => None,
        })
    };
    let (mut movies, mut stars) = (0, 0);
    let mut map = Vec::new();
    for s in subjects {
        let placeholder = match kind_of(s) {
            Some(true) if movies < 2 => {
                movies += 1;
                MOVIE_PLACEHOLDERS[movies - 1]
            }
            Some(false) if stars < 2 => {
                stars += 1;
                STAR_PLACEHOLDERS[stars - 1]
            }
            _ => continue,
        };
        map.push(Placeholder {
            placeholder: placeholder.to_string(),
            original: s.to_string(),
        });
    }
    PlaceholderMap(map)
}

fn replace_longest_first(text: &str, pairs: &[(&str, &str)]) -> String {
    let mut pairs: Vec<(&str, &str)> = pairs.iter().copied().filter(|(from, _)| !from.is_empty()).collect();
    pairs.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    'scan: while !rest.is_empty() {
        for (from, to) in &pairs {
            if let Some(tail) = rest.strip_prefix(from) {
                out.push_str(to);
                rest = tail;
                continue 'scan;
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

/// Replaces every recorded original with its placeholder, longest originals first.
pub fn substitute(text: &str, map: &PlaceholderMap) -> String {
    let pairs: Vec<(&str, &str)> = map
        .entries()
        .iter()
        .map(|p| (p.original.as_str(), p.placeholder.as_str()))
        .collect();
    replace_longest_first(text, &pairs)
}

/// Inverse of [`substitute`].
pub fn restore(text: &str, map: &PlaceholderMap) -> String {
    let pairs: Vec<(&str, &str)> = map
        .entries()
        .iter()
        .map(|p| (p.placeholder.as_str(), p.original.as_str()))
        .collect();
    replace_longest_first(text, &pairs)
}

/// Flattens knowledge items into `"s p o [SEP] sentence [SEP] ..."` with
/// topic entities replaced by their placeholders.
pub fn linearize_knowledge(items: &[KnowledgeItem], topics: &PlaceholderMap) -> Result<String, TextError> {
    let mut parts = Vec::with_capacity(items.len());
    for item in items {
        match item {
            KnowledgeItem::Triple(t) => {
                if t.len() != 3 || t.iter().any(|p| p.trim().is_empty()) {
                    return Err(TextError::MalformedTriple(t.clone()));
                }
                parts.push(format!("{} {} {}", t[0], t[1], t[2]));
            }
            KnowledgeItem::Sentence(s) => {
                if !s.trim().is_empty() {
                    parts.push(s.clone());
                }
            }
        }
    }
    Ok(substitute(&join_sep(parts.iter().map(String::as_str)), topics))
}

fn join_sep<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts
        .into_iter()
        .collect::<Vec<_>>()
        .join(&format!(" {SEP_TOKEN} "))
}

/// Speaker token for turn `index` of a history, counted from the first turn.
pub fn speaker_token(index: usize) -> &'static str {
    if index.is_multiple_of(2) {
        SPEAKER1_TOKEN
    } else {
        SPEAKER2_TOKEN
    }
}

/// Prefixes turns with alternating speaker tokens (most recent last) and
/// drops whole turns from the oldest end until the result fits
/// `max_tokens` pieces. The newest turn is always kept.
pub fn build_history(turns: &[String], max_tokens: usize) -> String {
    let rendered: Vec<String> = turns
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{} {}", speaker_token(i), t))
        .collect();
    let mut start = rendered.len();
    let mut used = 0;
    while start > 0 {
        // +1 for the joining space
        let cost = pieces(&rendered[start - 1]).len() + usize::from(start < rendered.len());
        if start < rendered.len() && used + cost > max_tokens {
            break;
        }
        used += cost;
        start -= 1;
    }
    rendered[start..].join(" ")
}

/// `"[goal]" + goal + "[goal]" + response`; an empty goal leaves the
/// response untouched.
pub fn attach_goal_prefix(goal: &str, response: &str) -> String {
    if goal.is_empty() {
        response.to_string()
    } else {
        format!("{GOAL_TOKEN}{goal}{GOAL_TOKEN}{response}")
    }
}

/// Removes a goal prefix: everything up to and including the last `[goal]`.
pub fn strip_goal_prefix(text: &str) -> &str {
    match text.rfind(GOAL_TOKEN) {
        Some(pos) => &text[pos + GOAL_TOKEN.len()..],
        None => text,
    }
}

/// Restores a generated candidate into user-facing text.
pub fn postprocess_response(
    text: &str,
    placeholders: &PlaceholderMap,
    user_name: Option<&str>,
    rewriter: &Rewriter,
) -> String {
    let text = strip_goal_prefix(text);
    let text = restore(text, placeholders);
    let text = text.replace(UNAME_TOKEN, user_name.unwrap_or(""));
    let text = RESERVED.iter().fold(text, |acc, tok| acc.replace(tok, ""));
    rewriter.apply(&text).trim().to_string()
}

fn profile_text(sample: &DialogSample) -> String {
    join_sep(
        sample
            .user_profile
            .iter()
            .map(|(k, v)| format!("{k} {v}"))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    )
}

/// Turns a raw sample into encoder-ready strings for its task.
///
/// Fails with [`TextError::MissingSource`] when a source the task needs is
/// absent and with [`TextError::MalformedTriple`] on bad knowledge.
pub fn preprocess(sample: &DialogSample, cfg: &PipelineConfig) -> Result<ProcessedSample, TextError> {
    let mut map = if sample.placeholder_map.is_empty() {
        detect_topics(&sample.knowledge)
    } else {
        sample.placeholder_map.clone()
    };
    let user_name = sample.user_name().map(str::to_string);
    if let Some(name) = &user_name {
        if map.original(UNAME_TOKEN).is_none() {
            map.0.push(Placeholder {
                placeholder: UNAME_TOKEN.to_string(),
                original: name.clone(),
            });
        }
    }

    let (knowledge, persona, target) = match sample.task {
        Task::Knowledge => {
            if sample.knowledge.is_empty() {
                return Err(TextError::MissingSource("knowledge"));
            }
            let mut text = linearize_knowledge(&sample.knowledge, &map)?;
            if cfg.knowledge_goals && !sample.goal.is_empty() {
                let goals = substitute(&join_sep(sample.goal.iter().map(String::as_str)), &map);
                text = join_sep([goals.as_str(), text.as_str()]);
            }
            (Some(text), None, sample.response.as_deref().map(|r| substitute(r, &map)))
        }
        Task::Recommendation => {
            if sample.knowledge.is_empty() && sample.situation.is_empty() {
                return Err(TextError::MissingSource("knowledge"));
            }
            if sample.user_profile.is_empty() {
                return Err(TextError::MissingSource("user_profile"));
            }
            let mut parts = Vec::new();
            if !sample.situation.is_empty() {
                parts.push(substitute(&sample.situation, &map));
            }
            if !sample.knowledge.is_empty() {
                parts.push(linearize_knowledge(&sample.knowledge, &map)?);
            }
            parts.extend(sample.goal.iter().map(|g| substitute(g, &map)));
            let knowledge = join_sep(parts.iter().map(String::as_str));
            let persona = substitute(&profile_text(sample), &map);
            let golden = sample.goal.last().map(|g| substitute(g, &map)).unwrap_or_default();
            let target = sample
                .response
                .as_deref()
                .map(|r| attach_goal_prefix(&golden, &substitute(r, &map)));
            (Some(knowledge), Some(persona), target)
        }
        Task::Persona => {
            if sample.persona.is_empty() {
                return Err(TextError::MissingSource("persona"));
            }
            let persona = substitute(&join_sep(sample.persona.iter().map(String::as_str)), &map);
            (None, Some(persona), sample.response.as_deref().map(|r| substitute(r, &map)))
        }
    };

    Ok(ProcessedSample {
        schema_version: SCHEMA_VERSION,
        task: sample.task,
        history: sample.history.iter().map(|t| substitute(t, &map)).collect(),
        knowledge,
        persona,
        target,
        placeholder_map: map,
        user_name,
    })
}

/// Preprocesses a corpus, skipping (and logging) samples that fail.
pub fn preprocess_corpus(samples: &[DialogSample], cfg: &PipelineConfig) -> Vec<ProcessedSample> {
    samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match preprocess(s, cfg) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("skipping sample {i}: {e}");
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(s: &str, p: &str, o: &str) -> KnowledgeItem {
        KnowledgeItem::Triple(vec![s.into(), p.into(), o.into()])
    }

    fn movie_map(name: &str) -> PlaceholderMap {
        PlaceholderMap(vec![Placeholder {
            placeholder: "[movie1]".into(),
            original: name.into(),
        }])
    }

    #[test]
    fn single_triple_with_topic() {
        let s = linearize_knowledge(&[triple("M", "type", "action")], &movie_map("M")).unwrap();
        assert_eq!(s, "[movie1] type action");
    }

    #[test]
    fn two_items_one_separator() {
        let s = linearize_knowledge(
            &[KnowledgeItem::Sentence("k1".into()), KnowledgeItem::Sentence("k2".into())],
            &PlaceholderMap::default(),
        )
        .unwrap();
        assert_eq!(s, "k1 [SEP] k2");
        assert_eq!(s.matches("[SEP]").count(), 1);
    }

    #[test]
    fn reference_graph_span() {
        let items = vec![
            triple("碟中谍", "国家", "美国"),
            triple("碟中谍", "类型", "动作"),
            triple("碟中谍", "领域", "电影"),
            triple("碟中谍", "主演", "强·沃特"),
            triple("强·沃特", "星座", "摩羯座"),
            triple("强·沃特", "领域", "明星"),
        ];
        let topics = detect_topics(&items);
        assert_eq!(topics.original("[movie1]"), Some("碟中谍"));
        assert_eq!(topics.original("[star1]"), Some("强·沃特"));
        let s = linearize_knowledge(&items, &topics).unwrap();
        assert!(s.contains("[movie1] 类型 动作"), "{s}");
        assert!(!s.contains("碟中谍"));
        assert_eq!(restore(&s, &topics).matches("碟中谍 类型 动作").count(), 1);
    }

    #[test]
    fn malformed_triple_rejected() {
        let err = linearize_knowledge(&[KnowledgeItem::Triple(vec!["a".into(), "".into(), "c".into()])], &PlaceholderMap::default());
        assert!(matches!(err, Err(TextError::MalformedTriple(_))));
        let err = linearize_knowledge(&[KnowledgeItem::Triple(vec!["a".into(), "b".into()])], &PlaceholderMap::default());
        assert!(err.is_err());
    }

    #[test]
    fn history_alternates_speakers() {
        assert_eq!(build_history(&["u1".into()], 64), "[speaker1] u1");
        let turns: Vec<String> = ["u1", "u2", "u3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(build_history(&turns, 64), "[speaker1] u1 [speaker2] u2 [speaker1] u3");
    }

    #[test]
    fn history_truncation_drops_whole_oldest_turns() {
        let turns: Vec<String> = ["aaaa", "bb", "cc"].iter().map(|s| s.to_string()).collect();
        // each rendered turn: speaker, space, word = 3 pieces; join adds 1
        let h = build_history(&turns, 7);
        assert_eq!(h, "[speaker2] bb [speaker1] cc");
        let h = build_history(&turns, 1);
        assert_eq!(h, "[speaker1] cc");
    }

    #[test]
    fn goal_prefix_forms() {
        assert_eq!(attach_goal_prefix("g", "r"), "[goal]g[goal]r");
        assert_eq!(attach_goal_prefix("", "r"), "r");
        assert_eq!(strip_goal_prefix(&attach_goal_prefix("问User性别", "我该称呼您是先生还是女士")), "我该称呼您是先生还是女士");
        assert_eq!(strip_goal_prefix("plain"), "plain");
    }

    #[test]
    fn postprocess_composes_rules() {
        let out = postprocess_response("[goal]g[goal][uname]你好", &PlaceholderMap::default(), Some("小明"), &Rewriter::default());
        assert_eq!(out, "小明你好");
        let out = postprocess_response("没有占位符", &PlaceholderMap::default(), None, &Rewriter::default());
        assert_eq!(out, "没有占位符");
        let out = postprocess_response("[speaker1]看[movie1][SEP]吧", &movie_map("碟中谍"), None, &Rewriter::default());
        assert_eq!(out, "看碟中谍吧");
    }

    #[test]
    fn rewrite_rules_apply() {
        let rw = Rewriter::new(&[RewriteRule { pattern: "(\\d+)年".into(), replacement: "${1} 年".into() }]).unwrap();
        assert_eq!(postprocess_response("2018年", &PlaceholderMap::default(), None, &rw), "2018 年");
        assert!(Rewriter::new(&[RewriteRule { pattern: "(".into(), replacement: String::new() }]).is_err());
    }

    #[test]
    fn knowledge_task_requires_knowledge() {
        let s = DialogSample::new(Task::Knowledge, vec!["hi".into()]);
        let err = preprocess(&s, &PipelineConfig::default()).unwrap_err();
        assert!(err.to_string().contains("knowledge"), "{err}");
    }

    #[test]
    fn recommendation_layout() {
        let mut s = DialogSample::new(Task::Recommendation, vec!["你好小明".into()]);
        s.situation = "聊天时间:中午".into();
        s.knowledge = vec![triple("谢娜", "生日", "5-6")];
        s.goal = vec!["寒暄".into(), "问日期".into()];
        s.user_profile.insert("姓名".into(), "小明".into());
        s.user_profile.insert("年龄区间".into(), "小于18".into());
        s.response = Some("小明你好".into());
        let p = preprocess(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(p.knowledge.as_deref(), Some("聊天时间:中午 [SEP] 谢娜 生日 5-6 [SEP] 寒暄 [SEP] 问日期"));
        assert_eq!(p.persona.as_deref(), Some("姓名 [uname] [SEP] 年龄区间 小于18"));
        assert_eq!(p.target.as_deref(), Some("[goal]问日期[goal][uname]你好"));
        assert_eq!(p.history, vec!["你好[uname]".to_string()]);
        let out = postprocess_response(p.target.as_deref().unwrap(), &p.placeholder_map, p.user_name.as_deref(), &Rewriter::default());
        assert_eq!(out, "小明你好");
    }

    #[test]
    fn knowledge_goals_flag() {
        let mut s = DialogSample::new(Task::Knowledge, vec!["hi".into()]);
        s.knowledge = vec![KnowledgeItem::Sentence("k".into())];
        s.goal = vec!["g".into()];
        let with = preprocess(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(with.knowledge.as_deref(), Some("g [SEP] k"));
        let cfg = PipelineConfig { knowledge_goals: false, ..Default::default() };
        assert_eq!(preprocess(&s, &cfg).unwrap().knowledge.as_deref(), Some("k"));
    }

    #[test]
    fn persona_joined() {
        let mut s = DialogSample::new(Task::Persona, vec!["hi".into()]);
        s.persona = vec!["p1".into(), "p2".into()];
        let p = preprocess(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(p.persona.as_deref(), Some("p1 [SEP] p2"));
        assert!(p.knowledge.is_none());
    }
}
