//! Small synthetic corpora in the sample schema.
//!
//! They stand in for the gated competition datasets and back the
//! training-based tests: a memorization corpus, an entity copy task, a
//! context-keyed corpus with label noise, and demo corpora for each task.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sample::{Dialog, DialogSample, HistoryResponse, KnowledgeItem, Task};

const CHARS: &str = "天地人你我他山水风云花草木日月星春夏秋冬东西南北上下左右大小多少高低长短新旧红黄蓝白黑金银铜铁米面茶酒书画歌舞";

fn char_pool() -> Vec<char> {
    CHARS.chars().collect()
}

fn random_string(rng: &mut ChaCha8Rng, pool: &[char], len: usize) -> String {
    (0..len).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
}

/// Distinct-history pairs with random responses, for memorization runs.
pub fn memorization_corpus(n: usize, seed: u64) -> Vec<HistoryResponse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = char_pool();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let hlen = rng.gen_range(3..=5);
        let history = random_string(&mut rng, &pool, hlen);
        if !seen.insert(history.clone()) {
            continue;
        }
        let rlen = rng.gen_range(3..=5);
        out.push(HistoryResponse {
            history: vec![history],
            response: random_string(&mut rng, &pool, rlen),
        });
    }
    out
}

/// Single-token entity names (ASCII words are one token each).
pub fn entity_names(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consonants: Vec<char> = "bcdfghjklmnpqrstvwxz".chars().collect();
    let vowels: Vec<char> = "aeiouy".chars().collect();
    let mut names = std::collections::BTreeSet::new();
    while names.len() < n {
        let name: String = [
            consonants.choose(&mut rng).unwrap().to_ascii_uppercase(),
            *vowels.choose(&mut rng).unwrap(),
            *consonants.choose(&mut rng).unwrap(),
            *vowels.choose(&mut rng).unwrap(),
        ]
        .iter()
        .collect();
        names.insert(name);
    }
    let mut names: Vec<String> = names.into_iter().collect();
    names.shuffle(&mut rng);
    names
}

pub const COPY_RELATIONS: [(&str, &str); 2] = [("主演", "主演是谁"), ("导演", "导演是谁")];

/// Knowledge-task samples whose gold response repeats one entity that
/// appears only in the knowledge. The question picks which of two
/// triples holds the answer.
pub fn copy_task(n: usize, entities: &[String], seed: u64) -> Vec<DialogSample> {
    assert!(entities.len() >= 2, "need at least two entities");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let picks: Vec<&String> = entities.choose_multiple(&mut rng, 2).collect();
            let mut triples: Vec<KnowledgeItem> = COPY_RELATIONS
                .iter()
                .zip(&picks)
                .map(|((rel, _), e)| KnowledgeItem::Triple(vec!["电影".into(), rel.to_string(), e.to_string()]))
                .collect();
            let asked = rng.gen_range(0..2);
            if rng.gen_bool(0.5) {
                triples.swap(0, 1);
            }
            let (rel, question) = COPY_RELATIONS[asked];
            let mut s = DialogSample::new(Task::Knowledge, vec![question.to_string()]);
            s.knowledge = triples;
            s.response = Some(format!("{rel}是{}", picks[asked]));
            s
        })
        .collect()
}

/// The gold entity of a [`copy_task`] sample.
pub fn copy_task_entity(sample: &DialogSample) -> Option<&str> {
    sample.response.as_deref()?.split('是').nth(1)
}

/// A corpus where the history keyword selects a topic and each topic has
/// its own response variants over a disjoint character pool.
#[derive(Clone, Debug)]
pub struct KeyedCorpus {
    pub keywords: Vec<char>,
    pub responses: Vec<Vec<String>>,
}

impl KeyedCorpus {
    pub fn new(topics: usize, variants: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = char_pool();
        pool.shuffle(&mut rng);
        let keywords: Vec<char> = pool.drain(..topics).collect();
        let per_topic = 5;
        let responses = (0..topics)
            .map(|t| {
                let topic_pool = &pool[t * per_topic..(t + 1) * per_topic];
                (0..variants).map(|_| random_string(&mut rng, topic_pool, 4)).collect()
            })
            .collect();
        Self { keywords, responses }
    }

    pub fn topics(&self) -> usize {
        self.keywords.len()
    }

    /// History carrying `topic`'s keyword between two filler characters.
    pub fn history(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let filler: Vec<char> = "的了是在有".chars().collect();
        format!(
            "{}{}{}",
            filler.choose(rng).unwrap(),
            self.keywords[topic],
            filler.choose(rng).unwrap()
        )
    }

    /// `(topic, history, response)` triples; with probability `noise` the
    /// response comes from a different topic.
    pub fn samples(&self, n: usize, noise: f64, seed: u64) -> Vec<(usize, HistoryResponse)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let topic = rng.gen_range(0..self.topics());
                let history = self.history(topic, &mut rng);
                let source = if rng.gen_bool(noise) {
                    (topic + rng.gen_range(1..self.topics())) % self.topics()
                } else {
                    topic
                };
                let response = self.responses[source].choose(&mut rng).unwrap().clone();
                (
                    topic,
                    HistoryResponse {
                        history: vec![history],
                        response,
                    },
                )
            })
            .collect()
    }
}

const MOVIES: [&str; 6] = ["碟中谍", "大玩家", "星际", "流浪地球", "无间道", "花样年华"];
const STARS: [&str; 6] = ["强·沃特", "谢娜", "刘德华", "梁朝伟", "周迅", "吴京"];
const GENRES: [&str; 4] = ["动作", "喜剧", "爱情", "科幻"];
const SIGNS: [&str; 4] = ["摩羯座", "天秤座", "白羊座", "双鱼座"];

/// Demo samples for one task, shaped like the competition data.
pub fn demo_corpus(task: Task, n: usize, seed: u64) -> Vec<DialogSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| demo_sample(task, &mut rng)).collect()
}

fn demo_sample(task: Task, rng: &mut ChaCha8Rng) -> DialogSample {
    let movie = *MOVIES.choose(rng).unwrap();
    let star = *STARS.choose(rng).unwrap();
    let genre = *GENRES.choose(rng).unwrap();
    let sign = *SIGNS.choose(rng).unwrap();
    match task {
        Task::Knowledge => {
            let mut s = DialogSample::new(
                task,
                vec!["你喜欢看什么类型的电影？".into(), format!("{genre}类")],
            );
            s.goal = vec![format!("START {movie} {star}")];
            s.knowledge = vec![
                triple(movie, "类型", genre),
                triple(movie, "领域", "电影"),
                triple(movie, "主演", star),
                triple(star, "星座", sign),
                triple(star, "领域", "明星"),
            ];
            s.response = Some(format!("给你推荐一部{genre}电影，名字叫{movie}，主演是{star}。"));
            s
        }
        Task::Recommendation => {
            let name = ["小明", "小红", "小刚"].choose(rng).unwrap().to_string();
            let mut s = DialogSample::new(task, vec![format!("你好，我是{name}"), "你知道今天是谁的生日吗？".into()]);
            s.situation = "聊天时间:中午12:00，在学校".into();
            s.knowledge = vec![triple(star, "生日", "5-6"), triple(star, "主演", movie)];
            s.goal = vec!["寒暄".into(), format!("明星推荐 {star}")];
            s.user_profile = BTreeMap::from([
                ("姓名".to_string(), name.clone()),
                ("喜欢的明星".to_string(), star.to_string()),
            ]);
            s.response = Some(format!("{name}，今天是{star}的生日，推荐你看{movie}。"));
            s
        }
        Task::Persona => {
            let food = ["脆饼干", "火锅", "西瓜"].choose(rng).unwrap();
            let mut s = DialogSample::new(task, vec!["你平时喜欢吃什么？".into()]);
            s.persona = vec![format!("我喜欢吃{food}"), format!("我最喜欢的明星是{star}")];
            s.response = Some(format!("我喜欢吃{food}，你呢？"));
            s
        }
    }
}

fn triple(s: &str, p: &str, o: &str) -> KnowledgeItem {
    KnowledgeItem::Triple(vec![s.into(), p.into(), o.into()])
}

/// Multi-turn chit-chat dialogs for the pre-training demo.
pub fn demo_dialogs(n: usize, seed: u64) -> Vec<Dialog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let openers = ["你好", "在吗", "早上好", "最近怎么样"];
    let replies = ["你好呀", "在的", "早上好，吃了吗", "还不错，你呢", "挺好的", "我也是"];
    (0..n)
        .map(|_| {
            let k = rng.gen_range(2..=4);
            let mut turns = vec![openers.choose(&mut rng).unwrap().to_string()];
            for _ in 1..k {
                turns.push(replies.choose(&mut rng).unwrap().to_string());
            }
            Dialog { turns }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::pieces;

    #[test]
    fn memorization_histories_unique() {
        let c = memorization_corpus(64, 1);
        let set: std::collections::HashSet<_> = c.iter().map(|p| &p.history).collect();
        assert_eq!(set.len(), 64);
    }

    #[test]
    fn copy_entity_only_in_knowledge_and_response() {
        let ents = entity_names(10, 2);
        for s in copy_task(20, &ents, 3) {
            let e = copy_task_entity(&s).unwrap();
            assert_eq!(pieces(e).len(), 1);
            assert!(s.history.iter().all(|h| !h.contains(e)));
            assert!(s.knowledge.iter().any(|k| matches!(k, KnowledgeItem::Triple(t) if t[2] == e)));
        }
    }

    #[test]
    fn keyed_topics_disjoint() {
        let k = KeyedCorpus::new(6, 3, 4);
        for a in 0..6 {
            for b in (a + 1)..6 {
                for ra in &k.responses[a] {
                    for rb in &k.responses[b] {
                        assert!(ra.chars().all(|c| !rb.contains(c)));
                    }
                }
            }
        }
    }

    #[test]
    fn demo_corpora_are_deterministic() {
        for task in Task::ALL {
            assert_eq!(demo_corpus(task, 5, 9), demo_corpus(task, 5, 9));
        }
    }
}
