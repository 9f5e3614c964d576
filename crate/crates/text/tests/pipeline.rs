use msdf_text::preprocess::{attach_goal_prefix, postprocess_response, preprocess, strip_goal_prefix, substitute};
use msdf_text::sample::{read_jsonl, write_jsonl};
use msdf_text::synthetic::demo_corpus;
use msdf_text::{DialogSample, PipelineConfig, ProcessedSample, Rewriter, Task, TextError, Vocab};
use proptest::prelude::*;

#[test]
fn demo_samples_survive_preprocess_and_postprocess() {
    let cfg = PipelineConfig::default();
    let rw = Rewriter::default();
    for task in Task::ALL {
        for s in demo_corpus(task, 30, 11) {
            let p = preprocess(&s, &cfg).unwrap();
            assert_eq!(p.task, task);
            let target = p.target.as_deref().unwrap();
            let back = postprocess_response(target, &p.placeholder_map, p.user_name.as_deref(), &rw);
            assert_eq!(back, s.response.clone().unwrap(), "{task}");
            match task {
                Task::Knowledge => {
                    assert!(p.knowledge.is_some() && p.persona.is_none());
                    // topic entities never leak into the encoder inputs
                    for ph in p.placeholder_map.entries() {
                        assert!(!p.knowledge.as_ref().unwrap().contains(&ph.original));
                    }
                }
                Task::Recommendation => {
                    let golden = substitute(s.goal.last().unwrap(), &p.placeholder_map);
                    let resp = substitute(s.response.as_deref().unwrap(), &p.placeholder_map);
                    assert_eq!(target, attach_goal_prefix(&golden, &resp));
                    assert!(p.persona.as_ref().unwrap().contains("[uname]"));
                }
                Task::Persona => assert!(p.knowledge.is_none() && p.persona.is_some()),
            }
        }
    }
}

#[test]
fn missing_sources_are_named() {
    let cfg = PipelineConfig::default();
    let s = DialogSample::new(Task::Persona, vec!["你好".into()]);
    assert!(matches!(preprocess(&s, &cfg), Err(TextError::MissingSource("persona"))));
    let mut r = demo_corpus(Task::Recommendation, 1, 0).remove(0);
    r.user_profile.clear();
    assert!(matches!(preprocess(&r, &cfg), Err(TextError::MissingSource("user_profile"))));
}

#[test]
fn jsonl_round_trip() {
    let cfg = PipelineConfig::default();
    let raw: Vec<DialogSample> = Task::ALL.iter().flat_map(|&t| demo_corpus(t, 5, 3)).collect();
    let processed: Vec<ProcessedSample> = raw.iter().map(|s| preprocess(s, &cfg).unwrap()).collect();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &raw).unwrap();
    assert_eq!(read_jsonl::<DialogSample, _>(&buf[..]).unwrap(), raw);
    buf.clear();
    write_jsonl(&mut buf, &processed).unwrap();
    assert_eq!(read_jsonl::<ProcessedSample, _>(&buf[..]).unwrap(), processed);
}

#[test]
fn bad_json_reports_its_line() {
    let text = "{\"task\":\"persona\",\"history\":[]}\n\nnot json\n";
    match read_jsonl::<DialogSample, _>(text.as_bytes()) {
        Err(TextError::Json { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn vocab_serializes_as_its_token_list() {
    let v = Vocab::build(["你好 world", "你好"], 1);
    let json = serde_json::to_string(&v).unwrap();
    let back: Vocab = serde_json::from_str(&json).unwrap();
    assert_eq!(back, v);
    assert!(serde_json::from_str::<Vocab>("[\"a\",\"b\"]").is_err());
}

proptest! {
    #[test]
    fn goal_prefix_strips_back(goal in "[a-z明星推荐 ]{0,12}", resp in "[a-z你好，。]{0,20}") {
        let full = attach_goal_prefix(&goal, &resp);
        prop_assert_eq!(strip_goal_prefix(&full), resp.as_str());
    }
}
