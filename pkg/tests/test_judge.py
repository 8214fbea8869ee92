import json
import random

import pytest

from cinesynth.backends import BackendConfig, make_chat_backend
from cinesynth.errors import (
    ContractViolation,
    DuplicateId,
    InvalidVerdict,
    NoOverlap,
    ParseFailed,
)
from cinesynth.judge import (
    ASPECTS,
    EvalItem,
    JudgeConfig,
    JudgeVerdict,
    _extract_verdict,
    aggregate,
    build_eval_items,
    judge_item,
    run_benchmark,
    slots_swapped,
)
from cinesynth.util import jsonl_line

from mockscripts import fenced, write_script


def make_item(n, aspect="plot"):
    return EvalItem(
        item_id=f"i-{n:04d}",
        aspect=aspect,
        question=f"question {n} about the heist?",
        ground_truth=f"truth {n}.",
        answer_a=f"model alpha answer {n}.",
        answer_b=f"model beta answer {n}.",
    )


def scripted(tmp_path, entries, name="judge.json"):
    return make_chat_backend(
        BackendConfig(kind="mock", script_path=str(write_script(tmp_path / name, entries)))
    )


class RecordingChat:
    def __init__(self, inner):
        self.inner = inner
        self.prompts = []

    @property
    def backend_id(self):
        return self.inner.backend_id

    def chat(self, req):
        self.prompts.append(req.messages[-1]["content"])
        return self.inner.chat(req)


PREFER_SLOT_ONE = {
    "match": "Assistant 1:",
    "response": fenced({"preferred": "1", "scores": [4, 2]}),
}


# ---------------------------------------------------------------------------
# parsing and validation


def test_eval_item_validation():
    with pytest.raises(ParseFailed, match="aspect"):
        make_item(1, aspect="banter").validate()
    bad = make_item(2)
    bad.ground_truth = ""
    with pytest.raises(ParseFailed, match="empty ground_truth"):
        bad.validate()


def test_extract_verdict_forms():
    ok = _extract_verdict(fenced({"preferred": "2", "score_1": 3, "score_2": 5}))
    assert ok == ("ok", "2", 3, 5)
    ok = _extract_verdict(fenced({"preferred": "1", "scores": [4, 2]}))
    assert ok == ("ok", "1", 4, 2)
    assert _extract_verdict(fenced({"preferred": "tie", "scores": [3, 3]})) == ("tie",)
    assert _extract_verdict(fenced({"preferred": "both"}))[0] == "tie"
    assert _extract_verdict(fenced({"preferred": "3", "scores": [1, 1]}))[0] == "bad"
    assert _extract_verdict(fenced({"preferred": "1", "scores": [0, 2]}))[0] == "bad"
    assert _extract_verdict(fenced({"preferred": "1", "scores": [6, 2]}))[0] == "bad"
    assert _extract_verdict(fenced({"preferred": "1", "score_1": "4", "score_2": 2}))[0] == "bad"
    assert _extract_verdict(fenced({"preferred": "1", "score_1": True, "score_2": 2}))[0] == "bad"
    assert _extract_verdict("prose with no json")[0] == "bad"


def test_slots_swapped_deterministic_and_balanced():
    assert slots_swapped(7, "i-0001") == slots_swapped(7, "i-0001")
    flips = sum(slots_swapped(7, f"i-{k}") for k in range(2000))
    assert 800 < flips < 1200


# ---------------------------------------------------------------------------
# judge_item


def pick_items_by_parity(seed, n=50):
    items = [make_item(k) for k in range(n)]
    plain = next(i for i in items if not slots_swapped(seed, i.item_id))
    flipped = next(i for i in items if slots_swapped(seed, i.item_id))
    return plain, flipped


def test_judge_item_deanonymizes_straight_order(tmp_path):
    plain, _ = pick_items_by_parity(seed=5)
    chat = scripted(tmp_path, [PREFER_SLOT_ONE])
    v = judge_item(plain, chat, seed=5)
    assert v.preferred == "A"
    assert (v.score_a, v.score_b) == (4, 2)
    assert v.item_id == plain.item_id


def test_judge_item_deanonymizes_swapped_order(tmp_path):
    _, flipped = pick_items_by_parity(seed=5)
    chat = scripted(tmp_path, [PREFER_SLOT_ONE])
    v = judge_item(flipped, chat, seed=5)
    assert v.preferred == "B"
    assert (v.score_a, v.score_b) == (2, 4)


def test_judge_prompt_places_answers_by_parity(tmp_path):
    plain, flipped = pick_items_by_parity(seed=5)
    chat = RecordingChat(scripted(tmp_path, [PREFER_SLOT_ONE]))
    judge_item(plain, chat, seed=5)
    judge_item(flipped, chat, seed=5)
    assert f"Assistant 1: {plain.answer_a}" in chat.prompts[0]
    assert f"Assistant 2: {plain.answer_b}" in chat.prompts[0]
    assert f"Assistant 1: {flipped.answer_b}" in chat.prompts[1]
    assert f"Assistant 2: {flipped.answer_a}" in chat.prompts[1]
    for p in chat.prompts:
        assert "alpha" not in p.split("Assistant 1:")[0]  # no model names leak


def test_judge_tie_gets_one_forced_choice(tmp_path):
    item = make_item(3)
    entries = [
        {
            "match": "A tie is not allowed",
            "response": fenced({"preferred": "2", "score_1": 3, "score_2": 4}),
        },
        {
            "match": f"Question: {item.question}",
            "response": fenced({"preferred": "tie", "scores": [3, 3]}),
        },
    ]
    chat = RecordingChat(scripted(tmp_path, entries))
    v = judge_item(item, chat, seed=5)
    assert len(chat.prompts) == 2
    assert "A tie is not allowed" in chat.prompts[1]
    assert v.preferred in ("A", "B")


def test_judge_tie_twice_is_invalid(tmp_path):
    item = make_item(4)
    entries = [
        {
            "match": f"Question: {item.question}",
            "response": fenced({"preferred": "tie", "scores": [3, 3]}),
        }
    ]
    chat = RecordingChat(scripted(tmp_path, entries))
    with pytest.raises(InvalidVerdict, match="tie declared twice"):
        judge_item(item, chat, seed=5)
    assert len(chat.prompts) == 2


def test_judge_retries_unparseable_then_succeeds(tmp_path):
    item = make_item(5)
    entries = [
        {
            "match": "Your previous reply was rejected",
            "response": fenced({"preferred": "1", "score_1": 5, "score_2": 1}),
        },
        {"match": f"Question: {item.question}", "response": "I liked both answers!"},
    ]
    chat = RecordingChat(scripted(tmp_path, entries))
    v = judge_item(item, chat, seed=5)
    assert len(chat.prompts) == 2
    assert {v.score_a, v.score_b} == {5, 1}


def test_judge_retries_exhausted_invalid(tmp_path):
    item = make_item(6)
    entries = [{"match": f"Question: {item.question}", "response": "still just prose"}]
    chat = RecordingChat(scripted(tmp_path, entries))
    with pytest.raises(InvalidVerdict):
        judge_item(item, chat, seed=5, config=JudgeConfig(max_retries=2))
    assert len(chat.prompts) == 3


# ---------------------------------------------------------------------------
# aggregation


def verdicts_for(items, wins_a, score_a=4, score_b=2):
    out = []
    for k, item in enumerate(items):
        out.append(
            JudgeVerdict(
                item_id=item.item_id,
                preferred="A" if k < wins_a else "B",
                score_a=score_a,
                score_b=score_b,
                raw="scripted",
            )
        )
    return out


def test_aggregate_reference_ratios():
    overview = [make_item(k, "overview") for k in range(100)]
    temporal = [make_item(200 + k, "temporal") for k in range(100)]
    verdicts = verdicts_for(overview, wins_a=61) + verdicts_for(temporal, wins_a=75)
    result = aggregate(verdicts, overview + temporal)
    ov = result.aspects["overview"]
    assert ov.compare_ratio_a == pytest.approx(0.61)
    assert ov.compare_ratio_b == pytest.approx(0.39)
    assert ov.compare_ratio_a + ov.compare_ratio_b == 1.0
    tp = result.aspects["temporal"]
    assert tp.compare_ratio_a == 0.75
    assert tp.compare_ratio_b == 0.25
    assert tp.n_valid == 100 and tp.n_invalid == 0


def test_aggregate_means_over_valid_only():
    items = [make_item(k) for k in range(4)]
    verdicts = verdicts_for(items[:3], wins_a=2, score_a=3, score_b=3)
    result = aggregate(verdicts, items)
    plot = result.aspects["plot"]
    assert plot.mean_score_a == 3.0 and plot.mean_score_b == 3.0
    assert plot.n_valid == 3 and plot.n_invalid == 1
    assert plot.compare_ratio_a == pytest.approx(2 / 3)
    assert plot.compare_ratio_a + plot.compare_ratio_b == 1.0


def test_aggregate_empty_aspect_undefined():
    items = [make_item(k, "overview") for k in range(3)]
    result = aggregate([], items)
    ov = result.aspects["overview"]
    assert ov.compare_ratio_a is None and ov.mean_score_b is None
    assert ov.n_valid == 0 and ov.n_invalid == 3
    assert "plot" not in result.aspects
    d = result.to_dict()
    assert d["aspects"]["overview"]["compare_ratio_a"] is None


def test_aggregate_rejects_unknown_verdict():
    items = [make_item(1)]
    stray = JudgeVerdict("i-9999", "A", 4, 4, "x")
    with pytest.raises(ContractViolation):
        aggregate([stray], items)


def test_aggregate_permutation_invariant(rng):
    items = [make_item(k, ASPECTS[k % 3]) for k in range(30)]
    verdicts = verdicts_for(items, wins_a=11)
    shuffled = verdicts[:]
    rng.shuffle(shuffled)
    assert aggregate(verdicts, items).to_dict() == aggregate(shuffled, items).to_dict()


# ---------------------------------------------------------------------------
# corpus assembly


def write_jsonl(path, rows):
    path.write_text("".join(jsonl_line(r) for r in rows))
    return path


def corpus_files(tmp_path, n_truth=100, n_a=100, n_b=98):
    truth = [
        {
            "item_id": f"i-{k:04d}",
            "aspect": ASPECTS[k % 3],
            "question": f"q{k}?",
            "ground_truth": f"t{k}.",
        }
        for k in range(n_truth)
    ]
    preds_a = [{"item_id": f"i-{k:04d}", "answer": f"a{k}."} for k in range(n_a)]
    preds_b = [{"item_id": f"i-{k:04d}", "answer": f"b{k}."} for k in range(n_b)]
    return (
        write_jsonl(tmp_path / "truth.jsonl", truth),
        write_jsonl(tmp_path / "a.jsonl", preds_a),
        write_jsonl(tmp_path / "b.jsonl", preds_b),
    )


def test_build_eval_items_inner_join(tmp_path):
    t, a, b = corpus_files(tmp_path)
    items, unmatched = build_eval_items(t, a, b)
    assert len(items) == 98
    assert unmatched == ["i-0098", "i-0099"]
    assert items[0].answer_a == "a0." and items[0].answer_b == "b0."
    assert items[0].ground_truth == "t0."


def test_build_eval_items_duplicate_id(tmp_path):
    t, a, b = corpus_files(tmp_path, 5, 5, 5)
    rows = [json.loads(line) for line in a.read_text().splitlines()]
    write_jsonl(a, rows + [rows[0]])
    with pytest.raises(DuplicateId):
        build_eval_items(t, a, b)


def test_build_eval_items_no_overlap(tmp_path):
    t, a, b = corpus_files(tmp_path, 5, 5, 5)
    rows = [{"item_id": f"z-{k}", "answer": "x."} for k in range(5)]
    write_jsonl(b, rows)
    with pytest.raises(NoOverlap):
        build_eval_items(t, a, b)


def test_build_eval_items_validates_aspect(tmp_path):
    t, a, b = corpus_files(tmp_path, 3, 3, 3)
    rows = [json.loads(line) for line in t.read_text().splitlines()]
    rows[1]["aspect"] = "vibes"
    write_jsonl(t, rows)
    with pytest.raises(ParseFailed, match="aspect"):
        build_eval_items(t, a, b)


# ---------------------------------------------------------------------------
# benchmark runs


def test_run_benchmark_counts_failures(tmp_path):
    items = [make_item(k, "overview") for k in range(10)]
    poison = [
        {"match": f"Question: {items[k].question}", "response": "no verdict here"}
        for k in (2, 7)
    ]
    chat = scripted(tmp_path, poison + [PREFER_SLOT_ONE])
    result, verdicts, failures = run_benchmark(items, chat, seed=5)
    assert len(verdicts) == 8 and len(failures) == 2
    assert {f["item_id"] for f in failures} == {"i-0002", "i-0007"}
    ov = result.aspects["overview"]
    assert ov.n_valid == 8 and ov.n_invalid == 2
    assert ov.compare_ratio_a + ov.compare_ratio_b == 1.0


def test_run_benchmark_verdict_order_stable(tmp_path):
    items = [make_item(k) for k in range(12)]
    chat = scripted(tmp_path, [PREFER_SLOT_ONE])
    _, verdicts, _ = run_benchmark(items, chat, seed=5, config=JudgeConfig(max_parallel=5))
    assert [v.item_id for v in verdicts] == [i.item_id for i in items]


def test_position_bias_cancelled_by_randomized_slots(tmp_path):
    # a judge that always prefers slot 1 must land near 50/50 on A vs B
    items = [make_item(k) for k in range(1000)]
    chat = scripted(tmp_path, [PREFER_SLOT_ONE])
    result, verdicts, failures = run_benchmark(items, chat, seed=20260819)
    assert not failures
    ratio_a = result.aspects["plot"].compare_ratio_a
    assert abs(ratio_a - 0.5) < 0.05
    assert result.aspects["plot"].n_valid == 1000
