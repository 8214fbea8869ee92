"""Pairwise judging of two models' answers against ground truth.

Answers are anonymized into slots 1 and 2 with a per-item coin flip derived
from the run seed, so a judge's position bias cannot leak into the ratios.
Ties get exactly one forced-choice re-prompt; anything still undecidable is
counted as invalid rather than imputed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from hashlib import blake2b

from .backends import ChatRequest
from .errors import (
    ContractViolation,
    DuplicateId,
    InvalidVerdict,
    NoOverlap,
    ParseFailed,
)
from .parsing import parse_structured
from .util import read_jsonl

ASPECTS = ("overview", "plot", "temporal")

JUDGE_SYSTEM_PROMPT = (
    "You are an impartial judge comparing two assistants' answers against a "
    "ground truth. Always reply with a single fenced json block and nothing else."
)


@dataclass
class JudgeConfig:
    model_name: str = "gpt-4"
    temperature: float = 0.0
    max_tokens: int = 512
    max_retries: int = 2
    max_parallel: int = 4

    def validate(self) -> None:
        from .errors import ConfigError

        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be >= 1")


@dataclass
class EvalItem:
    item_id: str
    aspect: str
    question: str
    ground_truth: str
    answer_a: str
    answer_b: str

    def validate(self) -> None:
        if self.aspect not in ASPECTS:
            raise ParseFailed(
                f"item {self.item_id}: aspect must be one of {', '.join(ASPECTS)}, "
                f"got {self.aspect!r}"
            )
        for name in ("item_id", "question", "ground_truth", "answer_a", "answer_b"):
            if not getattr(self, name):
                raise ParseFailed(f"item {self.item_id or '<missing id>'}: empty {name}")

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "aspect": self.aspect,
            "question": self.question,
            "ground_truth": self.ground_truth,
            "answer_a": self.answer_a,
            "answer_b": self.answer_b,
        }


@dataclass
class JudgeVerdict:
    item_id: str
    preferred: str  # "A" | "B"
    score_a: int
    score_b: int
    raw: str

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "preferred": self.preferred,
            "score_a": self.score_a,
            "score_b": self.score_b,
            "raw": self.raw,
        }


@dataclass
class AspectResult:
    compare_ratio_a: float | None
    compare_ratio_b: float | None
    mean_score_a: float | None
    mean_score_b: float | None
    n_valid: int
    n_invalid: int

    def to_dict(self) -> dict:
        return {
            "compare_ratio_a": self.compare_ratio_a,
            "compare_ratio_b": self.compare_ratio_b,
            "mean_score_a": self.mean_score_a,
            "mean_score_b": self.mean_score_b,
            "n_valid": self.n_valid,
            "n_invalid": self.n_invalid,
        }


@dataclass
class BenchmarkResult:
    aspects: dict = field(default_factory=dict)  # aspect -> AspectResult

    def to_dict(self) -> dict:
        return {"aspects": {k: v.to_dict() for k, v in sorted(self.aspects.items())}}


# ---------------------------------------------------------------------------
# judging one item


def slots_swapped(seed: int, item_id: str) -> bool:
    """Deterministic per-item coin flip: True puts answer A in slot 2."""
    digest = blake2b(f"{seed}:{item_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % 2 == 1


def _judge_prompt(item: EvalItem, first: str, second: str) -> str:
    return (
        "Two assistants answered the same question about one movie. Compare "
        "their answers against the ground truth.\n\n"
        f"Aspect: {item.aspect}\n"
        f"Question: {item.question}\n"
        f"Ground truth answer: {item.ground_truth}\n\n"
        f"Assistant 1: {first}\n"
        f"Assistant 2: {second}\n\n"
        "Pick the assistant whose answer better matches the ground truth and "
        "score each answer from 1 to 5.\n"
        "Reply with one fenced json block only:\n"
        '{"preferred": "1" or "2", "score_1": <1-5>, "score_2": <1-5>}'
    )


_TIE_WORDS = ("tie", "equal", "both", "0", "neither")


def _extract_verdict(raw: str):
    """Returns ("ok", slot, s1, s2), ("tie",), or ("bad", reason)."""
    try:
        payload = parse_structured(raw)
    except ParseFailed as e:
        return ("bad", f"reply was not parseable: {e}")
    if not isinstance(payload, dict):
        return ("bad", "reply must be a json object")
    preferred = str(payload.get("preferred", "")).strip().lower()
    if preferred in _TIE_WORDS:
        return ("tie",)
    if preferred not in ("1", "2"):
        return ("bad", "preferred must be \"1\" or \"2\"")
    scores = payload.get("scores")
    if isinstance(scores, list) and len(scores) == 2:
        s1, s2 = scores
    else:
        s1, s2 = payload.get("score_1"), payload.get("score_2")
    for s in (s1, s2):
        if isinstance(s, bool) or not isinstance(s, int) or not 1 <= s <= 5:
            return ("bad", "score_1 and score_2 must be integers from 1 to 5")
    return ("ok", preferred, s1, s2)


def judge_item(item: EvalItem, chat, seed: int,
               config: JudgeConfig | None = None) -> JudgeVerdict:
    config = config or JudgeConfig()
    item.validate()
    swapped = slots_swapped(seed, item.item_id)
    first, second = (item.answer_b, item.answer_a) if swapped else (
        item.answer_a, item.answer_b,
    )
    prompt = _judge_prompt(item, first, second)
    messages = [
        {"role": "system", "content": JUDGE_SYSTEM_PROMPT},
        {"role": "user", "content": prompt},
    ]
    tie_used = False
    parse_failures = 0
    while True:
        raw = chat.chat(
            ChatRequest(
                model_name=config.model_name,
                messages=messages,
                temperature=config.temperature,
                seed=seed,
                max_tokens=config.max_tokens,
            )
        )
        outcome = _extract_verdict(raw)
        if outcome[0] == "ok":
            _, slot, s1, s2 = outcome
            slot_is_first = slot == "1"
            prefers_a = slot_is_first != swapped
            score_a, score_b = ((s2, s1) if swapped else (s1, s2))
            return JudgeVerdict(
                item_id=item.item_id,
                preferred="A" if prefers_a else "B",
                score_a=score_a,
                score_b=score_b,
                raw=raw,
            )
        if outcome[0] == "tie":
            if tie_used:
                raise InvalidVerdict(f"item {item.item_id}: tie declared twice")
            tie_used = True
            follow_up = (
                "You declared a tie. A tie is not allowed: choose exactly one "
                "assistant as preferred.\nReply again with only the required "
                f"fenced json block.\n\n{prompt}"
            )
        else:
            parse_failures += 1
            if parse_failures > config.max_retries:
                raise InvalidVerdict(f"item {item.item_id}: {outcome[1]}")
            follow_up = (
                f"Your previous reply was rejected: {outcome[1]}.\n"
                f"Reply again with only the required fenced json block.\n\n{prompt}"
            )
        messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user", "content": follow_up},
        ]


# ---------------------------------------------------------------------------
# corpus assembly and aggregation


def build_eval_items(benchmark_path, pred_a_path, pred_b_path):
    """Inner join of ground truth and both prediction files on item_id.

    Returns (items, unmatched_ids)."""

    def keyed(path, what):
        out = {}
        for row in read_jsonl(path):
            item_id = str(row.get("item_id", ""))
            if not item_id:
                raise ParseFailed(f"{what} record without item_id in {path}")
            if item_id in out:
                raise DuplicateId(f"duplicate item_id {item_id!r} in {what} file")
            out[item_id] = row
        return out

    truth = keyed(benchmark_path, "benchmark")
    preds_a = keyed(pred_a_path, "predictions-a")
    preds_b = keyed(pred_b_path, "predictions-b")

    shared = [i for i in truth if i in preds_a and i in preds_b]
    all_ids = set(truth) | set(preds_a) | set(preds_b)
    unmatched = sorted(all_ids - set(shared))
    if not shared:
        raise NoOverlap("no item_id appears in all three files")

    items = []
    for item_id in shared:
        row = truth[item_id]
        item = EvalItem(
            item_id=item_id,
            aspect=str(row.get("aspect", "")),
            question=str(row.get("question", "")),
            ground_truth=str(row.get("ground_truth", "")),
            answer_a=str(preds_a[item_id].get("answer", "")),
            answer_b=str(preds_b[item_id].get("answer", "")),
        )
        item.validate()
        items.append(item)
    return items, unmatched


def aggregate(verdicts, items) -> BenchmarkResult:
    """Per-aspect ratios and means; items without a verdict count as invalid."""
    aspect_of = {i.item_id: i.aspect for i in items}
    judged = {}
    for v in verdicts:
        if v.item_id not in aspect_of:
            raise ContractViolation(f"verdict for unknown item {v.item_id!r}")
        judged[v.item_id] = v

    result = BenchmarkResult()
    for aspect in ASPECTS:
        ids = [i.item_id for i in items if i.aspect == aspect]
        if not ids:
            continue
        valid = [judged[i] for i in ids if i in judged]
        n_valid = len(valid)
        n_invalid = len(ids) - n_valid
        if n_valid == 0:
            result.aspects[aspect] = AspectResult(None, None, None, None, 0, n_invalid)
            continue
        wins_a = sum(1 for v in valid if v.preferred == "A")
        ratio_a = wins_a / n_valid
        result.aspects[aspect] = AspectResult(
            compare_ratio_a=ratio_a,
            compare_ratio_b=1.0 - ratio_a,
            mean_score_a=sum(v.score_a for v in valid) / n_valid,
            mean_score_b=sum(v.score_b for v in valid) / n_valid,
            n_valid=n_valid,
            n_invalid=n_invalid,
        )
    return result


def run_benchmark(items, chat, seed: int, config: JudgeConfig | None = None):
    """Judge every item concurrently; returns (result, verdicts, failures)."""
    config = config or JudgeConfig()
    config.validate()
    verdicts = []
    failures = []
    with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
        futures = {
            pool.submit(judge_item, item, chat, seed, config): item for item in items
        }
        for future, item in futures.items():
            try:
                verdicts.append(future.result())
            except InvalidVerdict as e:
                failures.append({"item_id": item.item_id, "error": str(e)})
    order = {i.item_id: k for k, i in enumerate(items)}
    verdicts.sort(key=lambda v: order[v.item_id])
    failures.sort(key=lambda f: order[f["item_id"]])
    return aggregate(verdicts, items), verdicts, failures
