"""Scanning guidelines: parsing, validation, retrieval, and step conditions.

A guideline is a JSON document bundling prose step instructions with the
ground-truth tool call for each step, plus optional per-step conditions and
repeat-until loops. Retrieval over a store is lexical BM25 (k1=1.2, b=0.75)
on lowercased alphanumeric tokens of title + description + target organ +
step instructions.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import (
    EmptyStoreError,
    FormatError,
    NoSweepYetError,
    SchemaError,
    ToolReferenceError,
)
from .tools import ToolCall, ToolRegistry, canonicalize, validate_call

BM25_K1 = 1.2
BM25_B = 0.75

MAX_REPEATS_LIMIT = 10


class ConditionKind(str, Enum):
    CONFIDENCE_BELOW = "confidence_below"
    CONFIDENCE_AT_LEAST = "confidence_at_least"
    ORGAN_OFF_CENTER = "organ_off_center"
    ORGAN_VISIBLE = "organ_visible"
    BREATH_HOLD_ACTIVE = "breath_hold_active"


#: kinds that require a numeric threshold in [0, 1]
THRESHOLD_KINDS = frozenset({
    ConditionKind.CONFIDENCE_BELOW,
    ConditionKind.CONFIDENCE_AT_LEAST,
    ConditionKind.ORGAN_OFF_CENTER,
})

#: kinds that read the last sweep and fail without one
SWEEP_KINDS = frozenset({ConditionKind.ORGAN_OFF_CENTER, ConditionKind.ORGAN_VISIBLE})


@dataclass(frozen=True)
class ConditionSpec:
    kind: ConditionKind
    threshold: float | None = None

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value}
        if self.threshold is not None:
            d["threshold"] = self.threshold
        return d


@dataclass(frozen=True)
class GuidelineStep:
    index: int
    instruction: str
    reference_call: ToolCall
    condition: ConditionSpec | None = None
    repeat_until: ConditionSpec | None = None
    max_repeats: int | None = None

    def to_dict(self) -> dict:
        d: dict = {
            "index": self.index,
            "instruction": self.instruction,
            "reference_call": {"tool": self.reference_call.tool,
                               "args": self.reference_call.args},
        }
        if self.condition is not None:
            d["condition"] = self.condition.to_dict()
        if self.repeat_until is not None:
            d["repeat_until"] = self.repeat_until.to_dict()
            d["max_repeats"] = self.max_repeats
        return d


@dataclass(frozen=True)
class Guideline:
    id: str
    title: str
    target_organ: str
    description: str
    steps: tuple[GuidelineStep, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "target_organ": self.target_organ,
            "description": self.description,
            "steps": [s.to_dict() for s in self.steps],
        }

    def retrieval_text(self) -> str:
        parts = [self.title, self.description, self.target_organ]
        parts.extend(s.instruction for s in self.steps)
        return " ".join(parts)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def _parse_condition(obj: dict, where: str) -> ConditionSpec:
    _require(isinstance(obj, dict), f"{where}: condition must be an object")
    extra = set(obj) - {"kind", "threshold"}
    _require(not extra, f"{where}: unexpected condition fields {sorted(extra)}")
    _require("kind" in obj, f"{where}: condition needs a kind")
    try:
        kind = ConditionKind(obj["kind"])
    except ValueError:
        raise SchemaError(f"{where}: unknown condition kind {obj['kind']!r}") from None
    threshold = obj.get("threshold")
    if kind in THRESHOLD_KINDS:
        _require(isinstance(threshold, (int, float)) and not isinstance(threshold, bool),
                 f"{where}: {kind.value} needs a numeric threshold")
        _require(0.0 <= threshold <= 1.0, f"{where}: threshold must be in [0, 1]")
        return ConditionSpec(kind=kind, threshold=float(threshold))
    _require(threshold is None, f"{where}: {kind.value} takes no threshold")
    return ConditionSpec(kind=kind)


def parse_guideline(document: bytes | str, registry: ToolRegistry | None = None) -> Guideline:
    """Parse and validate one guideline document.

    With a registry, every step's reference call is checked: an unknown tool
    raises ToolReferenceError, invalid arguments raise SchemaError.
    """
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"document is not UTF-8: {e}") from None
    try:
        obj = json.loads(document)
    except json.JSONDecodeError as e:
        raise FormatError(f"document is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise FormatError("guideline document must be a JSON object")

    required = {"id", "title", "target_organ", "description", "steps"}
    missing = required - set(obj)
    _require(not missing, f"missing fields {sorted(missing)}")
    extra = set(obj) - required
    _require(not extra, f"unexpected fields {sorted(extra)}")
    for key in ("id", "title", "target_organ", "description"):
        _require(isinstance(obj[key], str), f"{key} must be a string")
    _require(obj["id"].strip() != "", "id must be non-empty")
    _require(isinstance(obj["steps"], list) and obj["steps"], "steps must be a non-empty list")

    steps: list[GuidelineStep] = []
    for i, raw in enumerate(obj["steps"]):
        where = f"step {i}"
        _require(isinstance(raw, dict), f"{where}: must be an object")
        step_required = {"index", "instruction", "reference_call"}
        step_allowed = step_required | {"condition", "repeat_until", "max_repeats"}
        missing = step_required - set(raw)
        _require(not missing, f"{where}: missing fields {sorted(missing)}")
        extra = set(raw) - step_allowed
        _require(not extra, f"{where}: unexpected fields {sorted(extra)}")
        _require(raw["index"] == i, f"{where}: index must be {i}, got {raw['index']!r}")
        _require(isinstance(raw["instruction"], str), f"{where}: instruction must be a string")

        ref = raw["reference_call"]
        _require(isinstance(ref, dict) and set(ref) == {"tool", "args"},
                 f"{where}: reference_call must be {{tool, args}}")
        _require(isinstance(ref["tool"], str), f"{where}: reference_call tool must be a string")
        _require(isinstance(ref["args"], dict), f"{where}: reference_call args must be an object")
        call = ToolCall(tool=ref["tool"], args=dict(ref["args"]))

        condition = _parse_condition(raw["condition"], where) if "condition" in raw else None
        repeat_until = None
        max_repeats = None
        _require(("repeat_until" in raw) == ("max_repeats" in raw),
                 f"{where}: repeat_until and max_repeats come together")
        if "repeat_until" in raw:
            repeat_until = _parse_condition(raw["repeat_until"], where)
            max_repeats = raw["max_repeats"]
            _require(isinstance(max_repeats, int) and not isinstance(max_repeats, bool),
                     f"{where}: max_repeats must be an integer")
            _require(1 <= max_repeats <= MAX_REPEATS_LIMIT,
                     f"{where}: max_repeats must be in [1, {MAX_REPEATS_LIMIT}]")

        if registry is not None:
            if call.tool not in registry:
                raise ToolReferenceError(
                    f"{where}: reference_call names unknown tool {call.tool!r}"
                )
            report = validate_call(canonicalize(call, registry), registry)
            _require(report.valid,
                     f"{where}: reference_call invalid: {report.to_dict()}")

        steps.append(GuidelineStep(
            index=i, instruction=raw["instruction"], reference_call=call,
            condition=condition, repeat_until=repeat_until, max_repeats=max_repeats,
        ))

    return Guideline(
        id=obj["id"], title=obj["title"], target_organ=obj["target_organ"],
        description=obj["description"], steps=tuple(steps),
    )


def serialize_guideline(guideline: Guideline) -> bytes:
    return json.dumps(guideline.to_dict(), sort_keys=True, indent=2).encode("utf-8")


def default_store_dir() -> Path:
    return Path(str(resources.files("russ"))) / "data" / "guidelines"


def load_store(directory: Path | str | None = None,
               registry: ToolRegistry | None = None) -> list[Guideline]:
    """All ``*.guideline.json`` documents in a directory, sorted by id."""
    directory = Path(directory) if directory is not None else default_store_dir()
    guidelines = []
    for path in sorted(directory.glob("*.guideline.json")):
        guidelines.append(parse_guideline(path.read_bytes(), registry))
    ids = [g.id for g in guidelines]
    if len(ids) != len(set(ids)):
        raise SchemaError(f"duplicate guideline ids in {directory}")
    return sorted(guidelines, key=lambda g: g.id)


def find_guideline(store: list[Guideline], guideline_id: str) -> Guideline:
    for g in store:
        if g.id == guideline_id:
            return g
    raise KeyError(f"no guideline with id {guideline_id!r}")


# -- retrieval --------------------------------------------------------------

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def bm25_scores(query: str, documents: list[list[str]],
                k1: float = BM25_K1, b: float = BM25_B) -> list[float]:
    """Okapi BM25 with the non-negative idf variant ln(1 + (N-df+0.5)/(df+0.5))."""
    n_docs = len(documents)
    avgdl = sum(len(d) for d in documents) / n_docs
    df: dict[str, int] = {}
    for doc in documents:
        for term in set(doc):
            df[term] = df.get(term, 0) + 1
    scores = []
    q_tokens = tokenize(query)
    for doc in documents:
        counts: dict[str, int] = {}
        for term in doc:
            counts[term] = counts.get(term, 0) + 1
        s = 0.0
        for term in q_tokens:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            idf = math.log(1.0 + (n_docs - df[term] + 0.5) / (df[term] + 0.5))
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len(doc) / avgdl))
        scores.append(s)
    return scores


def retrieve(query: str, store: list[Guideline], k: int = 1) -> list[tuple[Guideline, float]]:
    """Top-k guidelines by BM25 score; ties broken by ascending id."""
    if not store:
        raise EmptyStoreError("guideline store is empty")
    if not 1 <= k <= len(store):
        raise ValueError(f"k must be in [1, {len(store)}], got {k}")
    docs = [tokenize(g.retrieval_text()) for g in store]
    scores = bm25_scores(query, docs)
    ranked = sorted(zip(store, scores), key=lambda gs: (-gs[1], gs[0].id))
    return ranked[:k]


# -- step conditions ---------------------------------------------------------


def evaluate_condition(cond: ConditionSpec, world) -> bool:
    """Pure predicate over the current world state.

    Sweep-reading kinds raise NoSweepYetError when no sweep exists; a sweep
    with zero visible frames counts as maximally off-center (ratio 1.0).
    """
    if cond.kind in SWEEP_KINDS and not world.sweeps:
        raise NoSweepYetError(f"condition {cond.kind.value} needs a recorded sweep")
    if cond.kind is ConditionKind.CONFIDENCE_BELOW:
        return world.current_confidence() < cond.threshold
    if cond.kind is ConditionKind.CONFIDENCE_AT_LEAST:
        return world.current_confidence() >= cond.threshold
    if cond.kind is ConditionKind.ORGAN_OFF_CENTER:
        return world.sweeps[-1].mean_offset_ratio > cond.threshold
    if cond.kind is ConditionKind.ORGAN_VISIBLE:
        return bool(world.sweeps[-1].visible_frames)
    if cond.kind is ConditionKind.BREATH_HOLD_ACTIVE:
        return world.breath_hold_frames_remaining > 0
    raise ValueError(f"unhandled condition kind {cond.kind}")  # pragma: no cover
