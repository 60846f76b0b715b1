"""Dense tool-call reward, step/episode metrics, and trace dataset export.

A predicted call is compared to the reference call for its step. A wrong
tool name scores a flat -0.5. With the right tool the reward is
``clip01(0.1 + 0.9 * s_args)`` where

    s_args  = clip01(0.5 * s_pres + 0.5 * s_corr - 0.1 * s_extra)
    s_pres  = weighted fraction of scored keys present in the prediction
    s_corr  = weighted fraction of scored keys whose values match
    s_extra = |predicted keys not in the reference| / max(1, |predicted keys|)

The scored keys are the reference tool's required parameters with their
registry weights. Discrete values match exactly after canonicalization;
numeric values match within the parameter's configured tolerance. A tool
with no required parameters scores s_pres = s_corr = 1 vacuously.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable

from .agent import Trace, build_context, oracle_response_text
from .errors import EmptyInputError, ReferenceInvalidError, UnknownStepIndexError
from .guidelines import Guideline
from .tools import (
    ParamKind,
    ToolCall,
    ToolRegistry,
    canonicalize,
    validate_call,
)


@dataclass
class RewardBreakdown:
    tool_match: bool
    r: float
    s_pres: float | None = None
    s_corr: float | None = None
    s_extra: float | None = None
    s_args: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool_match": self.tool_match,
            "r": self.r,
            "s_pres": self.s_pres,
            "s_corr": self.s_corr,
            "s_extra": self.s_extra,
            "s_args": self.s_args,
        }


@dataclass
class StepScore:
    step_index: int
    reward: RewardBreakdown
    step_correct: bool


@dataclass
class EpisodeMetrics:
    guideline_id: str
    step_wise_accuracy: float
    success: bool
    scored_turns: int
    correct_turns: int


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _values_match(spec, pred: Any, ref: Any) -> bool:
    if spec.kind in (ParamKind.NUMBER, ParamKind.INTEGER):
        if not isinstance(pred, (int, float)) or isinstance(pred, bool):
            return False
        if not isinstance(ref, (int, float)) or isinstance(ref, bool):
            return False
        delta = abs(float(pred) - float(ref))
        if spec.tol_rel is not None:
            return delta <= spec.tol_rel * abs(float(ref))
        return delta <= (spec.tol_abs or 0.0)
    # discrete kinds (and pose triples): canonical exact match
    return pred == ref


def score_tool_call(pred: ToolCall, ref: ToolCall, registry: ToolRegistry) -> RewardBreakdown:
    """Reward for one predicted call against its reference call."""
    try:
        ref = canonicalize(ref, registry)
    except Exception as e:
        raise ReferenceInvalidError(f"reference call is not scoreable: {e}") from None
    if not validate_call(ref, registry).valid:
        raise ReferenceInvalidError(
            f"reference call fails validation: {validate_call(ref, registry).to_dict()}"
        )

    if pred.tool != ref.tool or pred.tool not in registry:
        return RewardBreakdown(tool_match=False, r=-0.5)

    pred = canonicalize(pred, registry)
    schema = registry.lookup(ref.tool)
    scored = schema.required_params
    total_weight = sum(p.weight for p in scored)
    if total_weight > 0:
        pres = sum(p.weight for p in scored if p.name in pred.args) / total_weight
        corr = sum(
            p.weight for p in scored
            if p.name in pred.args and _values_match(p, pred.args[p.name], ref.args[p.name])
        ) / total_weight
    else:
        pres = corr = 1.0
    pred_keys = set(pred.args)
    extra = len(pred_keys - set(ref.args)) / max(1, len(pred_keys))
    s_args = _clip01(0.5 * pres + 0.5 * corr - 0.1 * extra)
    r = _clip01(0.1 + 0.9 * s_args)
    return RewardBreakdown(tool_match=True, r=r, s_pres=pres, s_corr=corr,
                           s_extra=extra, s_args=s_args)


def score_trace(
    trace: Trace, guideline: Guideline, registry: ToolRegistry
) -> tuple[EpisodeMetrics, list[StepScore]]:
    """Score every recorded turn against its step's reference call.

    Repeated turns of a repeat-until step score against the same reference.
    """
    scores: list[StepScore] = []
    for turn in trace.turns:
        if not 0 <= turn.step_index < len(guideline.steps):
            raise UnknownStepIndexError(
                f"turn references step {turn.step_index} of a "
                f"{len(guideline.steps)}-step guideline"
            )
        ref = guideline.steps[turn.step_index].reference_call
        breakdown = score_tool_call(turn.tool_call, ref, registry)
        correct = bool(breakdown.tool_match
                       and breakdown.s_pres == 1.0 and breakdown.s_corr == 1.0)
        scores.append(StepScore(step_index=turn.step_index, reward=breakdown,
                                step_correct=correct))
    correct_turns = sum(1 for s in scores if s.step_correct)
    accuracy = correct_turns / len(scores) if scores else 0.0
    metrics = EpisodeMetrics(
        guideline_id=trace.guideline_id,
        step_wise_accuracy=accuracy,
        success=trace.outcome.success,
        scored_turns=len(scores),
        correct_turns=correct_turns,
    )
    return metrics, scores


def aggregate(metrics: Iterable[EpisodeMetrics]) -> dict[str, float]:
    """Pooled-turn step accuracy and episode-level success rate."""
    metrics = list(metrics)
    if not metrics:
        raise EmptyInputError("no episode metrics to aggregate")
    turns = sum(m.scored_turns for m in metrics)
    correct = sum(m.correct_turns for m in metrics)
    return {
        "step_wise_accuracy": correct / turns if turns else 0.0,
        "overall_success_rate": sum(1 for m in metrics if m.success) / len(metrics),
        "episodes": len(metrics),
        "scored_turns": turns,
    }


def export_sft_dataset(
    traces: Iterable[Trace],
    guidelines: dict[str, Guideline],
    registry: ToolRegistry,
) -> list[dict[str, Any]]:
    """One training record per scored turn, deterministically ordered.

    Each record pairs the rendered context the policy saw with the oracle
    response for the step's reference call and the turn's reward.
    """
    records: list[dict[str, Any]] = []
    for trace in sorted(traces, key=lambda t: (t.guideline_id, t.seed)):
        guideline = guidelines[trace.guideline_id]
        _, scores = score_trace(trace, guideline, registry)
        for i, (turn, score) in enumerate(zip(trace.turns, scores)):
            context = build_context(guideline, registry, trace.turns[:i], turn.step_index)
            step = guideline.steps[turn.step_index]
            records.append({
                "context": context,
                "target": oracle_response_text(step.index, step.instruction,
                                               canonicalize(step.reference_call, registry)),
                "reward": score.reward.r,
                "guideline_id": trace.guideline_id,
                "step_index": turn.step_index,
            })
    return records


def write_sft_dataset(records: list[dict[str, Any]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
