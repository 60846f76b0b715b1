"""Episode state machine: context assembly, response parsing, tool execution.

Each turn the runtime renders a context (prefix prompt, guideline with the
current step marked, tool catalog, history of tool calls and results), asks
the policy for a response, parses the mandatory
``<think>...</think><tool>{json}</tool>`` shape, validates the call, and
executes it against the world. Step advancement handles per-step skip
conditions and repeat-until loops; episodes end on the terminal tool, on
the step budget, or on unrecoverable failures.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from . import world as sim
from .errors import (
    MalformedResponseError,
    NoSweepYetError,
    ReplayDivergenceError,
    RussError,
)
from .guidelines import Guideline, evaluate_condition
from .tools import ToolCall, ToolRegistry, canonicalize, validate_call

DEFAULT_PREFIX = (
    "You are the planning module of a robotic ultrasound scanning system. "
    "Work through the scanning guideline one step at a time. Each turn, "
    "respond with <think>your reasoning</think> followed by "
    '<tool>{"tool": "...", "args": {...}}</tool> giving exactly one tool '
    "call for the current step."
)

CURRENT_MARKER = ">>> CURRENT STEP <<<"

_RESPONSE_RE = re.compile(
    r"\A\s*<think>(?P<think>.*?)</think>\s*<tool>(?P<tool>.*?)</tool>\s*\Z",
    re.DOTALL,
)


def parse_response(text: str) -> tuple[str, ToolCall]:
    """Split a policy response into think text and its structured tool call."""
    if "<think>" not in text:
        raise MalformedResponseError("missing <think> tag")
    if "<tool>" not in text:
        raise MalformedResponseError("missing <tool> tag")
    m = _RESPONSE_RE.match(text)
    if m is None:
        raise MalformedResponseError(
            "response must be <think>...</think><tool>...</tool> with nothing else"
        )
    body = m.group("tool").strip()
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as e:
        raise MalformedResponseError(f"tool body is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise MalformedResponseError("tool body must be a JSON object")
    if "tool" not in obj:
        raise MalformedResponseError('tool body missing "tool" field')
    if "args" not in obj:
        raise MalformedResponseError('tool body missing "args" field')
    extra = set(obj) - {"tool", "args"}
    if extra:
        raise MalformedResponseError(f"unexpected top-level field {sorted(extra)[0]!r}")
    if not isinstance(obj["tool"], str):
        raise MalformedResponseError('"tool" must be a string')
    if not isinstance(obj["args"], dict):
        raise MalformedResponseError('"args" must be an object')
    return m.group("think"), ToolCall(tool=obj["tool"], args=obj["args"])


def oracle_response_text(step_index: int, instruction: str, call: ToolCall) -> str:
    """The reference-shaped response for a step: templated think + exact call."""
    think = f"Step {step_index}: {instruction} Calling {call.tool}."
    return f"<think>{think}</think><tool>{call.to_json()}</tool>"


@dataclass
class AgentTurn:
    step_index: int
    think_text: str
    tool_call: ToolCall
    tool_result: dict[str, Any]
    timestamp: int  # logical turn ordinal, keeps traces byte-stable
    reward: Any | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "turn",
            "step_index": self.step_index,
            "think": self.think_text,
            "tool_call": {"tool": self.tool_call.tool, "args": self.tool_call.args},
            "tool_result": self.tool_result,
            "timestamp": self.timestamp,
        }


@dataclass
class EpisodeOutcome:
    success: bool
    termination: str  # completed | max_steps | malformed | tool_error


@dataclass
class Trace:
    guideline_id: str
    seed: int
    fixture: str
    turns: list[AgentTurn] = field(default_factory=list)
    outcome: EpisodeOutcome = field(default_factory=lambda: EpisodeOutcome(False, "max_steps"))
    metrics: dict[str, Any] | None = None

    def to_jsonl(self) -> str:
        lines = [json.dumps(t.to_dict(), sort_keys=True, separators=(",", ":"))
                 for t in self.turns]
        outcome = {
            "kind": "outcome",
            "guideline_id": self.guideline_id,
            "seed": self.seed,
            "fixture": self.fixture,
            "success": self.outcome.success,
            "termination": self.outcome.termination,
            "turns": len(self.turns),
        }
        if self.metrics is not None:
            outcome["metrics"] = self.metrics
        lines.append(json.dumps(outcome, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or rows[-1].get("kind") != "outcome":
            raise ValueError("trace file must end with an outcome line")
        outcome = rows[-1]
        turns = []
        for row in rows[:-1]:
            if row.get("kind") != "turn":
                raise ValueError(f"unexpected line kind {row.get('kind')!r}")
            turns.append(AgentTurn(
                step_index=row["step_index"],
                think_text=row["think"],
                tool_call=ToolCall(tool=row["tool_call"]["tool"],
                                   args=dict(row["tool_call"]["args"])),
                tool_result=row["tool_result"],
                timestamp=row["timestamp"],
            ))
        return cls(
            guideline_id=outcome["guideline_id"],
            seed=outcome["seed"],
            fixture=outcome["fixture"],
            turns=turns,
            outcome=EpisodeOutcome(success=outcome["success"],
                                   termination=outcome["termination"]),
            metrics=outcome.get("metrics"),
        )


class Policy(Protocol):
    name: str

    def generate(self, context: str) -> str: ...


@dataclass
class EpisodeConfig:
    max_steps: int = 24
    max_retries: int = 2
    seed: int = 0
    prefix_prompt: str = DEFAULT_PREFIX


# -- context rendering -------------------------------------------------------


def build_context(
    guideline: Guideline,
    registry: ToolRegistry,
    history: list[AgentTurn],
    step_index: int,
    prefix_prompt: str = DEFAULT_PREFIX,
) -> str:
    """Deterministic, byte-stable rendering of the full episode context."""
    from .tools import render_tool_prompt  # local to avoid import noise at module top

    if not 0 <= step_index < len(guideline.steps):
        raise ValueError(f"step_index {step_index} out of range")
    lines: list[str] = [prefix_prompt, ""]
    lines.append(f"## Guideline: {guideline.id} -- {guideline.title}")
    lines.append(f"Target organ: {guideline.target_organ}")
    lines.append(guideline.description)
    lines.append("")
    lines.append("Steps:")
    for step in guideline.steps:
        marker = f" {CURRENT_MARKER}" if step.index == step_index else ""
        lines.append(f"[step {step.index}]{marker} {step.instruction}")
        ref = canonicalize(step.reference_call, registry)
        lines.append(f"    reference: {ref.to_json()}")
        if step.condition is not None:
            lines.append(f"    condition: {json.dumps(step.condition.to_dict(), sort_keys=True)}")
        if step.repeat_until is not None:
            lines.append(
                f"    repeat_until: {json.dumps(step.repeat_until.to_dict(), sort_keys=True)}"
                f" (max {step.max_repeats})"
            )
    lines.append("")
    lines.append(render_tool_prompt(registry))
    lines.append("## History")
    if not history:
        lines.append("(no tool calls yet)")
    for turn in history:
        lines.append(f"TOOL CALL [step {turn.step_index}]: {turn.tool_call.to_json()}")
        lines.append(
            f"TOOL RESULT [step {turn.step_index}]: "
            + json.dumps(turn.tool_result, sort_keys=True, separators=(",", ":"))
        )
    lines.append("")
    lines.append("Respond for the current step.")
    return "\n".join(lines)


# -- tool execution ----------------------------------------------------------


def _round6(x: float) -> float:
    return float(f"{x:.6f}")


def _execute_effect(world: sim.WorldState, call: ToolCall) -> tuple[str, dict[str, Any], bool]:
    """Apply a canonical, valid call to the world. Returns (summary, payload, terminal)."""
    args = call.args
    if call.tool == "plan_trajectory":
        traj = sim.plan_trajectory(
            world, args["target_organ"], args["start_landmark"], args["end_landmark"],
            n_points=args.get("n_points"),
        )
        idx = len(world.trajectories) - 1
        summary = (f"planned trajectory {idx} ({len(traj.poses)} points, "
                   f"{args['start_landmark']} to {args['end_landmark']})")
        return summary, {"trajectory_index": idx, "n_points": len(traj.poses)}, False

    if call.tool == "execute_motion":
        result = sim.execute_motion(world, args["target"], float(args["speed"]))
        if isinstance(result, sim.SweepRecord):
            idx = len(world.sweeps) - 1
            payload = {
                "sweep_index": idx,
                "frames": len(result.frames),
                "visible_fraction": _round6(result.visible_fraction),
                "mean_offset_ratio": _round6(result.mean_offset_ratio),
                "mean_confidence": _round6(
                    sum(f.confidence for f in result.frames) / len(result.frames)
                ),
            }
            summary = (f"sweep {idx}: {len(result.frames)} frames, "
                       f"visible {payload['visible_fraction']:.2f}, "
                       f"offset {payload['mean_offset_ratio']:.2f}")
            return summary, payload, False
        payload = {"moved_to": [_round6(v) for v in result.position]}
        return f"probe moved to {payload['moved_to']}", payload, False

    if call.tool == "adjust_contact":
        pose, force = sim.adjust_contact(world, args.get("sweep"))
        payload = {
            "confidence": _round6(world.current_confidence()),
            "force": _round6(force),
        }
        return (f"contact adjusted: confidence {payload['confidence']:.2f}, "
                f"force {payload['force']:.1f} N"), payload, False

    if call.tool == "voice_guidance":
        payload = sim.voice_guidance(world, args["message"])
        return f"voice guidance delivered ({payload['effect']})", payload, False

    if call.tool == "refine_trajectory":
        traj = sim.refine_trajectory(world, args["sweep"])
        if traj is None:
            return "sweep already well centered; no refinement", {"refined": False}, False
        idx = len(world.trajectories) - 1
        payload = {"refined": True, "trajectory_index": idx}
        return f"replanned trajectory {idx} centered on the organ estimate", payload, False

    if call.tool == "complete_scan":
        return f"scan completed: {args['summary']}", {"completed": True}, True

    raise RussError(f"no effect wired for tool {call.tool!r}")  # pragma: no cover


def apply_call(
    world: sim.WorldState, call: ToolCall, registry: ToolRegistry
) -> tuple[ToolCall, dict[str, Any], bool, bool]:
    """Validate and execute one call.

    Returns (recorded_call, tool_result, ok, terminal). Invalid calls are
    never executed; their result carries the validation report.
    """
    if call.tool not in registry:
        result = {"summary": f"unknown tool {call.tool!r}",
                  "payload": {"error": "unknown_tool"}}
        return call, result, False, False
    canonical = canonicalize(call, registry)
    report = validate_call(canonical, registry)
    if not report.valid:
        result = {"summary": "tool call failed validation",
                  "payload": {"error": "invalid_call", "report": report.to_dict()}}
        return canonical, result, False, False
    try:
        summary, payload, terminal = _execute_effect(world, canonical)
    except RussError as e:
        result = {"summary": f"tool execution failed: {e}",
                  "payload": {"error": type(e).__name__}}
        return canonical, result, False, False
    return canonical, {"summary": summary, "payload": payload}, True, terminal


# -- the episode loop --------------------------------------------------------


def run_episode(
    guideline: Guideline,
    world: sim.WorldState,
    policy: Policy,
    registry: ToolRegistry,
    config: EpisodeConfig | None = None,
) -> Trace:
    """Run one scanning episode to completion.

    Failure modes are encoded in the trace outcome, never raised: malformed
    responses are retried with an error notice up to ``max_retries`` times,
    invalid or failing tool calls end the episode as ``tool_error``, and the
    step budget ends it as ``max_steps``.
    """
    config = config or EpisodeConfig()
    trace = Trace(guideline_id=guideline.id, seed=config.seed, fixture=world.fixture)
    step_index = 0
    repeats_done = 0
    termination: str | None = None

    while step_index < len(guideline.steps):
        if len(trace.turns) >= config.max_steps:
            termination = "max_steps"
            break
        step = guideline.steps[step_index]
        if repeats_done == 0 and step.condition is not None:
            try:
                applies = evaluate_condition(step.condition, world)
            except RussError:
                termination = "tool_error"
                break
            if not applies:
                step_index += 1
                continue

        context = build_context(guideline, registry, trace.turns, step_index,
                                prefix_prompt=config.prefix_prompt)
        parsed = None
        prompt = context
        for _ in range(config.max_retries + 1):
            response = policy.generate(prompt)
            try:
                parsed = parse_response(response)
                break
            except MalformedResponseError as e:
                prompt = (context
                          + f"\n\nERROR: the previous response was rejected ({e.reason})."
                          + " Respond again for the current step.")
        if parsed is None:
            termination = "malformed"
            break
        think, raw_call = parsed

        recorded, result, ok, terminal = apply_call(world, raw_call, registry)
        trace.turns.append(AgentTurn(
            step_index=step_index, think_text=think, tool_call=recorded,
            tool_result=result, timestamp=len(trace.turns),
        ))
        if not ok:
            termination = "tool_error"
            break
        if terminal:
            termination = "completed"
            break

        if step.repeat_until is not None:
            repeats_done += 1
            try:
                done = evaluate_condition(step.repeat_until, world)
            except RussError:
                termination = "tool_error"
                break
            if not done and repeats_done < step.max_repeats:
                continue  # re-issue the same step
        step_index += 1
        repeats_done = 0

    if termination is None:
        # steps exhausted without reaching the terminal tool
        termination = "max_steps"
    success = False
    if termination == "completed":
        try:
            success = sim.is_scan_successful(world, guideline)
        except NoSweepYetError:
            success = False
    trace.outcome = EpisodeOutcome(success=success, termination=termination)
    return trace


def replay(trace: Trace, fixture: str | None = None) -> sim.WorldState:
    """Re-execute a trace's tool calls on a fresh world.

    Raises ReplayDivergenceError at the first turn whose re-executed tool
    result differs from the recorded one. Returns the reconstructed world.
    """
    from .tools import default_registry

    registry = default_registry()
    world = sim.init_world(trace.seed, fixture or trace.fixture)
    for i, turn in enumerate(trace.turns):
        _, result, _, _ = apply_call(world, turn.tool_call, registry)
        got = json.dumps(result, sort_keys=True, separators=(",", ":"))
        want = json.dumps(turn.tool_result, sort_keys=True, separators=(",", ":"))
        if got != want:
            raise ReplayDivergenceError(i, f"expected {want}, got {got}")
    return world
