"""Shared test machinery: random tool-call pair generation and reward laws."""

import random

from russ.tools import ParamKind, ToolCall, canonicalize

LANDMARK_POOL = ["xiphoid", "umbilicus", "right_costal_margin", "left_costal_margin",
                 "right_iliac_crest", "l1", "l3", "right_midaxillary"]
WORD_POOL = ["please", "hold", "scan", "ready", "relax", "done", "checking"]


def random_value(rng: random.Random, spec):
    if spec.kind is ParamKind.ENUM:
        return rng.choice(spec.choices)
    if spec.kind is ParamKind.LANDMARK:
        return rng.choice(LANDMARK_POOL)
    if spec.kind is ParamKind.NUMBER:
        return round(rng.uniform(1.0, 45.0), 3)
    if spec.kind is ParamKind.INTEGER:
        return rng.randint(2, 200)
    if spec.kind is ParamKind.BOOLEAN:
        return rng.random() < 0.5
    if spec.kind is ParamKind.TEXT:
        return " ".join(rng.choices(WORD_POOL, k=rng.randint(1, 4)))
    if spec.kind is ParamKind.SWEEP_REF:
        return rng.choice([0, 1, 2, "latest"])
    if spec.kind is ParamKind.TRAJECTORY_REF:
        return rng.choice([0, 1, "latest",
                           [round(rng.uniform(-100, 100), 2), 0.0, 120.0]])
    raise AssertionError(spec.kind)


def corrupt_value(rng: random.Random, spec, value):
    """A value of the same key that must NOT match the original."""
    if spec.kind is ParamKind.ENUM:
        return "not_a_choice"
    if spec.kind is ParamKind.LANDMARK:
        return "nowhere"
    if spec.kind is ParamKind.NUMBER:
        return value * 3.0 + 7.0
    if spec.kind is ParamKind.INTEGER:
        return value + 17
    if spec.kind is ParamKind.BOOLEAN:
        return not value
    if spec.kind is ParamKind.TEXT:
        return value + " corrupted"
    return 99  # reference kinds


def random_reference(rng: random.Random, registry) -> ToolCall:
    tool = rng.choice(registry.names())
    schema = registry.lookup(tool)
    args = {}
    for p in schema.params:
        if p.required or rng.random() < 0.3:
            args[p.name] = random_value(rng, p)
    return canonicalize(ToolCall(tool, args), registry)


def random_prediction(rng: random.Random, registry, ref: ToolCall) -> ToolCall:
    """A prediction derived from the reference by random corruption."""
    tool = ref.tool
    if rng.random() < 0.15:
        tool = rng.choice(registry.names())
    args = {}
    schema = registry.lookup(ref.tool)
    for key, value in ref.args.items():
        roll = rng.random()
        if roll < 0.2:
            continue  # drop the key
        if roll < 0.4:
            spec = schema.param(key)
            args[key] = corrupt_value(rng, spec, value) if spec else "junk"
        else:
            args[key] = value
    for i in range(rng.randint(0, 2)):
        args[f"extra_{i}"] = rng.random()
    return ToolCall(tool, args)
