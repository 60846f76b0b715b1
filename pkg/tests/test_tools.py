import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from russ.errors import UnknownToolError
from russ.tools import (
    ParamKind,
    ParamSpec,
    ToolCall,
    ToolRegistry,
    ToolSchema,
    canonicalize,
    default_registry,
    render_tool_prompt,
    validate_call,
)


def plan_call(**extra):
    args = {
        "target_organ": "kidney",
        "start_landmark": "right_costal_margin",
        "end_landmark": "right_iliac_crest",
    }
    args.update(extra)
    return ToolCall("plan_trajectory", args)


class TestDefaultRegistry:
    def test_has_six_tools_one_terminal(self, registry):
        assert len(registry) == 6
        terminals = [n for n in registry.names() if registry.lookup(n).terminal]
        assert terminals == ["complete_scan"]

    def test_plan_trajectory_required_params(self, registry):
        schema = registry.lookup("plan_trajectory")
        assert {p.name for p in schema.required_params} == {
            "target_organ", "start_landmark", "end_landmark"
        }

    def test_adjust_contact_sweep_is_optional(self, registry):
        assert registry.lookup("adjust_contact").param("sweep").required is False

    def test_default_weights_are_one(self, registry):
        for name in registry.names():
            for p in registry.lookup(name).params:
                assert p.weight == 1.0

    def test_registry_rejects_multiple_terminals(self):
        tools = [
            ToolSchema("a", "", terminal=True),
            ToolSchema("b", "", terminal=True),
        ]
        with pytest.raises(ValueError):
            ToolRegistry(tools)

    def test_number_param_needs_exactly_one_tolerance(self):
        with pytest.raises(ValueError):
            ParamSpec("x", ParamKind.NUMBER)
        with pytest.raises(ValueError):
            ParamSpec("x", ParamKind.NUMBER, tol_rel=0.1, tol_abs=1.0)

    def test_weight_overrides(self, registry):
        tuned = registry.with_overrides({"plan_trajectory": {"target_organ": {"weight": 2.0}}})
        assert tuned.lookup("plan_trajectory").param("target_organ").weight == 2.0
        # original untouched
        assert registry.lookup("plan_trajectory").param("target_organ").weight == 1.0


class TestValidateCall:
    def test_well_formed_plan_call(self, registry):
        assert validate_call(plan_call(), registry).valid

    def test_missing_required(self, registry):
        call = plan_call()
        del call.args["end_landmark"]
        report = validate_call(call, registry)
        assert report.missing_required == ["end_landmark"]
        assert not report.valid

    def test_type_error_on_string_speed(self, registry):
        call = ToolCall("execute_motion", {"target": "latest", "speed": "fast"})
        report = validate_call(call, registry)
        assert report.type_errors == [("speed", "not a number")]

    def test_unknown_key(self, registry):
        report = validate_call(plan_call(bogus=1), registry)
        assert report.unknown_keys == ["bogus"]

    def test_unknown_tool_raises(self, registry):
        with pytest.raises(UnknownToolError):
            validate_call(ToolCall("teleport", {}), registry)

    def test_enum_matched_case_insensitively(self, registry):
        assert validate_call(plan_call(target_organ=" Kidney "), registry).valid

    def test_trajectory_ref_accepts_index_latest_and_pose(self, registry):
        for target in (0, "latest", [1.0, 2.0, 3.0]):
            call = ToolCall("execute_motion", {"target": target, "speed": 10.0})
            assert validate_call(call, registry).valid
        bad = ToolCall("execute_motion", {"target": [1.0, 2.0], "speed": 10.0})
        assert not validate_call(bad, registry).valid

    def test_boolean_not_accepted_as_number(self, registry):
        call = ToolCall("execute_motion", {"target": 0, "speed": True})
        assert validate_call(call, registry).type_errors == [("speed", "not a number")]


class TestCanonicalize:
    def test_enum_trimmed_and_lowercased(self, registry):
        out = canonicalize(plan_call(target_organ=" Kidney "), registry)
        assert out.args["target_organ"] == "kidney"

    def test_numeric_value_bit_exact(self, registry):
        call = ToolCall("execute_motion", {"target": 0, "speed": 12.50})
        out = canonicalize(call, registry)
        assert out.args["speed"] == 12.50
        assert isinstance(out.args["speed"], float)

    def test_text_trimmed_not_lowercased(self, registry):
        call = ToolCall("voice_guidance", {"message": "  Hold STILL  "})
        assert canonicalize(call, registry).args["message"] == "Hold STILL"

    def test_unknown_keys_untouched(self, registry):
        out = canonicalize(plan_call(Extra="  MiXeD "), registry)
        assert out.args["Extra"] == "  MiXeD "

    def test_unknown_tool_raises(self, registry):
        with pytest.raises(UnknownToolError):
            canonicalize(ToolCall("warp", {}), registry)


organ_values = st.sampled_from(["kidney", " Kidney ", "LIVER", "aorta"])
landmark_values = st.sampled_from(["xiphoid", " L1 ", "umbilicus", "RIGHT_COSTAL_MARGIN"])
speed_values = st.one_of(st.integers(-5, 60), st.floats(-1, 60, allow_nan=False))
random_calls = st.one_of(
    st.builds(
        lambda o, s, e: ToolCall("plan_trajectory",
                                 {"target_organ": o, "start_landmark": s, "end_landmark": e}),
        organ_values, landmark_values, landmark_values,
    ),
    st.builds(
        lambda t, s: ToolCall("execute_motion", {"target": t, "speed": s}),
        st.one_of(st.integers(0, 3), st.just("latest"), st.just(" LATEST ")),
        speed_values,
    ),
    st.builds(lambda m: ToolCall("voice_guidance", {"message": m}),
              st.text(max_size=20)),
)


@given(random_calls)
@settings(max_examples=200, deadline=None)
def test_canonicalize_idempotent(call):
    registry = default_registry()
    once = canonicalize(call, registry)
    twice = canonicalize(once, registry)
    assert once == twice


@given(random_calls)
@settings(max_examples=200, deadline=None)
def test_canonicalization_preserves_validity(call):
    registry = default_registry()
    before = validate_call(call, registry)
    after = validate_call(canonicalize(call, registry), registry)
    assert before.valid == after.valid
    assert before.missing_required == after.missing_required
    assert before.unknown_keys == after.unknown_keys


class TestRenderToolPrompt:
    def test_all_tool_names_once(self, registry):
        text = render_tool_prompt(registry)
        for name in registry.names():
            assert text.count(f"### {name}") == 1

    def test_deterministic(self, registry):
        assert render_tool_prompt(registry) == render_tool_prompt(registry)

    def test_empty_registry(self):
        assert render_tool_prompt(ToolRegistry([])) == "## Tools"

    def test_distinct_registries_render_distinct_prompts(self, registry):
        base = render_tool_prompt(registry)
        reweighted = registry.with_overrides(
            {"plan_trajectory": {"target_organ": {"weight": 3.0}}})
        retoleranced = registry.with_overrides(
            {"execute_motion": {"speed": {"tol_rel": 0.25}}})
        assert render_tool_prompt(reweighted) != base
        assert render_tool_prompt(retoleranced) != base
