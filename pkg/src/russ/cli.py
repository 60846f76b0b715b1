"""Command-line interface.

Machine-readable JSON goes to stdout, human summaries to stderr. Exit
codes: 0 success, 1 domain failure (unsuccessful episode), 2 usage or
input error, 3 invalid reference call.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import agent, guidelines, policies, rewards, world
from .errors import PortInUseError, ReferenceInvalidError, RussError
from .tools import ToolCall, default_registry

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_REFERENCE = 3


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_store(args):
    registry = default_registry()
    store = guidelines.load_store(args.guidelines_dir, registry)
    return registry, store


def _make_policy(args, registry):
    if args.policy == "oracle":
        return policies.OraclePolicy()
    if args.policy == "perturbed":
        cfg = policies.PerturbationConfig(
            p_wrong_tool=args.p_wrong_tool,
            p_drop_required=args.p_drop_required,
            p_extra_key=args.p_extra_key,
            p_numeric_noise=args.p_numeric_noise,
            numeric_noise_rel=args.numeric_noise_rel,
            seed=args.seed,
        )
        return policies.PerturbedPolicy(cfg, registry)
    base_url = args.endpoint or os.environ.get(policies.ENV_URL)
    if not base_url:
        raise _UsageError(f"remote policy needs --endpoint or ${policies.ENV_URL}")
    cfg = policies.RemoteEndpointConfig(
        base_url=base_url,
        token=os.environ.get(policies.ENV_TOKEN),
        timeout=args.timeout,
    )
    return policies.RemotePolicy(cfg)


class _UsageError(Exception):
    pass


def cmd_run(args) -> int:
    registry, store = _load_store(args)
    if bool(args.query) == bool(args.guideline):
        raise _UsageError("exactly one of --query / --guideline is required")
    if args.query:
        ranked = guidelines.retrieve(args.query, store, k=1)
        guideline = ranked[0][0]
        _log(f"retrieved guideline {guideline.id!r} for query {args.query!r}")
    else:
        try:
            guideline = guidelines.find_guideline(store, args.guideline)
        except KeyError as e:
            raise _UsageError(str(e)) from None
    fixture = args.fixture or guideline.target_organ
    w = world.init_world(args.seed, fixture)
    policy = _make_policy(args, registry)
    config = agent.EpisodeConfig(max_steps=args.max_steps, seed=args.seed)
    trace = agent.run_episode(guideline, w, policy, registry, config)
    out = Path(args.out)
    out.write_text(trace.to_jsonl())
    _emit({
        "guideline_id": trace.guideline_id,
        "success": trace.outcome.success,
        "termination": trace.outcome.termination,
        "turns": len(trace.turns),
        "trace": str(out),
    })
    _log(f"episode {trace.outcome.termination}: success={trace.outcome.success}, "
         f"turns={len(trace.turns)} -> {out}")
    return EXIT_OK if trace.outcome.success else EXIT_FAILURE


def _score_one(path: str, store, registry):
    trace = agent.Trace.from_jsonl(Path(path).read_text())
    guideline = guidelines.find_guideline(store, trace.guideline_id)
    metrics, _ = rewards.score_trace(trace, guideline, registry)
    return metrics


def cmd_eval(args) -> int:
    registry, store = _load_store(args)
    paths = sorted(p for pattern in args.traces for p in glob.glob(pattern))
    if not paths:
        raise _UsageError("no trace files matched")
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        episode_metrics = list(pool.map(lambda p: _score_one(p, store, registry), paths))
    per_guideline: dict[str, list[rewards.EpisodeMetrics]] = {}
    for m in episode_metrics:
        per_guideline.setdefault(m.guideline_id, []).append(m)
    report = {
        "aggregate": rewards.aggregate(episode_metrics),
        "per_guideline": {
            gid: rewards.aggregate(ms) for gid, ms in sorted(per_guideline.items())
        },
    }
    _emit(report)
    return EXIT_OK


def _read_call(spec: str) -> ToolCall:
    text = spec
    if not spec.lstrip().startswith("{"):
        text = Path(spec).read_text()
    obj = json.loads(text)
    return ToolCall(tool=obj["tool"], args=dict(obj["args"]))


def cmd_score(args) -> int:
    try:
        pred = _read_call(args.pred)
        ref = _read_call(args.ref)
    except (OSError, ValueError, KeyError) as e:
        raise _UsageError(f"cannot read tool call: {e}") from None
    registry = default_registry()
    try:
        breakdown = rewards.score_tool_call(pred, ref, registry)
    except ReferenceInvalidError as e:
        _log(str(e))
        return EXIT_REFERENCE
    _emit(breakdown.to_dict())
    return EXIT_OK


def cmd_dataset(args) -> int:
    registry, store = _load_store(args)
    paths = sorted(p for pattern in args.traces for p in glob.glob(pattern))
    traces = [agent.Trace.from_jsonl(Path(p).read_text()) for p in paths]
    by_id = {g.id: g for g in store}
    records = rewards.export_sft_dataset(traces, by_id, registry)
    rewards.write_sft_dataset(records, args.out)
    _log(f"wrote {len(records)} records -> {args.out}")
    _emit({"records": len(records), "out": args.out})
    return EXIT_OK


def cmd_retrieve(args) -> int:
    _, store = _load_store(args)
    ranked = guidelines.retrieve(args.query, store, k=args.k)
    _emit([{"id": g.id, "score": score} for g, score in ranked])
    return EXIT_OK


def cmd_stub(args) -> int:
    script = json.loads(Path(args.script).read_text())
    try:
        server = policies.StubServer(script, port=args.port)
    except PortInUseError as e:
        _log(str(e))
        return EXIT_USAGE
    _log(f"stub server listening on {server.url} ({len(script)} scripted responses)")
    try:
        while True:
            import time
            time.sleep(0.5)
    except KeyboardInterrupt:
        _log("shutting down")
    finally:
        server.close()
    return EXIT_OK


def _add_store_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--guidelines-dir", default=None,
                   help="directory of *.guideline.json files (default: bundled set)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="russ",
                                     description="guideline-driven scanning agent runtime")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scanning episode")
    run.add_argument("--query", help="retrieve the guideline matching this query")
    run.add_argument("--guideline", help="run this guideline id directly")
    run.add_argument("--fixture", help="scene fixture id (default: the target organ)")
    run.add_argument("--policy", choices=["oracle", "perturbed", "remote"], default="oracle")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--max-steps", type=int, default=24)
    run.add_argument("--out", default="trace.jsonl")
    run.add_argument("--p-wrong-tool", type=float, default=0.0)
    run.add_argument("--p-drop-required", type=float, default=0.0)
    run.add_argument("--p-extra-key", type=float, default=0.0)
    run.add_argument("--p-numeric-noise", type=float, default=0.0)
    run.add_argument("--numeric-noise-rel", type=float, default=0.5)
    run.add_argument("--endpoint", help="remote endpoint base URL")
    run.add_argument("--timeout", type=float, default=30.0)
    _add_store_arg(run)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score trace files and print metrics")
    ev.add_argument("traces", nargs="+", help="trace file globs")
    ev.add_argument("--jobs", type=int, default=1)
    _add_store_arg(ev)
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("score", help="score one predicted call against a reference")
    sc.add_argument("pred", help="predicted call: inline JSON or a file path")
    sc.add_argument("ref", help="reference call: inline JSON or a file path")
    sc.set_defaults(func=cmd_score)

    ds = sub.add_parser("dataset", help="export an SFT dataset from traces")
    ds.add_argument("traces", nargs="+", help="trace file globs")
    ds.add_argument("--out", required=True)
    _add_store_arg(ds)
    ds.set_defaults(func=cmd_dataset)

    rt = sub.add_parser("retrieve", help="rank guidelines for a query")
    rt.add_argument("query")
    rt.add_argument("-k", type=int, default=3)
    _add_store_arg(rt)
    rt.set_defaults(func=cmd_retrieve)

    st = sub.add_parser("stub", help="serve a scripted generate endpoint")
    st.add_argument("--script", required=True, help="JSON file: list of script entries")
    st.add_argument("--port", type=int, default=8080)
    st.set_defaults(func=cmd_stub)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as e:
        _log(f"error: {e}")
        return EXIT_USAGE
    except RussError as e:
        _log(f"error: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
