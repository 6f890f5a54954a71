"""Command-line entry point: run missions, recompute metrics, render
maps, replay runs for determinism checks, and serve the operator API.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .runner import (EXIT_CONFIG, MissionRunner, ScenarioConfig,
                     compute_metrics, render_map)


def _cmd_run(args) -> int:
    try:
        scn = ScenarioConfig.from_yaml(args.scenario)
    except Exception as e:
        print(f"invalid scenario: {e}", file=sys.stderr)
        return EXIT_CONFIG
    runner = MissionRunner(scn, args.out)
    code = runner.run()
    if args.render:
        render_map(args.out)
    print(json.dumps(compute_metrics(args.out), indent=1, sort_keys=True))
    return code


def _cmd_metrics(args) -> int:
    print(json.dumps(compute_metrics(args.run_dir), indent=1, sort_keys=True))
    return 0


def _cmd_render(args) -> int:
    out = render_map(args.run_dir)
    print(out)
    return 0


def _cmd_replay(args) -> int:
    """Re-run the stored scenario and compare metrics byte-for-byte."""
    rd = Path(args.run_dir)
    with open(rd / "scenario.json") as f:
        scn = ScenarioConfig.from_dict(json.load(f))
    out = Path(args.out or (str(rd) + "_replay"))
    code = MissionRunner(scn, out).run()
    a = (rd / "metrics.json").read_bytes()
    b = (out / "metrics.json").read_bytes()
    if a == b:
        print("replay identical")
        return code
    print("replay DIVERGED", file=sys.stderr)
    return 1


def _cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    scn = ScenarioConfig.from_yaml(args.scenario)
    app = create_app(scn, args.out)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="subterra",
                                description="mine exploration simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario headless")
    run_p.add_argument("--scenario", required=True)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--render", action="store_true",
                       help="also write map.png")
    run_p.set_defaults(fn=_cmd_run)

    m_p = sub.add_parser("metrics", help="recompute metrics from a run dir")
    m_p.add_argument("--run-dir", required=True)
    m_p.set_defaults(fn=_cmd_metrics)

    r_p = sub.add_parser("render", help="render the top-down map")
    r_p.add_argument("--run-dir", required=True)
    r_p.set_defaults(fn=_cmd_render)

    rp_p = sub.add_parser("replay", help="re-run a stored scenario and diff")
    rp_p.add_argument("--run-dir", required=True)
    rp_p.add_argument("--out", default=None)
    rp_p.set_defaults(fn=_cmd_replay)

    s_p = sub.add_parser("serve", help="live mission with the operator API")
    s_p.add_argument("--scenario", required=True)
    s_p.add_argument("--out", default="/tmp/subterra_live")
    s_p.add_argument("--host", default="127.0.0.1")
    s_p.add_argument("--port", type=int, default=8800)
    s_p.set_defaults(fn=_cmd_serve)

    args = p.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
