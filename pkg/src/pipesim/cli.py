"""Command-line client for the simulator service.

Every subcommand except serve talks HTTP: against an in-process ASGI app by
default, or a remote server when --server is given. The CLI never simulates
anything itself; it posts the config, then writes whatever rows come back.
Output lands in a directory named by the config hash, so rerunning the same
config overwrites the same files byte for byte.

Exit codes: 0 success, 2 invalid config or arguments, 3 numeric failure
inside a run. The PIPESIM_OUT environment variable overrides --out.
"""

from __future__ import annotations

import argparse
import asyncio
import os
import sys
from pathlib import Path
from typing import Optional

import httpx

from .config import ConfigError, load_config
from .experiments import (
    COMPARE_COLUMNS,
    LOSS_CSV_HEADER,
    SWEEP_COLUMNS,
    SWEEP_SUMMARY_COLUMNS,
    VERSIONS_CSV_HEADER,
    config_hash,
    group_hash,
    write_csv_file,
    write_json_file,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _post(server: Optional[str], path: str, payload: dict) -> dict:
    """POST to the remote server, or to an in-process app when server is None."""

    async def go() -> httpx.Response:
        if server is None:
            from .service import create_app

            transport = httpx.ASGITransport(app=create_app())
            async with httpx.AsyncClient(
                transport=transport, base_url="http://pipesim.internal"
            ) as client:
                return await client.post(path, json=payload, timeout=None)
        async with httpx.AsyncClient(base_url=server) as client:
            return await client.post(path, json=payload, timeout=None)

    try:
        resp = asyncio.run(go())
    except httpx.HTTPError as exc:
        raise CliError(f"cannot reach server: {exc}", 1) from exc

    if resp.status_code == 200:
        return resp.json()
    detail = None
    try:
        detail = resp.json().get("detail")
    except ValueError:
        pass
    message = _detail_text(detail) or resp.text
    if resp.status_code == 422:
        raise CliError(f"invalid config: {message}", EXIT_CONFIG)
    if resp.status_code == 400 and isinstance(detail, dict) and detail.get("kind") == "numeric":
        raise CliError(f"numeric failure: {message}", EXIT_NUMERIC)
    raise CliError(f"server error {resp.status_code}: {message}", 1)


def _detail_text(detail) -> Optional[str]:
    if isinstance(detail, dict):
        return detail.get("message")
    if isinstance(detail, list):
        # fastapi request-validation shape
        parts = []
        for err in detail:
            loc = ".".join(str(x) for x in err.get("loc", []) if x != "body")
            parts.append(f"{loc}: {err.get('msg')}" if loc else str(err.get("msg")))
        return "; ".join(parts)
    if isinstance(detail, str):
        return detail
    return None


def _out_root(args) -> Path:
    env = os.environ.get("PIPESIM_OUT")
    return Path(env) if env else Path(args.out)


def _load(path: str, seed: Optional[int]):
    cfg = load_config(path)
    if seed is not None:
        from .config import config_from_dict

        obj = cfg.model_dump(mode="json")
        obj["seed"] = seed
        cfg = config_from_dict(obj)
    return cfg


def _fmt_float(v) -> str:
    return "-" if v is None else f"{v:.6f}"


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed)
    body = _post(args.server, "/run", {"config": cfg.model_dump(mode="json"), "seed": None})
    report = body["report"]

    out_dir = _out_root(args) / report["config_hash"]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json_file(out_dir / "report.json", report)
    if args.format == "json":
        write_json_file(out_dir / "losses.json", body["losses"])
        write_json_file(out_dir / "versions.json", body["versions"])
    else:
        write_csv_file(out_dir / "losses.csv", LOSS_CSV_HEADER.split(","), body["losses"])
        write_csv_file(
            out_dir / "versions.csv", VERSIONS_CSV_HEADER.split(","), body["versions"]
        )

    print(
        f"run {report['strategy']} depth={report['depth']} "
        f"n_batches={report['n_batches']} seed={report['seed']}"
    )
    print(
        f"  final_loss={_fmt_float(report['final_loss'])} "
        f"eval_loss={_fmt_float(report['eval_loss'])} "
        f"eval_accuracy={_fmt_float(report['eval_accuracy'])}"
    )
    print(
        f"  inconsistent={report['inconsistent_total']} "
        f"mean_staleness={report['mean_staleness']:.4f} "
        f"memory_peaks={report['memory_peaks']}"
    )
    print(f"  wrote {out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    configs = [_load(p, args.seed) for p in args.config]
    body = _post(
        args.server,
        "/compare",
        {"configs": [c.model_dump(mode="json") for c in configs]},
    )
    rows = body["rows"]

    out_dir = _out_root(args) / f"compare-{group_hash(configs)}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        write_json_file(out_dir / "compare.json", rows)
    else:
        write_csv_file(out_dir / "compare.csv", COMPARE_COLUMNS, rows)

    header = f"{'strategy':<22} {'last_epoch_loss':>16} {'eval_loss':>12} {'eval_acc':>9} {'incons':>6} {'memory':>12}"
    print(header)
    for r in rows:
        mem = "|".join(str(x) for x in r["memory_peaks"])
        print(
            f"{r['strategy']:<22} {r['last_epoch_loss']:>16.6f} "
            f"{r['eval_loss']:>12.6f} {_fmt_float(r['eval_accuracy']):>9} "
            f"{r['inconsistent_total']:>6} {mem:>12}"
        )
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_timeline(args) -> int:
    cfg = _load(args.config, args.seed)
    body = _post(args.server, "/timeline", {"config": cfg.model_dump(mode="json")})

    out_dir = _out_root(args) / f"timeline-{config_hash(cfg)}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        write_json_file(out_dir / "timeline.json", body["timeline"])
    else:
        cols = ("slot", "stage", "kind", "mb", "micro")
        write_csv_file(out_dir / "timeline.csv", cols, body["timeline"]["events"])
    write_json_file(out_dir / "bubble.json", body["stats"])

    s = body["stats"]
    print(
        f"timeline {body['timeline']['kind']} depth={body['timeline']['depth']} "
        f"horizon={s['horizon']} events={s['events']}"
    )
    print(
        f"  bubble_overall={s['bubble_overall']} bubble_steady={s['bubble_steady']} "
        f"steady_window={s['steady_window']} makespan_unit={s['makespan_unit']}"
    )
    print(f"  wrote {out_dir}")
    return EXIT_OK


def _parse_values(text: str) -> list:
    out = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            out.append(int(chunk))
            continue
        except ValueError:
            pass
        try:
            out.append(float(chunk))
            continue
        except ValueError:
            pass
        out.append(chunk)
    if not out:
        raise CliError("--values is empty", EXIT_CONFIG)
    return out


def cmd_sweep(args) -> int:
    cfg = _load(args.config, args.seed)
    values = _parse_values(args.values)
    seeds = None
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise CliError(f"--seeds must be integers: {exc}", EXIT_CONFIG) from exc
    body = _post(
        args.server,
        "/sweep",
        {
            "config": cfg.model_dump(mode="json"),
            "axis": args.axis,
            "values": values,
            "seeds": seeds,
        },
    )

    out_dir = _out_root(args) / f"sweep-{args.axis}-{group_hash([cfg], extra=args.axis)}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        write_json_file(out_dir / "sweep.json", body["rows"])
        write_json_file(out_dir / "sweep_summary.json", body["summary"])
    else:
        write_csv_file(out_dir / "sweep.csv", SWEEP_COLUMNS, body["rows"])
        write_csv_file(out_dir / "sweep_summary.csv", SWEEP_SUMMARY_COLUMNS, body["summary"])

    print(f"sweep axis={args.axis} values={values} runs={len(body['rows'])}")
    for row in body["summary"]:
        print(
            f"  {args.axis}={row['value']}: last_epoch_loss "
            f"{row['last_epoch_loss_mean']:.6f} +- {row['last_epoch_loss_std']:.6f} "
            f"({row['runs']} run{'s' if row['runs'] != 1 else ''})"
        )
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pipesim",
        description="Pipeline-parallel training simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi_config: bool = False):
        if multi_config:
            p.add_argument(
                "--config",
                action="append",
                required=True,
                help="config JSON path; repeat once per strategy",
            )
        else:
            p.add_argument("--config", required=True, help="config JSON path")
        p.add_argument("--out", default="runs", help="output root (default: runs)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--server", default=None, help="remote server URL (default: in-process)")

    p_run = sub.add_parser("run", help="train once and write report/losses/versions")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several configs over one task")
    common(p_cmp, multi_config=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_tl = sub.add_parser("timeline", help="emit the schedule and bubble stats")
    common(p_tl)
    p_tl.set_defaults(func=cmd_timeline)

    p_sw = sub.add_parser("sweep", help="vary one axis, aggregate over seeds")
    common(p_sw)
    p_sw.add_argument("--axis", required=True, help="config field to vary")
    p_sw.add_argument("--values", required=True, help="comma-separated values")
    p_sw.add_argument("--seeds", default=None, help="comma-separated seeds")
    p_sw.set_defaults(func=cmd_sweep)

    p_srv = sub.add_parser("serve", help="run the HTTP service")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8000)
    p_srv.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
