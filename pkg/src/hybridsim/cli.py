"""Command line client for the run service.

`hybridsim run` and `hybridsim validate` load a config file, inline any
referenced documents, and post the resulting bundle to the service; by
default an in-process instance, or a remote one via --server.  `hybridsim
serve` starts the HTTP service itself.

Exit codes: 0 on success, 1 for anything wrong with the inputs (one
"CODE: message" line on stderr), 2 when an internal invariant breaks.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Mapping

import httpx

from . import __version__
from .errors import (
    ConfigError,
    ConfigNotFoundError,
    HybridSimError,
    InternalInvariantError,
)
from .jsonio import ensure_mapping

log = logging.getLogger("hybridsim.cli")

SECTION_KEYS = ("topology", "catalog", "placement", "workload", "control")


def _read_json(path: Path, what: str) -> Mapping[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigNotFoundError(f"{what} file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from exc
    return ensure_mapping(text, f"{what} file {path}", ConfigError)


def load_config(path: Path) -> dict[str, Any]:
    """Read a run config and inline every file reference it makes.

    A section given as a string is read as JSON from a path relative to
    the config file; a workload with "replay_csv_path" is replaced by the
    referenced CSV text.
    """
    bundle = dict(_read_json(path, "config"))
    base = path.parent
    for key in SECTION_KEYS:
        value = bundle.get(key)
        if isinstance(value, str):
            bundle[key] = _read_json(base / value, key)
    workload = bundle.get("workload")
    if isinstance(workload, Mapping) and "replay_csv_path" in workload:
        workload = dict(workload)
        csv_path = base / str(workload.pop("replay_csv_path"))
        try:
            workload["replay_csv"] = csv_path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigNotFoundError(f"workload file not found: {csv_path}") from None
        bundle["workload"] = workload
    return bundle


def _parse_seeds(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    if not sep:
        raise ConfigError("--seeds must look like A..B")
    try:
        a, b = int(lo), int(hi)
    except ValueError:
        raise ConfigError("--seeds must look like A..B") from None
    if a > b:
        raise ConfigError("--seeds range must have A <= B")
    return list(range(a, b + 1))


def _transport_and_base(server: str | None) -> tuple[httpx.ASGITransport | None, str]:
    if server:
        return None, server
    from .service import app

    return httpx.ASGITransport(app=app), "http://hybridsim.internal"


class _ServiceFailure(Exception):
    def __init__(self, code: str, message: str, internal: bool):
        super().__init__(message)
        self.code = code
        self.internal = internal


def _failure_from_response(resp: httpx.Response) -> _ServiceFailure:
    try:
        body = resp.json()
        code = str(body.get("code", "ERROR"))
        message = str(body.get("message", body))
    except (ValueError, AttributeError):
        code, message = "ERROR", resp.text
    if resp.status_code == 422:
        # request body failed envelope validation
        return _ServiceFailure("CONFIG_INVALID", json.dumps(resp.json()["detail"]), False)
    return _ServiceFailure(code, message, resp.status_code >= 500)


async def _post_all(
    server: str | None, path: str, payloads: list[dict[str, Any]]
) -> list[dict[str, Any]]:
    transport, base = _transport_and_base(server)
    async with httpx.AsyncClient(
        transport=transport, base_url=base, timeout=None
    ) as client:
        responses = await asyncio.gather(
            *(client.post(path, json=p) for p in payloads)
        )
    results = []
    for resp in responses:
        if resp.status_code != 200:
            raise _failure_from_response(resp)
        results.append(resp.json())
    return results


def _write_artifacts(out_dir: Path, artifacts: Mapping[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(artifacts.items()):
        (out_dir / name).write_text(text, encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    bundle = load_config(Path(args.config))
    if args.seeds is not None:
        seeds = _parse_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = [bundle.get("seed", 0)]
    log.debug("running %s for seeds %s", args.config, seeds)

    payloads = [dict(bundle, seed=s) for s in seeds]
    results = asyncio.run(_post_all(args.server, "/run", payloads))

    out_root = Path(args.out)
    for seed, result in zip(seeds, results):
        artifacts = result["artifacts"]
        dest = out_root if len(seeds) == 1 else out_root / f"seed_{seed}"
        _write_artifacts(dest, artifacts)
        print(f"seed {seed}: wrote {len(artifacts)} artifacts to {dest}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    bundle = load_config(Path(args.config))
    (result,) = asyncio.run(_post_all(args.server, "/validate", [bundle]))
    if result["valid"]:
        print("ok")
        return 0
    for line in result["errors"]:
        print(line, file=sys.stderr)
    return 1


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridsim",
        description="Hybrid-cloud database simulator: run, validate, serve.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a run config and write artifacts")
    run.add_argument("config", help="run config JSON file")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument(
        "--seeds", default=None, metavar="A..B",
        help="run an inclusive seed range, one subdirectory per seed",
    )
    run.add_argument("--out", default="out", help="artifact directory (default: out)")
    run.add_argument("--server", default=None, help="remote service URL")
    run.set_defaults(handler=cmd_run)

    val = sub.add_parser("validate", help="check a run config without executing")
    val.add_argument("config", help="run config JSON file")
    val.add_argument("--server", default=None, help="remote service URL")
    val.set_defaults(handler=cmd_validate)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("HYBRIDSIM_LOG", "WARNING").upper()
    if not isinstance(getattr(logging, level, None), int):
        level = "WARNING"
    logging.basicConfig(level=level)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except HybridSimError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except _ServiceFailure as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 2 if exc.internal else 1
    except httpx.HTTPError as exc:
        print(f"SERVER_UNREACHABLE: {exc}", file=sys.stderr)
        return 1
    except InternalInvariantError as exc:
        print(f"INTERNAL: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # a crash is still an internal defect
        log.debug("unexpected failure", exc_info=True)
        print(f"INTERNAL: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
