"""Command-line entry point: ``advtransfer <command> --manifest run.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .manifest import ManifestError, load_manifest
from .pipeline import PHASES, run
from .report import write_report
from .store import ResultStore

PHASES_FOR = {
    "datagen": PHASES[:1],
    "train": PHASES[:2],
    "tune": PHASES[:3],
    "evaluate": PHASES,
    "all": PHASES,
}
EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


class UsageError(RuntimeError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advtransfer", description="Adversarial transferability experiment runner.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "datagen": "generate and split the synthetic datasets",
        "train": "datagen, then train the undefended source models",
        "tune": "everything up to attack tuning",
        "evaluate": "everything up to and including evaluation",
        "aggregate": "write aggregate CSV tables from the result store",
        "report": "write aggregate CSV tables and heatmaps",
        "all": "evaluate, then report",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--manifest", required=True, type=Path)
        sp.add_argument("--out", type=Path, help="output directory (overrides the manifest)")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int, help="master seed (overrides the manifest)")
        sp.add_argument("--resume", action="store_true", help="continue in an existing output directory")
        if name in PHASES_FOR:
            sp.add_argument("--max-cells", type=int, help="stop after this many evaluation cells")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _output_dir(manifest, out: Path | None) -> Path:
    if out is not None:
        return out
    return Path(manifest.output_dir or f"runs/{manifest.name}")


def _check_resume(out: Path, manifest, resume: bool) -> None:
    saved = out / "manifest.json"
    if not saved.exists():
        return
    if not resume:
        raise UsageError(f"{out} already holds a run; pass --resume to continue it")
    if json.loads(saved.read_text()) != json.loads(json.dumps(manifest.to_dict())):
        raise UsageError(f"{out} holds a run of a different manifest; use another --out")


def execute(argv=None) -> tuple[int, dict]:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    summary: dict = {"command": args.command}
    try:
        manifest = load_manifest(args.manifest)
        if args.seed is not None:
            manifest = manifest.with_overrides(seed=args.seed)
        out = _output_dir(manifest, args.out)
        summary["out"] = str(out)
        status = EXIT_OK
        if args.command in PHASES_FOR:
            _check_resume(out, manifest, args.resume)
            stats = run(manifest, out, workers=args.workers, phases=PHASES_FOR[args.command],
                        max_cells=args.max_cells)
            summary.update(stats.to_dict())
            if stats.errors:
                status = EXIT_PARTIAL
        if args.command in ("aggregate", "report", "all"):
            store_path = out / "results.jsonl"
            if not store_path.exists():
                raise UsageError(f"no result store at {store_path}; run evaluate first")
            paths = write_report(ResultStore(store_path).records(), out, manifest.min_severity,
                                 manifest.weighting, plots=args.command != "aggregate")
            summary["written"] = [str(p.relative_to(out)) for p in paths]
        summary["status"] = "ok" if status == EXIT_OK else "partial"
        return status, summary
    except (ManifestError, UsageError, OSError, ValueError) as exc:
        summary.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return EXIT_ERROR, summary


def main(argv=None) -> int:
    code, summary = execute(argv)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
