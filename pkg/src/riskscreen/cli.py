"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from importlib import resources
from pathlib import Path

from .errors import RiskScreenError, SchemaError

CONFIG_ENV = "RISKSCREEN_CONFIG"


class UsageError(Exception):
    pass


def _reference_text(name: str) -> str:
    return resources.files("riskscreen").joinpath("data", name).read_text()


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(data: dict, overrides) -> dict:
    """``section.key=value`` assignments on top of the JSON config."""
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} does not address a config section")
        node[parts[-1]] = _parse_value(value)
    return data


def _load_config(args):
    from .pipeline import RunConfig
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise UsageError(f"no config given; pass --config or set {CONFIG_ENV}")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    data = _apply_overrides(data, args.set)
    if args.out:
        data["out_dir"] = str(Path(args.out).resolve())
    return RunConfig.from_dict(data, path.parent)


# --- commands -----------------------------------------------------------------------------


def cmd_generate(args) -> int:
    """Write ehr.csv, truth.csv (+ sidecar) and spec.json for a population spec."""
    from .synth import PopulationSpec, generate_population, write_corpus
    if args.spec == "reference":
        spec = PopulationSpec.from_dict(json.loads(_reference_text("reference_population.json")))
    else:
        path = Path(args.spec)
        if not path.is_file():
            raise UsageError(f"spec file not found: {path}")
        try:
            spec = PopulationSpec.load(path)
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"{path}: invalid population spec ({exc})") from exc
    if args.seed is not None:
        spec = PopulationSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = Path(args.out)
    existing = [n for n in ("ehr.csv", "truth.csv", "spec.json") if (out / n).exists()]
    if existing and not args.force:
        raise FileExistsError(f"{out} already holds {', '.join(existing)}; use --force")
    paths = write_corpus(generate_population(spec), out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_init_reference(args) -> int:
    """Generate the reference corpus, a second corpus for the retro run, and run.json."""
    from .synth import PopulationSpec, generate_population, write_corpus
    out = Path(args.out)
    cfg_path = out / "run.json"
    if cfg_path.exists() and not args.force:
        raise FileExistsError(f"{cfg_path} exists; use --force")
    base = json.loads(_reference_text("reference_population.json"))
    run_cfg = json.loads(_reference_text("reference_run.json"))
    for sub, seed in (("corpus", base["seed"]), ("retro", base["seed"] + 1)):
        spec = PopulationSpec.from_dict({**base, "seed": seed})
        write_corpus(generate_population(spec), out / sub)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(json.dumps(run_cfg, indent=2) + "\n")
    print(f"config: {cfg_path}")
    return 0


def _stage_command(stage):
    def run(args) -> int:
        from .pipeline import Run, run_stage
        cfg = _load_config(args)
        names = run_stage(Run(cfg, args.force), stage)
        for n in names:
            print(cfg.out / n)
        if stage == "report":
            print((cfg.out / "report.txt").read_text(), end="")
        return 0
    run.__doc__ = f"Run the {stage} stage."
    return run


def cmd_pipeline(args) -> int:
    """Run every stage and print the manifest location."""
    from .pipeline import run_pipeline
    cfg = _load_config(args)
    manifest = run_pipeline(cfg, force=args.force)
    print((cfg.out / "report.txt").read_text(), end="")
    print(f"\nmanifest: {cfg.out / 'manifest.json'} ({len(manifest['artifacts'])} artifacts)")
    return 0


STAGE_HELP = {
    "split": "stratified split, exclusions and homogeneity tests",
    "fit-survival": "Kaplan-Meier curves and the AFT model on the survival training sample",
    "featurize": "feature matrices for train, validate and test",
    "train": "boosted trees with and without the survival features",
    "evaluate": "test-set metrics, bootstrap intervals and the full-vs-ablation comparison",
    "retro": "out-of-time screening experiment on the retro corpus",
    "report": "pretty-print the run's tables",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskscreen",
                                description="Cancer-risk ranking from EHR event streams.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads (1 gives bitwise reproducible runs)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic corpus")
    g.add_argument("--spec", required=True,
                   help="population spec JSON, or 'reference' for the bundled one")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("init-reference", help="reference corpora plus a ready run.json")
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_init_reference)

    def with_config(sp):
        sp.add_argument("--config", default=None, help=f"run config JSON (default ${CONFIG_ENV})")
        sp.add_argument("--out", default=None, help="override the config's out_dir")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. train.max_depth=4")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    for stage, text in STAGE_HELP.items():
        sp = sub.add_parser(stage, help=text)
        with_config(sp)
        sp.set_defaults(func=_stage_command(stage))
    pp = sub.add_parser("pipeline", help="run all stages")
    with_config(pp)
    pp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _threads(args.threads):
            return args.func(args)
    except (UsageError, SchemaError, FileExistsError) as exc:
        print(f"riskscreen: error: {exc}", file=sys.stderr)
        return 2
    except (RiskScreenError, ValueError, OSError) as exc:
        print(f"riskscreen: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
