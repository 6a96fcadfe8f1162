"""``fedskew`` command line: partition, sweep, train, analyze.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from fedskew import __version__
from fedskew.analysis import compare_table, write_table_csv
from fedskew.config import ConfigError, RunSpec, load_spec
from fedskew.federation import Federation, ExperimentResult, heterogeneity_of
from fedskew.heterogeneity import emd_sweep, write_sweep_csv
from fedskew.partition import build_partition

log = logging.getLogger("fedskew")

SCHEMA_VERSION = 1


class Refused(ConfigError):
    pass


def _prepare_out(out: str | None, names, overwrite: bool) -> Path:
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    directory = Path(out)
    clash = [n for n in names if (directory / n).exists()]
    if clash and not overwrite:
        raise Refused(f"refusing to overwrite {', '.join(str(directory / n) for n in clash)} (use --overwrite)")
    directory.mkdir(parents=True, exist_ok=True)
    for n in clash:
        (directory / n).unlink()
    return directory


def _resolve(args) -> RunSpec:
    spec = load_spec(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    if args.out is not None:
        spec.out = args.out
    return spec


def _meta(spec: RunSpec) -> str:
    return f"config_hash={spec.digest()} version={__version__}"


def cmd_partition(args) -> int:
    spec = _resolve(args)
    cfg = spec.experiment_config()
    out = _prepare_out(spec.out, ["manifest.json", "partition.txt"], args.overwrite)
    train, _ = spec.load_data()
    manifest = build_partition(train, cfg.k, cfg.n_devices, cfg.s, cfg.var, cfg.seed)
    emd, level = heterogeneity_of(manifest, train)
    manifest.emd = emd
    doc = manifest.to_dict()
    doc["config_hash"] = spec.digest()
    (out / "manifest.json").write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")
    sizes = [len(s.train_idx) for s in manifest.shards]
    summary = "\n".join([
        f"# {_meta(spec)}",
        f"dataset: {train.name} ({len(train)} train samples, {train.n_classes} classes)",
        f"k: {cfg.k}",
        f"var: {cfg.var}",
        f"D: {cfg.n_devices}",
        f"s: {cfg.s}",
        f"train samples per device: min {min(sizes)}, max {max(sizes)}, total {sum(sizes)}",
        f"EMD: {emd:.4f}",
        f"IID level: {level if level is not None else 'n/a (no thresholds for this class count)'}",
    ]) + "\n"
    (out / "partition.txt").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return 0


def cmd_sweep(args) -> int:
    spec = _resolve(args)
    cfg = spec.experiment_config()
    sw = spec.sweep
    if not sw.get("ks") or not sw.get("vars"):
        raise ConfigError("sweep.ks and sweep.vars are required")
    out = _prepare_out(spec.out, ["emd_trials.csv", "emd_means.csv"], args.overwrite)
    train, _ = spec.load_data()
    trials, means = emd_sweep(train, sw["ks"], sw["vars"], cfg.n_devices, cfg.s, sw.get("trials", 5), spec.seed)
    write_sweep_csv(trials, means, out / "emd_trials.csv", out / "emd_means.csv", _meta(spec))
    for k, var, value in means:
        print(f"k={k} var={var} mean_emd={value:.4f}")
    return 0


def cmd_train(args) -> int:
    spec = _resolve(args)
    cfg = spec.experiment_config()
    out = _prepare_out(spec.out, ["spec.yaml", "manifest.json", "rounds.jsonl", "timings.jsonl", "summary.json"],
                       args.overwrite)
    train, test = spec.load_data()
    (out / "spec.yaml").write_text(f"# {_meta(spec)}\n" + yaml.safe_dump(spec.to_dict(), sort_keys=True),
                                   encoding="utf-8")
    fed = Federation(cfg, train, test_set=test, workers=args.workers)
    emd, level = heterogeneity_of(fed.manifest, train)
    fed.manifest.emd = emd
    doc = fed.manifest.to_dict()
    doc["config_hash"] = spec.digest()
    (out / "manifest.json").write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")

    tag = {"config_hash": spec.digest(), "version": __version__}
    with open(out / "rounds.jsonl", "w", encoding="utf-8") as rounds, \
            open(out / "timings.jsonl", "w", encoding="utf-8") as timings:
        for _ in range(cfg.rounds):
            record = fed.run_round()
            rounds.write(record.log_line(**tag) + "\n")
            rounds.flush()
            timings.write(json.dumps({"round": record.round, "elapsed_ms": round(record.wall_time * 1e3, 3)}) + "\n")
            timings.flush()
            log.info("round %d f1=%.4f loss=%.4f", record.round, record.macro_f1, record.mean_train_loss)

    result = ExperimentResult(cfg, fed.manifest, fed.records, emd, level, fed.state)
    summary = result.summary()
    summary["schema_version"] = SCHEMA_VERSION
    summary["config_hash"] = spec.digest()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"best macro F1 {result.best_f1:.4f} at round {result.best_round}; EMD {emd:.4f} ({level})")
    return 0


def _read_summary(path: Path) -> dict:
    if path.is_dir():
        path = path / "summary.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read result file {path}: {exc}") from None
    for key in ("schema_version", "config", "curve"):
        if key not in doc:
            raise ConfigError(f"{path} is not an experiment summary (missing {key!r})")
    return doc


def cmd_analyze(args) -> int:
    docs = [_read_summary(Path(p)) for p in args.inputs]
    versions = {d["schema_version"] for d in docs}
    if len(versions) > 1:
        raise ConfigError(f"result files use different schema versions {sorted(versions)}; refusing to compare")
    out = _prepare_out(args.out, ["comparison.csv"], args.overwrite)
    rows = compare_table(docs, args.param, sigma_mult=args.sigma, window=args.smooth_window)
    hashes = ",".join(sorted({d.get("config_hash", "?") for d in docs}))
    write_table_csv(rows, out / "comparison.csv", f"config_hash={hashes} version={__version__}")
    for row in rows:
        print(f"{row.dataset} {row.iid_level} {row.param}={row.param_value} {row.aggregator}: "
              f"best {row.best_f1:.4f} (raw {row.raw_best_f1:.4f}){' *' if row.is_best else ''}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedskew", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", required=True, help="run spec path, or preset:<name>")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--overwrite", action="store_true")
        if workers:
            p.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("partition", help="build a partition manifest and report EMD / IID level"))
    common(sub.add_parser("sweep", help="EMD heat-map data over k and var"))
    common(sub.add_parser("train", help="run a federated experiment"), workers=True)
    p = sub.add_parser("analyze", help="compare experiment summaries")
    p.add_argument("inputs", nargs="+", help="summary.json files or run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--smooth-window", type=int, default=3)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--param", default="active_count", help="config field the table is grouped by")
    return parser


COMMANDS = {"partition": cmd_partition, "sweep": cmd_sweep, "train": cmd_train, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"fedskew: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("runtime failure", exc_info=True)
        print(f"fedskew: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
