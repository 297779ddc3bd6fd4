"""Command-line entry point: generate, train, attack, verify, report.

Every artifact directory is named after a hash of the config sections it
depends on (``data-<h>``, ``victim-<h>``, ``attack-<h>``), so rerunning a
config reuses finished outputs and a changed config never overwrites them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import io
from .experiments import ExperimentConfig, best_per_epsilon, fit_victim, image_preset, run_seed, with_seeds
from .metrics import accuracy, confusion_matrix, iou_from_confusion, load_reports, serialize_report, \
    write_curve
from .models import predict_images

log = logging.getLogger("dynattack")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def data_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return out / f"data-{_hash(asdict(cfg.dataset))}"


def victim_dir(cfg: ExperimentConfig, out: Path) -> Path:
    key = dict(dataset=asdict(cfg.dataset), victim={**asdict(cfg.victim), "seeds": None},
               train=asdict(cfg.train))
    return out / f"victim-{_hash(key)}"


def attack_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return out / f"attack-{cfg.digest()}"


def _load_cfg(args) -> ExperimentConfig:
    cfg = io.load_config(args.config) if args.config else image_preset()
    if args.seed is not None:
        cfg = with_seeds(cfg, [args.seed])
    return cfg.validate()


def _write_json(path: Path, obj) -> None:
    with open(path, "x", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    d = data_dir(cfg, args.out)
    manifest = d / "manifest.json"
    if manifest.exists():
        print(d)
        return 0
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for split in ("train", "test"):
        ds = cfg.dataset.make(split)
        path = d / f"{split}.bin"
        if not path.exists():
            io.write_dataset(ds, path)
        entries.append(io.dataset_manifest(ds, path))
    _write_json(manifest, dict(dataset=asdict(cfg.dataset), files=entries))
    print(d)
    return 0


def _load_split(cfg: ExperimentConfig, out: Path, split: str):
    d = data_dir(cfg, out)
    path = d / f"{split}.bin"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset {path}; run `generate` with this config first")
    manifest = json.loads((d / "manifest.json").read_text())
    want = {e["file"]: e["sha256"] for e in manifest["files"]}
    if io.sha256(path) != want.get(path.name):
        raise io.FormatError(f"checksum mismatch for {path}")
    return io.read_dataset(path)


# ---------------------------------------------------------------- train

def _evaluate(net, ds) -> float:
    if ds.is_image:
        return accuracy(predict_images(net, ds.images), ds.labels)
    cm = sum(confusion_matrix(net.predict(p, c), y, ds.classes)
             for p, y, c in zip(ds.clouds, ds.point_labels, ds.colors))
    return iou_from_confusion(cm)[1]


def _train_job(job):
    cfg, out, seed = job
    d = victim_dir(cfg, out)
    ckpt = d / f"seed{seed}.ckpt"
    if ckpt.exists():
        return str(ckpt)
    train_ds, test_ds = _load_split(cfg, out, "train"), _load_split(cfg, out, "test")
    net, init_seed = fit_victim(cfg, seed, train_ds, test_ds)
    census = net.census if net.kind == "layer_skip" else None
    extra = dict(seed=seed, init_seed=init_seed, test_metric=_evaluate(net, test_ds),
                 train_metric=_evaluate(net, train_ds), declared_census=census)
    io.write_checkpoint(net, ckpt, extra)
    return str(ckpt)


def _pool_map(fn, jobs, n_jobs: int):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    d = victim_dir(cfg, args.out)
    d.mkdir(parents=True, exist_ok=True)
    if not (d / "config.ini").exists():
        (d / "config.ini").write_text(io.config_to_ini(cfg), encoding="utf-8")
    for path in _pool_map(_train_job, [(cfg, args.out, s) for s in cfg.victim.seeds], args.jobs):
        print(path)
    return 0


# ---------------------------------------------------------------- attack

def _attack_job(job):
    cfg, out, seed = job
    ckpt = victim_dir(cfg, out) / f"seed{seed}.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}; run `train` with this config first")
    net, _ = io.read_checkpoint(ckpt)
    return run_seed(cfg, seed, net=net, test_data=_load_split(cfg, out, "test"))


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    d = attack_dir(cfg, args.out)
    d.mkdir(parents=True, exist_ok=True)
    ext = args.format
    seeds = list(cfg.victim.seeds)
    pending = [s for s in seeds if not (d / f"seed{s}.{ext}").exists()]
    for seed, reports in zip(pending, _pool_map(_attack_job, [(cfg, args.out, s) for s in pending], args.jobs)):
        serialize_report(reports, d / f"seed{seed}.{ext}", ext)
    rows = []
    for s in seeds:
        rows += load_reports(d / f"seed{s}.{ext}")
    summary = d / f"summary.{ext}"
    if not summary.exists():
        serialize_report(best_per_epsilon(rows), summary, ext)
    if not (d / "config.ini").exists():
        (d / "config.ini").write_text(io.config_to_ini(cfg), encoding="utf-8")
    print(summary)
    return 0


# ---------------------------------------------------------------- verify / report

def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_err {r.max_error:.3e}  tol {r.tolerance:.1e}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} oracles passed")
    return 1 if failed else 0


def cmd_report(args) -> int:
    rows = []
    for p in args.paths:
        p = Path(p)
        files = sorted(p.glob("seed*.json")) + sorted(p.glob("seed*.csv")) if p.is_dir() else [p]
        for f in files:
            rows += load_reports(f)
    if not rows:
        print("no reports found", file=sys.stderr)
        return 1
    best = best_per_epsilon(rows)
    table: dict = {}
    for r in best:
        table.setdefault((r.victim, r.relation, r.method, r.epsilon), []).append(r.post_metric)
    print(f"{'victim':<10} {'relation':<12} {'method':<7} {'epsilon':>8} {'seeds':>5} {'mean':>7} "
          f"{'min':>7} {'max':>7}")
    for (victim, rel, method, eps), vals in sorted(table.items()):
        print(f"{victim:<10} {rel or '-':<12} {method:<7} {eps:>8.4g} {len(vals):>5} "
              f"{sum(vals) / len(vals):>7.4f} {min(vals):>7.4f} {max(vals):>7.4f}")
    if args.curve:
        write_curve(best, args.curve)
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynattack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="INI experiment config (default: image preset)")
        sp.add_argument("--out", type=Path, default=Path("runs"))
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--seed", type=int, default=None, help="run this single seed only")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    for name, fn in (("generate", cmd_generate), ("train", cmd_train), ("attack", cmd_attack)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("verify", help="run the gradient and brute-force oracle suite")
    common(sp, config=False)
    sp.set_defaults(func=cmd_verify)
    sp = sub.add_parser("report", help="summarize report files or attack directories")
    sp.add_argument("paths", nargs="+")
    sp.add_argument("--curve", type=Path, help="also write an epsilon-vs-metric data file")
    sp.add_argument("--format", choices=("json", "csv"), default="json")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
