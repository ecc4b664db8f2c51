"""Command-line entry point: data generation, training, evaluation and reports.

Exit codes: 0 success, 1 invalid input (config, manifest, dataset schema,
missing prerequisites), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .core import (ConfigError, DomainId, TrainConfig, ValidationError, config_from_dict, dump_config, load_config,
                   make_rng)
from .data import (DomainDataset, DomainSpec, DomainStyle, FormatError, GenerationError, generate_domain,
                   load_dataset, write_dataset)
from .eval import evaluate
from .toydet import Detector, count_parameters, load_checkpoint
from .trainer import ABLATIONS, MetricsLog, RunResult, TrainingError, burn_in, init_state, run_experiment

log = logging.getLogger("pmt")

ROLES = ("source", "target", "target_eval")
BENCHMARK_DIR = Path(__file__).resolve().parent / "benchmarks"
DEFAULT_GAMMAS = (0.1, 0.5, 0.9, 1.2, 1.5)


class ManifestError(ValueError):
    pass


class MissingDataError(RuntimeError):
    pass


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class DomainEntry:
    name: str
    role: str
    domain_id: int
    num_images: int
    seed: int
    style: DomainStyle
    image_size: int = 64
    objects_per_image: tuple[int, int] = (1, 4)
    object_size: tuple[int, int] = (12, 24)

    def spec(self) -> DomainSpec:
        return DomainSpec(DomainId(self.domain_id), self.style, self.num_images, self.image_size,
                          self.objects_per_image, self.object_size, labeled=self.role != "target")


@dataclass(frozen=True)
class ExperimentManifest:
    name: str
    domains: tuple[DomainEntry, ...]
    config_path: Path
    seeds: tuple[int, ...]
    output_dir: Path
    description: str = ""

    @property
    def sources(self) -> list[DomainEntry]:
        return sorted((d for d in self.domains if d.role == "source"), key=lambda d: d.domain_id)

    def entry(self, role: str) -> DomainEntry | None:
        return next((d for d in self.domains if d.role == role), None)

    def load_config(self, override: str | Path | None = None) -> TrainConfig:
        cfg = load_config(override if override is not None else self.config_path)
        if cfg.num_sources != len(self.sources):
            raise ManifestError(f"config expects {cfg.num_sources} sources, manifest {self.name!r} "
                                f"declares {len(self.sources)}")
        return cfg


_DOMAIN_KEYS = {"name", "role", "domain_id", "num_images", "seed", "style", "image_size",
                "objects_per_image", "object_size"}
_MANIFEST_KEYS = {"name", "description", "config", "domains", "seeds", "output_dir"}


def resolve_manifest_path(path: str | Path) -> Path:
    """Accept a file path or the short name of a shipped benchmark (``lowshift``)."""
    p = Path(path)
    if p.is_file():
        return p
    shipped = BENCHMARK_DIR / f"benchmark_{path}.json"
    if shipped.is_file():
        return shipped
    raise ManifestError(f"manifest not found: {path}")


def load_manifest(path: str | Path) -> ExperimentManifest:
    path = resolve_manifest_path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - _MANIFEST_KEYS)
    if unknown:
        raise ManifestError(f"{path}: unknown key {unknown[0]!r}")
    for key in ("name", "config", "domains", "seeds"):
        if key not in raw:
            raise ManifestError(f"{path}: missing key {key!r}")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ManifestError(f"{path}: 'seeds' must be a non-empty list of nonnegative integers")
    domains = tuple(_domain_entry(d, f"{path}: domains[{i}]") for i, d in enumerate(raw["domains"]))
    _check_domains(domains, str(path))
    return ExperimentManifest(
        name=str(raw["name"]), domains=domains, config_path=(path.parent / raw["config"]).resolve(),
        seeds=tuple(seeds), output_dir=Path(raw.get("output_dir", f"runs/{raw['name']}")),
        description=str(raw.get("description", "")))


def _domain_entry(raw: Any, where: str) -> DomainEntry:
    if not isinstance(raw, dict):
        raise ManifestError(f"{where}: expected an object")
    unknown = sorted(set(raw) - _DOMAIN_KEYS)
    if unknown:
        raise ManifestError(f"{where}: unknown key {unknown[0]!r}")
    for key in ("name", "role", "domain_id", "num_images", "seed", "style"):
        if key not in raw:
            raise ManifestError(f"{where}: missing key {key!r}")
    if raw["role"] not in ROLES:
        raise ManifestError(f"{where}: role {raw['role']!r} is not one of {ROLES}")
    try:
        entry = DomainEntry(
            name=str(raw["name"]), role=raw["role"], domain_id=int(raw["domain_id"]),
            num_images=int(raw["num_images"]), seed=int(raw["seed"]), style=DomainStyle.from_dict(raw["style"]),
            image_size=int(raw.get("image_size", 64)),
            objects_per_image=tuple(raw.get("objects_per_image", (1, 4))),
            object_size=tuple(raw.get("object_size", (12, 24))))
        entry.spec()  # validates sizes and counts
    except (KeyError, TypeError, ValidationError) as exc:
        raise ManifestError(f"{where}: {exc}") from exc
    return entry


def _check_domains(domains: Sequence[DomainEntry], where: str) -> None:
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ManifestError(f"{where}: duplicate domain name")
    trained = [d for d in domains if d.role != "target_eval"]
    ids = [d.domain_id for d in trained]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ManifestError(f"{where}: duplicate domain id {dup}")
    sources = sorted(d.domain_id for d in domains if d.role == "source")
    if not sources or sources != list(range(len(sources))):
        raise ManifestError(f"{where}: source domain ids must be 0..N-1, got {sources}")
    targets = [d for d in domains if d.role == "target"]
    if len(targets) != 1 or targets[0].domain_id != len(sources):
        raise ManifestError(f"{where}: exactly one target with domain id N={len(sources)} is required")
    evals = [d for d in domains if d.role == "target_eval"]
    if len(evals) > 1 or any(d.domain_id != len(sources) for d in evals):
        raise ManifestError(f"{where}: at most one target_eval split, sharing the target's domain id")


# ---------------------------------------------------------------- datasets

@dataclass
class BenchmarkData:
    sources: list[DomainDataset]
    target: DomainDataset
    target_eval: DomainDataset | None


def generate_data(manifest: ExperimentManifest, data_dir: Path) -> dict[str, Path]:
    written = {}
    for entry in manifest.domains:
        try:
            ds = generate_domain(entry.spec(), make_rng(entry.seed))
        except (GenerationError, ValidationError) as exc:
            raise type(exc)(f"domain {entry.name!r}: {exc}") from exc
        out = data_dir / entry.name
        write_dataset(ds, out)
        written[entry.name] = out
    return written


def load_benchmark_data(manifest: ExperimentManifest, data_dir: Path) -> BenchmarkData:
    def read(entry: DomainEntry) -> DomainDataset:
        d = data_dir / entry.name
        if not (d / "annotations.json").is_file():
            raise MissingDataError(f"dataset {entry.name!r} not found under {data_dir}; "
                                   f"run `pmt generate-data` for this manifest first")
        return load_dataset(d)

    ev = manifest.entry("target_eval")
    return BenchmarkData([read(e) for e in manifest.sources], read(manifest.entry("target")),
                         read(ev) if ev is not None else None)


def data_dir_for(manifest: ExperimentManifest, out: str | Path | None) -> Path:
    return Path(out if out is not None else manifest.output_dir) / "data"


# ---------------------------------------------------------------- experiments

def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()


def run_seed(config: TrainConfig, data: BenchmarkData, seed: int, ablations: Sequence[str],
             out_dir: Path | None = None, manifest_name: str = "") -> dict[str, RunResult]:
    """Train every requested ablation for one seed, sharing a single burn-in."""
    for ab in ablations:
        if ab not in ABLATIONS:
            raise ValidationError(f"unknown ablation {ab!r}; expected one of {ABLATIONS}")
    cfg = config.replace(seed=seed)
    metrics = MetricsLog()
    burned_dir = out_dir / "burn_in" / f"seed{seed}" if out_dir is not None else None
    state = burn_in(data.sources, cfg, state=init_state(cfg), target_eval=data.target_eval,
                    out_dir=burned_dir, metrics=metrics)
    results = {}
    for ab in ablations:
        run_dir = out_dir / ab / f"seed{seed}" if out_dir is not None else None
        res = run_experiment(cfg, data.sources, data.target, data.target_eval, ablation=ab,
                             burned=(state, metrics), out_dir=run_dir)
        results[ab] = res
        if run_dir is not None:
            if data.target_eval is not None:
                model = res.state.student if res.evaluated == "student" else res.state.teacher.params
                evaluate(model, data.target_eval, cfg.num_classes, cfg.eval_score_threshold,
                         cfg.nms_iou).write(run_dir)
            res.state.save(run_dir / "final.pt")
            write_run_json(run_dir, "train", res.state.config, seed, {
                "metrics": "metrics.csv", "checkpoint": "final.pt", "eval": "eval.json"},
                extra={"manifest": manifest_name, "ablation": ab, "data_digest": res.state.data_digest,
                       "target_AP50": res.target_ap50, "evaluated": res.evaluated})
    return results


def write_run_json(directory: Path, command: str, config: TrainConfig | None, seed: int | None,
                   paths: dict[str, str], extra: dict[str, Any] | None = None) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "seed": seed, "paths": paths,
               "config_hash": config_hash(config) if config is not None else None,
               "config": config.to_dict() if config is not None else None}
    payload.update(extra or {})
    path = directory / "run.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def sweep_gamma(manifest: ExperimentManifest, config: TrainConfig, data: BenchmarkData,
                gammas: Sequence[float], seeds: Sequence[int]) -> list[dict[str, Any]]:
    """Final teacher target AP50 per (gamma, seed); one burn-in per seed is shared by all gammas."""
    if data.target_eval is None:
        raise ManifestError(f"manifest {manifest.name!r} has no target_eval split to score the sweep")
    scores: dict[float, list[float]] = {g: [] for g in gammas}
    for seed in seeds:
        cfg = config.replace(seed=seed)
        metrics = MetricsLog()
        state = burn_in(data.sources, cfg, state=init_state(cfg), metrics=metrics)
        for g in gammas:
            res = run_experiment(cfg.replace(gamma=g), data.sources, data.target, data.target_eval,
                                 burned=(state, metrics))
            scores[g].append(res.target_ap50)
            log.info("%s gamma=%g seed=%d AP50=%.4f", manifest.name, g, seed, res.target_ap50)
    return [{"benchmark": manifest.name, "gamma": g, "seeds": list(seeds), "ap50": v,
             "median_ap50": statistics.median(v)} for g, v in scores.items()]


def param_report(config: TrainConfig, source_counts: Sequence[int]) -> list[dict[str, int]]:
    rows, prev = [], None
    for n in source_counts:
        model = Detector.from_config(config.replace(num_sources=n))
        c = count_parameters(model, n, config.num_classes, config.proto_dim)
        row = {"num_sources": n, "num_domains": n + 1, "learnable": c.learnable,
               "domain_state": c.domain_state, "total": c.total,
               "delta_learnable": 0 if prev is None else c.learnable - prev.learnable,
               "delta_domain_state": 0 if prev is None else c.domain_state - prev.domain_state}
        rows.append(row)
        prev = c
    return rows


# ---------------------------------------------------------------- commands

def cmd_generate_data(args) -> int:
    manifest = load_manifest(args.manifest)
    data_dir = data_dir_for(manifest, args.out)
    written = generate_data(manifest, data_dir)
    write_run_json(data_dir, "generate-data", None, None, {k: str(v) for k, v in written.items()},
                   extra={"manifest": manifest.name})
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    config = manifest.load_config(args.config)
    out = Path(args.out if args.out is not None else manifest.output_dir)
    data = load_benchmark_data(manifest, out / "data")
    seeds = [args.seed] if args.seed is not None else list(manifest.seeds)
    ablations = [a.strip() for a in args.ablation.split(",")]
    for seed in seeds:
        results = run_seed(config, data, seed, ablations, out_dir=out, manifest_name=manifest.name)
        for ab, res in results.items():
            ap = "n/a" if res.target_ap50 is None else f"{res.target_ap50:.4f}"
            print(f"seed {seed} {ab}: target AP50 {ap} ({res.evaluated})")
    return 0


def cmd_eval(args) -> int:
    tensors, sidecar = load_checkpoint(args.checkpoint)
    if "config" not in sidecar:
        raise FormatError(f"{args.checkpoint}: sidecar lacks the training config")
    config = config_from_dict(sidecar["config"])
    model = Detector.from_config(config)
    if args.use == "teacher":
        state = {k[len("teacher."):]: v for k, v in tensors.items() if k.startswith("teacher.")}
        if not state:
            raise ValidationError(f"{args.checkpoint} holds no teacher (burn-in checkpoint?); pass --use student")
    else:
        state = {k: v for k, v in tensors.items() if not k.startswith(("teacher.", "protobank."))}
    model.load_state_dict(state)
    dataset = load_dataset(args.dataset)
    result = evaluate(model, dataset, config.num_classes, config.eval_score_threshold, config.nms_iou)
    out = Path(args.out) if args.out is not None else Path(args.checkpoint).parent
    result.write(out, pr_csv=args.pr_csv)
    write_run_json(out, "eval", config, config.seed, {"checkpoint": str(args.checkpoint),
                                                      "dataset": str(args.dataset), "eval": "eval.json"},
                   extra={"use": args.use})
    print(json.dumps(result.to_json(), indent=2))
    return 0


def cmd_sweep_gamma(args) -> int:
    gammas = [float(g) for g in args.gammas.split(",")]
    rows = []
    out = Path(args.out) if args.out is not None else Path("runs/sweep")
    for ref in args.manifest:
        manifest = load_manifest(ref)
        config = manifest.load_config(args.config)
        root = Path(args.data_root) / manifest.name if args.data_root else None
        data = load_benchmark_data(manifest, data_dir_for(manifest, root))
        seeds = [args.seed] if args.seed is not None else list(manifest.seeds)
        rows.extend(sweep_gamma(manifest, config, data, gammas, seeds))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["benchmark", "gamma", "median_ap50", "seeds", "ap50_per_seed"])
        for r in rows:
            w.writerow([r["benchmark"], r["gamma"], repr(r["median_ap50"]),
                        " ".join(map(str, r["seeds"])), " ".join(repr(v) for v in r["ap50"])])
    write_run_json(out, "sweep-gamma", None, args.seed, {"sweep": "sweep.csv"},
                   extra={"manifests": list(args.manifest), "gammas": gammas})
    for r in rows:
        print(f"{r['benchmark']:>10} gamma={r['gamma']:<4} median AP50 {r['median_ap50']:.4f}")
    return 0


def cmd_param_report(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    counts = [int(n) for n in args.sources.split(",")]
    rows = param_report(config, counts)
    cols = ["num_sources", "num_domains", "learnable", "domain_state", "total", "delta_learnable",
            "delta_domain_state"]
    print(" ".join(f"{c:>18}" for c in cols))
    for r in rows:
        print(" ".join(f"{r[c]:>18}" for c in cols))
    k, d = config.num_classes, config.proto_dim
    print(f"per added domain: domain_state +{k * (d + 1)} (K*(d+1)), learnable +{config.disc_hidden + 1} "
          f"(one discriminator output row)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "param_report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
        write_run_json(out, "param-report", config, config.seed, {"report": "param_report.csv"})
    return 0


def cmd_plot(args) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # optional dependency
        raise ValidationError("plotting needs matplotlib (pip install 'artifact[plot]')") from exc
    with open(args.metrics, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{args.metrics} has no rows")
    steps = [int(r["step"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for key in ("sup", "unsup", "dis", "prot", "total"):
        ax1.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=0.8)
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=7)
    evals = [(int(r["step"]), float(r["target_AP50"])) for r in rows if r["target_AP50"]]
    if evals:
        ax2.plot(*zip(*evals), marker="o")
    ax2.set_xlabel("step")
    ax2.set_ylabel("target AP50")
    out = Path(args.out) if args.out else Path(args.metrics).with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmt", description="Prototype mean-teacher toy experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        if manifest:
            sp.add_argument("manifest", help="manifest path or shipped benchmark name (lowshift, highshift)")
        sp.add_argument("--config", help="config file overriding the manifest's")
        sp.add_argument("--seed", type=int, help="run only this seed")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("generate-data", help="render every domain of a manifest to disk")
    common(g)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="burn-in plus adaptation for each seed")
    common(t)
    t.add_argument("--ablation", default="none",
                   help=f"comma-separated subset of {', '.join(ABLATIONS)} (one shared burn-in)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a labeled dataset directory")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--use", choices=("teacher", "student"), default="teacher")
    e.add_argument("--pr-csv", action="store_true", help="also write per-class PR curves")
    common(e, manifest=False)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-gamma", help="final target AP50 across prototype-loss weights")
    s.add_argument("manifest", nargs="+")
    s.add_argument("--gammas", default=",".join(map(str, DEFAULT_GAMMAS)))
    s.add_argument("--data-root", help="directory holding <benchmark>/data (default: each manifest's output_dir)")
    common(s, manifest=False)
    s.set_defaults(func=cmd_sweep_gamma)

    r = sub.add_parser("param-report", help="parameter growth with the number of source domains")
    r.add_argument("--sources", default="1,2,3,4,5")
    common(r, manifest=False)
    r.set_defaults(func=cmd_param_report)

    pl = sub.add_parser("plot", help="render loss and AP curves from metrics.csv")
    pl.add_argument("metrics")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


VALIDATION_ERRORS = (ConfigError, ValidationError, FormatError, ManifestError, MissingDataError)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, GenerationError, OSError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
