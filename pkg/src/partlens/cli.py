"""Command line: parts, build, train, explain, eval, tune-q, synth.

Exit codes: 0 success, 2 bad input or configuration, 3 pipeline failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datakit import BuildConfig, DatasetError, read_manifest, write_manifest
from .datakit.dataset import load_rgb, save_png
from .evalkit import MetricError, evaluate_report, pixel_auc, rows_to_csv, tune_prepared
from .explain import ExplainConfig, Explainer, MeronymModel, MissingModelError, load_report, save_report, summarize_class
from .kb import KBError, ResolutionError, load_kb_file, resolve_parts
from .netcore.backend import BackendError, make_extractor
from .netcore.head import ShapeError, load_head, save_head
from .netcore.model import SplitModel
from .netcore.train import TrainConfig, TrainingError
from .saliency import gradcam
from .datakit.dataset import BBox
from .workflow import HeadSpec, fit_classifier, fit_meronyms, folder_samples, make_part_dataset, part_samples

log = logging.getLogger("partlens")

EXIT_OK, EXIT_INPUT, EXIT_PIPELINE = 0, 2, 3
CLASSIFIER_DIR = "_classifier"

DEFAULTS = {
    "kb": "pascal",
    "data_root": "data",
    "output": "out",
    "backend": {"kind": "random-conv", "seed": 0},
    "classifier": {"model": None, "data": None},
    "thresholds": {"percentile": 83, "t_score": 10.0, "t_f1": 0.7},
    "build": BuildConfig().to_dict(),
    "train": TrainConfig().to_dict() | HeadSpec().to_dict(),
    "eval": {"steps": 100, "cell": 16},
}


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# ---------------------------------------------------------------- config


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_config_file(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _apply_override(cfg: dict, item: str):
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override must look like key.sub=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


class Run:
    """Resolved configuration plus lazily built shared objects."""

    def __init__(self, cfg: dict, base: Path):
        self.cfg = cfg
        self.base = base
        self._fe = None
        self._kb = None

    @classmethod
    def from_args(cls, args) -> "Run":
        raw, base = {}, Path.cwd()
        if args.config:
            path = Path(args.config)
            raw, base = _read_config_file(path), path.resolve().parent
        cfg = _merge(DEFAULTS, raw)
        for item in args.set or []:
            _apply_override(cfg, item)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.output is not None:
            cfg["output"] = args.output
            base_out = Path.cwd()
        else:
            base_out = base
        if "seed" not in cfg or not isinstance(cfg["seed"], int):
            raise ConfigError("an integer seed is required (config 'seed' or --seed)")
        run = cls(cfg, base)
        run.out = (base_out / cfg["output"]).resolve() if not Path(cfg["output"]).is_absolute() else Path(cfg["output"])
        return run

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    @property
    def kb(self):
        if self._kb is None:
            ref = self.cfg["kb"]
            self._kb = load_kb_file(ref if ref in ("pascal", "imagenet") else self.path(ref))
        return self._kb

    @property
    def extractor(self):
        if self._fe is None:
            self._fe = make_extractor(self.cfg["backend"], self.base)
        return self._fe

    def train_config(self) -> tuple[TrainConfig, HeadSpec]:
        t = dict(self.cfg["train"])
        spec = HeadSpec(t.pop("hidden", 4096), t.pop("dropout", 0.5))
        t.setdefault("seed", self.seed)
        try:
            return TrainConfig(**t), spec
        except TypeError as exc:
            raise ConfigError(f"train section: {exc}") from None

    def build_config(self) -> BuildConfig:
        b = dict(self.cfg["build"])
        if "ratios" in b:
            b["ratios"] = tuple(b["ratios"])
        try:
            return BuildConfig(**b)
        except TypeError as exc:
            raise ConfigError(f"build section: {exc}") from None

    def explain_config(self) -> ExplainConfig:
        return ExplainConfig.from_dict(self.cfg["thresholds"])

    def classifier_dir(self) -> Path:
        ref = self.cfg["classifier"].get("model")
        return self.path(ref) if ref else self.out / "models" / CLASSIFIER_DIR

    def classifier(self) -> SplitModel:
        d = self.classifier_dir()
        if not (d / "head.json").exists():
            raise MissingModelError(f"no holonym classifier at {d}; set classifier.model or run `partlens train --classifier`")
        return SplitModel(self.extractor, load_head(d))

    def meronym_models(self) -> dict[str, MeronymModel]:
        root = self.out / "models"
        out = {}
        if root.is_dir():
            for d in sorted(root.iterdir()):
                if d.name != CLASSIFIER_DIR and (d / "head.json").exists():
                    m = MeronymModel.load(d)
                    out[m.holonym] = m
        return out

    def explainer(self) -> Explainer:
        return Explainer(self.classifier(), self.meronym_models(), self.kb, self.explain_config())


def _dump(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _digest(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_parts(args) -> int:
    kb = load_kb_file(args.kb)
    try:
        parts = resolve_parts(args.concept, kb)
    except ResolutionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.json:
        print(json.dumps(parts))
    else:
        for p in parts:
            print(p)
    return EXIT_OK


def cmd_build(args, run: Run) -> int:
    root = run.path(run.cfg["data_root"])
    if not root.is_dir():
        raise InputError(f"data root not found: {root}")
    holonyms = args.holonym or sorted(p.name for p in root.iterdir() if p.is_dir())
    if not holonyms:
        raise InputError(f"no holonym folders under {root}")
    bcfg = run.build_config()
    for h in holonyms:
        try:
            samples = part_samples(root, h, run.kb)
        except ResolutionError as exc:
            raise InputError(str(exc)) from None
        ds = make_part_dataset(samples, run.extractor, bcfg, run.seed)
        meta = {"holonym": h, "build": bcfg.to_dict(), "backend": run.cfg["backend"]}
        path = write_manifest(ds, run.out / "datasets" / h, run.seed, meta)
        counts = {f: len(ds.fold(f)) for f in ("train", "val", "test")}
        flagged = {k: sum(v == k for v in ds.flags.values()) for k in ("duplicate", "outlier")}
        print(f"{h}: {len(ds.samples)} samples, folds {counts}, flagged {flagged} -> {path}")
    return EXIT_OK


def _print_f1(name: str, classes, f1):
    print(f"calibrated F1 for {name}:")
    for c, v in zip(classes, f1):
        print(f"  {c:<20} {v:.4f}")


def cmd_train(args, run: Run) -> int:
    tcfg, spec = run.train_config()
    fe = run.extractor
    if args.classifier:
        out_dir = run.classifier_dir()
        settings = {"train": tcfg.to_dict(), "head": spec.to_dict(), "backend": run.cfg["backend"], "seed": run.seed}
        if args.resume and _finished(out_dir, settings):
            print(f"classifier already trained at {out_dir}")
            return EXIT_OK
        data = run.cfg["classifier"].get("data")
        if not data:
            raise ConfigError("classifier.data must point at <root>/<class>/ images")
        result, cm, f1 = fit_classifier(fe, folder_samples(run.path(data)), tcfg, spec, run.seed)
        save_head(result.head, out_dir)
        _write_log(out_dir, settings, result, cm, f1, result.head.class_names)
        _print_f1("classifier", result.head.class_names, f1)
        return EXIT_OK
    if not args.holonym:
        raise InputError("name a holonym with --holonym (or pass --classifier)")
    for h in args.holonym:
        out_dir = run.out / "models" / h
        manifest = run.out / "datasets" / h / "manifest.json"
        if not manifest.exists():
            raise InputError(f"no dataset for {h!r}; run `partlens build` first ({manifest} missing)")
        ds, meta = read_manifest(manifest)
        settings = {"train": tcfg.to_dict(), "head": spec.to_dict(), "backend": run.cfg["backend"],
                    "dataset": hashlib.sha1(manifest.read_bytes()).hexdigest()}
        if args.resume and _finished(out_dir, settings):
            print(f"{h}: already trained at {out_dir}")
            continue
        model, result, cm = fit_meronyms(fe, ds, h, tcfg, spec)
        model.save(out_dir)
        f1 = [model.f1[c] for c in model.head.class_names]
        _write_log(out_dir, settings, result, cm, f1, model.head.class_names)
        _print_f1(h, model.head.class_names, f1)
    return EXIT_OK


def _finished(out_dir: Path, settings: dict) -> bool:
    path = out_dir / "train_log.json"
    if not path.exists() or not (out_dir / "head.json").exists():
        return False
    logged = json.loads(path.read_text(encoding="utf-8"))
    return logged.get("finished") and logged.get("settings_digest") == _digest(settings)


def _write_log(out_dir: Path, settings, result, cm, f1, classes):
    doc = {
        "finished": True,
        "settings": settings,
        "settings_digest": _digest(settings),
        "best_epoch": result.best_epoch,
        "stopped_epoch": result.stopped_epoch,
        "history": result.history,
        "confusion": np.asarray(cm).tolist(),
        "f1": {c: float(v) for c, v in zip(classes, f1)},
    }
    (out_dir / "train_log.json").write_text(_dump(doc), encoding="utf-8")


def _report_names(images) -> list[str]:
    names, seen = [], {}
    for img in images:
        stem = Path(img).stem
        n = seen.get(stem, 0)
        seen[stem] = n + 1
        names.append(stem if n == 0 else f"{stem}-{n}")
    return names


def cmd_explain(args, run: Run) -> int:
    paths = [Path(p) for p in args.images]
    for p in paths:
        if not p.exists():
            raise InputError(f"image not found: {p}")
    explainer = run.explainer()
    names = _report_names(paths)
    run_snapshot = {k: run.cfg[k] for k in ("seed", "kb", "backend", "thresholds")}

    def one(i):
        img = load_rgb(paths[i])
        try:
            report = explainer.explain(img, paths[i].name)
        except (ResolutionError, MissingModelError) as exc:
            return exc, None
        report.config["run"] = run_snapshot
        out_dir = run.out / "reports" / names[i]
        save_png(out_dir / "input.png", img)
        save_report(report, out_dir, img)
        return report, out_dir

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(one, range(len(paths))))
    failed = 0
    for path, (report, out_dir) in zip(paths, results):
        if out_dir is None:
            print(f"error: {path.name}: {report}", file=sys.stderr)
            failed += 1
            continue
        sel = ", ".join(report.selected) or "-"
        print(f"{report.image}: {report.holonym} ({report.score:.3f}) selected parts: {sel} -> {out_dir / 'report.json'}")
    return EXIT_PIPELINE if failed else EXIT_OK


def _find_reports(items) -> list[Path]:
    found = []
    for item in items:
        p = Path(item)
        if p.is_file() and p.name == "report.json":
            found.append(p)
        elif (p / "report.json").exists():
            found.append(p / "report.json")
        elif p.is_dir():
            found.extend(sorted(p.glob("*/report.json")))
        else:
            raise InputError(f"no report at {p}")
    return found


def _load_gt(path: Path) -> dict:
    entries = json.loads(path.read_text(encoding="utf-8"))
    return {e["image"]: e for e in entries}


def cmd_eval(args, run: Run) -> int:
    reports = _find_reports(args.reports)
    if not reports:
        raise InputError("no reports to evaluate")
    ecfg = run.cfg["eval"]
    steps, cell = int(ecfg.get("steps", 100)), int(ecfg.get("cell", 16))
    model = run.classifier()
    gt = _load_gt(run.path(args.gt) if not Path(args.gt).is_absolute() else Path(args.gt)) if args.gt else {}

    def one(path: Path):
        report = load_report(path)
        img = load_rgb(path.parent / "input.png")
        extra = {}
        if args.against == "gradcam":
            extra["gradcam"] = gradcam(model.extractor, model.head, img, report.class_index)
        row = evaluate_report(model, img, report, steps, run.seed, cell, extra)
        entry = gt.get(report.image)
        if entry:
            h, w = img.shape[:2]
            boxes: dict[str, list] = {}
            for p in entry["parts"]:
                boxes.setdefault(p["name"], []).append(BBox(*p["bbox"]))
            for p in report.parts:
                if p.name in boxes:
                    row[f"pixel_auc_{p.name}"] = pixel_auc(p.heatmap, boxes[p.name])
            every = [b for bs in boxes.values() for b in bs]
            if "gradcam" in extra:
                row["gradcam_pixel_auc"] = pixel_auc(extra["gradcam"], every)
        return row, report

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(one, reports))
    rows = [r for r, _ in results]
    # Rows can differ in their pixel-AUC columns; align on the union.
    columns = list(dict.fromkeys(k for r in rows for k in r))
    rows = [{k: r.get(k, "") for k in columns} for r in rows]
    out = run.out / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    numeric = [k for k in columns if all(isinstance(r[k], float) for r in rows)]
    by_class: dict[str, list] = {}
    for _, rep in results:
        by_class.setdefault(rep.holonym, []).append(rep)
    summary = {
        "images": len(rows),
        "means": {k: float(np.mean([r[k] for r in rows])) for k in numeric},
        "classes": {h: summarize_class(reps) for h, reps in sorted(by_class.items())},
        "config": {"steps": steps, "cell": cell, "seed": run.seed, "against": args.against},
    }
    (out / "summary.json").write_text(_dump(summary), encoding="utf-8")
    if args.plots:
        _plot_ratios(rows, out / "ratios.svg")
    for k in ("global_insertion_ratio", "global_deletion_ratio", "global_preservation_ratio"):
        if k in summary["means"]:
            print(f"{k}: {summary['means'][k]:.4f}")
    print(f"metrics for {len(rows)} images -> {out / 'metrics.csv'}")
    return EXIT_OK


def _plot_ratios(rows, path: Path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return
    plt.rcParams["svg.hashsalt"] = "partlens"
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for ax, key in zip(axes, ("insertion", "deletion")):
        vals = [r[f"global_{key}_ratio"] for r in rows]
        ax.bar(range(len(vals)), vals)
        ax.axhline(1.0, color="k", lw=0.8)
        ax.set_title(f"{key} AUC / random")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def cmd_tune(args, run: Run) -> int:
    paths = [Path(p) for p in args.images]
    if not paths:
        raise InputError("no tuning images")
    for p in paths:
        if not p.exists():
            raise InputError(f"image not found: {p}")
    grid = list(range(args.low, args.high + 1))
    steps = int(run.cfg["eval"].get("steps", 100))
    explainer = run.explainer()
    prepared = []
    for p in paths:
        try:
            prepared.append(explainer.prepare(load_rgb(p), p.name))
        except (ResolutionError, MissingModelError) as exc:
            print(f"skipping {p.name}: {exc}", file=sys.stderr)
    if not prepared:
        raise InputError("none of the tuning images could be explained")
    best, table = tune_prepared(prepared, explainer, grid, steps)
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "tune_q.json").write_text(_dump({"best": best, "objective": {str(q): v for q, v in table.items()}}))
    for q in grid:
        print(f"q={q:3d}  {table[q]:.4f}{'  <- best' if q == best else ''}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import write_world

    out = Path(args.out)
    info = write_world(out, args.n, args.n_test, args.seed)
    config = {
        "seed": args.seed,
        "kb": "world.kb.json",
        "data_root": "parts",
        "output": "out",
        "backend": {"kind": "random-conv", "seed": args.seed},
        "classifier": {"data": "holonyms"},
        "thresholds": {"percentile": 83, "t_score": 10.0, "t_f1": 0.7},
        "train": {"epochs": 100, "batch": 32, "lr": 0.003, "patience": 10, "hidden": 256, "dropout": 0.5,
                  "rotation": False, "crop": False, "color_jitter": False, "grayscale": False, "hflip": False},
        "eval": {"steps": 50, "cell": 16},
    }
    (out / "partlens.json").write_text(_dump(config))
    print(f"toy world for {', '.join(info['targets'])} written to {out} (config: {out / 'partlens.json'})")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="partlens", description="Part-based explanations for image classifiers.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parts", help="print the visible top-level parts of a concept")
    p.add_argument("concept")
    p.add_argument("--kb", default="pascal", help="'pascal', 'imagenet' or a KB JSON file")
    p.add_argument("--json", action="store_true")

    def with_config(sp):
        sp.add_argument("--config", "-c", help="JSON or TOML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output", "-o", help="output directory (overrides config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. thresholds.percentile=80")
        sp.add_argument("--jobs", "-j", type=int, default=1)
        return sp

    p = with_config(sub.add_parser("build", help="build part datasets"))
    p.add_argument("--holonym", action="append")

    p = with_config(sub.add_parser("train", help="train part heads (or the holonym classifier)"))
    p.add_argument("--holonym", action="append")
    p.add_argument("--classifier", action="store_true", help="train the holonym classifier head from classifier.data")
    p.add_argument("--resume", action="store_true", help="skip models already trained with the same settings")

    p = with_config(sub.add_parser("explain", help="explain images"))
    p.add_argument("images", nargs="+")

    p = with_config(sub.add_parser("eval", help="causal metrics for saved reports"))
    p.add_argument("reports", nargs="*")
    p.add_argument("--against", choices=["gradcam"], help="also score the holonym Grad-CAM heatmap")
    p.add_argument("--gt", help="JSON list of {image, parts:[{name, bbox}]} for pixel AUC")
    p.add_argument("--plots", action="store_true")

    p = with_config(sub.add_parser("tune-q", help="grid-search the binarization percentile"))
    p.add_argument("images", nargs="+")
    p.add_argument("--low", type=int, default=75)
    p.add_argument("--high", type=int, default=90)

    p = sub.add_parser("synth", help="write a toy world with a ready-made config")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=80, help="images per class")
    p.add_argument("--n-test", type=int, default=10)
    return ap


COMMANDS = {"build": cmd_build, "train": cmd_train, "explain": cmd_explain, "eval": cmd_eval, "tune-q": cmd_tune}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "parts":
            return cmd_parts(args)
        if args.command == "synth":
            return cmd_synth(args)
        run = Run.from_args(args)
        return COMMANDS[args.command](args, run)
    except (ConfigError, InputError, DatasetError, KBError, BackendError, FileNotFoundError) as exc:
        if isinstance(exc, ResolutionError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PIPELINE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (MissingModelError, TrainingError, ShapeError, MetricError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
