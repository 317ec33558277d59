"""``salcal`` command line: synthetic data, heatmaps, experiments and reports.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 heatmap, 4 training, 5 evaluation,
6 report.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field

from PIL import Image
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (
    BACKGROUND_MODES,
    SplitSpec,
    generate_synthetic,
    load_annotation,
    load_dataset,
    load_manifest,
    split_indices,
    synthetic_dataset,
)
from .ensemble import build_ensemble, evaluate_ensemble, load_ensemble, member_digests, save_ensemble, train_combiner
from .errors import DataError, HeatmapError, InvalidConfig, LossError, ModelError, SalcalError, TrainingError
from .heatmap import HeatmapConfig, build_hsm, hsm_path_for, write_heatmap
from .losses import relative_improvement
from .nn import load_checkpoint, save_checkpoint, tiny_cnn, unpack
from .train import TrainConfig, evaluate, pretrain_then_finetune, saliency_agreement, train

log = logging.getLogger("salcal")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_HEATMAP, EXIT_TRAIN, EXIT_EVAL, EXIT_REPORT = range(7)
SCHEMA_VERSION = 1
LOCK_NAME = ".salcal.lock"
REPORT_NAME = "report.json"


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW such as 64x64, got {text!r}") from None
    return h, w


def _range(text):
    try:
        lo, hi = (int(v) for v in text.split("-")) if "-" in text else (int(text),) * 2
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or MIN-MAX, got {text!r}") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError("shape counts need 1 <= MIN <= MAX")
    return lo, hi


# -- experiment files ---------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Parsed experiment JSON; every path is already absolute."""

    name: str
    kind: str  # "train" or "ensemble"
    data: dict
    model: dict
    train: TrainConfig
    heatmap: HeatmapConfig
    output_dir: str
    pretrain: dict | None = None
    members: list = field(default_factory=list)
    combiner: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)


def _resolve_data(entry, base, where):
    if entry is None:
        return None
    if isinstance(entry, str):
        path = os.path.normpath(os.path.join(base, entry))
        if not os.path.isfile(path):
            raise CliError(EXIT_IO, f"{where}: manifest not found: {path}")
        return {"manifest": path}
    if isinstance(entry, dict) and set(entry) == {"synthetic"}:
        spec = dict(entry["synthetic"])
        unknown = set(spec) - {"count", "seed", "background", "shapes"}
        if unknown or "count" not in spec:
            raise InvalidConfig(f"{where}: synthetic spec needs 'count' and accepts seed/background/shapes")
        if spec.get("background", "plain") not in BACKGROUND_MODES:
            raise InvalidConfig(f"{where}: background must be one of {BACKGROUND_MODES}")
        return {"synthetic": spec}
    raise InvalidConfig(f"{where}: expected a manifest path or {{'synthetic': {{...}}}}")


def _resolve_data_block(block, base, where):
    if not isinstance(block, dict) or "train" not in block:
        raise InvalidConfig(f"{where}: data block needs a 'train' entry")
    unknown = set(block) - {"train", "val", "test", "val_split"}
    if unknown:
        raise InvalidConfig(f"{where}: unknown data key(s) {sorted(unknown)}")
    out = {k: _resolve_data(block.get(k), base, f"{where}.{k}") for k in ("train", "val", "test")}
    if out["val"] is None:
        out["val_split"] = SplitSpec(**block.get("val_split", {}))
    return out


def load_experiment(path, seed=None):
    """Read and validate an experiment file; ``seed`` overrides every seed in it."""
    if not os.path.isfile(path):
        raise CliError(EXIT_IO, f"experiment file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InvalidConfig(f"{path}: schema_version must be {SCHEMA_VERSION}")
    known = {"schema_version", "name", "kind", "data", "model", "train", "heatmap", "output_dir", "pretrain",
             "members", "combiner"}
    unknown = set(doc) - known
    if unknown:
        raise InvalidConfig(f"{path}: unknown key(s) {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(path))
    kind = doc.get("kind", "train")
    if kind not in ("train", "ensemble"):
        raise InvalidConfig("kind must be 'train' or 'ensemble'")
    train_doc = dict(doc.get("train", {}))
    model = {"input_dims": [64, 64], "channels": [8, 16, 32], "seed": 0, **doc.get("model", {})}
    if seed is not None:
        train_doc["seed"] = seed
        model["seed"] = seed
    if train_doc.get("init_checkpoint"):
        ckpt = os.path.normpath(os.path.join(base, train_doc["init_checkpoint"]))
        if not os.path.isfile(ckpt):
            raise CliError(EXIT_IO, f"init_checkpoint not found: {ckpt}")
        train_doc["init_checkpoint"] = ckpt
    cfg = ExperimentConfig(
        name=doc.get("name") or os.path.splitext(os.path.basename(path))[0],
        kind=kind,
        data=_resolve_data_block(doc.get("data"), base, "data"),
        model=model,
        train=TrainConfig.from_dict(train_doc),
        heatmap=HeatmapConfig.from_dict(doc.get("heatmap", {})),
        output_dir=os.path.normpath(os.path.join(base, doc.get("output_dir", os.path.join("runs", "unnamed")))),
        source=doc,
    )
    if "pretrain" in doc:
        pre = dict(doc["pretrain"])
        pre_train = dict(pre.get("train", {}))
        if seed is not None:
            pre_train["seed"] = seed
        cfg.pretrain = {
            "data": _resolve_data_block(pre.get("data"), base, "pretrain.data"),
            "train": TrainConfig.from_dict(pre_train),
        }
    if kind == "ensemble":
        members = [os.path.normpath(os.path.join(base, m)) for m in doc.get("members", [])]
        for m in members:
            if not os.path.isfile(m):
                raise CliError(EXIT_IO, f"ensemble member not found: {m}")
        cfg.members = members
        cfg.combiner = {"init": "random", "seed": 0, **doc.get("combiner", {})}
        if seed is not None:
            cfg.combiner["seed"] = seed
    return cfg


def _materialize(entry, task, input_dims, cam_dims, heatmap, classes=None):
    if "manifest" in entry:
        manifest = load_manifest(entry["manifest"])
        return load_dataset(manifest, task, cam_dims if task == "calories" else None, heatmap, classes)
    spec = entry["synthetic"]
    shapes = spec.get("shapes", [1, 3])
    return synthetic_dataset(spec["count"], input_dims, spec.get("seed", 0), spec.get("background", "plain"), task,
                             cam_dims if task == "calories" else None, heatmap, classes, tuple(shapes))


def _datasets(block, task, input_dims, cam_dims, heatmap, classes=None):
    args = (task, input_dims, cam_dims, heatmap, classes)
    train_set = _materialize(block["train"], *args)
    if block["val"] is not None:
        val_set = _materialize(block["val"], *args)
    else:
        tr, va = split_indices(len(train_set), block["val_split"])
        train_set, val_set = train_set.subset(tr), train_set.subset(va)
    test_set = _materialize(block["test"], *args) if block["test"] is not None else None
    return train_set, val_set, test_set


# -- run directory plumbing ---------------------------------------------------

@contextmanager
def _locked(out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out_dir}: {exc}") from exc
    lock = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_IO, f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"output directory not writable: {out_dir} ({exc})") from exc
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        os.remove(lock)


class _Artifacts:
    """Files written by one command, removed again if the command fails."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.written = []

    def path(self, name):
        p = os.path.join(self.out_dir, name)
        self.written.append(p)
        return p

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    def rollback(self):
        for p in self.written:
            if os.path.exists(p):
                os.remove(p)


def _dump_report(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _now():
    return dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat()


def _test_metrics(model, test_set):
    if test_set is None:
        return None
    rep = evaluate(model, test_set)
    out = {"mae": rep.mae, "rmse": rep.rmse, "n_samples": rep.n_samples}
    if test_set.hsms is not None and test_set.has_hsm.all():
        corr, err = saliency_agreement(model, test_set)
        out["saliency_pearson_mean"] = float(corr.mean())
        out["saliency_mse_mean"] = float(err.mean())
    return out


def _method_name(cfg):
    name = cfg.train.loss.kind
    if cfg.pretrain:
        name = f"pretrain[{cfg.pretrain['train'].task}]+{name}"
    if cfg.train.init_checkpoint:
        name = f"finetune+{name}"
    return name


# -- verbs ----------------------------------------------------------------------

def cmd_generate(args):
    with _locked(args.out):
        manifest, _, scenes = generate_synthetic(args.count, args.dims, args.seed, args.out, args.background,
                                                 n_shapes=args.shapes)
    total = sum(s.total_calories for s in scenes)
    _say(args, f"wrote {len(manifest)} scenes to {args.out} (mean {total / len(scenes):.2f} kcal)")
    return EXIT_OK


def cmd_heatmap(args):
    config = HeatmapConfig(args.kernel, args.sigma, (args.cam_h, args.cam_w))
    manifest = load_manifest(args.manifest)
    written = skipped = 0
    with _locked(args.out):
        for rec in manifest:
            if not rec.annotation_path:
                skipped += 1
                continue
            with Image.open(manifest.resolve(rec.image_path)) as im:
                dims = (im.height, im.width)
            ann = load_annotation(manifest.resolve(rec.annotation_path), dims)
            write_heatmap(build_hsm(ann, config), hsm_path_for(rec.image_path, args.out))
            written += 1
    if skipped:
        log.warning("%d image(s) without annotation skipped", skipped)
    _say(args, f"wrote {written} heatmap(s) to {args.out}")
    return EXIT_OK


def _run_train(cfg):
    model_cfg = cfg.model
    input_dims = tuple(model_cfg["input_dims"])
    channels = tuple(model_cfg["channels"])
    if cfg.train.init_checkpoint:
        model = load_checkpoint(cfg.train.init_checkpoint)
        input_dims = model.input_dims
    else:
        model = None
    cam_dims = model.cam_dims if model is not None else tiny_cnn(input_dims, channels).cam_dims
    train_set, val_set, test_set = _datasets(cfg.data, cfg.train.task, input_dims, cam_dims, cfg.heatmap)
    histories = {}
    extra = {}
    if cfg.pretrain:
        pre = cfg.pretrain["train"]
        pre_tr, pre_va, _ = _datasets(cfg.pretrain["data"], pre.task, input_dims, cam_dims, cfg.heatmap)
        if model is None:
            if pre.task == "classification":
                start = tiny_cnn(input_dims, channels, "classification", len(pre_tr.classes), model_cfg["seed"],
                                 classes=pre_tr.classes)
            else:
                start = tiny_cnn(input_dims, channels, seed=model_cfg["seed"])
        else:
            start = model
        best, (pre_hist, hist), handoff = pretrain_then_finetune(pre, cfg.train, pre_tr, pre_va, train_set,
                                                                 val_set, start)
        histories["pretrain_history.csv"] = pre_hist
        extra["backbone_sha256"] = handoff
    else:
        if model is None:
            if cfg.train.task == "classification":
                model = tiny_cnn(input_dims, channels, "classification", len(train_set.classes), model_cfg["seed"],
                                 classes=train_set.classes)
            else:
                model = tiny_cnn(input_dims, channels, seed=model_cfg["seed"])
        best, hist = train(cfg.train, train_set, val_set, model)
    histories["history.csv"] = hist
    test = _test_metrics(best, test_set) if cfg.train.task != "classification" else None
    return best, histories, hist, test, extra


def cmd_train(args):
    cfg = load_experiment(args.experiment, args.seed)
    if cfg.kind != "train":
        raise InvalidConfig("this experiment is an ensemble; run it with the 'ensemble' verb")
    with _locked(cfg.output_dir):
        arts = _Artifacts(cfg.output_dir)
        try:
            best, histories, hist, test, extra = _run_train(cfg)
            for name, h in histories.items():
                arts.write_text(name, h.to_csv())
            sha = save_checkpoint(best, arts.path("model.ckpt"))
            report = {
                "schema_version": SCHEMA_VERSION,
                "name": cfg.name,
                "kind": "train",
                "method": _method_name(cfg),
                "model": "TinyCNN",
                "task": cfg.train.task,
                "checkpoint": "model.ckpt",
                "checkpoint_sha256": sha,
                "best_epoch": hist.best_epoch,
                "select_metric": hist.metric,
                "val_metric": hist.best.val_metric,
                "test": test,
                "experiment": cfg.source,
                "seed_override": args.seed,
                "created_at": _now(),
                **extra,
            }
            arts.write_text(REPORT_NAME, _dump_report(report))
        except BaseException:
            arts.rollback()
            raise
    _summary(args, cfg, hist, test)
    return EXIT_OK


def cmd_ensemble(args):
    cfg = load_experiment(args.experiment, args.seed)
    if cfg.kind != "ensemble":
        raise InvalidConfig("experiment kind must be 'ensemble'")
    ens = build_ensemble(cfg.members, seed=cfg.combiner["seed"], init=cfg.combiner["init"],
                         identity_member=cfg.combiner.get("identity_member", 0))
    input_dims = ens.input_dims
    train_set, val_set, test_set = _datasets(cfg.data, "calories", input_dims, None, cfg.heatmap)
    before = member_digests(ens)
    with _locked(cfg.output_dir):
        arts = _Artifacts(cfg.output_dir)
        try:
            best, hist = train_combiner(ens, cfg.train, train_set, val_set)
            if member_digests(best) != before:
                raise TrainingError("ensemble members changed during combiner training")
            arts.write_text("history.csv", hist.to_csv())
            for i in range(len(best.members)):
                arts.path(f"ensemble.member{i}.ckpt")
            sha = save_ensemble(best, arts.path("ensemble.ckpt"))
            test = None
            if test_set is not None:
                rep = evaluate_ensemble(best, test_set)
                test = {"mae": rep.mae, "rmse": rep.rmse, "n_samples": rep.n_samples}
            report = {
                "schema_version": SCHEMA_VERSION,
                "name": cfg.name,
                "kind": "ensemble",
                "method": f"ensemble[{cfg.combiner['init']}]",
                "model": f"{len(best.members)}x TinyCNN",
                "task": "calories",
                "checkpoint": "ensemble.ckpt",
                "checkpoint_sha256": sha,
                "member_sha256": before,
                "best_epoch": hist.best_epoch,
                "select_metric": hist.metric,
                "val_metric": hist.best.val_metric,
                "test": test,
                "experiment": cfg.source,
                "seed_override": args.seed,
                "created_at": _now(),
            }
            arts.write_text(REPORT_NAME, _dump_report(report))
        except BaseException:
            arts.rollback()
            raise
    _summary(args, cfg, hist, test)
    return EXIT_OK


def _summary(args, cfg, hist, test):
    line = f"{cfg.name}: best epoch {hist.best_epoch}, {hist.metric} {hist.best.val_metric:.4f}"
    if test:
        line += f", test MAE {test['mae']:.2f}"
    _say(args, line)


def cmd_eval(args):
    if not os.path.isfile(args.checkpoint):
        raise CliError(EXIT_IO, f"checkpoint not found: {args.checkpoint}")
    with open(args.checkpoint, "rb") as fh:
        header, _ = unpack(fh.read())
    manifest = load_manifest(args.manifest)
    if header.get("kind") == "ensemble":
        model = load_ensemble(args.checkpoint)
        data = load_dataset(manifest, "calories")
        rep = evaluate_ensemble(model, data)
        method, name = "ensemble", f"{len(model.members)}x TinyCNN"
    else:
        model = load_checkpoint(args.checkpoint)
        task = args.task or model.metadata.get("task", "calories")
        if task == "classification" or model.head.kind != "regression":
            raise SalcalError("eval reports MAE, which needs a calorie or mass regression checkpoint")
        rep = evaluate(model, load_dataset(manifest, task))
        method, name = model.metadata.get("loss", {}).get("kind", ""), "TinyCNN"
    if args.baseline_mae is not None:
        rep = rep.with_baseline(args.baseline_mae)
    table = ResultsTable([ResultRow(os.path.basename(args.checkpoint), method, name, rep.mae,
                                    rmse=rep.rmse, improvement=rep.improvement_vs_baseline)])
    print(table.markdown(), end="")
    return EXIT_OK


# -- results tables -------------------------------------------------------------

@dataclass
class ResultRow:
    run: str
    method: str
    model: str
    mae: float
    rmse: float | None = None
    improvement: float | None = None
    baseline: bool = False
    best: bool = False


@dataclass
class ResultsTable:
    rows: list

    @classmethod
    def from_runs(cls, rows, baseline=None):
        """Sort by MAE, mark the best row and fill improvements against ``baseline``."""
        rows = sorted(rows, key=lambda r: (r.mae, r.run))
        if rows:
            rows[0].best = True
        if baseline is not None:
            match = [r for r in rows if baseline in (r.run, r.method)]
            if len(match) != 1:
                raise CliError(EXIT_REPORT, f"baseline {baseline!r} matches {len(match)} runs, expected 1")
            match[0].baseline = True
            for r in rows:
                r.improvement = relative_improvement(match[0].mae, r.mae)
        return cls(rows)

    def markdown(self):
        def pct(v):
            return "" if v is None else f"{v:.2f}%"

        lines = ["| Run | Method | Model | MAE | Improvement |", "|---|---|---|---|---|"]
        for r in self.rows:
            mae_cell = f"**{r.mae:.2f}**" if r.best and len(self.rows) > 1 else f"{r.mae:.2f}"
            method = r.method + (" (baseline)" if r.baseline else "")
            lines.append(f"| {r.run} | {method} | {r.model} | {mae_cell} | {pct(r.improvement)} |")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "method", "model", "mae", "improvement", "baseline", "best"])
        for r in self.rows:
            w.writerow([r.run, r.method, r.model, repr(r.mae), "" if r.improvement is None else repr(r.improvement),
                        int(r.baseline), int(r.best)])
        return buf.getvalue()


def read_run(run_dir):
    path = os.path.join(run_dir, REPORT_NAME)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"schema_version {doc.get('schema_version')!r}")
        test = doc["test"]
        if not test or not math.isfinite(float(test["mae"])):
            raise ValueError("run has no test MAE")
        return ResultRow(doc["name"], doc["method"], doc["model"], float(test["mae"]), float(test["rmse"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_REPORT, f"malformed run directory {run_dir}: {exc}") from exc


def cmd_report(args):
    table = ResultsTable.from_runs([read_run(d) for d in args.run_dirs], args.baseline)
    print(table.markdown(), end="")
    if args.csv:
        try:
            with open(args.csv, "w", encoding="utf-8", newline="") as fh:
                fh.write(table.to_csv())
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write {args.csv}: {exc}") from exc
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def _say(args, text):
    if not args.quiet:
        print(text)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS/OpenMP thread cap")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only print errors")

    p = _Parser(prog="salcal", description="Saliency-guided calorie estimation experiments.", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic food-scene corpus")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--dims", type=_dims, default=(64, 64), help="HxW, default 64x64")
    g.add_argument("--out", required=True)
    g.add_argument("--background", choices=BACKGROUND_MODES, default="plain")
    g.add_argument("--shapes", type=_range, default=(1, 3), help="foods per scene, N or MIN-MAX")
    g.set_defaults(func=cmd_generate, code=EXIT_IO)

    h = sub.add_parser("heatmap", help="human saliency maps")
    hs = h.add_subparsers(dest="action", required=True, parser_class=_Parser)
    hb = hs.add_parser("build", parents=[common], help="compile one .hsm.png per annotated image")
    hb.add_argument("--manifest", required=True)
    hb.add_argument("--out", required=True)
    hb.add_argument("--kernel", type=int, default=None, help="odd Gaussian kernel size")
    hb.add_argument("--sigma", type=float, default=None)
    hb.add_argument("--cam-h", type=int, default=7)
    hb.add_argument("--cam-w", type=int, default=7)
    hb.set_defaults(func=cmd_heatmap, code=EXIT_HEATMAP)

    t = sub.add_parser("train", parents=[common], help="run a training experiment file")
    t.add_argument("experiment")
    t.set_defaults(func=cmd_train, code=EXIT_TRAIN)

    e = sub.add_parser("eval", parents=[common], help="MAE/RMSE of a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--baseline-mae", type=float, default=None)
    e.add_argument("--task", choices=("calories", "mass"), default=None)
    e.set_defaults(func=cmd_eval, code=EXIT_EVAL)

    en = sub.add_parser("ensemble", parents=[common], help="train an ensemble combiner from an experiment file")
    en.add_argument("experiment")
    en.set_defaults(func=cmd_ensemble, code=EXIT_TRAIN)

    r = sub.add_parser("report", parents=[common], help="aggregate run directories into a results table")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--baseline", default=None, help="run name (or method) used as the improvement baseline")
    r.add_argument("--csv", default=None, help="also write the table as CSV")
    r.set_defaults(func=cmd_report, code=EXIT_REPORT)
    return p


def _exit_code(exc, verb_code):
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, HeatmapError):
        return EXIT_HEATMAP
    if isinstance(exc, (DataError, OSError)):
        return EXIT_IO
    if isinstance(exc, (TrainingError, ModelError, LossError)) and verb_code == EXIT_IO:
        return EXIT_TRAIN
    return verb_code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code
    for name, default in (("seed", None), ("threads", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    if args.verb == "generate" and args.seed is None:
        args.seed = 0
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (SalcalError, CliError, OSError, ValueError) as exc:
        print(f"salcal {args.verb}: error: {exc}", file=sys.stderr)
        return _exit_code(exc, args.code)


if __name__ == "__main__":
    sys.exit(main())
