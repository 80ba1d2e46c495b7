"""Command-line entry point: ``multigrain <command> [options]``.

Every command writes its outputs into the output directory together with a
``<command>.manifest.json`` recording the config hash, seed and versions.
JSON is written with sorted keys and no timestamps, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, mgt
from .config import ConfigError, ExperimentConfig, dump_config, load_config

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_PRECONDITION = 5
EXIT_NUMERIC = 6
EXIT_FORMAT = 7


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class Outputs:
    def __init__(self, out: Path, command: str, cfg: ExperimentConfig):
        self.dir = out
        self.command = command
        self.cfg = cfg
        self.files: list[str] = []
        self.inputs: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, name: str, content: str) -> None:
        self.path(name).write_text(content)

    def report(self, name: str, payload: dict) -> None:
        self.text(name, _json({**payload, "command": self.command, "config": self.cfg.to_dict()}))

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "inputs": self.inputs,
            "outputs": sorted(set(self.files)),
            "versions": {"multigrain": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
        }
        (self.dir / f"{self.command}.manifest.json").write_text(_json(manifest))


def _require(path, what: str) -> Path:
    if path is None:
        raise CommandError(f"{what} is required", EXIT_USAGE)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _dataset(args, cfg: ExperimentConfig):
    from .data import load_dataset, synth_dataset

    if getattr(args, "data", None):
        return load_dataset(_require(args.data, "dataset directory"))
    d = cfg.data
    return synth_dataset(d.n_classes, d.per_class, d.size, cfg.seed, d.val_per_class, d.n_distractors)


def _model(args):
    from .model import MultiGrainNet

    return MultiGrainNet.load(_require(args.checkpoint, "checkpoint"))


def _whitening(args):
    from .whitening import WhiteningTransform

    if not getattr(args, "whitening", None):
        return None
    return WhiteningTransform.load(_require(args.whitening, "whitening directory"))


def _embedder(model, cfg: ExperimentConfig, whitening=None, p_star=None):
    e = cfg.eval
    p = p_star if p_star is not None else e.p_star

    def embed(images):
        return model.embed_images(images, e.resolution, e.base_resolution, p, whitening)

    return embed


# ----------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .benchmarks import dataset_fingerprint
    from .data import save_dataset

    ds = _dataset(args, cfg)
    save_dataset(ds, out.dir / "data")
    out.files += ["data/images.mgt", "data/manifest.csv"]
    counts = {p: int(np.sum(ds.partitions == p)) for p in ("train", "val", "distractor")}
    out.report("gen-data.json", {"fingerprint": dataset_fingerprint(ds), "n_classes": ds.n_classes,
                                 "counts": counts, "image_size": int(ds.images.shape[1])})


def cmd_train(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .benchmarks import dataset_fingerprint
    from .train import train

    ds = _dataset(args, cfg)
    tcfg = cfg.train_config()
    result = train(ds, cfg.trunk, tcfg, cfg.gem, cfg.margin)
    result.model.save(out.dir / "checkpoint", extra={"dataset_fingerprint": dataset_fingerprint(ds),
                                                     "train": _train_dict(tcfg)})
    out.files.append("checkpoint")
    out.text("train_log.csv", result.log_csv())
    final = result.log[-1] if result.log else {}
    out.report("train.json", {"iterations_per_epoch": result.iterations, "final": final,
                              "dataset_fingerprint": dataset_fingerprint(ds)})


def _train_dict(tcfg) -> dict:
    from dataclasses import asdict

    d = asdict(tcfg)
    d["decay_epochs"] = list(d["decay_epochs"])
    return d


def cmd_eval_classify(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .benchmarks import dataset_fingerprint
    from .retrieval import EvalReport

    ds = _dataset(args, cfg)
    model = _model(args)
    part = ds.subset(cfg.eval.partition)
    if len(part) == 0:
        raise CommandError(f"partition {cfg.eval.partition!r} is empty", EXIT_PRECONDITION)
    whitening = _whitening(args)
    if whitening is not None:
        from .whitening import fold_classifier

        raw = model.embed_images(part.images, cfg.eval.resolution, cfg.eval.base_resolution, cfg.eval.p_star)
        pred = np.argmax(fold_classifier(model.head, whitening).scores_from_embeddings(raw, whitening), axis=1)
    else:
        pred = model.classify(_embedder(model, cfg)(part.images))
    acc = float(np.mean(pred == part.labels))
    rep = EvalReport("accuracy", acc, dataset_fingerprint(ds), _eval_snapshot(model, cfg, whitening))
    out.report("eval-classify.json", {**rep.to_dict(), "n_images": len(part)})


def _eval_snapshot(model, cfg: ExperimentConfig, whitening) -> dict:
    return {
        "resolution": cfg.eval.resolution,
        "p_star": cfg.eval.p_star if cfg.eval.p_star is not None else float(model.pool.p.data),
        "lambda": cfg.train.lam,
        "whitening": whitening is not None,
    }


def _read_embeddings(path, manifest) -> tuple[np.ndarray, dict]:
    emb = mgt.load(_require(path, "embeddings file"))
    cols: dict[str, list] = {}
    if manifest:
        with open(_require(manifest, "embedding manifest"), newline="") as f:
            rows = list(csv.DictReader(f))
        if len(rows) != len(emb):
            raise CommandError("embedding manifest and tensor differ in length", EXIT_FORMAT)
        for k in rows[0] if rows else []:
            cols[k] = [r[k] for r in rows]
    return np.asarray(emb, dtype=np.float64), cols


def cmd_eval_retrieval(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .benchmarks import dataset_fingerprint, run_metric
    from .retrieval import EvalReport, RetrievalIndex, mean_average_precision, ukb_score
    from .whitening import fingerprint

    metric = args.metric
    if args.embeddings:
        emb, cols = _read_embeddings(args.embeddings, args.manifest)
        n = len(emb)
        ids = np.asarray(cols.get("image_id", range(n)), dtype=np.int64)
        inst = np.asarray(cols.get("instance_id", ids), dtype=np.int64)
        dis = np.asarray([str(v).lower() in ("1", "true") for v in cols.get("distractor", [0] * n)])
        index = RetrievalIndex(emb, ids, inst, dis)
        if metric == "ukb":
            value = ukb_score(index)
        elif metric == "map":
            q = ~dis
            relevant = [ids[(inst == inst[i]) & (ids != ids[i]) & ~dis] for i in np.flatnonzero(q)]
            value = mean_average_precision(index, emb[q], relevant, query_ids=ids[q])
        else:
            raise CommandError(f"metric {metric} needs a checkpoint and dataset, not raw embeddings",
                               EXIT_USAGE)
        rep = EvalReport(metric, value, fingerprint(emb), {"source": "embeddings"})
    else:
        ds = _dataset(args, cfg)
        model = _model(args)
        whitening = _whitening(args)
        run = run_metric(metric, ds, _embedder(model, cfg, whitening), cfg.seed, cfg.eval.inaug_per_class,
                         cfg.eval.partition)
        value = run.value
        rep = EvalReport(metric, value, dataset_fingerprint(ds), _eval_snapshot(model, cfg, whitening))
        if args.save_embeddings:
            part = ds.subset(cfg.eval.partition)
            mgt.save(out.path(f"embeddings-{cfg.eval.partition}.mgt"), _embedder(model, cfg, whitening)(part.images))
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["image_id", "instance_id", "distractor"])
            for i, c in zip(part.image_ids, part.labels):
                w.writerow([int(i), int(c), 0])
            out.text(f"embeddings-{cfg.eval.partition}.csv", buf.getvalue())
    out.report(f"eval-retrieval-{metric}.json", rep.to_dict())


def cmd_fit_whitening(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .whitening import fit_whitening

    if args.embeddings:
        emb, _ = _read_embeddings(args.embeddings, None)
        source = "embeddings"
    else:
        ds = _dataset(args, cfg)
        model = _model(args)
        unlabelled = ds.subset("distractor")
        if len(unlabelled) == 0:
            raise CommandError("dataset has no unlabelled partition to fit on", EXIT_PRECONDITION)
        emb = _embedder(model, cfg)(unlabelled.images)
        source = "distractor partition"
    t = fit_whitening(emb, cfg.whitening.floor, cfg.whitening.shrinkage)
    t.meta["source"] = source
    t.save(out.dir / "whitening")
    out.files += ["whitening/S.mgt", "whitening/mu.mgt", "whitening/whitening.json"]
    out.report("fit-whitening.json", t.metadata())


def cmd_fold_head(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .whitening import WhiteningTransform, fold_classifier

    model = _model(args)
    t = WhiteningTransform.load(_require(args.whitening, "whitening directory"))
    folded = fold_classifier(model.head, t)
    folded.save(out.dir / "folded")
    out.files += ["folded/weight.mgt", "folded/offset.mgt", "folded/bias.mgt"]
    payload = {"n_classes": int(folded.weight.shape[0]), "dim": int(folded.weight.shape[1])}
    if args.data or args.check:
        ds = _dataset(args, cfg)
        part = ds.subset(cfg.eval.partition)
        raw = model.embed_images(part.images, cfg.eval.resolution, cfg.eval.base_resolution, cfg.eval.p_star)
        original = model.head.scores_numpy(raw)
        refolded = folded.scores_from_embeddings(raw, t)
        payload["decision_agreement"] = float(np.mean(original.argmax(1) == refolded.argmax(1)))
        payload["max_relative_score_gap"] = float(np.max(np.abs(original - refolded) / np.maximum(np.abs(original), 1e-12)))
    out.report("fold-head.json", payload)


def cmd_adapt(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .adapt import AdaptConfig, config_dict, finetune_sample, pstar_finetune, pstar_sweep
    from .benchmarks import inaug_task

    ds = _dataset(args, cfg)
    model = _model(args)
    acfg = cfg.adapt_config()
    overrides = {"mode": args.mode, "resolution": args.resolution}
    acfg = AdaptConfig(**{**config_dict(acfg), **{k: v for k, v in overrides.items() if v is not None}})
    if acfg.mode == "sweep":
        task = inaug_task(ds, cfg.eval.inaug_per_class, cfg.seed)
        res = pstar_sweep(model, task, acfg)
        out.text("adapt-sweep.csv", res.to_csv())
        out.report("adapt-sweep.json", {"p_star": res.p_star, "score": res.score, "adapt": config_dict(acfg)})
    else:
        train_set = ds.subset("train")
        idx = finetune_sample(train_set.labels, acfg.per_class, acfg.seed)
        res = pstar_finetune(model, train_set.images[idx], train_set.labels[idx], acfg)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "p_star", "loss"])
        for i, (p, loss) in enumerate(zip(res.history, res.losses)):
            w.writerow([i + 1, repr(p), repr(loss)])
        out.text("adapt-finetune.csv", buf.getvalue())
        out.report("adapt-finetune.json", {"p_star": res.p_star, "steps": len(res.history), "adapt": config_dict(acfg)})


def cmd_toy_ra(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from dataclasses import asdict

    from .toy import ToyConfig, toy_compare

    tcfg = cfg.toy_config()
    if args.runs is not None:
        tcfg = ToyConfig(**{**asdict(tcfg), "runs": args.runs})
    comp = toy_compare(tcfg)
    out.text(args.curves, comp.to_csv())
    out.report("toy-ra.json", comp.summary())


def cmd_grad_check(args, cfg: ExperimentConfig, out: Outputs) -> None:
    from .gradcheck import standard_suite

    errors = standard_suite(cfg.seed, args.points)
    out.report("grad-check.json", {"max_relative_error": errors, "tolerance": 1e-4,
                                   "passed": bool(max(errors.values()) < 1e-4), "points": args.points})


def cmd_report(args, cfg: ExperimentConfig, out: Outputs) -> None:
    src = _require(args.dir, "report directory")
    rows = []
    for path in sorted(src.rglob("*.json")):
        if path.name.endswith(".manifest.json") or path.parent.name in ("checkpoint", "whitening"):
            continue
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        if not isinstance(data, dict):
            continue
        for key, value in sorted(_flatten(data).items()):
            if key.startswith("config."):
                continue
            rows.append((str(path.relative_to(src)), data.get("command", ""), key, value))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file", "command", "key", "value"])
    for r in rows:
        w.writerow([r[0], r[1], r[2], repr(r[3]) if isinstance(r[3], float) else r[3]])
    out.text("summary.csv", buf.getvalue())


def _flatten(d: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        elif isinstance(v, (int, float, str, bool)) and not isinstance(v, list):
            flat[key] = v
    return flat


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-classify": cmd_eval_classify,
    "eval-retrieval": cmd_eval_retrieval,
    "fit-whitening": cmd_fit_whitening,
    "fold-head": cmd_fold_head,
    "adapt": cmd_adapt,
    "toy-ra": cmd_toy_ra,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multigrain", description="Joint classification and retrieval embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory (default: config 'out')")
        return p

    add("gen-data", "render the synthetic dataset")
    p = add("train", "train a network")
    p.add_argument("--data")
    for name, text in (("eval-classify", "top-1 accuracy"), ("eval-retrieval", "retrieval metric")):
        p = add(name, text)
        p.add_argument("--data")
        p.add_argument("--checkpoint")
        p.add_argument("--whitening")
        if name == "eval-retrieval":
            p.add_argument("--metric", required=True, choices=["map", "ukb", "inaug", "copydetect"])
            p.add_argument("--embeddings", help="MGT1 embedding matrix instead of a checkpoint")
            p.add_argument("--manifest", help="CSV with image_id, instance_id, distractor columns")
            p.add_argument("--save-embeddings", action="store_true")
    p = add("fit-whitening", "fit PCA whitening")
    p.add_argument("--embeddings")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p = add("fold-head", "fold a whitening into the classifier")
    p.add_argument("--checkpoint")
    p.add_argument("--whitening")
    p.add_argument("--data")
    p.add_argument("--check", action="store_true", help="verify decisions on the eval partition")
    p = add("adapt", "choose p* for a test resolution")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["sweep", "finetune"])
    p.add_argument("--resolution", type=int)
    p = add("toy-ra", "2-D SVM sampling experiment")
    p.add_argument("--runs", type=int)
    p.add_argument("--curves", default="curves.csv")
    p = add("grad-check", "finite-difference gradient checks")
    p.add_argument("--points", type=int, default=10)
    p = add("report", "aggregate JSON reports into one CSV")
    p.add_argument("--dir")
    return parser


def _exit_code(exc: BaseException) -> int:
    from .adapt import AdaptError
    from .gradcheck import GradCheckError
    from .mgt import FormatError
    from .retrieval import MetricError
    from .tensor import DomainError
    from .train import DivergenceError
    from .whitening import WhiteningError

    if isinstance(exc, CommandError):
        return exc.code
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, FormatError):
        return EXIT_FORMAT
    if isinstance(exc, (MetricError, AdaptError, WhiteningError)):
        return EXIT_PRECONDITION
    if isinstance(exc, (DivergenceError, DomainError, GradCheckError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_INTERNAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        out = Outputs(Path(args.out or cfg.out), args.command, cfg)
        for name in ("data", "checkpoint", "whitening", "embeddings", "manifest"):
            if getattr(args, name, None):
                out.inputs[name] = str(getattr(args, name))
        COMMANDS[args.command](args, cfg, out)
        out.text(f"{args.command}.config", dump_config(cfg))
        out.finish()
    except Exception as exc:  # categorized below; unexpected errors keep EXIT_INTERNAL
        code = _exit_code(exc)
        print(f"multigrain {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
