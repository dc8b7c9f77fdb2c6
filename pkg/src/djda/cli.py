"""Command-line front end: ``djda synth|train|loso|eval``.

A run is described by one JSON document::

    {
      "data": {"synthetic": {...SynthSpec fields...}}   or   {"path": "data.csv"},
      "model": {...ModelConfig fields except input_dim/c/k/seed...},
      "train": {...TrainConfig fields...},
      "held_out_speaker": 0,
      "out": "runs/demo"
    }

Relative data paths resolve against the config file's directory. ``--seed``
and ``--out`` override the document, as does ``--set train.epochs=30`` for
any other key (the value is parsed as JSON when possible).

Exit codes: 0 success, 2 validation, 3 divergence, 4 I/O.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import SynthSpec, generate_synthetic, load_dataset, make_fold, save_dataset, write_sidecar
from .errors import DivergenceError, UndefinedMetricError, ValidationError
from .metrics import confusion, summarize
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, model_config_for, predict, train

log = logging.getLogger("djda")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
MODEL_KEYS = ("feature_dims", "classifier_dims", "discriminator_dims", "activation")
TOP_KEYS = ("data", "model", "train", "held_out_speaker", "out")


def exit_code_for(exc):
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, (ValidationError, UndefinedMetricError, json.JSONDecodeError)):
        return EXIT_VALIDATION
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1


def _from_dict(cls, doc, where, allowed=None):
    if not isinstance(doc, dict):
        raise ValidationError(f"{where} must be a JSON object")
    names = allowed or [f.name for f in fields(cls)]
    unknown = sorted(set(doc) - set(names))
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


@dataclass
class RunConfig:
    synth: SynthSpec = None
    data_path: str = None
    model: dict = None
    train: TrainConfig = None
    held_out_speaker: int = 0
    out: str = None

    def echo(self):
        """Resolved configuration without the output directory."""
        data = {"synthetic": asdict(self.synth)} if self.synth else {"path": self.data_path}
        return {"data": data, "model": dict(self.model), "train": asdict(self.train),
                "held_out_speaker": self.held_out_speaker}

    def dataset(self):
        if self.synth is not None:
            return generate_synthetic(self.synth)
        return load_dataset(self.data_path)


def apply_override(doc, assignment):
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ValidationError(f"--set expects key.path=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = key.split(".")
    node = doc
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"--set {key}: {p} is not an object")
    node[leaf] = value


def parse_run_config(doc, base_dir=".", seed=None, out=None):
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(doc) - set(TOP_KEYS))
    if unknown:
        raise ValidationError(f"config: unknown keys {unknown}")
    data = doc.get("data")
    if not isinstance(data, dict) or len(data) != 1 or next(iter(data)) not in ("synthetic", "path"):
        raise ValidationError('config.data must hold exactly one of "synthetic" or "path"')
    cfg = RunConfig()
    if "synthetic" in data:
        cfg.synth = _from_dict(SynthSpec, data["synthetic"], "data.synthetic").validate()
    else:
        path = Path(data["path"])
        cfg.data_path = str(path if path.is_absolute() else Path(base_dir) / path)
    model = doc.get("model", {})
    _from_dict(dict, model, "model", allowed=MODEL_KEYS)
    cfg.model = model
    train_doc = dict(doc.get("train", {}))
    if seed is not None:
        train_doc["seed"] = seed
    cfg.train = _from_dict(TrainConfig, train_doc, "train").validate()
    cfg.held_out_speaker = doc.get("held_out_speaker", 0)
    if not isinstance(cfg.held_out_speaker, int):
        raise ValidationError("held_out_speaker must be an integer")
    cfg.out = out if out is not None else doc.get("out")
    return cfg


def load_run_config(path, seed=None, out=None, overrides=()):
    with open(path) as fh:
        doc = json.load(fh)
    for a in overrides:
        apply_override(doc, a)
    return parse_run_config(doc, Path(path).parent, seed, out)


def _need_out(cfg):
    if not cfg.out:
        raise ValidationError("no output directory: set \"out\" in the config or pass --out")
    os.makedirs(cfg.out, exist_ok=True)
    return Path(cfg.out)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metrics_block(record):
    if record is None or record.confusion is None:
        return None
    return {"war": record.war, "uar": record.uar, "confusion": record.confusion}


def run_fold(dataset, held_out, train_cfg: TrainConfig, model_keys, out_dir, echo):
    """Train one fold and write report.json, trajectory.csv and checkpoint.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fold = make_fold(dataset, held_out)
    mc = model_config_for(fold, train_cfg.seed, **model_keys)
    report = {"variant": train_cfg.variant,
              "adaptation": "enabled" if train_cfg.adaptation_enabled else "disabled",
              "held_out_speaker": held_out, "n_target": len(fold.target),
              "config": echo}
    try:
        model, traj = train(train_cfg, fold, mc)
    except DivergenceError as exc:
        traj = exc.trajectory
        if traj is not None:
            traj.write_csv(out_dir / "trajectory.csv")
        evaluated = [r for r in (traj.records if traj else []) if r.confusion is not None]
        report.update(status="diverged", error=str(exc),
                      epochs_completed=len(traj) if traj else 0,
                      metrics=_metrics_block(evaluated[-1] if evaluated else None))
        _write_json(out_dir / "report.json", report)
        raise
    traj.write_csv(out_dir / "trajectory.csv")
    save_checkpoint(model, out_dir / "checkpoint.json")
    last = traj.records[-1]
    report.update(status="completed", epochs_completed=len(traj), final_w=last.w,
                  num_parameters=model.num_parameters(), metrics=_metrics_block(last))
    _write_json(out_dir / "report.json", report)
    return report


# -- commands ------------------------------------------------------------------


def cmd_synth(args):
    with open(args.config) as fh:
        doc = json.load(fh)
    for a in args.set or ():
        apply_override(doc, a)
    if isinstance(doc, dict) and "data" in doc:
        doc = doc["data"].get("synthetic", {})
    spec = _from_dict(SynthSpec, doc, "synth spec").validate()
    if not args.out:
        raise ValidationError("synth needs --out <dataset.csv>")
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(generate_synthetic(spec), out)
    write_sidecar(spec, out.with_name(out.name + ".json"))
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_train(args):
    cfg = load_run_config(args.config, args.seed, args.out, args.set or ())
    out = _need_out(cfg)
    dataset = cfg.dataset()
    report = run_fold(dataset, cfg.held_out_speaker, cfg.train, cfg.model, out, cfg.echo())
    m = report["metrics"]
    print(f"{report['variant']}: WAR {m['war']:.4f} UAR {m['uar']:.4f} -> {out}")
    return EXIT_OK


def _fold_job(job):
    dataset, speaker, train_cfg, model_keys, out_dir, echo = job
    try:
        return run_fold(dataset, speaker, train_cfg, model_keys, out_dir, echo), None
    except Exception as exc:  # reported in the summary, never fatal for the sweep
        return None, (exit_code_for(exc), f"{type(exc).__name__}: {exc}")


def cmd_loso(args):
    cfg = load_run_config(args.config, args.seed, args.out, args.set or ())
    out = _need_out(cfg)
    dataset = cfg.dataset()
    speakers = dataset.speaker_ids
    if len(speakers) < 3:
        raise ValidationError(f"LOSO needs at least 3 speakers, got {len(speakers)}")
    if not dataset.labeled:
        raise ValidationError("labels required for evaluation")
    jobs = []
    for i, spk in enumerate(speakers):
        tc = TrainConfig(**{**asdict(cfg.train), "seed": cfg.train.seed + i})
        echo = cfg.echo()
        echo["train"]["seed"] = tc.seed
        echo["held_out_speaker"] = spk
        jobs.append((dataset, spk, tc, cfg.model, out / f"fold_{i:02d}", echo))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]

    pooled = np.zeros((dataset.c, dataset.c), dtype=np.int64)
    folds, codes = [], []
    for i, (spk, (report, failure)) in enumerate(zip(speakers, results)):
        entry = {"fold": i, "held_out_speaker": spk, "seed": cfg.train.seed + i}
        if failure:
            codes.append(failure[0])
            entry.update(status="failed", error=failure[1])
        else:
            cm = np.asarray(report["metrics"]["confusion"], dtype=np.int64)
            pooled += cm
            entry.update(status="completed", war=report["metrics"]["war"], uar=report["metrics"]["uar"])
        folds.append(entry)

    summary = {"variant": cfg.train.variant, "n_folds": len(speakers), "folds": folds,
               "failed_folds": [f["fold"] for f in folds if f["status"] == "failed"],
               "pooled": summarize(pooled) if pooled.sum() else None,
               "config": cfg.echo()}
    done = [f for f in folds if f["status"] == "completed"]
    if done:
        summary["mean_fold_war"] = float(np.mean([f["war"] for f in done]))
        summary["mean_fold_uar"] = float(np.mean([f["uar"] for f in done]))
    _write_json(out / "loso_summary.json", summary)
    if summary["pooled"]:
        print(f"LOSO {len(done)}/{len(speakers)} folds: pooled WAR {summary['pooled']['war']:.4f} "
              f"UAR {summary['pooled']['uar']:.4f} -> {out}")
    return max(codes) if codes else EXIT_OK


def evaluate_checkpoint(model, dataset):
    if dataset.feature_dim != model.config.input_dim:
        raise ValidationError(f"dataset has {dataset.feature_dim} features, checkpoint expects "
                              f"{model.config.input_dim}")
    if dataset.c > model.config.c:
        raise ValidationError(f"dataset declares {dataset.c} classes, checkpoint has {model.config.c}")
    if len(dataset) == 0 or not dataset.labeled:
        raise ValidationError("labels required for evaluation")
    cm = confusion(predict(model, dataset.x), dataset.emotion, model.config.c)
    return summarize(cm)


def cmd_eval(args):
    if not args.checkpoint or not args.data:
        raise ValidationError("eval needs --checkpoint and --data")
    metrics = evaluate_checkpoint(load_checkpoint(args.checkpoint), load_dataset(args.data))
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "loso": cmd_loso, "eval": cmd_eval}


def build_parser():
    p = argparse.ArgumentParser(prog="djda", description="Dynamic joint domain adaptation runs.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--out", help="output path (overrides config)")
        sp.add_argument("--seed", type=int, help="seed override")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=30")
        return sp

    common(sub.add_parser("synth", help="generate a synthetic dataset CSV + sidecar"))
    common(sub.add_parser("train", help="train on one held-out speaker"))
    loso = common(sub.add_parser("loso", help="leave-one-speaker-out sweep"))
    loso.add_argument("--jobs", type=int, default=1, help="concurrent folds")
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on a labeled CSV"),
                config_required=False)
    ev.add_argument("--checkpoint", help="checkpoint.json from train")
    ev.add_argument("--data", help="labeled dataset CSV")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
