"""Command line front end.

Verbs cover the whole workflow: ``synth`` exports a synthetic dataset
to disk, ``mine`` picks ambiguous samples for annotation, ``prompts``
renders a chain-of-thought prompt bundle, ``train`` fits one model,
``cv`` cross-validates, ``ablate`` compares fusion variants, ``sweep``
grids over width and batch size, ``eval`` scores a checkpoint, and
``report`` turns saved probabilities into metric CSVs.

Exit codes: 0 success, 2 usage or configuration problems, 3 bad input
data or I/O, 4 numerical failures, 5 missing offline responses or
transport errors. Run configuration is resolved as CLI flags over an
INI file over built-in defaults; every field that did not come from a
default is echoed to stderr with its source.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import data
from . import llm
from . import metrics
from . import model
from . import prompts
from . import train
from .errors import (ConfigError, DegenerateSimilarityError,
                     InvalidInputError, NumericalError, OfflineMissError,
                     ParseError, TransportError)


# ---------------------------------------------------------------------------
# argument plumbing

class _Once(argparse.Action):
    """Store a value but reject the flag appearing twice.

    Silent last-one-wins has burned enough shell scripts that repeated
    flags are treated as a usage error instead.
    """

    def __call__(self, parser, namespace, values, option_string=None):
        seen = getattr(namespace, "_seen", None)
        if seen is None:
            seen = set()
            setattr(namespace, "_seen", seen)
        if self.dest in seen:
            parser.error(f"{option_string} given more than once")
        seen.add(self.dest)
        if self.nargs == 0:
            values = True
        setattr(namespace, self.dest, values)


def _parse_bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def _int_list(raw):
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {raw!r}") from None


_SYNTH_KEYS = {"c": int, "per_class": int, "size": int, "channels": int,
               "noise": float, "seed": int}


def _parse_synth_spec(spec):
    """Parse "c=10,per_class=20,noise=0.05" into synth_dataset kwargs."""
    kwargs = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, raw = part.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"synth spec entry {part!r} is not key=value")
        if key not in _SYNTH_KEYS:
            raise ConfigError(f"unknown synth key {key!r}; "
                              f"choose from {sorted(_SYNTH_KEYS)}")
        try:
            kwargs[key] = _SYNTH_KEYS[key](raw.strip())
        except ValueError:
            raise ConfigError(
                f"synth key {key!r} needs a number, got {raw.strip()!r}"
            ) from None
    return kwargs


# ---------------------------------------------------------------------------
# shared inputs

def _load_transcripts(directory, categories):
    """Read one prompt-response bundle per category from a directory."""
    missing = [name for name in categories
               if not os.path.exists(os.path.join(directory, f"{name}.json"))]
    if missing:
        raise InvalidInputError(
            f"{len(missing)} transcript bundles missing from "
            f"{directory!r}: {missing}")
    out = {}
    for name in categories:
        bundle = llm.load_bundle(os.path.join(directory, f"{name}.json"))
        out[name] = llm.Transcript(
            category=bundle["subject"], family=bundle["family"],
            responses=list(bundle["responses"]),
            provider=bundle.get("provider", "file"),
            retrieved_at=bundle.get("retrieved_at", llm.FIXED_TIMESTAMP),
        ).validate()
    return out


def _load_dataset(parser, args):
    """Build a Dataset from --synth or --manifest flags."""
    if args.synth and args.manifest:
        parser.error("--synth and --manifest are mutually exclusive")
    if args.synth:
        return data.synth_dataset(**_parse_synth_spec(args.synth))
    if args.manifest:
        manifest = data.load_manifest(args.manifest)
        base = os.path.dirname(os.path.abspath(args.manifest))
        images = data.materialize_images(manifest, base)
        transcripts = {}
        if args.transcripts:
            transcripts = _load_transcripts(args.transcripts,
                                            manifest.categories)
        return data.Dataset(manifest=manifest, images=images,
                            transcripts=transcripts)
    parser.error("a dataset source is required: --synth SPEC or "
                 "--manifest PATH")
    return None


def _build_run_config(args):
    """Resolve the run configuration and echo non-default fields."""
    overrides = {field.name: getattr(args, field.name, None)
                 for field in dataclasses.fields(train.TrainConfig)}
    config_path = getattr(args, "config", None)
    file_values = train.load_config_file(config_path) if config_path else {}
    config = train.build_config(config_path, overrides)
    for field in dataclasses.fields(config):
        if overrides.get(field.name) is not None:
            source = "cli"
        elif field.name in file_values:
            source = "file"
        else:
            continue
        print(f"config: {field.name} = {getattr(config, field.name)} "
              f"({source})", file=sys.stderr)
    return config


def _require_transcripts(dataset, config):
    if config.ablation != "no-llm" and not dataset.transcripts:
        raise ConfigError(
            "this run needs per-category transcripts; pass --transcripts "
            "DIR alongside --manifest, or use --ablation no-llm")


def _write_text(path, content):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(content)


# ---------------------------------------------------------------------------
# verbs

def _cmd_synth(parser, args):
    os.makedirs(args.out, exist_ok=True)
    dataset = data.synth_dataset(
        c=args.c, per_class=args.per_class, size=args.size,
        channels=args.channels, noise=args.noise, seed=args.seed,
        image_dir=os.path.join(args.out, "images"))
    manifest = dataset.manifest
    relocated = dataclasses.replace(
        manifest,
        samples=[dataclasses.replace(s, ref=os.path.relpath(s.ref, args.out))
                 for s in manifest.samples])
    data.save_manifest(os.path.join(args.out, "manifest.csv"), relocated)
    written = len(manifest.samples)
    if args.transcripts:
        tdir = os.path.join(args.out, "transcripts")
        os.makedirs(tdir, exist_ok=True)
        for name in manifest.categories:
            transcript = dataset.transcripts[name]
            rendered = prompts.build_cot_prompts(transcript.family, name)
            llm.save_bundle(os.path.join(tdir, f"{name}.json"),
                            llm.transcript_to_bundle(transcript, rendered))
        print(f"wrote {len(manifest.categories)} transcript bundles "
              f"to {tdir}")
    print(f"wrote {written} images and manifest.csv to {args.out}")
    return 0


def _cmd_mine(parser, args):
    dataset = _load_dataset(parser, args)
    config = _build_run_config(args)
    ids = sorted(dataset.images)
    selected = train.select_prediction_ids(dataset, ids, args.fraction,
                                           config)
    _write_text(args.out, "".join(f"{i}\n" for i in sorted(selected)))
    print(f"selected {len(selected)} of {len(ids)} samples -> {args.out}")
    return 0


def _cmd_prompts(parser, args):
    rendered = prompts.build_cot_prompts(args.family, args.subject)
    bundle = {"family": args.family, "subject": args.subject,
              "prompts": [p.text for p in rendered]}
    llm.save_bundle(args.out, bundle)
    print(f"wrote {len(rendered)} prompts to {args.out}")
    return 0


def _dump_predictions(path, predictions):
    payload = {"predictions": {str(k): predictions[k]
                               for k in sorted(predictions)}}
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cmd_train(parser, args):
    dataset = _load_dataset(parser, args)
    config = _build_run_config(args)
    _require_transcripts(dataset, config)
    os.makedirs(args.out, exist_ok=True)
    result = train.train(dataset, config)
    train.save_model(os.path.join(args.out, "model.ckpt"), result,
                     dataset.manifest.c)
    train.write_history(os.path.join(args.out, "history.csv"),
                        result.history)
    _dump_predictions(os.path.join(args.out, "predictions.json"),
                      result.predictions)
    report = train.evaluate(result, dataset)
    tag = " (stopped early)" if result.stopped_early else ""
    print(f"trained {len(result.history)} epochs{tag}; "
          f"val top1 {report.topn[1]:.4f}")
    print(f"artifacts in {args.out}: model.ckpt history.csv "
          f"predictions.json")
    return 0


def _cmd_cv(parser, args):
    dataset = _load_dataset(parser, args)
    config = _build_run_config(args)
    _require_transcripts(dataset, config)
    os.makedirs(args.out, exist_ok=True)
    outcome = train.run_cv(dataset, config)
    paths = metrics.emit_report(outcome.fold_reports,
                                dataset.manifest.categories, args.out)
    for fold, report in enumerate(outcome.fold_reports):
        print(f"fold {fold}: top1 {report.topn[1]:.4f}")
    print(f"cv mean top1 {outcome.mean['top1']:.4f} "
          f"(std {outcome.std['top1']:.4f})")
    print("reports: " + " ".join(sorted(paths)))
    return 0


def _cmd_ablate(parser, args):
    dataset = _load_dataset(parser, args)
    config = _build_run_config(args)
    _require_transcripts(dataset, config)
    os.makedirs(args.out, exist_ok=True)
    reports = train.run_ablations(dataset, config)
    lines = ["ablation,top1,macro_f1"]
    for mode, report in reports.items():
        lines.append(f"{mode},{report.topn[1]:.6f},"
                     f"{report.prf.macro_f1:.6f}")
        print(f"{mode}: top1 {report.topn[1]:.4f} "
              f"macro_f1 {report.prf.macro_f1:.4f}")
    _write_text(os.path.join(args.out, "ablation.csv"),
                "\n".join(lines) + "\n")
    return 0


def _cmd_sweep(parser, args):
    dataset = _load_dataset(parser, args)
    config = _build_run_config(args)
    _require_transcripts(dataset, config)
    os.makedirs(args.out, exist_ok=True)
    cells = [(d, b) for d in args.d_grid for b in args.batch_grid]
    rows = train.hyperparameter_sweep(dataset, config, cells)
    lines = ["d,batch,top1"]
    lines += [f"{row['d']},{row['batch']},{row['top1']:.6f}"
              for row in rows]
    _write_text(os.path.join(args.out, "sweep.csv"),
                "\n".join(lines) + "\n")
    sys.stdout.write(train.sweep_table(rows))
    return 0


def _eval_predictions(dataset, train_config, args):
    """Prediction labels for evaluation-time fusion input.

    Prefers a predictions.json saved by train; otherwise recomputes
    with each query's demonstrations drawn from the rest of the
    evaluation set itself (leave-one-out), which keeps the verb
    self-contained at the price of a transductive protocol.
    """
    ids = sorted(dataset.images)
    if args.predictions:
        with open(args.predictions, "r", encoding="utf-8") as fh:
            saved = json.load(fh)["predictions"]
        return {i: saved.get(str(i)) for i in ids}
    return train.compute_predictions(dataset, ids, ids, train_config)


def _cmd_eval(parser, args):
    dataset = _load_dataset(parser, args)
    train_config, model_config, params = train.load_model(args.model)
    categories = dataset.manifest.categories
    if len(categories) != model_config.c:
        raise ConfigError(
            f"checkpoint expects {model_config.c} categories, dataset "
            f"has {len(categories)}")
    if model_config.uses_text and not dataset.transcripts:
        raise ConfigError("checkpoint uses text features; pass "
                          "--transcripts DIR alongside --manifest")
    text = None
    if model_config.uses_text:
        text = model.text_matrix(params, model_config, categories,
                                 dataset.transcripts)
    predictions = {}
    if model_config.uses_icl:
        predictions = _eval_predictions(dataset, train_config, args)
    ids = sorted(dataset.images)
    labels = dataset.manifest.labels_by_id()
    probs = np.stack([
        model.forward_sample(params, model_config, dataset.images[i], text,
                             predictions.get(i)).probs
        for i in ids])
    truth = np.array([labels[i] for i in ids], dtype=np.int64)
    report = metrics.compute_report(probs, truth, model_config.c)
    payload = {"categories": list(categories), "ids": ids,
               "labels": [int(v) for v in truth],
               "probs": [[float(v) for v in row] for row in probs]}
    _write_text(args.out, json.dumps(payload, indent=2) + "\n")
    print(f"evaluated {len(ids)} samples; top1 {report.topn[1]:.4f} "
          f"-> {args.out}")
    return 0


def _cmd_report(parser, args):
    with open(args.probs, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("categories", "labels", "probs"):
        if key not in payload:
            raise ParseError(f"probabilities file lacks {key!r}")
    categories = payload["categories"]
    probs = np.asarray(payload["probs"], dtype=np.float64)
    labels = np.asarray(payload["labels"], dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] != len(categories):
        raise InvalidInputError(
            f"probability matrix {probs.shape} does not match "
            f"{len(categories)} categories")
    os.makedirs(args.out, exist_ok=True)
    report = metrics.compute_report(probs, labels, len(categories))
    paths = metrics.emit_report([report], categories, args.out)
    print(f"top1 {report.topn[1]:.4f}; reports: "
          + " ".join(sorted(paths)))
    return 0


# ---------------------------------------------------------------------------
# parser assembly

def _add(parser, *names, **kwargs):
    kwargs.setdefault("action", _Once)
    parser.add_argument(*names, **kwargs)


def _add_dataset_flags(parser):
    group = parser.add_argument_group("dataset source")
    _add(group, "--synth", metavar="SPEC",
         help="synthesize in memory, e.g. 'c=10,per_class=20,noise=0.0'")
    _add(group, "--manifest", metavar="CSV", help="dataset manifest path")
    _add(group, "--transcripts", metavar="DIR",
         help="directory of per-category response bundles")


def _add_config_flags(parser):
    group = parser.add_argument_group("run configuration")
    _add(group, "--config", metavar="INI", help="configuration file")
    for field in dataclasses.fields(train.TrainConfig):
        flag = "--" + field.name.replace("_", "-")
        if field.type in (bool, "bool"):
            _add(group, flag, type=_parse_bool, metavar="BOOL")
        elif field.type in (int, "int"):
            _add(group, flag, type=int, metavar="N")
        elif field.type in (float, "float"):
            _add(group, flag, type=float, metavar="X")
        else:
            _add(group, flag, metavar="VALUE")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="microfusion",
        description="Cross-modal micrograph classification workflows.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="export a synthetic dataset")
    _add(p, "--out", required=True, metavar="DIR")
    _add(p, "--c", type=int, default=10, metavar="N")
    _add(p, "--per-class", type=int, default=20, metavar="N")
    _add(p, "--size", type=int, default=32, metavar="N")
    _add(p, "--channels", type=int, default=1, metavar="N")
    _add(p, "--noise", type=float, default=0.0, metavar="X")
    _add(p, "--seed", type=int, default=0, metavar="N")
    _add(p, "--transcripts", action=_Once, nargs=0, default=False,
         help="also write per-category response bundles")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("mine", help="select ambiguous samples")
    _add_dataset_flags(p)
    _add(p, "--out", required=True, metavar="FILE")
    _add(p, "--fraction", type=float, default=0.1, metavar="X")
    _add(p, "--config", metavar="INI")
    _add(p, "--pca-k", type=int, metavar="N")
    _add(p, "--kmeans-k", type=int, metavar="N")
    _add(p, "--seed", type=int, metavar="N")
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("prompts", help="render a prompt bundle")
    _add(p, "--family", required=True, choices=prompts.families())
    _add(p, "--subject", required=True, metavar="NAME")
    _add(p, "--out", required=True, metavar="FILE")
    p.set_defaults(func=_cmd_prompts)

    for verb, func, help_text in (
            ("train", _cmd_train, "train one model"),
            ("cv", _cmd_cv, "k-fold cross-validation"),
            ("ablate", _cmd_ablate, "compare fusion variants"),
            ("sweep", _cmd_sweep, "grid over width and batch size")):
        p = sub.add_parser(verb, help=help_text)
        _add_dataset_flags(p)
        _add_config_flags(p)
        _add(p, "--out", required=True, metavar="DIR")
        if verb == "sweep":
            _add(p, "--d-grid", type=_int_list, default=[32, 64],
                 metavar="N,N")
            _add(p, "--batch-grid", type=_int_list, default=[16, 48],
                 metavar="N,N")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_dataset_flags(p)
    _add(p, "--model", required=True, metavar="CKPT")
    _add(p, "--predictions", metavar="JSON",
         help="predictions.json from train; omitted means leave-one-out")
    _add(p, "--out", required=True, metavar="FILE")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="metric CSVs from saved probabilities")
    _add(p, "--probs", required=True, metavar="JSON")
    _add(p, "--out", required=True, metavar="DIR")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, DegenerateSimilarityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (OfflineMissError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
