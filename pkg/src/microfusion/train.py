"""Supervised training: Adam, LR plateau halving, early stopping, CV.

The run configuration is one flat dataclass; an INI file can override
any field and CLI flags override the file (precedence handled by
:func:`build_config`). Few-shot predictions are computed once per run
before the epoch loop, mirroring a pipeline where the multimodal
provider is queried offline, and are then constant inputs to training.
"""

import configparser
import csv
import dataclasses
import math
import os

import numpy as np

from . import fewshot, metrics, mining, model
from .data import holdout_split, kfold_split
from .errors import ConfigError, NumericalError
from .params import iter_arrays, make_rng

CLIENTS = ("oracle", "majority", "noisy", "replay", "live")
LMM_ENDPOINT_ENV = "MICROFUSION_LMM_URL"
LMM_CREDENTIAL_ENV = "MICROFUSION_LMM_KEY"


@dataclasses.dataclass
class TrainConfig:
    """Everything a run needs; architecture fields mirror ModelConfig."""

    # architecture
    image_size: int = 32
    patch: int = 8
    channels: int = 1
    d: int = 64
    heads: int = 4
    d_h: int = 16
    depth: int = 2
    ablation: str = "full"
    alignment_weight: float = 0.5
    tau: float = 1.0
    token_set: bool = False
    embedder: str = "hash"
    # optimization
    batch: int = 48
    lr: float = 1e-3
    epochs: int = 50
    scheduler_patience: int = 5
    lr_factor: float = 0.5
    early_stop_patience: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    k: int = 10
    workers: int = 1
    # few-shot prediction pipeline
    k_demos: int = 3
    strategy: str = "similarity"
    client: str = "majority"
    client_noise: float = 0.1
    replay_path: str = ""
    ambiguous_fraction: float = 1.0
    pca_k: int = 8
    kmeans_k: int = 0  # 0 means one cluster per category

    def validate(self):
        if self.batch < 1:
            raise ConfigError(f"batch={self.batch}; need at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr factor must be in (0, 1)")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be at least 1")
        if self.client not in CLIENTS:
            raise ConfigError(f"client {self.client!r} not in {CLIENTS}")
        if self.strategy not in ("random", "similarity"):
            raise ConfigError(f"strategy {self.strategy!r} unknown")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val fraction must be in (0, 1)")
        if not 0 < self.ambiguous_fraction <= 1:
            raise ConfigError("ambiguous fraction must be in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        self.model_config(c=2).validate()
        return self

    def model_config(self, c):
        return model.ModelConfig(
            image_size=self.image_size, patch=self.patch,
            channels=self.channels, d=self.d, heads=self.heads,
            d_h=self.d_h, depth=self.depth, c=c, ablation=self.ablation,
            alignment_weight=self.alignment_weight, tau=self.tau,
            token_set=self.token_set, embedder=self.embedder)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name, raw):
    kind = _FIELD_TYPES[name]
    if kind is bool or kind == "bool":
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: {raw!r} is not a boolean")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def load_config_file(path):
    """Key/value overrides from an INI file ([run] section or defaults)."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path!r} not found")
    if parser.sections() and parser.sections() != ["run"]:
        raise ConfigError(
            f"config sections {parser.sections()} != ['run']")
    section = parser["run"] if "run" in parser else parser.defaults()
    overrides = {}
    for key, raw in dict(section).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        overrides[key] = _coerce(key, raw)
    return overrides


def build_config(file_path=None, cli_overrides=None):
    """Defaults, then file values, then CLI values; validated."""
    values = {}
    if file_path:
        values.update(load_config_file(file_path))
    for key, value in (cli_overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config field {key!r}")
        values[key] = value
    return TrainConfig(**values).validate()


# ---------------------------------------------------------------------------
# optimizer and schedules

class Adam:
    """Path-keyed Adam over a parameter tree (beta1=0.9, beta2=0.999)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for path, arr in iter_arrays(params):
            g = grads.get(path) if path in grads else np.zeros_like(arr)
            if path not in self.m:
                self.m[path] = np.zeros_like(arr)
                self.v[path] = np.zeros_like(arr)
            m = self.m[path]
            v = self.v[path]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            arr -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauScheduler:
    """Multiplies the LR by ``factor`` after ``patience`` consecutive
    epochs without a strict validation-loss improvement."""

    def __init__(self, lr, patience=5, factor=0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.stagnant = 0

    def update(self, val_loss):
        """Record one epoch's validation loss; returns the next LR."""
        if val_loss < self.best:
            self.best = val_loss
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                self.lr *= self.factor
                self.stagnant = 0
        return self.lr


class EarlyStop:
    """Signals a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience=10):
        self.patience = patience
        self.best = math.inf
        self.stagnant = 0

    def update(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.stagnant = 0
            return False
        self.stagnant += 1
        return self.stagnant >= self.patience


# ---------------------------------------------------------------------------
# offline few-shot predictions

def make_client(config, c):
    if config.client == "oracle":
        return fewshot.OracleMock()
    if config.client == "majority":
        return fewshot.MajorityMock()
    if config.client == "noisy":
        return fewshot.NoisyMock(config.client_noise, c, seed=config.seed)
    if config.client == "replay":
        if not config.replay_path:
            raise ConfigError("replay client needs replay_path")
        return fewshot.FileReplay(config.replay_path)
    endpoint = os.environ.get(LMM_ENDPOINT_ENV)
    key = os.environ.get(LMM_CREDENTIAL_ENV)
    if not endpoint or not key:
        raise ConfigError(
            f"live client needs {LMM_ENDPOINT_ENV} and {LMM_CREDENTIAL_ENV}")
    return fewshot.LiveLmm(endpoint, key)


def _flat_features(dataset, ids):
    return {i: dataset.images[i].ravel() for i in ids}


def select_prediction_ids(dataset, ids, fraction, config):
    """Which samples get a few-shot prediction.

    fraction 1.0 short-circuits to everyone; otherwise the ambiguity
    mining pipeline (z-score, PCA, k-means, silhouette) picks the
    worst-clustered fraction.
    """
    if fraction >= 1.0:
        return list(ids)
    images = [dataset.images[i] for i in ids]
    data = mining.zscore_flatten(images, ids=list(ids))
    k = min(config.pca_k, data.data.shape[1], len(ids) - 1)
    reduced, _ = mining.pca(data.data, k)
    clusters = config.kmeans_k or dataset.manifest.c
    clusters = min(clusters, len(ids))
    clustered = mining.kmeans(reduced, clusters, seed=config.seed)
    return mining.select_ambiguous(clustered, reduced, fraction=fraction,
                                   ids=list(ids))


def compute_predictions(dataset, train_ids, query_ids, config, client=None):
    """Predicted label per query id; None for ids outside the ambiguous set.

    Demonstrations always come from ``train_ids`` (minus the query), so
    evaluation queries never see their own label through the candidate
    pool; only the oracle client peeks at labels, by design.
    """
    manifest = dataset.manifest
    labels = manifest.labels_by_id()
    client = client or make_client(config, manifest.c)
    features = _flat_features(dataset, set(train_ids) | set(query_ids))
    candidates = [fewshot.Candidate(id=i, ref=manifest.by_id(i).ref,
                                    label=labels[i], features=features[i])
                  for i in sorted(train_ids)]
    chosen = set(select_prediction_ids(dataset, sorted(query_ids),
                                       config.ambiguous_fraction, config))
    preds = {}
    for qid in sorted(query_ids):
        if qid not in chosen:
            preds[qid] = None
            continue
        pool = [c for c in candidates if c.id != qid]
        k = min(config.k_demos, len(pool))
        demos = fewshot.sample_demonstrations(
            qid, features[qid], candidates, k, config.strategy, config.seed)
        bundle = fewshot.build_icl_prompt(demos, manifest.by_id(qid).ref)
        preds[qid] = int(client.predict(bundle, labels[qid]))
    return preds


# ---------------------------------------------------------------------------
# training

@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclasses.dataclass
class TrainResult:
    params: model.ModelParams
    config: TrainConfig
    history: list
    train_ids: list
    val_ids: list
    predictions: dict
    stopped_early: bool


def _epoch_batches(train_ids, batch_size, seed, epoch):
    ids = list(train_ids)
    order = make_rng(seed, 23, epoch).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [shuffled[i:i + batch_size]
            for i in range(0, len(shuffled), batch_size)]


def _triples(dataset, ids, preds):
    labels = dataset.manifest.labels_by_id()
    return [(dataset.images[i], labels[i], preds.get(i)) for i in ids]


def train(dataset, config, train_ids=None, val_ids=None, client=None):
    """One optimization run; returns params plus per-epoch history.

    Without explicit id lists a stratified holdout split is taken from
    the config's validation fraction. The final short batch of each
    epoch is used, not dropped.
    """
    config.validate()
    manifest = dataset.manifest
    if train_ids is None or val_ids is None:
        train_ids, val_ids = holdout_split(manifest, config.val_fraction,
                                           config.seed)
    train_ids = sorted(train_ids)
    val_ids = sorted(val_ids)

    mc = config.model_config(manifest.c)
    params = model.model_init(mc, seed=config.seed,
                              transcripts=dataset.transcripts)
    preds = {}
    if mc.uses_icl:
        preds = compute_predictions(dataset, train_ids,
                                    list(train_ids) + list(val_ids),
                                    config, client=client)

    optimizer = Adam()
    scheduler = PlateauScheduler(config.lr, patience=config.scheduler_patience,
                                 factor=config.lr_factor)
    stopper = EarlyStop(patience=config.early_stop_patience)
    history = []
    stopped = False
    val_triples = _triples(dataset, val_ids, preds)

    for epoch in range(1, config.epochs + 1):
        lr_used = scheduler.lr
        epoch_loss = 0.0
        seen = 0
        for b, batch_ids in enumerate(
                _epoch_batches(train_ids, config.batch, config.seed, epoch)):
            batch = _triples(dataset, batch_ids, preds)
            text = caches = None
            if mc.uses_text:
                text, caches = model.text_matrix(
                    params, mc, manifest.categories, dataset.transcripts,
                    with_cache=True)
            loss, store = model.batch_loss(params, mc, batch, text=text,
                                           caches=caches, grads=True)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss in epoch {epoch} batch {b}")
            try:
                store.check_finite()
            except NumericalError as err:
                raise NumericalError(f"epoch {epoch} batch {b}: {err}") from None
            optimizer.step(params, store, lr_used)
            epoch_loss += loss * len(batch)
            seen += len(batch)

        train_loss = epoch_loss / seen
        text = None
        if mc.uses_text:
            text = model.text_matrix(params, mc, manifest.categories,
                                     dataset.transcripts)
        val_losses = [model.sample_loss(params, mc, img, label, pred,
                                        text).total
                      for img, label, pred in val_triples]
        val_loss = float(np.mean(val_losses))
        history.append(EpochRecord(epoch=epoch, train_loss=train_loss,
                                   val_loss=val_loss, lr=lr_used))
        scheduler.update(val_loss)
        if stopper.update(val_loss):
            stopped = True
            break

    return TrainResult(params=params, config=config, history=history,
                       train_ids=train_ids, val_ids=val_ids,
                       predictions=preds, stopped_early=stopped)


def evaluate(result, dataset, ids=None):
    """MetricsReport over the given ids (default: the validation split)."""
    ids = sorted(ids if ids is not None else result.val_ids)
    mc = result.config.model_config(dataset.manifest.c)
    labels = dataset.manifest.labels_by_id()
    text = None
    if mc.uses_text:
        text = model.text_matrix(result.params, mc,
                                 dataset.manifest.categories,
                                 dataset.transcripts)
    probs = [model.forward_sample(result.params, mc, dataset.images[i], text,
                                  result.predictions.get(i)).probs
             for i in ids]
    truth = [labels[i] for i in ids]
    return metrics.compute_report(np.array(probs), truth, dataset.manifest.c)


def write_history(path, history):
    """CSV ``epoch,train_loss,val_loss,lr`` with one row per epoch."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for record in history:
            writer.writerow([record.epoch, f"{record.train_loss:.10g}",
                             f"{record.val_loss:.10g}", f"{record.lr:.10g}"])


def read_history(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return [EpochRecord(epoch=int(e), train_loss=float(t), val_loss=float(v),
                        lr=float(lr))
            for e, t, v, lr in rows[1:]]


# ---------------------------------------------------------------------------
# checkpoints

def save_model(path, result, c):
    header = {
        "train_config": dataclasses.asdict(result.config),
        "c": int(c),
    }
    model.save_checkpoint(path, result.params, header_extra=header)


def load_model(path):
    """Returns (TrainConfig, ModelConfig, ModelParams)."""
    header, blocks = model.read_checkpoint(path)
    config = TrainConfig(**header["train_config"]).validate()
    mc = config.model_config(header["c"])
    params = model.restore_params(mc, blocks, vocab=header.get("vocab"))
    return config, mc, params


# ---------------------------------------------------------------------------
# cross-validation, ablation, sweep

@dataclasses.dataclass
class CvResult:
    fold_reports: list
    fold_results: list
    mean: dict
    std: dict


def _fold_seed(seed, fold):
    return int(make_rng(seed, 29, fold).integers(2 ** 31))


def run_cv(dataset, config, client=None):
    """k-fold cross-validation; fresh fold-indexed seeds, aggregated."""
    config.validate()
    plan = kfold_split(dataset.manifest, config.k, seed=config.seed)
    reports = []
    results = []
    for fold, (train_ids, val_ids) in enumerate(plan.folds):
        fold_config = dataclasses.replace(
            config, seed=_fold_seed(config.seed, fold))
        result = train(dataset, fold_config, train_ids=train_ids,
                       val_ids=val_ids, client=client)
        results.append(result)
        reports.append(evaluate(result, dataset))
    rows = [r.metric_row() for r in reports]
    keys = rows[0].keys()
    mean = {k: float(np.mean([row[k] for row in rows])) for k in keys}
    std = {k: float(np.std([row[k] for row in rows])) for k in keys}
    return CvResult(fold_reports=reports, fold_results=results,
                    mean=mean, std=std)


def run_ablations(dataset, config, client=None):
    """One training run per ablation mode on a shared split.

    Returns mode -> MetricsReport, in the fixed order full, no-llm,
    no-lmm, no-mha.
    """
    config.validate()
    out = {}
    for mode in model.ABLATIONS:
        mode_config = dataclasses.replace(config, ablation=mode)
        result = train(dataset, mode_config, client=client)
        out[mode] = evaluate(result, dataset)
    return out


def hyperparameter_sweep(dataset, config, cells, client=None):
    """Top-1 per (d, batch) grid cell; one plain train run per cell.

    Each cell's value is exactly what a standalone train call with the
    same config would produce, so results are independently checkable.
    """
    if not cells:
        raise ConfigError("sweep grid is empty")
    rows = []
    for d, batch in cells:
        if d % config.heads != 0:
            raise ConfigError(
                f"d={d} not divisible by heads={config.heads}")
        cell_config = dataclasses.replace(config, d=d, batch=batch,
                                          d_h=d // config.heads)
        result = train(dataset, cell_config, client=client)
        report = evaluate(result, dataset)
        rows.append({"d": d, "batch": batch, "top1": report.topn[1]})
    return rows


def sweep_table(rows):
    """Two-line rendering: header of (d, batch) pairs, then top-1 values."""
    header = " ".join(f"({row['d']}, {row['batch']})" for row in rows)
    values = " ".join(f"{row['top1']:.4f}" for row in rows)
    return header + "\n" + values + "\n"
