"""Few-shot prediction pathway.

Builds in-context bundles (instruction, demonstration image/label
pairs, query image reference), obtains a one-hot category prediction
from a multimodal client, and lifts it into model space by selecting
the matching row of a trainable projection matrix.

Shipped clients never touch a network: the oracle mock returns the true
label (an upper bound), the majority mock votes over demonstration
labels, the noisy mock flips the true label at a seeded rate, and the
file-replay client replays recorded predictions keyed by bundle hash.
A live HTTP client exists for manual runs against a real endpoint.
"""

import dataclasses
import hashlib
import json
import os
import urllib.error
import urllib.request

import numpy as np

from .errors import (ConfigError, InvalidInputError, OfflineMissError,
                     ShapeError, TransportError)
from .params import init_uniform, make_rng

ICL_INSTRUCTION = (
    "Below are the input-output pairs (image-label pairs) for the "
    "nanomaterial identification task. Predict the nanomaterial category "
    "for the query image.")

LMM_CREDENTIAL_ENV = "MICROFUSION_LMM_KEY"
LMM_ENDPOINT_ENV = "MICROFUSION_LMM_URL"


@dataclasses.dataclass(frozen=True)
class Candidate:
    """One training sample offered as a potential demonstration."""

    id: int
    ref: str
    label: int
    features: np.ndarray


@dataclasses.dataclass
class DemonstrationSet:
    query_id: int
    pairs: list
    strategy: str
    k: int

    def labels(self):
        return [label for _, label in self.pairs]


def _cosine(a, b):
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b) / denom if denom > 1e-12 else -1.0


def sample_demonstrations(query_id, query_features, candidates, k, strategy,
                          seed):
    """Pick k demonstrations for a query, never including the query itself.

    ``random`` draws uniformly without replacement, seeded per query.
    ``similarity`` takes the top-k by cosine similarity to the query
    features, ties resolved toward the lower candidate id.
    """
    pool = [c for c in candidates if c.id != query_id]
    if k < 0:
        raise InvalidInputError("k must be non-negative")
    if k > len(pool):
        raise InvalidInputError(
            f"k={k} exceeds available candidates ({len(pool)})")
    if strategy == "random":
        rng = make_rng(seed, 31, int(query_id))
        chosen = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    elif strategy == "similarity":
        sims = np.array([_cosine(np.asarray(query_features, dtype=np.float64),
                                 np.asarray(c.features, dtype=np.float64))
                         for c in pool])
        ids = np.array([c.id for c in pool])
        order = np.lexsort((ids, -sims))
        chosen = [pool[i] for i in order[:k]]
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; "
                          f"choose 'random' or 'similarity'")
    return DemonstrationSet(query_id=query_id,
                            pairs=[(c.ref, c.label) for c in chosen],
                            strategy=strategy, k=k)


# ---------------------------------------------------------------------------
# prompt bundles

def build_icl_prompt(demos, query_ref):
    """Bundle dict ready for serialization or client submission."""
    return {
        "instruction": ICL_INSTRUCTION,
        "demonstrations": [{"image_path": ref, "label": int(label)}
                           for ref, label in demos.pairs],
        "query_image_path": query_ref,
    }


def serialize_bundle(bundle):
    """Canonical bytes for hashing, caching, and on-disk storage."""
    return (json.dumps(bundle, indent=2, sort_keys=True, ensure_ascii=False)
            + "\n").encode("utf-8")


def deserialize_bundle(raw):
    return json.loads(raw.decode("utf-8"))


def bundle_hash(bundle):
    return hashlib.blake2b(serialize_bundle(bundle), digest_size=16).hexdigest()


# ---------------------------------------------------------------------------
# multimodal clients

class OracleMock:
    """Always answers with the true label; the few-shot upper bound."""

    provider = "oracle-mock"

    def predict(self, bundle, query_label):
        if query_label is None:
            raise InvalidInputError("oracle mock needs the true label")
        return int(query_label)


class MajorityMock:
    """Votes the modal demonstration label; ties go to the lowest label."""

    provider = "majority-mock"

    def predict(self, bundle, query_label=None):
        labels = [d["label"] for d in bundle["demonstrations"]]
        if not labels:
            raise InvalidInputError("majority mock needs at least one demonstration")
        values, counts = np.unique(labels, return_counts=True)
        return int(values[np.argmax(counts)])


class NoisyMock:
    """True label flipped to a uniform other category at a fixed rate.

    The flip draw is seeded by the bundle hash, so a given bundle always
    gets the same answer.
    """

    provider = "noisy-mock"

    def __init__(self, flip_rate, num_classes, seed=0):
        if not 0.0 <= flip_rate <= 1.0:
            raise InvalidInputError(f"flip rate {flip_rate} not in [0, 1]")
        if num_classes < 2:
            raise InvalidInputError("noisy mock needs at least 2 classes")
        self.flip_rate = flip_rate
        self.num_classes = num_classes
        self.seed = seed

    def predict(self, bundle, query_label):
        if query_label is None:
            raise InvalidInputError("noisy mock needs the true label")
        label = int(query_label)
        digest = int(bundle_hash(bundle)[:8], 16)
        rng = make_rng(self.seed, 47, digest)
        if rng.uniform() < self.flip_rate:
            others = [c for c in range(self.num_classes) if c != label]
            return int(others[rng.integers(len(others))])
        return label


class FileReplay:
    """Replays recorded predictions from a JSON-lines file.

    Each line is {"bundle_hash": ..., "label": ...}; unknown bundles are
    an offline miss, never a guess.
    """

    provider = "file-replay"

    def __init__(self, path):
        self.path = path
        self._records = {}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = json.loads(line)
                        self._records[rec["bundle_hash"]] = int(rec["label"])

    def record(self, bundle, label):
        digest = bundle_hash(bundle)
        self._records[digest] = int(label)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"bundle_hash": digest, "label": int(label)},
                                sort_keys=True) + "\n")

    def predict(self, bundle, query_label=None):
        digest = bundle_hash(bundle)
        try:
            return self._records[digest]
        except KeyError:
            raise OfflineMissError(
                f"no recorded prediction for bundle {digest}",
                key=digest) from None


class LiveLmm:
    """Posts the bundle to an HTTP endpoint returning {"label": int}."""

    provider = "live-http"

    def __init__(self, endpoint, api_key, timeout=60.0):
        if not endpoint:
            raise ConfigError(f"live client needs an endpoint ({LMM_ENDPOINT_ENV})")
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def predict(self, bundle, query_label=None):
        request = urllib.request.Request(
            self.endpoint, data=serialize_bundle(bundle),
            headers={"Content-Type": "application/json",
                     "Authorization": f"Bearer {self.api_key}"})
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
            return int(body["label"])
        except (urllib.error.URLError, TimeoutError, KeyError, ValueError,
                json.JSONDecodeError) as exc:
            raise TransportError(f"live multimodal client failed: {exc}") from exc


def one_hot(label, num_classes):
    if not 0 <= label < num_classes:
        raise InvalidInputError(f"label {label} outside [0, {num_classes})")
    v = np.zeros(num_classes)
    v[label] = 1.0
    return v


def query_lmm(client, bundle, num_classes, query_label=None):
    """One-hot prediction vector from any client."""
    return one_hot(int(client.predict(bundle, query_label)), num_classes)


# ---------------------------------------------------------------------------
# prediction lift

@dataclasses.dataclass
class PredictionLift:
    """Row-per-category projection into model space, plus a null row
    used when few-shot prompting is restricted to the ambiguous subset."""

    w_p: np.ndarray
    null_row: np.ndarray

    @property
    def c(self):
        return self.w_p.shape[0]

    @property
    def d(self):
        return self.w_p.shape[1]


def lift_init(rng, num_classes, dim):
    return PredictionLift(w_p=init_uniform(rng, num_classes, dim),
                          null_row=init_uniform(rng, dim))


def project_prediction(h_pred, lift):
    """h_ICL = the W_p row selected by the one-hot prediction."""
    v = np.asarray(h_pred, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != lift.c:
        raise ShapeError(f"prediction shape {v.shape} != ({lift.c},)")
    ones = np.nonzero(v == 1.0)[0]
    if len(ones) != 1 or not np.all((v == 0.0) | (v == 1.0)):
        raise InvalidInputError("prediction must be exactly one-hot")
    return lift.w_p[int(ones[0])].copy()
