"""Black-box language-model client abstraction.

Three providers fetch per-category description text:

- ``mock-fixture``: serves transcripts shipped with the package (one
  JSON bundle per subject). Unknown subjects raise an offline-miss
  error; the mock never invents text.
- ``file-cache``: replays responses persisted on disk, keyed by a hash
  of (family, subject, prompt index). With an inner transport client it
  fills the cache on miss; without one a miss is an error.
- ``live-http``: posts each prompt to a configured endpoint. Requires a
  credential from the environment; when the credential is absent,
  provider selection silently degrades to the offline cache.

All providers return the same :class:`Transcript` shape, so downstream
embedding code does not care where text came from.
"""

import dataclasses
import hashlib
import importlib.resources
import json
import os
import urllib.error
import urllib.request

from .errors import ConfigError, InvalidInputError, OfflineMissError, TransportError

CREDENTIAL_ENV = "MICROFUSION_LLM_KEY"
ENDPOINT_ENV = "MICROFUSION_LLM_URL"
FIXED_TIMESTAMP = "2024-01-01T00:00:00Z"


@dataclasses.dataclass
class Transcript:
    """Per-category responses to one rendered prompt list."""

    category: str
    family: str
    responses: list
    provider: str
    retrieved_at: str = FIXED_TIMESTAMP

    def validate(self, expected_count=None):
        if expected_count is not None and len(self.responses) != expected_count:
            raise InvalidInputError(
                f"transcript for {self.category!r} has {len(self.responses)} "
                f"responses, expected {expected_count}")
        for i, text in enumerate(self.responses):
            if not isinstance(text, str) or not text.strip():
                raise InvalidInputError(
                    f"transcript for {self.category!r} has an empty response "
                    f"at index {i}")
        return self

    @property
    def text(self):
        """Whole-transcript text: responses joined by blank lines."""
        return "\n\n".join(self.responses)


# ---------------------------------------------------------------------------
# prompt bundles (also the cache record format)

def bundle_to_json(bundle):
    """Serialize a bundle dict to deterministic bytes."""
    return (json.dumps(bundle, indent=2, sort_keys=True, ensure_ascii=False)
            + "\n").encode("utf-8")


def save_bundle(path, bundle):
    with open(path, "wb") as fh:
        fh.write(bundle_to_json(bundle))


def load_bundle(path):
    with open(path, "rb") as fh:
        return json.loads(fh.read().decode("utf-8"))


def transcript_to_bundle(transcript, prompts):
    return {
        "family": transcript.family,
        "subject": transcript.category,
        "prompts": [p.text for p in prompts],
        "provider": transcript.provider,
        "retrieved_at": transcript.retrieved_at,
        "responses": list(transcript.responses),
    }


def cache_key(family, subject, index):
    """Stable digest key for one prompt slot."""
    raw = "\x1f".join([family, subject, str(index)]).encode("utf-8")
    return hashlib.blake2b(raw, digest_size=16).hexdigest()


# ---------------------------------------------------------------------------
# providers

class MockFixtureClient:
    """Serves transcripts shipped under ``microfusion.fixtures``."""

    provider = "mock-fixture"

    def __init__(self, extra_dir=None):
        self._bundles = {}
        root = importlib.resources.files("microfusion.fixtures")
        for entry in sorted(root.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".json"):
                self._register(json.loads(entry.read_text(encoding="utf-8")))
        if extra_dir is not None:
            for name in sorted(os.listdir(extra_dir)):
                if name.endswith(".json"):
                    self._register(load_bundle(os.path.join(extra_dir, name)))

    def _register(self, bundle):
        self._bundles[(bundle["family"], bundle["subject"])] = bundle

    def subjects(self):
        return sorted(self._bundles)

    def fetch(self, family, subject, prompts):
        try:
            bundle = self._bundles[(family, subject)]
        except KeyError:
            raise OfflineMissError(
                f"no fixture transcript for family={family!r} "
                f"subject={subject!r}", key=f"{family}/{subject}") from None
        return list(bundle["responses"]), bundle.get("retrieved_at",
                                                     FIXED_TIMESTAMP)


class FileCacheClient:
    """Disk-backed replay cache, one JSON record per prompt slot.

    A record is a single-prompt bundle, so cached responses can be
    inspected or seeded by hand with any text editor.
    """

    provider = "file-cache"

    def __init__(self, cache_dir, inner=None):
        self.cache_dir = cache_dir
        self.inner = inner
        os.makedirs(cache_dir, exist_ok=True)

    def _record_path(self, family, subject, index):
        return os.path.join(self.cache_dir, cache_key(family, subject, index) + ".json")

    def fetch(self, family, subject, prompts):
        responses = []
        stamp = FIXED_TIMESTAMP
        for prompt in prompts:
            path = self._record_path(family, subject, prompt.index)
            if os.path.exists(path):
                record = load_bundle(path)
                responses.append(record["responses"][0])
                stamp = record.get("retrieved_at", stamp)
                continue
            if self.inner is None:
                raise OfflineMissError(
                    f"cache miss for family={family!r} subject={subject!r} "
                    f"prompt {prompt.index} and no transport configured",
                    key=f"{family}/{subject}/prompt-{prompt.index}")
            text, stamp = self.inner.fetch_one(family, subject, prompt)
            save_bundle(path, {
                "family": family,
                "subject": subject,
                "prompts": [prompt.text],
                "provider": self.inner.provider,
                "retrieved_at": stamp,
                "responses": [text],
            })
            responses.append(text)
        return responses, stamp


class LiveHttpClient:
    """Minimal JSON-over-HTTP transport for a text-generation endpoint."""

    provider = "live-http"

    def __init__(self, endpoint, api_key, timeout=30.0):
        if not endpoint:
            raise ConfigError(f"live provider needs an endpoint ({ENDPOINT_ENV})")
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def fetch_one(self, family, subject, prompt):
        payload = json.dumps({
            "family": family,
            "subject": subject,
            "index": prompt.index,
            "prompt": prompt.text,
        }).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=payload,
            headers={"Content-Type": "application/json",
                     "Authorization": f"Bearer {self.api_key}"})
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise TransportError(
                f"live provider failed for {family}/{subject} "
                f"prompt {prompt.index}: {exc}") from exc
        text = body.get("text")
        if not isinstance(text, str) or not text.strip():
            raise TransportError(
                f"live provider returned no text for {family}/{subject} "
                f"prompt {prompt.index}")
        stamp = body.get("retrieved_at", FIXED_TIMESTAMP)
        return text, stamp

    def fetch(self, family, subject, prompts):
        stamp = FIXED_TIMESTAMP
        responses = []
        for prompt in prompts:
            text, stamp = self.fetch_one(family, subject, prompt)
            responses.append(text)
        return responses, stamp


PROVIDERS = ("mock-fixture", "file-cache", "live-http")


def make_client(provider, cache_dir=None, fixture_dir=None, environ=None):
    """Build a provider by name.

    ``live-http`` without a credential in the environment degrades to the
    offline file cache, so scripted runs never silently spend tokens.
    """
    env = os.environ if environ is None else environ
    if provider == "mock-fixture":
        return MockFixtureClient(extra_dir=fixture_dir)
    if provider in ("file-cache", "live-http"):
        if cache_dir is None:
            raise ConfigError(f"provider {provider!r} needs a cache directory")
        inner = None
        if provider == "live-http":
            key = env.get(CREDENTIAL_ENV, "")
            if key:
                inner = LiveHttpClient(env.get(ENDPOINT_ENV, ""), key)
        return FileCacheClient(cache_dir, inner=inner)
    raise ConfigError(f"unknown provider {provider!r}; choose from {PROVIDERS}")


def query_llm(client, family, subject, prompts):
    """Fetch one response per prompt and wrap them as a Transcript."""
    if not prompts:
        raise InvalidInputError("prompt list is empty")
    responses, stamp = client.fetch(family, subject, prompts)
    return Transcript(category=subject, family=family, responses=responses,
                      provider=client.provider,
                      retrieved_at=stamp).validate(expected_count=len(prompts))
