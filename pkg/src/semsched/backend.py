"""Pluggable embedding/completion backends and an exact cosine vector store.

The mock backends are fully deterministic so the entire test suite and all
simulation runs work offline. The HTTP completion backend speaks the de-facto
chat-completions wire format and is configured via the ``SM_LLM_URL`` and
``SM_LLM_MODEL`` environment variables.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import FAILURE_CATEGORIES, FAILURE_COMPONENTS, WorkloadMetadata

DEFAULT_DIM = 256

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class TransportError(RuntimeError):
    """HTTP backend failed after exhausting retries."""


def tokenize(text: str) -> list:
    """Lowercase alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


class MockEmbedder:
    """Bag-of-tokens feature hashing into a fixed number of buckets.

    Token-multiset equality implies identical vectors, so a resubmitted job
    with identical metadata always retrieves itself with cosine 1.0.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self._salt = str(seed).encode()
        self._bucket_cache = {}

    def bucket(self, token: str) -> int:
        cached = self._bucket_cache.get(token)
        if cached is None:
            digest = hashlib.blake2b(
                token.encode(), digest_size=8, salt=self._salt
            ).digest()
            cached = self._bucket_cache[token] = int.from_bytes(digest, "big") % self.dim
        return cached

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return np.zeros(self.dim)
        bucket = self.bucket
        vec = np.bincount([bucket(t) for t in tokens],
                          minlength=self.dim).astype(float)
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a,b)/(|a||b|); 0 when either vector is zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# Vector store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JobOutcome:
    duration_s: float
    sm_util: Optional[float]
    status: str


class VectorStore:
    """Exact in-memory store of (vector, metadata, outcome) keyed by job_id.

    Search is an exhaustive cosine scan; readers may share the store while a
    single writer holds the internal lock.
    """

    SNAPSHOT_FORMAT = "semsched-store"
    SNAPSHOT_VERSION = 1

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self._entries = {}
        self._norms = {}
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, job_id: str) -> bool:
        return job_id in self._entries

    def put(self, job_id: str, vector: np.ndarray, metadata: Optional[WorkloadMetadata],
            outcome: JobOutcome) -> None:
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.dim,):
            raise ValueError(f"vector dimension {vector.shape} != ({self.dim},)")
        with self._lock:
            self._entries[job_id] = (vector, metadata, outcome)
            self._norms[job_id] = np.linalg.norm(vector)

    def get(self, job_id: str):
        return self._entries[job_id]

    def outcome(self, job_id: str) -> JobOutcome:
        return self._entries[job_id][2]

    def search(self, query: np.ndarray, threshold: float, k: int) -> list:
        """Top-k entries with cosine >= threshold.

        Sorted by descending score, ties broken by lexicographic job_id.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        query = np.asarray(query, dtype=float)
        if query.shape != (self.dim,):
            raise ValueError(f"query dimension {query.shape} != ({self.dim},)")
        qn = np.linalg.norm(query)
        with self._lock:
            # Same expression as cosine() with the entry norms precomputed at
            # put() time, so scores are bit-identical to per-pair cosine.
            scored = [
                (job_id,
                 0.0 if qn == 0 or self._norms[job_id] == 0
                 else float(np.dot(query, vec) / (qn * self._norms[job_id])))
                for job_id, (vec, _md, _out) in self._entries.items()
            ]
        hits = [(job_id, score) for job_id, score in scored if score >= threshold]
        hits.sort(key=lambda item: (-item[1], item[0]))
        return hits[:k]

    def save(self, path) -> None:
        """Snapshot: one JSON header line, then one JSON record per entry."""
        with self._lock:
            lines = [
                json.dumps(
                    {
                        "format": self.SNAPSHOT_FORMAT,
                        "version": self.SNAPSHOT_VERSION,
                        "dim": self.dim,
                    },
                    sort_keys=True,
                )
            ]
            for job_id in sorted(self._entries):
                vec, md, out = self._entries[job_id]
                lines.append(
                    json.dumps(
                        {
                            "job_id": job_id,
                            "vector": vec.tolist(),
                            "metadata": md.to_dict() if md is not None else None,
                            "outcome": {
                                "duration_s": out.duration_s,
                                "sm_util": out.sm_util,
                                "status": out.status,
                            },
                        },
                        sort_keys=True,
                    )
                )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "VectorStore":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValueError(f"{path}: empty snapshot")
        header = json.loads(lines[0])
        if header.get("format") != cls.SNAPSHOT_FORMAT:
            raise ValueError(f"{path}: not a store snapshot")
        if header.get("version") != cls.SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {header.get('version')}")
        store = cls(dim=int(header["dim"]))
        for line in lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            md = rec["metadata"]
            out = rec["outcome"]
            store.put(
                rec["job_id"],
                np.array(rec["vector"], dtype=float),
                WorkloadMetadata.from_dict(md) if md is not None else None,
                JobOutcome(out["duration_s"], out["sm_util"], out["status"]),
            )
        return store


# ---------------------------------------------------------------------------
# Completions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_prompt: str
    expected_schema_id: str

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")


@dataclass(frozen=True)
class CompletionResult:
    raw_text: str
    parsed: Optional[dict]
    ok: bool


AGENT_ACTIONS = ("FILE_TREE", "FILE_READ", "FINISH")


def _validate_metadata_doc(doc: dict) -> bool:
    try:
        WorkloadMetadata.from_dict(doc)
        return True
    except (ValueError, TypeError):
        return False


def _validate_metric_line(doc: dict) -> bool:
    step_time = doc.get("step_time_s")
    if not isinstance(step_time, (int, float)) or step_time <= 0:
        return False
    step = doc.get("step")
    return step is None or (isinstance(step, int) and step >= 0)


def _validate_failure_class(doc: dict) -> bool:
    return doc.get("error_type") in FAILURE_CATEGORIES


def _validate_failure_component(doc: dict) -> bool:
    comp = doc.get("faulty_component")
    return comp in FAILURE_COMPONENTS and comp != "NONE"


def _validate_agent_step(doc: dict) -> bool:
    return doc.get("action") in AGENT_ACTIONS and "action_input" in doc


SCHEMAS = {
    "metadata_doc": _validate_metadata_doc,
    "metric_line": _validate_metric_line,
    "failure_class": _validate_failure_class,
    "failure_component": _validate_failure_component,
    "agent_step": _validate_agent_step,
}


def validate_schema(schema_id: str, doc: dict) -> bool:
    try:
        validator = SCHEMAS[schema_id]
    except KeyError:
        raise ValueError(f"unknown schema id {schema_id!r}") from None
    return validator(doc)


# ---------------------------------------------------------------------------
# Failure phrase taxonomy, shared with the synthetic corpus generator
# ---------------------------------------------------------------------------

# (phrase, error_type, faulty_component). First phrase found in a window wins;
# phrases are matched case-insensitively on substring.
FAILURE_PHRASES = (
    ("nccl watchdog timeout", "INFRA", "NETWORK"),
    ("nccl timeout", "INFRA", "NETWORK"),
    ("connection reset by peer", "INFRA", "NETWORK"),
    ("infiniband link down", "INFRA", "NETWORK"),
    ("nvlink error detected", "INFRA", "NVLINK"),
    ("nvlink replay error", "INFRA", "NVLINK"),
    ("uncorrectable ecc error", "INFRA", "GPU"),
    ("gpu has fallen off the bus", "INFRA", "GPU"),
    ("xid 79", "INFRA", "GPU"),
    ("node became unreachable", "INFRA", "NODE"),
    ("kernel panic on host", "INFRA", "NODE"),
    ("out of memory on host", "INFRA", "NODE"),
    ("incompatible checkpoint version", "FRAMEWORK", "NONE"),
    ("framework internal assertion", "FRAMEWORK", "NONE"),
    ("dataloader worker exited unexpectedly", "FRAMEWORK", "NONE"),
    ("cuda error: device-side assert", "USER_SCRIPT", "NONE"),
    ("indexerror", "USER_SCRIPT", "NONE"),
    ("keyerror", "USER_SCRIPT", "NONE"),
    ("syntaxerror", "USER_SCRIPT", "NONE"),
    ("loss is nan", "USER_SCRIPT", "NONE"),
)


def classify_failure_text(text: str):
    """Look up the first taxonomy phrase present in the text, else None."""
    lowered = text.lower()
    best = None
    for phrase, category, component in FAILURE_PHRASES:
        idx = lowered.find(phrase)
        if idx >= 0 and (best is None or idx < best[0]):
            best = (idx, category, component)
    if best is None:
        return None
    return best[1], best[2]


# ---------------------------------------------------------------------------
# Mock completer
# ---------------------------------------------------------------------------

_STEP_RE = re.compile(r"\bstep[\s:=]+(\d+)\b", re.IGNORECASE)
_STEP_TIME_RE = re.compile(r"\bstep[_ ]time[\s:=]+([0-9]*\.?[0-9]+)\s*s?\b", re.IGNORECASE)

# Keys the mock agent knows how to place into metadata sections.
_METADATA_KEY_SECTIONS = {
    "model_name": "model_config",
    "task_type": "model_config",
    "d_model": "model_config",
    "n_layer": "model_config",
    "iters": "training_config",
    "iter_type": "training_config",
    "batch_size": "training_config",
    "lr": "training_config",
    "train": "dataset_config",
    "valid": "dataset_config",
    "num_workers": "dataset_config",
}
_KV_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(\S.*?)\s*$")

_CONFIG_HINTS = ("config", "conf", "exp", "model", "data", "train", "hparam", "setting")


class MockCompleter:
    """Deterministic rule-table completer keyed by schema id.

    ``flip_fraction`` degrades failure classifications by deterministically
    flipping a fraction of verdicts between INFRA and USER_SCRIPT; it exists
    for harness-calibration tests.
    """

    def __init__(self, flip_fraction: float = 0.0, flip_seed: int = 0):
        if not (0 <= flip_fraction <= 1):
            raise ValueError("flip_fraction must be in [0,1]")
        self.flip_fraction = flip_fraction
        self.flip_seed = flip_seed
        self.calls = 0

    # -- dispatch ----------------------------------------------------------

    def complete(self, request: CompletionRequest) -> CompletionResult:
        self.calls += 1
        schema = request.expected_schema_id
        if schema == "metric_line":
            doc = self._metric_line(request.user_prompt)
        elif schema == "failure_class":
            doc = self._failure_class(request.user_prompt)
        elif schema == "failure_component":
            doc = self._failure_component(request.user_prompt)
        elif schema == "agent_step":
            doc = self._agent_step(request.user_prompt)
        else:
            raise ValueError(f"mock completer has no rule table for schema {schema!r}")
        if doc is None:
            return CompletionResult(raw_text="", parsed=None, ok=False)
        raw = json.dumps(doc, sort_keys=True)
        ok = validate_schema(schema, doc)
        return CompletionResult(raw_text=raw, parsed=doc if ok else None, ok=ok)

    # -- rule tables -------------------------------------------------------

    def _metric_line(self, text: str) -> Optional[dict]:
        time_match = _STEP_TIME_RE.search(text)
        if not time_match:
            return None
        doc = {"step_time_s": float(time_match.group(1))}
        step_match = _STEP_RE.search(text)
        if step_match:
            doc["step"] = int(step_match.group(1))
        return doc

    def _should_flip(self, text: str) -> bool:
        if self.flip_fraction <= 0:
            return False
        digest = hashlib.blake2b(
            text.encode(), digest_size=8, salt=str(self.flip_seed).encode()
        ).digest()
        return int.from_bytes(digest, "big") / 2**64 < self.flip_fraction

    def _failure_class(self, text: str) -> Optional[dict]:
        verdict = classify_failure_text(text)
        if verdict is None:
            return None
        category, component = verdict
        if self._should_flip(text):
            category = "USER_SCRIPT" if category == "INFRA" else "INFRA"
            component = "NODE" if category == "INFRA" else "NONE"
        return {"error_type": category, "faulty_component": component}

    def _failure_component(self, text: str) -> Optional[dict]:
        verdict = classify_failure_text(text)
        if verdict is None or verdict[1] == "NONE":
            return None
        return {"faulty_component": verdict[1]}

    # -- agent policy ------------------------------------------------------

    def _agent_step(self, transcript: str) -> dict:
        tree_entries = self._tree_entries(transcript)
        if tree_entries is None:
            return {
                "thought": "Inspect the repository layout first.",
                "action": "FILE_TREE",
                "action_input": ".",
            }
        collected = self._collect_metadata(transcript)
        if self._metadata_complete(collected):
            return {
                "thought": "All mandatory metadata fields found.",
                "action": "FINISH",
                "action_input": collected,
            }
        read = self._already_read(transcript)
        for path in self._candidate_order(tree_entries):
            if path not in read:
                return {
                    "thought": f"Read {path} for workload configuration.",
                    "action": "FILE_READ",
                    "action_input": path,
                }
        # Nothing left to read; emit whatever was collected (may fail validation).
        return {
            "thought": "No more files to inspect; emitting collected metadata.",
            "action": "FINISH",
            "action_input": collected,
        }

    @staticmethod
    def _tree_entries(transcript: str) -> Optional[list]:
        marker = "Observation [FILE_TREE]:"
        idx = transcript.rfind(marker)
        if idx < 0:
            return None
        block = transcript[idx + len(marker):]
        end = block.find("\nThought:")
        if end >= 0:
            block = block[:end]
        entries = []
        for line in block.splitlines():
            line = line.strip()
            if line and not line.startswith("...") and not line.startswith("("):
                entries.append(line)
        return entries

    @staticmethod
    def _already_read(transcript: str) -> set:
        read = set()
        for match in re.finditer(
            r"Action: FILE_READ\nAction Input: (.+)", transcript
        ):
            read.add(match.group(1).strip())
        return read

    @staticmethod
    def _candidate_order(entries: list) -> list:
        def rank(path: str):
            lowered = path.lower()
            suffix = Path(lowered).suffix
            config_like = suffix in (".yaml", ".yml", ".json", ".toml")
            hinted = any(h in lowered for h in _CONFIG_HINTS)
            return (
                0 if (config_like and hinted) else 1 if config_like else 2 if hinted else 3,
                lowered.count("/"),
                path,
            )

        return sorted(entries, key=rank)

    @staticmethod
    def _collect_metadata(transcript: str) -> dict:
        doc = {"model_config": {}, "training_config": {}, "dataset_config": {}}
        marker = "Observation [FILE_READ"
        pos = 0
        while True:
            idx = transcript.find(marker, pos)
            if idx < 0:
                break
            block = transcript[idx:]
            header_end = block.find("\n")
            end = block.find("\nThought:")
            body = block[header_end + 1: end if end >= 0 else None]
            for line in body.splitlines():
                kv = _KV_RE.match(line)
                if not kv:
                    continue
                key, value = kv.group(1).lower(), kv.group(2)
                section = _METADATA_KEY_SECTIONS.get(key)
                if section and key not in doc[section]:
                    doc[section][key] = value
            pos = idx + len(marker)
        return doc

    @staticmethod
    def _metadata_complete(doc: dict) -> bool:
        return (
            {"model_name", "task_type"} <= doc["model_config"].keys()
            and {"iters", "iter_type"} <= doc["training_config"].keys()
            and {"train", "valid"} <= doc["dataset_config"].keys()
        )


# ---------------------------------------------------------------------------
# HTTP completer (chat-completions wire format)
# ---------------------------------------------------------------------------


class HttpCompleter:
    """Wire client for a hosted chat-completions endpoint.

    Transport failures are retried up to ``max_retries`` times; schema
    validation failures are returned as ok=False with raw text retained.
    """

    def __init__(self, base_url: Optional[str] = None, model: Optional[str] = None,
                 timeout: float = 10.0, max_retries: int = 3, session=None,
                 retry_sleep: float = 1.0):
        self.base_url = (base_url or os.environ.get("SM_LLM_URL", "")).rstrip("/")
        self.model = model or os.environ.get("SM_LLM_MODEL", "")
        if not self.base_url or not self.model:
            raise ValueError(
                "HTTP backend needs a base URL and model "
                "(SM_LLM_URL / SM_LLM_MODEL)"
            )
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_sleep = retry_sleep
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def complete(self, request: CompletionRequest) -> CompletionResult:
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        }
        url = f"{self.base_url}/v1/chat/completions"
        last_error = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(url, json=body, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise ConnectionError(f"server error {resp.status_code}")
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
                return self._parse(request.expected_schema_id, content)
            except (ConnectionError, OSError, IOError) as exc:
                last_error = exc
                if attempt < self.max_retries and self.retry_sleep:
                    time.sleep(self.retry_sleep * (attempt + 1))
            except Exception as exc:  # requests.RequestException without the import
                if exc.__class__.__module__.startswith("requests"):
                    last_error = exc
                    if attempt < self.max_retries and self.retry_sleep:
                        time.sleep(self.retry_sleep * (attempt + 1))
                else:
                    raise
        raise TransportError(f"completion request failed after retries: {last_error}")

    @staticmethod
    def _parse(schema_id: str, content: str) -> CompletionResult:
        try:
            doc = json.loads(content)
        except json.JSONDecodeError:
            return CompletionResult(raw_text=content, parsed=None, ok=False)
        if isinstance(doc, dict) and validate_schema(schema_id, doc):
            return CompletionResult(raw_text=content, parsed=doc, ok=True)
        return CompletionResult(raw_text=content, parsed=None, ok=False)
