"""Client for a remote text-embedding service, with a mandatory local cache.

The wire protocol is a JSON POST ``{"model": ..., "input": [text, ...]}``
answered by ``{"data": [{"embedding": [...]}, ...]}`` in input order. The
cache is a JSON-lines file keyed by sha256(model + text); offline mode serves
exclusively from it and fails loudly on a miss. The API key is read from an
environment variable at call time and never appears in logs, errors, or the
cache file.
"""
from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .errors import (
    CacheLoadError,
    NumericError,
    OfflineMissError,
    TransportError,
    ValidationError,
)

logger = logging.getLogger(__name__)


@dataclass
class EmbedConfig:
    endpoint_url: str
    model_name: str
    api_key_env: str = "EMBED_API_KEY"
    batch_size: int = 64
    timeout_s: float = 10.0
    max_retries: int = 3
    backoff_s: float = 0.25
    parallel_requests: int = 4
    expect_dim: int | None = 1536
    offline: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_retries < 0:
            raise ValidationError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.timeout_s <= 0:
            raise ValidationError(f"timeout_s must be positive, got {self.timeout_s}")
        if self.parallel_requests < 1:
            raise ValidationError(f"parallel_requests must be >= 1, got {self.parallel_requests}")


def cache_key(model_name: str, text: str) -> str:
    digest = hashlib.sha256()
    digest.update(model_name.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(text.encode("utf-8"))
    return digest.hexdigest()


class EmbedCache:
    """In-memory map from cache key to vector, thread-safe for writers."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    def get(self, model_name: str, text: str) -> np.ndarray | None:
        return self._store.get(cache_key(model_name, text))

    def put(self, model_name: str, text: str, vector: np.ndarray) -> None:
        with self._lock:
            self._store[cache_key(model_name, text)] = np.asarray(vector, dtype=np.float64)


def load_cache(path: str) -> EmbedCache:
    """Load a JSON-lines cache file; a missing file yields an empty cache.

    Any unparseable or malformed line raises CacheLoadError with the byte
    offset, rather than silently keeping a partial load.
    """
    cache = EmbedCache()
    if not os.path.exists(path):
        return cache
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0
    for line in blob.split(b"\n"):
        if line.strip():
            try:
                obj = json.loads(line.decode("utf-8"))
                key, vec = obj["k"], obj["v"]
                if not isinstance(key, str) or not isinstance(vec, list):
                    raise ValueError("entry must be {'k': str, 'v': [numbers]}")
                arr = np.asarray(vec, dtype=np.float64)
                if arr.ndim != 1 or not np.isfinite(arr).all():
                    raise ValueError("vector must be a flat list of finite numbers")
            except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
                raise CacheLoadError(f"{path}: corrupt cache entry at byte {offset}: {exc}") from exc
            cache._store[key] = arr
        offset += len(line) + 1
    return cache


def flush_cache(cache: EmbedCache, path: str) -> None:
    """Write the whole cache as JSON lines (floats round-trip exactly via repr)."""
    with open(path, "w") as fh:
        for key, vec in cache._store.items():
            fh.write(json.dumps({"k": key, "v": vec.tolist()}) + "\n")


def _post_json(url: str, payload: dict, headers: dict, timeout_s: float) -> tuple[int, dict]:
    """Single HTTP POST; seam for tests. Returns (status_code, parsed body)."""
    resp = requests.post(url, json=payload, headers=headers, timeout=timeout_s)
    try:
        body = resp.json()
    except ValueError:
        body = {}
    return resp.status_code, body


def _request_batch(batch: list[str], cfg: EmbedConfig, api_key: str) -> list[np.ndarray]:
    payload = {"model": cfg.model_name, "input": batch}
    headers = {"Authorization": f"Bearer {api_key}"}
    last_failure = "no attempt made"
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(min(cfg.backoff_s * 2.0 ** (attempt - 1), 10.0))
        try:
            status, body = _post_json(cfg.endpoint_url, payload, headers, cfg.timeout_s)
        except requests.RequestException as exc:
            # exc carries the request, which carries the auth header: keep only the class
            last_failure = f"transport failure ({type(exc).__name__})"
            logger.warning("embedding request attempt %d/%d failed: %s",
                           attempt + 1, cfg.max_retries + 1, last_failure)
            continue
        if status >= 500 or status == 429:
            last_failure = f"HTTP {status}"
            logger.warning("embedding service returned %s (attempt %d/%d)",
                           last_failure, attempt + 1, cfg.max_retries + 1)
            continue
        if status != 200:
            raise TransportError(f"embedding service returned HTTP {status}")
        rows = body.get("data")
        if not isinstance(rows, list) or len(rows) != len(batch):
            got = len(rows) if isinstance(rows, list) else "none"
            raise ValidationError(
                f"embedding response has {got} rows for a batch of {len(batch)}"
            )
        vectors = []
        for i, row in enumerate(rows):
            vec = np.asarray(row.get("embedding", []), dtype=np.float64)
            if cfg.expect_dim is not None and vec.shape != (cfg.expect_dim,):
                raise ValidationError(
                    f"embedding {i} has dimension {vec.shape}, expected ({cfg.expect_dim},)"
                )
            if vec.ndim != 1 or vec.size == 0:
                raise ValidationError(f"embedding {i} is not a flat non-empty vector")
            if not np.isfinite(vec).all():
                raise NumericError(f"embedding {i} contains non-finite values")
            vectors.append(vec)
        return vectors
    raise TransportError(
        f"embedding request failed after {cfg.max_retries + 1} attempts: {last_failure}"
    )


def save_poi_embeddings(
    path: str,
    ids: list[str],
    lats: np.ndarray,
    lons: np.ndarray,
    vectors: np.ndarray,
    model_name: str,
) -> None:
    """Write per-POI vectors with their coordinates (input to region pooling)."""
    from .container import write_container

    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValidationError(f"expected one vector per POI id, got {vectors.shape} for {len(ids)} ids")
    write_container(
        path,
        "poi_embeddings",
        [("vectors", vectors), ("lats", np.asarray(lats, dtype=np.float64)),
         ("lons", np.asarray(lons, dtype=np.float64))],
        {"ids": list(ids), "model_name": model_name},
    )


def load_poi_embeddings(path: str) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray, str]:
    from .container import expect_kind, read_container

    kind, arrays, meta = read_container(path)
    expect_kind(path, "poi_embeddings", kind)
    return (
        [str(i) for i in meta.get("ids", [])],
        arrays["lats"],
        arrays["lons"],
        arrays["vectors"],
        str(meta.get("model_name", "")),
    )


def embed_texts(texts: list[str], cfg: EmbedConfig, cache: EmbedCache) -> list[np.ndarray]:
    """Embed texts, serving from cache and fetching only the misses.

    Results come back in input order. Every fetched vector is written to the
    cache before returning. Offline mode never touches the network and raises
    OfflineMissError listing any uncached texts.
    """
    if not texts:
        raise ValidationError("embed_texts needs at least one text")
    for i, t in enumerate(texts):
        if not isinstance(t, str) or not t:
            raise ValidationError(f"text {i} is empty or not a string")

    results: dict[int, np.ndarray] = {}
    misses: list[str] = []
    seen = set()
    for i, t in enumerate(texts):
        hit = cache.get(cfg.model_name, t)
        if hit is not None:
            results[i] = hit
        elif t not in seen:
            seen.add(t)
            misses.append(t)

    if misses:
        if cfg.offline:
            raise OfflineMissError(misses)
        api_key = os.environ.get(cfg.api_key_env)
        if not api_key:
            raise ValidationError(
                f"online embedding needs the {cfg.api_key_env} environment variable set"
            )
        batches = [misses[i:i + cfg.batch_size] for i in range(0, len(misses), cfg.batch_size)]
        logger.info("fetching %d uncached texts in %d batches", len(misses), len(batches))
        workers = min(cfg.parallel_requests, len(batches))
        if workers == 1:
            fetched = [_request_batch(b, cfg, api_key) for b in batches]
        else:
            with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
                fetched = list(pool.map(lambda b: _request_batch(b, cfg, api_key), batches))
        for batch, vectors in zip(batches, fetched):
            for text, vec in zip(batch, vectors):
                cache.put(cfg.model_name, text, vec)
        for i, t in enumerate(texts):
            if i not in results:
                results[i] = cache.get(cfg.model_name, t)

    return [results[i] for i in range(len(texts))]
