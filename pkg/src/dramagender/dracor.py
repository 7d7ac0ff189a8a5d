"""DraCor REST client with an on-disk cache and a fully offline mode.

Online mode talks to the public DraCor API (corpus listing and per-play TEI
download) with polite rate limiting, and keys the cache by play slug plus a
content digest so corpus drift is detectable. Offline mode reads TEI files
from a local directory and never opens a network connection.

Cache layout: ``<cache_dir>/<corpus_id>/<play_name>.xml`` plus
``manifest.json`` alongside.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .fsutil import atomic_write_text, sha256_text, write_json

log = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://dracor.org/api/v1"
DEFAULT_CORPUS = "cal"


class DracorError(Exception):
    pass


class NetworkUnavailableError(DracorError):
    """The API could not be reached; offline mode is required."""


class UnknownCorpusError(DracorError):
    pass


class FetchError(DracorError):
    """HTTP failure or malformed (non-XML) response for one play."""


class CacheError(DracorError):
    pass


@dataclass(frozen=True)
class PlayRef:
    corpus_id: str
    play_name: str  # DraCor slug
    title: str = ""


@dataclass
class CorpusManifest:
    corpus_id: str
    plays: list[PlayRef]
    fetched_at: str
    content_digests: dict[str, str] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "fetched_at": self.fetched_at,
            "plays": [{"play_name": p.play_name, "title": p.title} for p in self.plays],
            "content_digests": dict(sorted(self.content_digests.items())),
            "errors": dict(sorted(self.errors.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusManifest":
        plays = [PlayRef(data["corpus_id"], p["play_name"], p.get("title", ""))
                 for p in data["plays"]]
        return cls(corpus_id=data["corpus_id"], plays=plays,
                   fetched_at=data.get("fetched_at", ""),
                   content_digests=dict(data.get("content_digests", {})),
                   errors=dict(data.get("errors", {})))


def _requests_transport(url: str) -> tuple[int, bytes]:
    import requests

    try:
        resp = requests.get(url, timeout=60)
    except requests.RequestException as exc:
        raise NetworkUnavailableError(f"cannot reach {url}: {exc}") from exc
    return resp.status_code, resp.content


class DracorClient:
    """Fetches play lists and TEI documents, caching everything on disk.

    ``transport`` is a callable ``url -> (status_code, body_bytes)``; tests
    inject fakes, and offline mode never calls it at all.
    """

    def __init__(self, base_url: str = DEFAULT_BASE_URL, transport=None,
                 offline: bool = False, tei_dir: Path | str | None = None,
                 min_request_interval: float = 0.1, max_workers: int = 1,
                 sleep=time.sleep, clock=time.monotonic):
        self.base_url = base_url.rstrip("/")
        self.transport = transport or _requests_transport
        self.offline = offline
        self.tei_dir = Path(tei_dir) if tei_dir else None
        self.min_request_interval = min_request_interval
        self.max_workers = max(1, max_workers)
        self._sleep = sleep
        self._clock = clock
        self._last_request = None
        self._rate_lock = threading.Lock()
        self._manifest_lock = threading.Lock()  # manifest mutation is single-writer

    # --- low-level ---------------------------------------------------------

    def _request(self, url: str) -> tuple[int, bytes]:
        if self.offline:
            raise AssertionError("offline mode must not open network connections")
        with self._rate_lock:
            if self._last_request is not None:
                elapsed = self._clock() - self._last_request
                if elapsed < self.min_request_interval:
                    self._sleep(self.min_request_interval - elapsed)
            self._last_request = self._clock()
        return self.transport(url)

    # --- operations ---------------------------------------------------------

    def list_plays(self, corpus_id: str = DEFAULT_CORPUS) -> list[PlayRef]:
        """All plays in the corpus, sorted by play_name."""
        if self.offline:
            return self._list_plays_offline(corpus_id)
        status, body = self._request(f"{self.base_url}/corpora/{corpus_id}")
        if status == 404:
            raise UnknownCorpusError(f"corpus {corpus_id!r} not found")
        if status != 200:
            raise FetchError(f"corpus listing for {corpus_id!r} failed with HTTP {status}")
        try:
            data = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FetchError(f"corpus listing for {corpus_id!r}: malformed response") from exc
        entries = data.get("plays", data.get("dramas", []))
        refs = [PlayRef(corpus_id, e["name"], e.get("title", "")) for e in entries
                if e.get("name")]
        return sorted(refs, key=lambda r: r.play_name)

    def _list_plays_offline(self, corpus_id: str) -> list[PlayRef]:
        if self.tei_dir is None:
            raise DracorError("offline mode needs tei_dir")
        files = sorted(self.tei_dir.glob("*.xml"), key=lambda p: p.stem)
        if not files:
            log.warning("offline corpus directory %s contains no TEI files", self.tei_dir)
            return []
        refs = []
        for f in files:
            title = f.stem
            try:
                for _, elem in ET.iterparse(f, events=("end",)):
                    if elem.tag.rsplit("}", 1)[-1] == "title":
                        text = " ".join("".join(elem.itertext()).split())
                        if text:
                            title = text
                        break
            except ET.ParseError:
                pass
            refs.append(PlayRef(corpus_id, f.stem, title))
        return refs

    def fetch_tei(self, play: PlayRef, cache_dir: Path | str) -> str:
        """Full TEI text for one play via the warm cache or the API.

        A cached file whose digest matches the manifest entry is returned
        without network access; a digest mismatch triggers a refetch.
        """
        if self.offline:
            if self.tei_dir is None:
                raise DracorError("offline mode needs tei_dir")
            path = self.tei_dir / f"{play.play_name}.xml"
            if not path.exists():
                raise FetchError(f"offline TEI file missing: {path}")
            return path.read_text(encoding="utf-8")

        corpus_dir = Path(cache_dir) / play.corpus_id
        cache_path = corpus_dir / f"{play.play_name}.xml"

        if cache_path.exists():
            text = cache_path.read_text(encoding="utf-8")
            actual = sha256_text(text)
            with self._manifest_lock:
                manifest = self._load_manifest(corpus_dir)
                expected = manifest.get("content_digests", {}).get(play.play_name)
                if expected is None:
                    manifest.setdefault("content_digests", {})[play.play_name] = actual
                    self._store_manifest(corpus_dir, manifest)
                    return text
            if expected == actual:
                return text
            log.warning("cache digest mismatch for %s; refetching", play.play_name)

        text = self._download_tei(play)
        try:
            atomic_write_text(cache_path, text)
        except OSError as exc:
            raise CacheError(f"cannot write cache file {cache_path}: {exc}") from exc
        with self._manifest_lock:
            manifest = self._load_manifest(corpus_dir)
            manifest.setdefault("content_digests", {})[play.play_name] = sha256_text(text)
            self._store_manifest(corpus_dir, manifest)
        return text

    def _download_tei(self, play: PlayRef) -> str:
        url = f"{self.base_url}/corpora/{play.corpus_id}/plays/{play.play_name}/tei"
        status, body = self._request(url)
        if status != 200:
            raise FetchError(f"{play.play_name}: HTTP {status}")
        try:
            text = body.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FetchError(f"{play.play_name}: undecodable response") from exc
        stripped = text.lstrip()
        if not stripped.startswith("<"):
            raise FetchError(f"{play.play_name}: non-XML payload")
        try:
            ET.fromstring(text)
        except ET.ParseError as exc:
            raise FetchError(f"{play.play_name}: malformed XML: {exc}") from exc
        return text

    def sync_corpus(self, corpus_id: str = DEFAULT_CORPUS,
                    cache_dir: Path | str = "cache") -> CorpusManifest:
        """Cache every play of the corpus and persist the manifest.

        Idempotent: a second run with a warm cache performs no network
        fetches. Per-play failures are recorded in ``manifest.errors`` and
        do not abort the run.
        """
        plays = self.list_plays(corpus_id)
        corpus_dir = Path(cache_dir) / corpus_id
        errors: dict[str, str] = {}
        ok_plays: list[PlayRef] = []

        def fetch_one(play: PlayRef):
            try:
                self.fetch_tei(play, cache_dir)
                return play, None
            except (DracorError, OSError) as exc:
                return play, str(exc)

        if self.max_workers > 1 and not self.offline:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(fetch_one, plays))
        else:
            results = [fetch_one(p) for p in plays]
        for play, err in results:
            if err is None:
                ok_plays.append(play)
            else:
                errors[play.play_name] = err
                log.warning("sync %s: %s failed: %s", corpus_id, play.play_name, err)

        stored = self._load_manifest(corpus_dir)
        manifest = CorpusManifest(
            corpus_id=corpus_id,
            plays=sorted(ok_plays, key=lambda p: p.play_name),
            fetched_at=datetime.now(timezone.utc).isoformat(),
            content_digests=dict(stored.get("content_digests", {})),
            errors=errors,
        )
        manifest.content_digests = {
            p.play_name: manifest.content_digests[p.play_name]
            for p in manifest.plays if p.play_name in manifest.content_digests
        }
        self._store_manifest(corpus_dir, manifest.to_dict())
        return manifest

    # --- manifest persistence ----------------------------------------------

    @staticmethod
    def _manifest_path(corpus_dir: Path) -> Path:
        return corpus_dir / "manifest.json"

    def _load_manifest(self, corpus_dir: Path) -> dict:
        path = self._manifest_path(corpus_dir)
        if path.exists():
            try:
                return json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                log.warning("corrupt manifest %s; starting fresh", path)
        return {"corpus_id": corpus_dir.name, "plays": [], "content_digests": {}}

    def _store_manifest(self, corpus_dir: Path, manifest: dict) -> None:
        write_json(self._manifest_path(corpus_dir), manifest)


def load_manifest(cache_dir: Path | str, corpus_id: str) -> CorpusManifest:
    path = Path(cache_dir) / corpus_id / "manifest.json"
    if not path.exists():
        raise CacheError(f"no manifest at {path}")
    return CorpusManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
