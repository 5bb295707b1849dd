"""Packaged prompt templates and their pinned digests."""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load_resource(name: str) -> str:
    try:
        return resources.files("canoe.resources").joinpath(name).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise RuntimeError(f"missing packaged resource {name!r}") from exc


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def pinned_digest(name: str) -> str:
    stem = name.rsplit(".", 1)[0]
    return load_resource(f"{stem}.sha256").strip()


def resource_digests(names: list[str]) -> dict[str, str]:
    return {n: sha256_text(load_resource(n)) for n in names}
