# core/manifest.py
from __future__ import annotations

import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from config import PROJECT_ROOT
from .errors import UsageError
from .json_utils import dump_json

logger = logging.getLogger(__name__)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe(root: Path = PROJECT_ROOT) -> str:
    """
    `git describe --always --dirty` of the source tree, or "unknown" outside a repository.
    """
    try:
        import git
        repo = git.Repo(root, search_parent_directories=True)
        return repo.git.describe("--always", "--dirty")
    except Exception:  # no git binary, no repo, or no commits yet
        return "unknown"


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    corpus_sha256: Optional[str] = None
    seed: Optional[int] = None
    git: str = Field(default_factory=git_describe)
    started_at: str = Field(default_factory=now_iso)
    finished_at: Optional[str] = None
    outputs: List[str] = Field(default_factory=list)
    output_sha256: Dict[str, str] = Field(default_factory=dict)

    def finish(self, path: Path, outputs: List[Path]) -> Path:
        """
        Stamp the end time and write the manifest. Call once per run.
        """
        if self.finished_at is not None:
            raise UsageError("manifest already written for this run")
        self.finished_at = now_iso()
        self.outputs = [str(p) for p in outputs]
        self.output_sha256 = {str(p): sha256_file(p) for p in outputs if Path(p).is_file()}
        path = Path(path)
        dump_json(self.model_dump(), path)
        logger.debug("manifest written to %s", path)
        return path
