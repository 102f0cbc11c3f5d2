from __future__ import annotations

import platform
import subprocess
import time
import uuid
from dataclasses import asdict, dataclass
from typing import Any, Optional

import numpy as np

from app.core.config import Settings


def _git_commit() -> Optional[str]:
    try:
        r = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            check=True,
        )
        return r.stdout.strip() or None
    except Exception:
        return None


@dataclass(frozen=True)
class RunMeta:
    run_id: str
    timestamp: str
    git_commit: Optional[str]
    python: str
    numpy: str
    os: str

    command: str
    seed: int
    workers: int
    config_hash: str


def new_run_id() -> str:
    return f"{time.strftime('%Y%m%d_%H%M%S')}_{uuid.uuid4().hex[:8]}"


def current_run_meta(command: str, settings: Settings, seed: int, workers: int = 1) -> RunMeta:
    return RunMeta(
        run_id=new_run_id(),
        timestamp=time.strftime("%Y-%m-%d %H:%M:%S"),
        git_commit=_git_commit(),
        python=platform.python_version(),
        numpy=np.__version__,
        os=f"{platform.system()} {platform.release()}",
        command=command,
        seed=seed,
        workers=workers,
        config_hash=settings.config_hash(),
    )


def run_meta_dict(
    command: str,
    settings: Settings,
    seed: int,
    workers: int = 1,
    extra: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    d = asdict(current_run_meta(command, settings, seed, workers))
    d["settings"] = settings.model_dump(mode="json")
    if extra:
        d.update(extra)
    return d
