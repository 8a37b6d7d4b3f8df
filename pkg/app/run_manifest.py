import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import arrow

from app.config import RUN_MANIFEST_NAME, VERSION
from app.errors import DataError
from app.file_utils import read_json, write_json
from app.log import LOG


@dataclass
class RunManifest:
    """What a cli subcommand ran with. argv replays the run."""

    subcommand: str
    argv: List[str]
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    out_dir: str = ""
    seed: Optional[int] = None
    version: str = VERSION
    run_id: str = ""
    created_at: str = ""

    def write(self, out_dir: str) -> str:
        """one manifest per output directory, an existing one is replaced"""
        if not self.created_at:
            self.created_at = arrow.utcnow().isoformat()
        self.out_dir = out_dir
        path = os.path.join(out_dir, RUN_MANIFEST_NAME)
        write_json(asdict(self), path)
        LOG.d("wrote run manifest %s", path)
        return path

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        if os.path.isdir(path):
            path = os.path.join(path, RUN_MANIFEST_NAME)
        d = read_json(path)
        try:
            return cls(**d)
        except TypeError as e:
            raise DataError(f"{path} is not a run manifest: {e}")
