import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from src.utils.errors import ConfigError


def load_config(config_path: str = "config.yaml") -> Dict[str, Any]:
    """
    Load the configuration from the YAML file

    Args:
        config_path: Path to the config file, defaults to config.yaml

    Returns:
        Configuration dictionary
    """
    try:
        with open(config_path, 'r') as file:
            config = yaml.safe_load(file)
        return config or {}
    except FileNotFoundError:
        raise FileNotFoundError(f"Configuration file not found: {config_path}")
    except yaml.YAMLError as e:
        raise ValueError(f"Error parsing YAML configuration: {str(e)}")


def parse_region(text: str) -> Tuple[str, int, int]:
    """Parse chrom:start-end (commas allowed in numbers)"""
    try:
        chrom, span = text.rsplit(":", 1)
        start, end = span.replace(",", "").split("-")
        return chrom, int(start), int(end)
    except ValueError:
        raise ConfigError(f"region must look like chrom:start-end, got '{text}'")


@dataclass
class RunConfig:
    """
    Every knob of a run, serialized into the run manifest
    """

    matrices: List[str] = field(default_factory=list)
    beds: List[str] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)
    resolution: int = 10000
    region: Optional[str] = None
    levels: int = 3
    qs: List[float] = field(default_factory=lambda: [0.9, 0.5, 0.5])
    K: int = 30
    beta0: Optional[float] = None
    tol: float = 1e-6
    max_iter: int = 50
    window: int = 300
    overlap: int = 50
    jaccard_merge: float = 0.8
    conserved_j: float = 0.7
    specific_j: float = 0.4
    p_cutoff: float = 0.05
    fdr: bool = False
    normalize: bool = True
    seed: int = 0
    threads: int = 1
    log_dir: str = "logs"
    out: str = "tadlp_out"

    @classmethod
    def from_sources(cls, config: Optional[Dict[str, Any]] = None,
                     overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """
        Build a config from YAML defaults overlaid with command-line values

        Override entries that are None are ignored. TADLP_THREADS (from the
        environment or a .env file) replaces the thread count.
        """
        load_dotenv()
        known = {f.name for f in fields(cls)}
        values: Dict[str, Any] = {}
        for source in (config or {}, overrides or {}):
            for key, value in source.items():
                if key not in known:
                    raise ConfigError(f"unknown configuration field: {key}")
                if value is not None:
                    values[key] = value

        threads = os.getenv("TADLP_THREADS")
        if threads:
            try:
                values["threads"] = int(threads)
            except ValueError:
                raise ConfigError(f"TADLP_THREADS must be an integer, got '{threads}'")

        config_obj = cls(**values)
        config_obj.qs = [float(q) for q in config_obj.qs]
        return config_obj

    @property
    def region_tuple(self) -> Optional[Tuple[str, int, int]]:
        return parse_region(self.region) if self.region else None

    def validate(self, require_beds: bool = True) -> "RunConfig":
        """
        Check every field against its allowed range; raise ConfigError naming the field

        Args:
            require_beds: Whether every matrix needs a BED file (false for commands
                that never read covariates, such as test-region)
        """
        def require(ok: bool, name: str, message: str) -> None:
            if not ok:
                raise ConfigError(f"{name}: {message} (got {getattr(self, name)!r})")

        require(self.resolution >= 1, "resolution", "must be >= 1")
        require(self.levels >= 1, "levels", "must be >= 1")
        require(len(self.qs) == self.levels, "qs", f"need one quantile per level ({self.levels})")
        require(all(0 < q < 1 for q in self.qs), "qs", "quantiles must lie in (0, 1)")
        require(self.K >= 1, "K", "must be >= 1")
        require(self.beta0 is None or 0 < self.beta0 < 1, "beta0", "must lie in (0, 1)")
        require(self.tol > 0, "tol", "must be > 0")
        require(self.max_iter >= 1, "max_iter", "must be >= 1")
        require(self.window >= 2, "window", "must be >= 2")
        require(0 < self.overlap < self.window, "overlap", "must satisfy 0 < overlap < window")
        for name in ("jaccard_merge", "conserved_j", "specific_j"):
            require(0 <= getattr(self, name) <= 1, name, "must lie in [0, 1]")
        require(0 < self.p_cutoff < 1, "p_cutoff", "must lie in (0, 1)")
        require(self.threads >= 1, "threads", "must be >= 1")
        if self.region is not None:
            chrom, start, end = parse_region(self.region)
            require(0 <= start < end, "region", "needs 0 <= start < end")
            require(start % self.resolution == 0 and end % self.resolution == 0, "region",
                    "must be aligned to the resolution")
        require(not require_beds or len(self.matrices) == len(self.beds), "beds", "need one BED file per matrix")
        require(not self.labels or len(self.labels) == len(self.matrices), "labels", "need one label per matrix")
        return self

    def cell_labels(self) -> List[str]:
        if self.labels:
            return list(self.labels)
        return [os.path.splitext(os.path.basename(path))[0] for path in self.matrices]

    def calling_kwargs(self) -> Dict[str, Any]:
        """Keyword arguments shared by the hierarchical and joint callers"""
        return dict(levels=self.levels, qs=list(self.qs), K=self.K, p_cutoff=self.p_cutoff,
                    window_len=self.window, overlap=self.overlap, jaccard_merge=self.jaccard_merge,
                    fdr=self.fdr, beta0=self.beta0, tol=self.tol, max_iter=self.max_iter,
                    threads=self.threads)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
