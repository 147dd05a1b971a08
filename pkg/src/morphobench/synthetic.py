"""Seeded stand-in datasets rendered from anisotropic Gaussian blobs.

Controls grow denser with time at a per-cell-line rate. Drug-treated crops
share the control renderer; a drug of fragmentation strength f replaces a
share f of the cells by clusters of smaller, dimmer fragments. Lower
concentration levels scale f down by 10x per level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CONTROL_MARKER, CROP_SIZE, Dataset, SampleMeta
from .errors import ConfigError

N_CONCENTRATION_LEVELS = 5
FRAGMENTS_PER_CELL = 3
FRAGMENT_SIZE_FACTOR = 0.35
FRAGMENT_INTENSITY_FACTOR = 0.6
BACKGROUND = 0.08


@dataclass
class SyntheticConfig:
    n_cell_lines: int = 2
    n_drugs: int = 3
    images_per_condition: int = 10
    cell_density_range: tuple = (3.0, 18.0)
    cell_size_px: tuple = (5.0, 9.0)
    fragmentation_strength: list = field(default_factory=lambda: [0.8, 0.8, 0.3])
    growth_rate: list = field(default_factory=lambda: [0.5, 0.7])
    noise_sigma: float = 0.02
    seed: int = 0
    time_points: tuple = (0.0, 24.0, 48.0, 72.0)
    drug_names: list | None = None
    cell_line_names: list | None = None

    def __post_init__(self):
        self.cell_density_range = tuple(float(x) for x in self.cell_density_range)
        self.cell_size_px = tuple(float(x) for x in self.cell_size_px)
        self.time_points = tuple(float(t) for t in self.time_points)
        if isinstance(self.fragmentation_strength, (int, float)):
            self.fragmentation_strength = [float(self.fragmentation_strength)] * self.n_drugs
        if isinstance(self.growth_rate, (int, float)):
            self.growth_rate = [float(self.growth_rate)] * self.n_cell_lines
        self.fragmentation_strength = [float(f) for f in self.fragmentation_strength]
        self.growth_rate = [float(g) for g in self.growth_rate]

    def validate(self) -> None:
        if self.images_per_condition <= 0:
            raise ConfigError("images_per_condition must be positive")
        if self.n_cell_lines <= 0 or self.n_drugs <= 0:
            raise ConfigError("need at least one cell line and one drug")
        lo, hi = self.cell_density_range
        if not 0 < lo < hi:
            raise ConfigError("cell_density_range must satisfy 0 < min < max")
        lo, hi = self.cell_size_px
        if not 0 < lo < hi:
            raise ConfigError("cell_size_px must satisfy 0 < min < max")
        if len(self.fragmentation_strength) != self.n_drugs:
            raise ConfigError("one fragmentation_strength per drug required")
        if any(not 0.0 <= f <= 1.0 for f in self.fragmentation_strength):
            raise ConfigError("fragmentation_strength must lie in [0, 1]")
        if len(self.growth_rate) != self.n_cell_lines:
            raise ConfigError("one growth_rate per cell line required")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not self.time_points or min(self.time_points) < 0:
            raise ConfigError("time_points must be non-empty and non-negative")
        if self.drug_names is not None and len(self.drug_names) != self.n_drugs:
            raise ConfigError("drug_names length must equal n_drugs")
        if CONTROL_MARKER in (self.drug_names or []):
            raise ConfigError(f"{CONTROL_MARKER} is reserved for controls")
        if self.cell_line_names is not None and len(self.cell_line_names) != self.n_cell_lines:
            raise ConfigError("cell_line_names length must equal n_cell_lines")

    @property
    def drugs(self) -> list[str]:
        return list(self.drug_names or [f"DRUG{i + 1:02d}" for i in range(self.n_drugs)])

    @property
    def cell_lines(self) -> list[str]:
        return list(self.cell_line_names or [f"CL{i + 1:02d}" for i in range(self.n_cell_lines)])

    def to_json(self) -> dict:
        d = asdict(self)
        d["cell_density_range"] = list(self.cell_density_range)
        d["cell_size_px"] = list(self.cell_size_px)
        d["time_points"] = list(self.time_points)
        return d


def cell_density(config: SyntheticConfig, growth_rate: float, time_point: float) -> float:
    """Expected cells per crop: exponential growth (rate per 24 h) capped at the maximum."""
    lo, hi = config.cell_density_range
    return float(min(hi, lo * np.exp(growth_rate * time_point / 24.0)))


def render_params(config: SyntheticConfig, cell_line: int, time_point: float,
                  fragmentation: float) -> dict:
    """Renderer arguments for one condition; controls pass fragmentation=0."""
    return {
        "density": cell_density(config, config.growth_rate[cell_line], time_point),
        "size_range": config.cell_size_px,
        "fragmentation": float(fragmentation),
        "noise_sigma": config.noise_sigma,
    }


_GRID = np.arange(CROP_SIZE, dtype=np.float64)


def _add_blob(canvas, cy, cx, sigma_major, sigma_minor, angle, amplitude):
    r = int(np.ceil(3.5 * sigma_major))
    y0, y1 = max(0, int(cy) - r), min(CROP_SIZE, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(CROP_SIZE, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    dy = _GRID[y0:y1, None] - cy
    dx = _GRID[None, x0:x1] - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    canvas[y0:y1, x0:x1] += amplitude * np.exp(
        -0.5 * ((u / sigma_major) ** 2 + (v / sigma_minor) ** 2)
    )


def render_crop(rng: np.random.Generator, density: float, size_range: tuple,
                fragmentation: float, noise_sigma: float) -> np.ndarray:
    """Draw one 64x64 crop in [0, 1]."""
    lo_size, hi_size = size_range
    n_cells = max(1, int(rng.poisson(density)))
    n_fragmented = int(round(fragmentation * n_cells))
    canvas = np.full((CROP_SIZE, CROP_SIZE), BACKGROUND)
    for k in range(n_cells):
        cy, cx = rng.uniform(0, CROP_SIZE, size=2)
        sigma_major = rng.uniform(lo_size, hi_size) / 2.0
        sigma_minor = sigma_major * rng.uniform(0.5, 1.0)
        angle = rng.uniform(0, np.pi)
        amplitude = rng.uniform(0.5, 0.8)
        if k < n_fragmented:
            for _ in range(FRAGMENTS_PER_CELL):
                fy, fx = rng.normal(0.0, 1.5 * sigma_major, size=2)
                _add_blob(
                    canvas, cy + fy, cx + fx,
                    FRAGMENT_SIZE_FACTOR * sigma_major,
                    FRAGMENT_SIZE_FACTOR * sigma_minor,
                    rng.uniform(0, np.pi),
                    FRAGMENT_INTENSITY_FACTOR * amplitude,
                )
        else:
            _add_blob(canvas, cy, cx, sigma_major, sigma_minor, angle, amplitude)
    if noise_sigma > 0:
        canvas += rng.normal(0.0, noise_sigma, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Render the full condition grid.

    Per cell line: every drug at each of the 5 concentration levels at the
    latest time point, then a control time series over ``time_points``;
    ``images_per_condition`` crops each.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    t_last = max(config.time_points)
    ipc = config.images_per_condition
    images, meta = [], []

    for li, line in enumerate(config.cell_lines):
        for di, drug in enumerate(config.drugs):
            for level in range(N_CONCENTRATION_LEVELS):
                f = config.fragmentation_strength[di] * 10.0 ** (level - (N_CONCENTRATION_LEVELS - 1))
                params = render_params(config, li, t_last, f)
                for k in range(ipc):
                    images.append(render_crop(rng, **params))
                    meta.append(SampleMeta(
                        sample_id=f"{line}_{drug}_c{level}_t{t_last:g}_{k:05d}",
                        cell_line=line, drug=drug, concentration_level=level,
                        time_point=t_last, label="drug", replicate=f"r{k % 3}",
                    ))
        for t in config.time_points:
            params = render_params(config, li, t, 0.0)
            for k in range(ipc):
                images.append(render_crop(rng, **params))
                meta.append(SampleMeta(
                    sample_id=f"{line}_{CONTROL_MARKER}_t{t:g}_{k:05d}",
                    cell_line=line, drug=CONTROL_MARKER, concentration_level=0,
                    time_point=t, label="control", replicate=f"r{k % 3}",
                ))

    return Dataset(np.stack(images), tuple(meta), {"synthetic": config.to_json()})
