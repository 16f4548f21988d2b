"""Scene representation: a density/color field queryable at world points.

Two interchangeable backends feed a shallow MLP:

* ``DenseGridBackend``: a raw-density voxel grid plus a feature voxel grid,
  trilinearly interpolated. Density comes straight from the density grid
  through a softplus; the MLP supplies color only.
* ``HashGridBackend``: a multiresolution hash table. Each level hashes the
  8 surrounding lattice corners into a shared table, interpolates
  trilinearly, and the per-level features are concatenated. The MLP produces
  both raw density (exp-activated) and color.

Color is always sigmoid-bounded; the view direction enters the color head
through a sine/cosine band encoding.

Checkpoint format (binary, little-endian):

====================  ======================================================
bytes 0..3            magic ``NSFC``
byte  4               format version (1)
byte  5               backend tag: 0 dense, 1 hash
bytes 6..9            uint32 length of the JSON header
header                UTF-8 JSON, sorted keys: {"config": ..., "arrays":
                      [{"name": str, "shape": [int]}, ...]}
payload               the arrays' float32 data, C order, concatenated in
                      header order
============================================================================
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "HASH_PRIMES",
    "DenseGridConfig",
    "HashGridConfig",
    "MLPConfig",
    "FieldSample",
    "DenseGridBackend",
    "HashGridBackend",
    "ShallowMLP",
    "RadianceField",
    "hash_index",
    "interpolate",
    "query",
    "encode_direction",
    "make_field",
    "save_field",
    "load_field",
]

# The conventional spatial-hashing primes; the leading 1 leaves the x
# coordinate unmixed so nearby cells spread across the table.
HASH_PRIMES = (1, 2654435761, 805459861)

# Raw-density clamps keeping exp/softplus outputs finite in float32.
_RAW_SIGMA_MAX_EXP = 25.0
_RAW_SIGMA_MAX_SOFTPLUS = 80.0
_RAW_RGB_CLAMP = 30.0


@dataclass(frozen=True)
class FieldSample:
    """One field evaluation: non-negative density and RGB color in [0,1]."""

    sigma: float
    color: np.ndarray

    def __post_init__(self) -> None:
        color = np.asarray(self.color, dtype=np.float64)
        if not (self.sigma >= 0 and np.isfinite(self.sigma)):
            raise ValueError("sigma must be finite and non-negative")
        if color.shape != (3,) or not ((color >= 0) & (color <= 1)).all():
            raise ValueError("color must be an RGB triple in [0,1]")
        object.__setattr__(self, "color", color)


@dataclass(frozen=True)
class DenseGridConfig:
    density_res: int = 96
    feature_res: int = 48
    feature_dim: int = 6
    init_raw_density: float = -4.0

    def __post_init__(self) -> None:
        if self.density_res < 2 or self.feature_res < 2:
            raise ValueError("grid resolutions must be at least 2")


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    table_size: int = 2**14
    feature_dim: int = 2
    base_resolution: int = 16
    growth_factor: float = 1.5

    def __post_init__(self) -> None:
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.growth_factor <= 1:
            raise ValueError("growth_factor must exceed 1")


@dataclass(frozen=True)
class MLPConfig:
    hidden: int = 64
    hidden_layers: int = 2
    dir_bands: int = 4


def hash_index(cell: np.ndarray, table_size: int, primes: tuple[int, int, int] = HASH_PRIMES) -> np.ndarray:
    """Spatial hash of integer lattice cells into ``[0, table_size)``.

    index = (x*p0 XOR y*p1 XOR z*p2) mod table_size, with the products taken
    in 64-bit unsigned wrap-around arithmetic. ``cell`` is (..., 3),
    components non-negative. Deterministic, pure.
    """
    c = np.asarray(cell)
    if c.shape[-1] != 3:
        raise ValueError("cell must have a trailing dimension of 3")
    if (np.asarray(c) < 0).any():
        raise ValueError("cell components must be non-negative")
    c = c.astype(np.uint64)
    p = np.asarray(primes, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = (c[..., 0] * p[0]) ^ (c[..., 1] * p[1]) ^ (c[..., 2] * p[2])
    return (h % np.uint64(table_size)).astype(np.int64)


def encode_direction(dirs: torch.Tensor, bands: int) -> torch.Tensor:
    """Sine/cosine band encoding of unit directions.

    (P, 3) -> (P, 3*2*bands); frequencies 2^k, k = 0..bands-1. Layout is
    per component: all sine bands, then all cosine bands.
    """
    freqs = 2.0 ** torch.arange(bands, dtype=dirs.dtype, device=dirs.device)
    ang = dirs.unsqueeze(-1) * freqs  # (P, 3, bands)
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (P, 3, 2*bands)
    return enc.reshape(dirs.shape[0], -1)


class DenseGridBackend(torch.nn.Module):
    """Raw-density grid + feature grid over the unit cube, trilinear."""

    def __init__(self, cfg: DenseGridConfig = DenseGridConfig()):
        super().__init__()
        self.cfg = cfg
        rd, rf, fd = cfg.density_res, cfg.feature_res, cfg.feature_dim
        self.density_grid = torch.nn.Parameter(
            torch.full((1, 1, rd, rd, rd), cfg.init_raw_density)
        )
        self.feature_grid = torch.nn.Parameter(
            (torch.rand(1, fd, rf, rf, rf) * 2 - 1) * 1e-4
        )

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def interpolate(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(P, 3) unit-cube points -> (features (P, F), raw density (P,))."""
        g = (x.clamp(0.0, 1.0) * 2 - 1).view(1, -1, 1, 1, 3)
        kw = dict(mode="bilinear", padding_mode="border", align_corners=True)
        raw = F.grid_sample(self.density_grid.to(x.dtype), g, **kw).view(-1)
        feats = F.grid_sample(self.feature_grid.to(x.dtype), g, **kw)
        return feats.view(self.cfg.feature_dim, -1).t(), raw


class HashGridBackend(torch.nn.Module):
    """Multiresolution hashed feature lattice over the unit cube.

    Level l uses lattice resolution floor(base * growth^l); each of a
    point's 8 surrounding corners is hashed into this level's slice of the
    table and the gathered features are combined with trilinear weights,
    then concatenated across levels.
    """

    def __init__(self, cfg: HashGridConfig = HashGridConfig()):
        super().__init__()
        self.cfg = cfg
        self.table = torch.nn.Parameter(
            (torch.rand(cfg.levels * cfg.table_size, cfg.feature_dim) * 2 - 1) * 1e-4
        )
        res = [int(cfg.base_resolution * cfg.growth_factor**l) for l in range(cfg.levels)]
        self.register_buffer("resolutions", torch.tensor(res, dtype=torch.int64))
        # int32 wrap-around gives bit-identical low bits to the 64-bit hash
        # for power-of-two table sizes <= 2^32 (verified against hash_index
        # in the tests); int32 multiplies are several times faster here.
        primes32 = torch.tensor(
            [p & 0xFFFFFFFF for p in HASH_PRIMES], dtype=torch.int64
        ).to(torch.int32)
        self.register_buffer("primes32", primes32)
        offs = torch.tensor(
            [[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.int32
        )
        self.register_buffer("corner_offsets", offs)
        lvl = torch.arange(cfg.levels, dtype=torch.int64) * cfg.table_size
        self.register_buffer("level_offsets", lvl.view(-1, 1, 1))

    @property
    def feature_dim(self) -> int:
        return self.cfg.levels * self.cfg.feature_dim

    def corner_indices(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(P,3) points -> (corner table indices (L,P,8), weights (L,P,8))."""
        L = self.cfg.levels
        res = self.resolutions.to(x.dtype).view(L, 1, 1)
        pos = x.clamp(0.0, 1.0).unsqueeze(0) * res  # (L, P, 3)
        c0 = pos.floor()
        frac = pos - c0
        c0 = c0.to(torch.int32)
        offs = self.corner_offsets.view(1, 1, 8, 3)
        corners = c0.unsqueeze(2) + offs  # (L, P, 8, 3)
        p = self.primes32
        idx = ((corners[..., 0] * p[0]) ^ (corners[..., 1] * p[1]) ^ (corners[..., 2] * p[2]))
        idx = (idx & (self.cfg.table_size - 1)).to(torch.int64) + self.level_offsets
        offs_f = offs.to(x.dtype)
        w = (offs_f * frac.unsqueeze(2) + (1 - offs_f) * (1 - frac.unsqueeze(2))).prod(-1)
        return idx, w

    def interpolate(self, x: torch.Tensor) -> torch.Tensor:
        """(P, 3) unit-cube points -> concatenated features (P, L*F)."""
        L, Fd = self.cfg.levels, self.cfg.feature_dim
        idx, w = self.corner_indices(x)
        feats = F.embedding(idx.reshape(-1), self.table.to(x.dtype))
        feats = feats.view(L, x.shape[0], 8, Fd)
        interp = (feats * w.unsqueeze(-1)).sum(dim=2)  # (L, P, F)
        return interp.permute(1, 0, 2).reshape(x.shape[0], L * Fd)


class ShallowMLP(torch.nn.Module):
    """Feature trunk with a density head and a direction-aware color head."""

    def __init__(self, in_dim: int, cfg: MLPConfig = MLPConfig()):
        super().__init__()
        self.cfg = cfg
        layers: list[torch.nn.Module] = []
        d = in_dim
        for _ in range(cfg.hidden_layers):
            layers += [torch.nn.Linear(d, cfg.hidden), torch.nn.ReLU()]
            d = cfg.hidden
        self.trunk = torch.nn.Sequential(*layers)
        self.density_head = torch.nn.Linear(d, 1)
        self.color_head = torch.nn.Linear(d + 3 * 2 * cfg.dir_bands, 3)
        # zero-init heads: a fresh field is gray (sigmoid(0) = 0.5) and
        # near-transparent; the density offset keeps the initial fog light
        torch.nn.init.zeros_(self.density_head.weight)
        torch.nn.init.constant_(self.density_head.bias, -2.0)
        torch.nn.init.zeros_(self.color_head.weight)
        torch.nn.init.zeros_(self.color_head.bias)

    def forward(self, feats: torch.Tensor, dirs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(feats)
        raw_sigma = self.density_head(h).squeeze(-1)
        enc = encode_direction(dirs, self.cfg.dir_bands)
        raw_rgb = self.color_head(torch.cat([h, enc], dim=-1))
        rgb = torch.sigmoid(raw_rgb.clamp(-_RAW_RGB_CLAMP, _RAW_RGB_CLAMP))
        return raw_sigma, rgb


class RadianceField(torch.nn.Module):
    """A backend + MLP pair mapping (point, direction) to (sigma, color).

    The scene lives in the unit cube [0,1]^3; queries outside are clamped.
    """

    def __init__(self, backend: DenseGridBackend | HashGridBackend, mlp: ShallowMLP):
        super().__init__()
        self.backend = backend
        self.mlp = mlp

    @property
    def kind(self) -> str:
        return "dense" if isinstance(self.backend, DenseGridBackend) else "hash"

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(3), np.ones(3)

    def query_batch(self, x: torch.Tensor, dirs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(P,3) points + (P,3) unit dirs -> (sigma (P,), color (P,3))."""
        if isinstance(self.backend, DenseGridBackend):
            feats, raw_grid = self.backend.interpolate(x)
            _, rgb = self.mlp(feats, dirs)
            sigma = F.softplus(raw_grid.clamp(max=_RAW_SIGMA_MAX_SOFTPLUS))
        else:
            feats = self.backend.interpolate(x)
            raw_sigma, rgb = self.mlp(feats, dirs)
            sigma = torch.exp(raw_sigma.clamp(max=_RAW_SIGMA_MAX_EXP))
        return sigma, rgb


def interpolate(backend: DenseGridBackend | HashGridBackend, x: np.ndarray | torch.Tensor):
    """Trilinear backend interpolation at world points (numpy-friendly).

    Dense backend returns (features, raw_density); hash backend returns the
    concatenated per-level features.
    """
    xt = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    with torch.no_grad():
        out = backend.interpolate(xt)
    if isinstance(out, tuple):
        return out[0].numpy(), out[1].numpy()
    return out.numpy()


def query(field: RadianceField, x: np.ndarray, direction: np.ndarray) -> FieldSample:
    """Evaluate the field at one world point along one unit direction."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must be unit length")
    dtype = next(field.parameters()).dtype
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64)).view(1, 3).to(dtype)
    dt = torch.as_tensor(d).view(1, 3).to(dtype)
    with torch.no_grad():
        sigma, rgb = field.query_batch(xt, dt)
    return FieldSample(sigma=float(sigma[0]), color=rgb[0].double().numpy())


def make_field(kind: str = "dense", seed: int = 0, *,
               dense_cfg: DenseGridConfig | None = None,
               hash_cfg: HashGridConfig | None = None,
               mlp_cfg: MLPConfig | None = None) -> RadianceField:
    """Construct a freshly initialized field of the given backend kind."""
    torch.manual_seed(seed)
    mlp_cfg = mlp_cfg or MLPConfig()
    if kind == "dense":
        backend = DenseGridBackend(dense_cfg or DenseGridConfig())
    elif kind == "hash":
        backend = HashGridBackend(hash_cfg or HashGridConfig())
    else:
        raise ValueError(f"unknown backend kind {kind!r}")
    mlp = ShallowMLP(backend.feature_dim, mlp_cfg)
    return RadianceField(backend, mlp)


# --- checkpoint io ---

_MAGIC = b"NSFC"
_VERSION = 1
_BACKEND_TAGS = {"dense": 0, "hash": 1}


def save_field(field: RadianceField, path) -> None:
    """Write the field to the package's binary checkpoint format."""
    backend_cfg = asdict(field.backend.cfg)
    config = {
        "kind": field.kind,
        "backend": backend_cfg,
        "mlp": asdict(field.mlp.cfg),
    }
    state = field.state_dict()
    names = sorted(k for k, v in state.items() if v.is_floating_point())
    arrays = [{"name": n, "shape": list(state[n].shape)} for n in names]
    header = json.dumps({"arrays": arrays, "config": config}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", _VERSION, _BACKEND_TAGS[field.kind]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(state[n].detach().cpu().numpy().astype("<f4").tobytes(order="C"))


def load_field(path) -> RadianceField:
    """Read a checkpoint written by :func:`save_field`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a field checkpoint (magic {magic!r})")
        version, tag = struct.unpack("<BB", fh.read(2))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = header["config"]
        kind = config["kind"]
        if _BACKEND_TAGS.get(kind) != tag:
            raise ValueError("backend tag does not match header config")
        if kind == "dense":
            field = make_field("dense", dense_cfg=DenseGridConfig(**config["backend"]),
                               mlp_cfg=MLPConfig(**config["mlp"]))
        else:
            field = make_field("hash", hash_cfg=HashGridConfig(**config["backend"]),
                               mlp_cfg=MLPConfig(**config["mlp"]))
        state = field.state_dict()
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            state[spec["name"]] = torch.from_numpy(data.copy())
        field.load_state_dict(state)
    return field
