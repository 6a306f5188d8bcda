"""Per-tile neural fields with hand-written reverse mode.

A :class:`TileField` owns a multi-resolution hash encoding, a small density
MLP emitting ``(sigma, embedding)`` and an occupancy grid.  A single
:class:`GlobalColorNet` maps embeddings and view directions to RGB for every
tile.  Each parameter group has its own :class:`Adam` whose step count
survives checkpointing.

Parameters are stored as float32; every forward/backward follows the
parameter dtype so a float64 copy (``astype``) can be used for gradient
checks.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

PRIMES = (1, 2654435761, 805459861)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


@dataclass
class FieldConfig:
    n_levels: int = 8
    log2_table_size: int = 15
    n_features: int = 2
    base_resolution: int = 16
    max_resolution: int = 256
    init_table_scale: float = 1e-4
    density_hidden: int = 64
    embedding_dim: int = 15
    density_max: float = 1e4
    density_bias: float = 0.0
    color_hidden: int = 64
    color_layers: int = 2
    view_frequencies: int = 4
    lr_encoding: float = 1e-2
    lr_density: float = 1e-2
    lr_color: float = 1e-3
    lr_decay: float = 1.0  # multiplicative per step, applied on the persistent count
    lr_color_decay: Optional[float] = None  # color net schedule; None follows lr_decay
    occupancy_resolution: int = 32
    occupancy_decay: float = 0.95
    occupancy_alpha_threshold: float = 0.01
    occupancy_interval: int = 16
    mean_step: float = 0.5  # metres; converts the alpha threshold to a density

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def color_decay(self) -> float:
        return self.lr_decay if self.lr_color_decay is None else self.lr_color_decay

    @property
    def occupancy_threshold(self) -> float:
        return self.occupancy_alpha_threshold / self.mean_step

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer ----------------------------------------------------------------

class Adam:
    """Adam with a persistent step count and exponential lr schedule."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.99), eps: float = 1e-15,
                 decay: float = 1.0, name: str = "params"):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay = decay
        self.name = name
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def current_lr(self) -> float:
        return self.lr * self.decay ** self.step_count

    def step(self, grads: dict) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"{self.name}.{k}")
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k, p in self.params.items():
            g = grads.get(k)
            m, v = self.m[k], self.v[k]
            if g is None:
                g = np.zeros_like(p)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


# -- hash encoding -------------------------------------------------------------------

# corner k = 4*dx + 2*dy + dz
_CORNERS = tuple(np.array([(k >> s) & 1 for k in range(8)]) for s in (2, 1, 0))


class HashEncoding:
    def __init__(self, cfg: FieldConfig, rng: np.random.Generator, dtype=np.float32):
        self.n_levels = cfg.n_levels
        self.table_size = cfg.table_size
        self.n_features = cfg.n_features
        L = cfg.n_levels
        growth = np.exp((np.log(cfg.max_resolution) - np.log(cfg.base_resolution)) / max(L - 1, 1))
        # the small nudge keeps exact powers (e.g. 4 -> 64 in 5 levels) from flooring down
        raw = cfg.base_resolution * growth ** np.arange(L)
        self.resolutions = np.floor(raw * (1 + 1e-9)).astype(np.int64)
        self.dense = (self.resolutions + 1) ** 3 <= self.table_size
        self.tables = rng.uniform(-cfg.init_table_scale, cfg.init_table_scale,
                                  size=(L, self.table_size, cfg.n_features)).astype(dtype)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features

    def _corner_indices(self, x):
        """Flat table indices (L, 8, n) and trilinear weights (L, 8, n)."""
        xt = np.ascontiguousarray(np.clip(x, 0.0, 1.0).T)              # (3, n)
        n = xt.shape[1]
        idx = np.empty((self.n_levels, 8, n), dtype=np.int64)
        w = np.empty((self.n_levels, 8, n), dtype=xt.dtype)
        mask = np.uint32(self.table_size - 1)
        dx, dy, dz = _CORNERS
        for lvl, res in enumerate(self.resolutions):
            pos = xt * xt.dtype.type(res)
            cell = np.minimum(np.floor(pos), res - 1)
            frac = pos - cell
            c0 = cell.astype(np.int64)
            wx, wy, wz = (np.stack([1 - frac[a], frac[a]]) for a in range(3))   # (2, n) each
            wxy = (wx[:, None, :] * wy[None, :, :]).reshape(4, n)
            w[lvl] = (wxy[:, None, :] * wz[None, :, :]).reshape(8, n)
            if self.dense[lvl]:
                side = res + 1
                base = c0[0] + side * c0[1] + side * side * c0[2]
                flat = base[None, :] + (dx + side * dy + side * side * dz)[:, None]
            else:
                cu = c0.astype(np.uint32)
                hx, hy, hz = (np.stack([cu[a], cu[a] + 1]) * np.uint32(PRIMES[a])
                              for a in range(3))
                flat = (hx[dx] ^ hy[dy] ^ hz[dz]) & mask
            idx[lvl] = flat + lvl * self.table_size
        return idx, w

    def forward(self, x):
        idx, w = self._corner_indices(x)
        flat = self.tables.reshape(-1, self.n_features)
        feats = np.empty((len(x), self.n_levels, self.n_features), dtype=w.dtype)
        for f in range(self.n_features):
            vals = np.take(flat[:, f], idx)                              # (L, 8, n)
            feats[:, :, f] = (vals * w).sum(axis=1).T
        return feats.reshape(len(x), -1), (idx, w)

    def backward(self, grad_out, cache) -> np.ndarray:
        idx, w = cache
        n = grad_out.shape[0]
        g = grad_out.reshape(n, self.n_levels, self.n_features)
        size = self.n_levels * self.table_size
        flat_idx = idx.ravel()
        grad = np.empty((size, self.n_features), dtype=self.tables.dtype)
        for f in range(self.n_features):
            contrib = (w * g[:, :, f].T[:, None, :]).ravel()
            grad[:, f] = np.bincount(flat_idx, weights=contrib, minlength=size)
        return grad.reshape(self.tables.shape)


# -- small dense layers -----------------------------------------------------------

def _init_linear(rng, fan_in, fan_out, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
    return W, b


def view_encoding(dirs, n_freq: int, dtype=np.float32) -> np.ndarray:
    d = np.asarray(dirs, dtype=dtype)
    parts = []
    for k in range(n_freq):
        a = (2.0 ** k) * np.pi * d
        parts += [np.sin(a), np.cos(a)]
    return np.concatenate(parts, axis=-1).astype(dtype)


class MLP:
    """ReLU hidden layers, linear output."""

    def __init__(self, sizes, rng, dtype=np.float32, prefix=""):
        self.n_layers = len(sizes) - 1
        self.params = {}
        for i in range(self.n_layers):
            W, b = _init_linear(rng, sizes[i], sizes[i + 1], dtype)
            self.params[f"{prefix}W{i}"] = W
            self.params[f"{prefix}b{i}"] = b
        self.prefix = prefix

    def forward(self, x):
        acts = [x]
        h = x
        p = self.prefix
        for i in range(self.n_layers):
            h = h @ self.params[f"{p}W{i}"] + self.params[f"{p}b{i}"]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0)
            acts.append(h)
        return h, acts

    def backward(self, grad_out, acts):
        grads = {}
        g = grad_out
        p = self.prefix
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (acts[i + 1] > 0)
            grads[f"{p}W{i}"] = acts[i].T @ g
            grads[f"{p}b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"{p}W{i}"].T
        return grads, g


# -- occupancy -----------------------------------------------------------------------

class OccupancyGrid:
    """Coarse max-EMA of density over a tile's unit cube."""

    def __init__(self, resolution: int, decay: float, threshold: float):
        self.resolution = resolution
        self.decay = decay
        self.threshold = threshold
        # fresh grids are fully occupied
        self.ema = np.ones((resolution,) * 3, dtype=np.float32)
        self.updates = 0

    @property
    def bits(self) -> np.ndarray:
        return self.ema >= self.threshold

    def update(self, density_fn, rng: np.random.Generator) -> None:
        r = self.resolution
        ijk = np.stack(np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij"), -1)
        ijk = ijk.reshape(-1, 3)
        pts = (ijk + rng.random(ijk.shape)) / r
        sigma = np.asarray(density_fn(pts.astype(np.float32)), dtype=np.float32).reshape((r,) * 3)
        self.ema = np.maximum(self.decay * self.ema, sigma).astype(np.float32)
        self.updates += 1

    def occupied(self, x_local) -> np.ndarray:
        r = self.resolution
        ijk = np.clip(np.floor(np.asarray(x_local) * r).astype(np.int64), 0, r - 1)
        return self.bits[ijk[:, 0], ijk[:, 1], ijk[:, 2]]

    def nbytes(self) -> int:
        return self.ema.nbytes


# -- fields ---------------------------------------------------------------------------

def tile_rng(seed: int, tile_id) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(v) + 1 for v in tile_id])


class TileField:
    def __init__(self, tile_id, cfg: FieldConfig, seed: int = 0, dtype=np.float32):
        self.tile_id = tuple(tile_id)
        self.cfg = cfg
        rng = tile_rng(seed, self.tile_id)
        self.encoding = HashEncoding(cfg, rng, dtype)
        self.density_net = MLP([self.encoding.output_dim, cfg.density_hidden,
                                1 + cfg.embedding_dim], rng, dtype)
        self.occupancy = OccupancyGrid(cfg.occupancy_resolution, cfg.occupancy_decay,
                                       cfg.occupancy_threshold)
        self.enc_params = {"tables": self.encoding.tables}
        self.enc_opt = Adam(self.enc_params, cfg.lr_encoding, decay=cfg.lr_decay, name="encoding")
        self.density_opt = Adam(self.density_net.params, cfg.lr_density, decay=cfg.lr_decay,
                                name="density")

    @property
    def dtype(self):
        return self.encoding.tables.dtype

    @property
    def step_count(self) -> int:
        return self.enc_opt.step_count

    def query_density(self, x_local):
        """``(sigma, embedding, cache)`` for local points ``(n, 3)``."""
        x = np.asarray(x_local, dtype=self.dtype)
        feats, enc_cache = self.encoding.forward(x)
        out, acts = self.density_net.forward(feats)
        raw = out[:, 0] + self.dtype.type(self.cfg.density_bias)
        cap = np.log(self.cfg.density_max)
        clamped = raw >= cap
        sigma = np.exp(np.minimum(raw, cap)).astype(self.dtype)
        emb = out[:, 1:]
        return sigma, emb, (enc_cache, acts, sigma, clamped)

    def density(self, x_local) -> np.ndarray:
        return self.query_density(x_local)[0]

    def backward(self, cache, grad_sigma, grad_emb) -> dict:
        enc_cache, acts, sigma, clamped = cache
        g_raw = np.where(clamped, 0, grad_sigma * sigma).astype(self.dtype)
        g_out = np.concatenate([g_raw[:, None], grad_emb.astype(self.dtype)], axis=1)
        grads, g_feats = self.density_net.backward(g_out, acts)
        grads["tables"] = self.encoding.backward(g_feats, enc_cache)
        return grads

    def apply_gradients(self, grads: dict) -> None:
        """One optimizer step; missing groups (no samples this batch) step with zero gradient."""
        self.enc_opt.step({k: v for k, v in grads.items() if k == "tables"})
        self.density_opt.step({k: v for k, v in grads.items() if k != "tables"})

    def maybe_update_occupancy(self, rng) -> bool:
        if self.step_count % self.cfg.occupancy_interval == 0:
            self.occupancy.update(self.density, rng)
            return True
        return False

    def param_arrays(self) -> dict:
        out = {"encoding.tables": self.encoding.tables}
        out.update({f"density.{k}": v for k, v in self.density_net.params.items()})
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.param_arrays().values())

    def nbytes(self) -> dict:
        params = sum(a.nbytes for a in self.param_arrays().values())
        moments = self.enc_opt.nbytes() + self.density_opt.nbytes()
        return {"params": params, "moments": moments, "occupancy": self.occupancy.nbytes()}

    def astype(self, dtype) -> "TileField":
        other = TileField.__new__(TileField)
        other.tile_id, other.cfg = self.tile_id, self.cfg
        enc = HashEncoding.__new__(HashEncoding)
        enc.__dict__.update(self.encoding.__dict__)
        enc.tables = self.encoding.tables.astype(dtype)
        other.encoding = enc
        net = MLP.__new__(MLP)
        net.__dict__.update(self.density_net.__dict__)
        net.params = {k: v.astype(dtype) for k, v in self.density_net.params.items()}
        other.density_net = net
        other.occupancy = self.occupancy
        other.enc_params = {"tables": enc.tables}
        other.enc_opt = Adam(other.enc_params, self.cfg.lr_encoding, decay=self.cfg.lr_decay,
                             name="encoding")
        other.density_opt = Adam(net.params, self.cfg.lr_density, decay=self.cfg.lr_decay,
                                 name="density")
        return other


class GlobalColorNet:
    def __init__(self, cfg: FieldConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng([int(seed), 0xC010])
        n_in = cfg.embedding_dim + 6 * cfg.view_frequencies
        sizes = [n_in] + [cfg.color_hidden] * cfg.color_layers + [3]
        self.net = MLP(sizes, rng, dtype)
        self.opt = Adam(self.net.params, cfg.lr_color, decay=cfg.color_decay, name="color")

    @property
    def params(self) -> dict:
        return self.net.params

    @property
    def dtype(self):
        return self.net.params["W0"].dtype

    def query_color(self, emb, view_dirs):
        enc = view_encoding(view_dirs, self.cfg.view_frequencies, self.dtype)
        x = np.concatenate([np.asarray(emb, dtype=self.dtype), enc], axis=1)
        out, acts = self.net.forward(x)
        rgb = (1.0 / (1.0 + np.exp(-out))).astype(self.dtype)
        return rgb, (acts, rgb)

    def backward(self, cache, grad_rgb):
        """Returns ``(param_grads, grad_embedding)``."""
        acts, rgb = cache
        g = (grad_rgb * rgb * (1 - rgb)).astype(self.dtype)
        grads, g_in = self.net.backward(g, acts)
        return grads, g_in[:, :self.cfg.embedding_dim]

    def apply_gradients(self, grads: dict) -> None:
        self.opt.step(grads)

    def nbytes(self) -> dict:
        return {"params": sum(a.nbytes for a in self.params.values()), "moments": self.opt.nbytes()}

    def astype(self, dtype) -> "GlobalColorNet":
        other = GlobalColorNet.__new__(GlobalColorNet)
        other.cfg = self.cfg
        net = MLP.__new__(MLP)
        net.__dict__.update(self.net.__dict__)
        net.params = {k: v.astype(dtype) for k, v in self.net.params.items()}
        other.net = net
        other.opt = Adam(net.params, self.cfg.lr_color, decay=self.cfg.color_decay, name="color")
        return other


# -- checkpoints -----------------------------------------------------------------------
#
# Layout (all little-endian):
#   b"TNCK"            magic
#   uint32             format version
#   uint32             header length in bytes
#   header             UTF-8 JSON: kind, tile id, config, step counts and an
#                      ordered list of {name, shape} for the arrays below
#   float32 arrays     raw data in header order (parameters, Adam m, Adam v,
#                      occupancy EMA)

MAGIC = b"TNCK"
VERSION = 1


def _write(path, header: dict, arrays: dict) -> None:
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    for k, v in arrays.items():
        if v.dtype != np.float32:
            raise TypeError(f"checkpoint array {k} must be float32, got {v.dtype}")
        buf.write(np.ascontiguousarray(v).astype("<f4", copy=False).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def _read(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tilenerf checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=off) \
            .reshape(spec["shape"]).astype(np.float32)
        off += 4 * n
    return header, arrays


def _opt_arrays(prefix: str, opt: Adam) -> dict:
    out = {}
    for k in opt.params:
        out[f"{prefix}.m.{k}"] = opt.m[k]
        out[f"{prefix}.v.{k}"] = opt.v[k]
    return out


def _restore_opt(prefix: str, opt: Adam, arrays: dict, step: int) -> None:
    opt.step_count = int(step)
    for k in opt.params:
        opt.m[k][...] = arrays[f"{prefix}.m.{k}"]
        opt.v[k][...] = arrays[f"{prefix}.v.{k}"]


def save_tile(field: TileField, path) -> None:
    arrays = dict(field.param_arrays())
    arrays.update(_opt_arrays("encoding", field.enc_opt))
    arrays.update(_opt_arrays("density", field.density_opt))
    arrays["occupancy.ema"] = field.occupancy.ema
    header = dict(kind="tile", tile_id=list(field.tile_id), config=field.cfg.to_dict(),
                  steps={"encoding": field.enc_opt.step_count,
                         "density": field.density_opt.step_count},
                  occupancy_updates=field.occupancy.updates)
    _write(path, header, arrays)


def load_tile(path) -> TileField:
    header, arrays = _read(path)
    if header.get("kind") != "tile":
        raise ValueError(f"{path}: not a tile checkpoint")
    cfg = FieldConfig(**header["config"])
    field = TileField(header["tile_id"], cfg)
    field.encoding.tables[...] = arrays["encoding.tables"]
    for k in field.density_net.params:
        field.density_net.params[k][...] = arrays[f"density.{k}"]
    _restore_opt("encoding", field.enc_opt, arrays, header["steps"]["encoding"])
    _restore_opt("density", field.density_opt, arrays, header["steps"]["density"])
    field.occupancy.ema = arrays["occupancy.ema"].copy()
    field.occupancy.updates = header["occupancy_updates"]
    return field


def save_color_net(net: GlobalColorNet, path) -> None:
    arrays = {f"color.{k}": v for k, v in net.params.items()}
    arrays.update(_opt_arrays("color", net.opt))
    _write(path, dict(kind="color", config=net.cfg.to_dict(),
                      steps={"color": net.opt.step_count}), arrays)


def load_color_net(path) -> GlobalColorNet:
    header, arrays = _read(path)
    if header.get("kind") != "color":
        raise ValueError(f"{path}: not a colour-net checkpoint")
    net = GlobalColorNet(FieldConfig(**header["config"]))
    for k in net.params:
        net.params[k][...] = arrays[f"color.{k}"]
    _restore_opt("color", net.opt, arrays, header["steps"]["color"])
    return net
