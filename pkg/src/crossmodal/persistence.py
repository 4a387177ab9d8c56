"""On-disk formats: dataset directories, checkpoints, image exports.

Checkpoint layout (little-endian)::

    b"XMCKPT01"
    u32 header length, header JSON (utf-8, sorted keys)
    u32 blob count
    per blob: u32 name length, name, u32 ndim, u32 dims..., float32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import MODALITIES, RunConfig, from_dict
from .errors import ConfigurationError, DataError
from .geometry import CameraPose

DATASET_FORMAT = 1
CHECKPOINT_FORMAT = 1
MAGIC = b"XMCKPT01"


# ---------------------------------------------------------------------------
# datasets


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_dataset(ds, out_dir):
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc
    c = ds.config
    meta = {
        "format_version": DATASET_FORMAT,
        "image_shape": [c.image_size, c.image_size, 3],
        "modalities": list(MODALITIES),
        "splits": ds.splits,
        "ra_spec": ds.rig.ra_spec.to_dict(),
        "bounds": [c.z_near, c.z_far],
        "config": c.to_dict(),
        "data_hash": data_hash(c),
    }
    for sid in ds.scene_ids:
        sdir = root / sid
        sdir.mkdir(exist_ok=True)
        scene = ds.scenes[sid]
        poses = {
            f"{v:03d}": {"matrix": p.matrix.ravel().tolist(), "intrinsics": ds.rig.intr.to_list()}
            for v, p in enumerate(scene["poses"])
        }
        _dump_json(poses, sdir / "poses.json")
        for m in MODALITIES:
            for v in range(len(scene["poses"])):
                arr = np.ascontiguousarray(scene["images"][m][v], dtype="<f4")
                (sdir / f"{v:03d}.{m}.bin").write_bytes(arr.tobytes())
    _dump_json(meta, root / "meta.json")


def load_dataset(root, split: str | None = None):
    from .scenes import MultiModalDataset

    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no dataset at {root} (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != DATASET_FORMAT:
        raise DataError(f"unsupported dataset format {meta.get('format_version')!r}")
    config = from_dict(meta["config"])
    h, w, ch = meta["image_shape"]
    ids = meta["splits"][split] if split else sorted(sum(meta["splits"].values(), []))
    scenes = {}
    for sid in ids:
        sdir = root / sid
        try:
            poses_raw = json.loads((sdir / "poses.json").read_text())
        except FileNotFoundError as exc:
            raise DataError(f"scene {sid} is missing poses.json") from exc
        keys = sorted(poses_raw)
        poses = [CameraPose(np.array(poses_raw[k]["matrix"]).reshape(4, 4)) for k in keys]
        images = {}
        for m in meta["modalities"]:
            stack = []
            for k in keys:
                path = sdir / f"{k}.{m}.bin"
                if not path.exists():
                    raise DataError(f"missing image file {path}")
                arr = np.frombuffer(path.read_bytes(), dtype="<f4")
                if arr.size != h * w * ch:
                    raise DataError(f"{path} holds {arr.size} floats, expected {h * w * ch}")
                stack.append(arr.reshape(h, w, ch))
            images[m] = np.stack(stack).astype(np.float32)
        scenes[sid] = {"poses": poses, "images": images}
    splits = {k: [i for i in v if i in scenes] for k, v in meta["splits"].items()}
    return MultiModalDataset(config, scenes, splits)


def data_hash(config: RunConfig) -> str:
    """Hash of the geometry keys a model and a dataset must agree on."""
    import hashlib

    d = config.to_dict()
    keys = ["image_size", "focal", "z_near", "z_far", "cam_radius", "scene_half_extent",
            "ra_theta", "ra_r_min", "ra_r_max", "ra_elev"]
    return hashlib.sha256(json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints


def _write_blob(fh, name: str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise DataError("truncated checkpoint")
    return b


def write_checkpoint(path, header: dict, blobs: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = json.dumps({"format_version": CHECKPOINT_FORMAT, **header}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            _write_blob(fh, name, arr)


def read_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    blobs = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, hlen))
        if header.get("format_version") != CHECKPOINT_FORMAT:
            raise DataError(f"unsupported checkpoint format {header.get('format_version')!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            blobs[name] = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape).copy()
    return header, blobs


def save_registry(path, registry, optimizer=None, extra: dict | None = None):
    """Write registry parameters (and optional Adam state) to one checkpoint file."""
    params = dict(registry.named_parameters())
    blobs = {f"param/{n}": p.detach().cpu().numpy() for n, p in params.items()}
    if optimizer is not None:
        names = {id(p): n for n, p in params.items()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                blobs[f"adam/{n}/step"] = np.asarray(float(st["step"]), dtype=np.float32)
                blobs[f"adam/{n}/exp_avg"] = st["exp_avg"].detach().cpu().numpy()
                blobs[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
    header = {
        "config": registry.config.to_dict(),
        "config_hash": registry.config.model_hash(),
        "data_hash": data_hash(registry.config),
        "modalities": list(registry.modalities),
        **(extra or {}),
    }
    write_checkpoint(path, header, blobs)


def load_registry(path, expect_hash: str | None = None):
    """Rebuild (registry, header, adam_state) from a checkpoint."""
    from .nn import ModuleRegistry

    header, blobs = read_checkpoint(path)
    config = from_dict(header["config"])
    if config.model_hash() != header["config_hash"]:
        raise ConfigurationError("checkpoint header config does not match its recorded hash")
    if expect_hash is not None and expect_hash != header["config_hash"]:
        raise ConfigurationError(
            f"config hash mismatch: checkpoint {header['config_hash']} vs expected {expect_hash}"
        )
    registry = ModuleRegistry(config, header["modalities"])
    params = dict(registry.named_parameters())
    with torch.no_grad():
        for n, p in params.items():
            key = f"param/{n}"
            if key not in blobs:
                raise DataError(f"checkpoint lacks parameter {n}")
            p.copy_(torch.from_numpy(blobs[key]))
    adam = {}
    for key, arr in blobs.items():
        if key.startswith("adam/"):
            _, rest = key.split("/", 1)
            n, field = rest.rsplit("/", 1)
            adam.setdefault(n, {})[field] = arr
    return registry, header, adam


def restore_optimizer(optimizer, registry, adam: dict):
    params = dict(registry.named_parameters())
    for n, st in adam.items():
        p = params[n]
        optimizer.state[p] = {
            "step": torch.tensor(float(np.asarray(st["step"]).reshape(-1)[0]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(st["exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(st["exp_avg_sq"].copy()),
        }


# ---------------------------------------------------------------------------
# images


def to_uint8(img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    x = (np.asarray(img, dtype=np.float64) - lo) / (hi - lo)
    return np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)


def export_image(path, img: np.ndarray, lo: float = -1.0, hi: float = 1.0):
    """Write ``<path>.png`` (8-bit) and ``<path>.bin`` (raw float32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img, lo, hi)).save(path.with_suffix(".png"))
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())


def export_feature_image(path, feat):
    """Multi-channel raw blob plus a 3-channel min-max visualization."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = feat.data.detach().cpu().numpy()
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    Image.fromarray(to_uint8(feat.visualization(), 0.0, 1.0)).save(path.with_suffix(".png"))


def montage(panels: list[np.ndarray]) -> np.ndarray:
    """Side-by-side panels in [0, 1], nearest-resized to the tallest height."""
    h = max(p.shape[0] for p in panels)
    out = []
    for p in panels:
        rep = h // p.shape[0]
        out.append(np.repeat(np.repeat(p, rep, axis=0), rep, axis=1))
    return np.concatenate(out, axis=1)
