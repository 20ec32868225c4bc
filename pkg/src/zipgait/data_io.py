"""On-disk formats: keypoint JSON, array containers, manifests, checkpoints and run configs."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .errors import AlignmentError, IncompatibleCheckpoint, InvalidParameter, ParseError
from .heat_skeleton import NUM_JOINTS

CONFIG_SCHEMA = "zipgait-config/1"
CHECKPOINT_SCHEMA = "zipgait-checkpoint/1"


# -- arrays -----------------------------------------------------------------

def save_array(path, arr) -> None:
    """Write an ``.npy`` container (shape + dtype header, little-endian float32 payload)."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    with open(path, "wb") as fh:
        np.save(fh, arr, allow_pickle=False)


def load_array(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, OSError, EOFError) as exc:
        raise ParseError(path, f"unreadable array container: {exc}") from exc


def save_png(path, img01) -> None:
    from PIL import Image

    img = np.clip(np.asarray(img01, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


# -- keypoints --------------------------------------------------------------

def read_skeleton_json(path) -> tuple[str, str, np.ndarray]:
    """Parse ``{"id", "seq", "frames": [[[x, y, c] x 17], ...]}`` into ``(id, seq, (n, 17, 3))``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(path, f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not {"id", "seq", "frames"} <= doc.keys():
        raise ParseError(path, 'expected an object with "id", "seq" and "frames"')
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise ParseError(path, '"frames" must be a non-empty list')
    out = np.empty((len(frames), NUM_JOINTS, 3))
    for i, frame in enumerate(frames):
        try:
            arr = np.asarray(frame, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ParseError(path, f"non-numeric keypoints: {exc}", frame=i) from exc
        if arr.shape != (NUM_JOINTS, 3):
            raise ParseError(path, f"expected {NUM_JOINTS} joints of (x, y, c), got shape {arr.shape}", frame=i)
        if not np.all(np.isfinite(arr)):
            raise ParseError(path, "non-finite keypoint value", frame=i)
        if np.any(arr[:, 2] < 0) or np.any(arr[:, 2] > 1):
            raise ParseError(path, "confidence outside [0, 1]", frame=i)
        out[i] = arr
    return str(doc["id"]), str(doc["seq"]), out


def write_skeleton_json(path, identity: str, sequence: str, frames) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    doc = {"id": identity, "seq": sequence, "frames": [[[float(v) for v in j] for j in f] for f in frames]}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


# -- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class SequenceEntry:
    identity: str
    sequence: str
    skeleton: str
    silhouette: str | None = None


@dataclass
class DatasetManifest:
    entries: list[SequenceEntry]
    root: Path = Path(".")
    train_ids: frozenset[str] = field(default_factory=frozenset)
    test_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise InvalidParameter(f"identities in both train and test: {sorted(overlap)}")

    @property
    def identities(self) -> list[str]:
        return sorted({e.identity for e in self.entries})

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def subset(self, ids) -> list[SequenceEntry]:
        ids = set(ids)
        return [e for e in self.entries if e.identity in ids]

    def check_paths(self) -> None:
        for e in self.entries:
            for rel in (e.skeleton, e.silhouette):
                if rel is not None and not self.resolve(rel).exists():
                    raise ParseError(self.resolve(rel), "referenced by the manifest but missing")


def read_manifest(path) -> DatasetManifest:
    """Read a JSON-lines manifest; paths inside are relative to its directory."""
    path = Path(path)
    entries, train, test = [], set(), set()
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(path, str(exc)) from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = SequenceEntry(str(rec["identity"]), str(rec["sequence"]), rec["skeleton"], rec.get("silhouette"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(path, f"bad manifest line {n}: {exc}") from exc
        entries.append(entry)
        split = rec.get("split")
        if split == "train":
            train.add(entry.identity)
        elif split == "test":
            test.add(entry.identity)
    manifest = DatasetManifest(entries, path.parent, frozenset(train), frozenset(test))
    manifest.check_paths()
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = []
    for e in manifest.entries:
        rec = {"identity": e.identity, "sequence": e.sequence, "skeleton": e.skeleton}
        if e.silhouette is not None:
            rec["silhouette"] = e.silhouette
        if e.identity in manifest.train_ids:
            rec["split"] = "train"
        elif e.identity in manifest.test_ids:
            rec["split"] = "test"
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pair(entry: SequenceEntry, root=Path(".")) -> tuple[np.ndarray, np.ndarray | None]:
    root = Path(root)
    _, _, skel = read_skeleton_json(root / entry.skeleton)
    if entry.silhouette is None:
        return skel, None
    sil = load_array(root / entry.silhouette)
    if sil.ndim != 4 or sil.shape[1] != 1:
        raise ParseError(root / entry.silhouette, f"expected (n, 1, h, w) silhouettes, got {sil.shape}")
    if len(sil) != len(skel):
        raise AlignmentError(f"{entry.identity}/{entry.sequence}: {len(skel)} skeleton frames "
                             f"but {len(sil)} silhouettes")
    return skel, sil


def write_pair(entry: SequenceEntry, skel, sil, root=Path(".")) -> None:
    root = Path(root)
    write_skeleton_json(root / entry.skeleton, entry.identity, entry.sequence, skel)
    if entry.silhouette is not None and sil is not None:
        save_array(root / entry.silhouette, sil)


def split_identities(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Deterministic identity-level train/test partition."""
    if not 0.0 <= train_fraction <= 1.0:
        raise InvalidParameter(f"train_fraction must lie in [0, 1], got {train_fraction}")
    ids = manifest.identities
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train = frozenset(ids[i] for i in order[:n_train])
    return replace(manifest, train_ids=train, test_ids=frozenset(ids) - train)


# -- configs ----------------------------------------------------------------

DEFAULT_CONFIG = {
    "schema": CONFIG_SCHEMA,
    "seed": 0,
    "heat": {"sigma": 2.0, "canvas": [64, 44], "limbs": None},
    "diffusion": {"T": 1000, "cosine_s": 0.008, "beta_min": 1e-8, "beta_max": 0.999, "steps": 5, "eta": 0.0},
    "diffgait": {
        "C": 64, "lr": 0.01, "ids_per_batch": 16, "seqs_per_id": 4,
        "steps": 60000, "milestones": [], "gamma": 0.1,
    },
    "pgi": {"weights": [0.0, 0.0, 0.2, 0.3, 0.5], "C_f": 32},
    "recognition": {
        "parts": 16, "dim": 64, "width": 32, "margin": 0.2, "lr": 0.1, "momentum": 0.9, "weight_decay": 0.0005,
        "ids_per_batch": 8, "seqs_per_id": 4, "frames_per_seq": 8,
        "steps": 60000, "milestones": [], "gamma": 0.1,
    },
    "data": {"protocol": "subject_independent", "train_fraction": 0.5, "probe_seqs_per_id": 2},
    "synthetic": {"identities": 8, "seqs_per_id": 8, "frames": 30, "jitter": 0.5},
}


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise InvalidParameter(f"unknown config key: {prefix}{key}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val, f"{prefix}{key}.")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Load a YAML run config over the defaults, then apply dotted-key overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ParseError(path, f"unreadable config: {exc}") from exc
        if doc.get("schema") != CONFIG_SCHEMA:
            raise ParseError(path, f"config schema must be {CONFIG_SCHEMA!r}, got {doc.get('schema')!r}")
        cfg = _merge(cfg, doc)
    for dotted, val in (overrides or {}).items():
        if val is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise InvalidParameter(f"unknown config key: {dotted}")
        node[leaf] = val
    return cfg


def bundled_config(name: str) -> Path:
    from importlib import resources

    return Path(str(resources.files("zipgait.configs").joinpath(name)))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, modules: dict[str, torch.nn.Module], meta: dict,
                    optimizers: dict[str, torch.optim.Optimizer] | None = None) -> None:
    """Write a zip archive: ``manifest.json`` plus one raw little-endian float32 blob per array.

    ``modules`` maps a group name to a module whose parameters are stored under
    that group; optimizer state tensors go under ``optim/<name>``.
    """
    arrays, records = {}, []
    for group, module in modules.items():
        for name, tensor in module.state_dict().items():
            key = f"{group}/{name}"
            arrays[key] = tensor
            records.append({"name": key, "group": group, "shape": list(tensor.shape), "dtype": "<f4"})
    optim_meta = {}
    for oname, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        optim_meta[oname] = {"param_groups": sd["param_groups"], "state": {}}
        for pid, pstate in sd["state"].items():
            keys = []
            for k, v in pstate.items():
                key = f"optim/{oname}/{pid}/{k}"
                arrays[key] = v if torch.is_tensor(v) else torch.tensor(float(v))
                records.append({"name": key, "group": f"optim/{oname}", "shape": list(arrays[key].shape),
                                "dtype": "<f4"})
                keys.append(k)
            optim_meta[oname]["state"][str(pid)] = keys
    manifest = dict(meta)
    manifest.update({"schema": CHECKPOINT_SCHEMA, "arrays": records, "optimizers": optim_meta})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for rec in records:
            data = arrays[rec["name"]].detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
            zf.writestr(f"arrays/{rec['name']}.bin", data)


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict[str, torch.Tensor]

    def group(self, name: str) -> dict[str, torch.Tensor]:
        prefix = name + "/"
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def param_count(self, group: str) -> int:
        return sum(int(np.prod(r["shape"], dtype=np.int64)) for r in self.manifest["arrays"] if r["group"] == group)

    def load_module(self, group: str, module: torch.nn.Module) -> None:
        module.load_state_dict(self.group(group))

    def load_optimizer(self, name: str, opt: torch.optim.Optimizer) -> None:
        meta = self.manifest["optimizers"][name]
        state = {}
        for pid, keys in meta["state"].items():
            state[int(pid)] = {k: self.arrays[f"optim/{name}/{pid}/{k}"] for k in keys}
        opt.load_state_dict({"param_groups": meta["param_groups"], "state": state})


def load_checkpoint(path, expect_hash: str | None = None) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("schema") != CHECKPOINT_SCHEMA:
                raise IncompatibleCheckpoint(f"{path}: schema {manifest.get('schema')!r}, "
                                             f"expected {CHECKPOINT_SCHEMA!r}")
            arrays = {}
            for rec in manifest["arrays"]:
                raw = zf.read(f"arrays/{rec['name']}.bin")
                shape = tuple(rec["shape"])
                if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
                    raise IncompatibleCheckpoint(f"{path}: array {rec['name']} has {len(raw)} bytes")
                arrays[rec["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    except IncompatibleCheckpoint:
        raise
    except (zipfile.BadZipFile, KeyError, OSError, EOFError, json.JSONDecodeError, zipfile.LargeZipFile) as exc:
        raise IncompatibleCheckpoint(f"{path}: unreadable checkpoint ({exc})") from exc
    if expect_hash is not None and manifest.get("config_hash") != expect_hash:
        raise IncompatibleCheckpoint(f"{path}: config hash {manifest.get('config_hash')} != {expect_hash}")
    return Checkpoint(manifest, arrays)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps_json(obj) -> str:
    buf = io.StringIO()
    json.dump(obj, buf, indent=2, sort_keys=True)
    return buf.getvalue() + "\n"
