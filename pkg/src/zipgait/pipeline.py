"""Dataset-level orchestration shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import csv
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import data_io
from .engine import frame_generator, sample_silhouettes, to_diffusion_range, train_step_diffgait
from .errors import InvalidParameter
from .heat_skeleton import load_limbs, make_heat_sequence
from .net import DiffGait, NetConfig
from .pgi import stage_one_combine
from .recognition import EmbeddingSet, RecognizerConfig, ZipGait, train_step_zipgait
from .schedule import NoiseSchedule, cosine_schedule
from .synthetic import generate_identity, render_sequence


@dataclass
class SequenceRecord:
    identity: str
    sequence: str
    skeleton: np.ndarray
    heat: np.ndarray
    silhouettes: np.ndarray | None = None

    @property
    def key(self) -> str:
        return f"{self.identity}/{self.sequence}"


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    d = cfg["diffusion"]
    return cosine_schedule(d["T"], d["cosine_s"], d["beta_min"], d["beta_max"])


def scaled_lr(base: float, milestones, gamma: float, step: int) -> float:
    return base * gamma ** sum(step >= m for m in milestones)


# -- data -------------------------------------------------------------------

def generate_dataset(out: Path, identities: int, seqs_per_id: int, frames: int, seed: int,
                     jitter: float = 0.0) -> data_io.DatasetManifest:
    """Write a synthetic dataset (skeleton JSON + silhouette arrays) and its manifest."""
    out = Path(out)
    (out / "skeletons").mkdir(parents=True, exist_ok=True)
    (out / "silhouettes").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(identities):
        spec = generate_identity(seed * 100_003 + i)
        for s in range(seqs_per_id):
            ident, seq = f"id{i:03d}", f"seq{s:02d}"
            phase = 2 * np.pi * np.random.default_rng([seed, i, s]).random()
            skel, sil = render_sequence(spec, frames, phase=phase, jitter=jitter, seed=seed * 1000 + s)
            entry = data_io.SequenceEntry(ident, seq, f"skeletons/{ident}_{seq}.json",
                                          f"silhouettes/{ident}_{seq}.npy")
            data_io.write_pair(entry, skel, sil, out)
            entries.append(entry)
    manifest = data_io.DatasetManifest(entries, out)
    data_io.write_manifest(out / "manifest.jsonl", manifest)
    return manifest


def resolve_manifest(path) -> Path:
    path = Path(path)
    return path / "manifest.jsonl" if path.is_dir() else path


def load_records(manifest: data_io.DatasetManifest, cfg: dict) -> list[SequenceRecord]:
    limbs = load_limbs(cfg["heat"]["limbs"])
    canvas = tuple(cfg["heat"]["canvas"])
    records = []
    for e in manifest.entries:
        skel, sil = data_io.load_pair(e, manifest.root)
        heat = make_heat_sequence(skel, limbs, cfg["heat"]["sigma"], canvas)
        records.append(SequenceRecord(e.identity, e.sequence, skel, heat, sil))
    return records


def protocol_split(records: list[SequenceRecord], cfg: dict, manifest: data_io.DatasetManifest | None = None):
    """Return ``(train, gallery, probe)`` record lists according to ``cfg["data"]``.

    ``subject_dependent``: every identity trains; its last ``probe_seqs_per_id``
    sequences are probes and the rest are both training data and gallery.
    ``subject_independent``: identities are partitioned; test identities
    contribute gallery and probe sequences only.
    """
    d = cfg["data"]
    n_probe = d["probe_seqs_per_id"]
    by_id: dict[str, list[SequenceRecord]] = {}
    for r in records:
        by_id.setdefault(r.identity, []).append(r)
    for seqs in by_id.values():
        seqs.sort(key=lambda r: r.sequence)
    train, gallery, probe = [], [], []
    if d["protocol"] == "subject_dependent":
        for ident in sorted(by_id):
            seqs = by_id[ident]
            head, tail = seqs[:-n_probe] if n_probe else seqs, seqs[-n_probe:] if n_probe else []
            train += head
            gallery += head
            probe += tail
    elif d["protocol"] == "subject_independent":
        if manifest is None:
            manifest = data_io.DatasetManifest(
                [data_io.SequenceEntry(r.identity, r.sequence, "") for r in records])
        split = data_io.split_identities(manifest, d["train_fraction"], cfg["seed"])
        for ident in sorted(by_id):
            seqs = by_id[ident]
            if ident in split.train_ids:
                train += seqs
            else:
                gallery += seqs[:-n_probe] if n_probe else seqs
                probe += seqs[-n_probe:] if n_probe else []
    else:
        raise InvalidParameter(f"unknown protocol {d['protocol']!r}")
    return train, gallery, probe


def sample_sequences(labels: list[str], ids_per_batch: int, seqs_per_id: int, generator: torch.Generator):
    """Indices for an (identities x sequences) batch."""
    by_id: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_id.setdefault(lab, []).append(i)
    ids = sorted(by_id)
    chosen = torch.randperm(len(ids), generator=generator)[:ids_per_batch].tolist()
    out = []
    for c in chosen:
        pool = by_id[ids[c]]
        if len(pool) >= seqs_per_id:
            pick = torch.randperm(len(pool), generator=generator)[:seqs_per_id].tolist()
        else:
            pick = torch.randint(len(pool), (seqs_per_id,), generator=generator).tolist()
        out += [pool[p] for p in pick]
    return out


def append_csv(path: Path, header: list[str], rows: list[list]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerows(rows)


# -- DiffGait ---------------------------------------------------------------

def build_diffgait(cfg: dict) -> DiffGait:
    torch.manual_seed(cfg["seed"])
    return DiffGait(NetConfig(C=cfg["diffgait"]["C"]))


def train_diffgait(model: DiffGait, records: list[SequenceRecord], cfg: dict, steps: int,
                   optimizer: torch.optim.Optimizer, start_step: int = 0, log_path: Path | None = None) -> list[float]:
    """Frame-level training on (identities x sequences) batches, one random frame per sequence."""
    dcfg = cfg["diffgait"]
    sched = schedule_from_config(cfg)
    labels = [r.identity for r in records]
    losses, rows = [], []
    for step in range(start_step, start_step + steps):
        g = torch.Generator().manual_seed(cfg["seed"] * 7_919 + step)
        idx = sample_sequences(labels, dcfg["ids_per_batch"], dcfg["seqs_per_id"], g)
        heat, sil = [], []
        for i in idx:
            f = int(torch.randint(len(records[i].heat), (1,), generator=g))
            heat.append(records[i].heat[f])
            sil.append(records[i].silhouettes[f])
        batch = (torch.from_numpy(np.stack(heat)), to_diffusion_range(torch.from_numpy(np.stack(sil))))
        for group in optimizer.param_groups:
            group["lr"] = scaled_lr(dcfg["lr"], dcfg["milestones"], dcfg["gamma"], step)
        t0 = time.perf_counter()
        loss = train_step_diffgait(model, batch, sched, optimizer, g)
        losses.append(loss)
        rows.append([step + 1, f"{loss:.8f}", f"{(time.perf_counter() - t0) * 1e3:.1f}"])
        if log_path is not None and (len(rows) >= 50 or step == start_step + steps - 1):
            append_csv(log_path, ["step", "loss", "wall_ms"], rows)
            rows = []
    return losses


def frame_key(identity: str, sequence: str, index: int) -> int:
    return zlib.crc32(f"{identity}/{sequence}/{index}".encode())


def multi_level_silhouettes(model: DiffGait, heat: np.ndarray, keys: list[int], cfg: dict,
                            steps: int | None = None, eta: float | None = None, chunk: int = 64) -> np.ndarray:
    """Sample ``(n, M, 1, H, W)`` predictions; frame ``i`` draws its noise from ``keys[i]``."""
    d = cfg["diffusion"]
    steps = d["steps"] if steps is None else steps
    eta = d["eta"] if eta is None else eta
    sched = schedule_from_config(cfg)
    heat_t = torch.from_numpy(np.ascontiguousarray(heat, dtype=np.float32))
    gens = [frame_generator(cfg["seed"], key) for key in keys]
    noise = [torch.randn((1, 1) + tuple(heat.shape[2:]), generator=g) for g in gens]
    if eta == 0:
        # deterministic sampler: only the initial draw is random, so frames can share a batch
        outs = [sample_silhouettes(model, heat_t[i:i + chunk], sched, steps, eta,
                                   init_noise=torch.cat(noise[i:i + chunk]))
                for i in range(0, len(keys), chunk)]
    else:
        outs = [sample_silhouettes(model, heat_t[i:i + 1], sched, steps, eta, generator=gens[i], init_noise=noise[i])
                for i in range(len(keys))]
    return torch.cat(outs).numpy()


def composites_for(model: DiffGait, records: list[SequenceRecord], cfg: dict) -> dict[str, np.ndarray]:
    """Stage-one composite silhouettes ``(n, 1, H, W)`` for every record, keyed by ``record.key``."""
    weights = cfg["pgi"]["weights"]
    if len(weights) != cfg["diffusion"]["steps"]:
        raise InvalidParameter(f"{len(weights)} fusion weights for {cfg['diffusion']['steps']} sampling steps")
    out = {}
    for r in records:
        keys = [frame_key(r.identity, r.sequence, i) for i in range(len(r.heat))]
        preds = multi_level_silhouettes(model, r.heat, keys, cfg)
        out[r.key] = stage_one_combine(torch.from_numpy(preds), weights).numpy()
    return out


# -- recognition ------------------------------------------------------------

def build_zipgait(cfg: dict, num_classes: int) -> ZipGait:
    r = cfg["recognition"]
    torch.manual_seed(cfg["seed"] + 1)
    return ZipGait(RecognizerConfig(num_classes=num_classes, fusion_channels=cfg["pgi"]["C_f"],
                                    width=r["width"], parts=r["parts"], dim=r["dim"]))


def make_sgd(model: ZipGait, cfg: dict) -> torch.optim.SGD:
    r = cfg["recognition"]
    return torch.optim.SGD(model.parameters(), lr=r["lr"], momentum=r["momentum"], weight_decay=r["weight_decay"])


def zipgait_batch(records, composites, idx, frames_per_seq: int, class_of: dict, generator: torch.Generator):
    sil, heat = [], []
    for i in idx:
        r = records[i]
        n = len(r.heat)
        if n >= frames_per_seq:
            f = torch.randperm(n, generator=generator)[:frames_per_seq].numpy()
        else:
            f = torch.randint(n, (frames_per_seq,), generator=generator).numpy()
        sil.append(composites[r.key][f])
        heat.append(r.heat[f])
    labels = torch.tensor([class_of[records[i].identity] for i in idx])
    return torch.from_numpy(np.stack(sil)), torch.from_numpy(np.stack(heat)), labels


def train_zipgait(model: ZipGait, records, composites, cfg: dict, steps: int, optimizer,
                  class_of: dict, start_step: int = 0, log_path: Path | None = None) -> list[dict]:
    r = cfg["recognition"]
    labels = [rec.identity for rec in records]
    history, rows = [], []
    for step in range(start_step, start_step + steps):
        g = torch.Generator().manual_seed(cfg["seed"] * 6_151 + step)
        idx = sample_sequences(labels, r["ids_per_batch"], r["seqs_per_id"], g)
        batch = zipgait_batch(records, composites, idx, r["frames_per_seq"], class_of, g)
        for group in optimizer.param_groups:
            group["lr"] = scaled_lr(r["lr"], r["milestones"], r["gamma"], step)
        t0 = time.perf_counter()
        vals = train_step_zipgait(model, batch, optimizer, r["margin"])
        history.append(vals)
        rows.append([step + 1, f"{vals['total']:.8f}", f"{vals['triplet']:.8f}", f"{vals['ce']:.8f}",
                     f"{(time.perf_counter() - t0) * 1e3:.1f}"])
        if log_path is not None and (len(rows) >= 50 or step == start_step + steps - 1):
            append_csv(log_path, ["step", "loss", "triplet", "ce", "wall_ms"], rows)
            rows = []
    return history


@torch.no_grad()
def embed_records(model: ZipGait, records, composites) -> list[EmbeddingSet]:
    model.eval()
    out = []
    for r in records:
        sil = torch.from_numpy(composites[r.key])[None]
        heat = torch.from_numpy(r.heat)[None]
        emb = model.embed_features(model.fuse(sil, heat))[0]
        out.append(EmbeddingSet(parts=emb.numpy(), label=r.identity, seq=r.sequence))
    return out
