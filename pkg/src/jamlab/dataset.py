"""On-disk feature datasets: deterministic parallel generation, manifest, loading."""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .jamgen import CLASS_NAMES, derive_seed, generate, tier
from .specfeat import PROFILES, FeatureProfile, extract_features

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    pass


class MissingSample(KeyError):
    pass


@dataclass(frozen=True)
class GenConfig:
    """What to synthesize. JNR values are assigned to a class's samples cyclically."""

    classes: tuple = (1, 2, 3, 4, 5)
    jnr_grid: tuple = tuple(range(0, 11))
    per_class: int = 200
    seed: int = 0
    profile: str = "desk"
    shard_size: int = 256

    def __post_init__(self):
        if not self.classes or any(c not in CLASS_NAMES for c in self.classes):
            raise DatasetError(f"classes must be ids in 1..{len(CLASS_NAMES)}")
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("duplicate class ids")
        if not self.jnr_grid:
            raise DatasetError("empty JNR grid")
        if self.per_class < 1 or self.shard_size < 1:
            raise DatasetError("per_class and shard_size must be positive")
        if self.profile not in PROFILES:
            raise DatasetError(f"unknown profile {self.profile!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("classes", "jnr_grid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def full_config(seed=0, per_class_per_jnr=1000):
    """All 21 classes over the -25..15 dB grid."""
    grid = tuple(range(-25, 16))
    return GenConfig(tuple(CLASS_NAMES), grid, per_class_per_jnr * len(grid), seed, "full")


def sample_plan(cfg):
    """Ordered (id, class_id, jnr, index) for every sample."""
    plan = []
    for cid in cfg.classes:
        for i in range(cfg.per_class):
            jnr = cfg.jnr_grid[i % len(cfg.jnr_grid)]
            plan.append((f"c{cid:02d}-{i:06d}", cid, jnr, i))
    return plan


def _sha(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _build_shard(args):
    seed, profile, items = args
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    tfs, psds = [], []
    for _, cid, jnr, i in items:
        _, x, _ = generate(seed, cid, jnr, i)
        a, b = extract_features(x, prof)
        tfs.append(a)
        psds.append(b)
    return np.stack(tfs), np.stack(psds)


def workers_from_env(default=None):
    val = os.environ.get("JAMLAB_THREADS")
    n = int(val) if val else (default or os.cpu_count() or 1)
    return max(1, n)


def generate_dataset(cfg, out_dir, workers=None):
    """Write shards and the manifest under ``out_dir``; returns the manifest dict.

    Every sample has its own random stream, so the result does not depend on
    the worker count.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = sample_plan(cfg)
    shards = [plan[s : s + cfg.shard_size] for s in range(0, len(plan), cfg.shard_size)]
    jobs = [(cfg.seed, cfg.profile, items) for items in shards]
    workers = min(workers or workers_from_env(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_build_shard, jobs))
    else:
        results = [_build_shard(j) for j in jobs]

    records, shard_info = [], []
    for k, (items, (tf, psd)) in enumerate(zip(shards, results)):
        name = f"shard-{k:05d}.jlt"
        labels = np.array([c for _, c, _, _ in items], dtype=np.int32)
        raw = container.write(out / name, {"tf": tf, "psd": psd, "class_id": labels})
        shard_info.append({"file": name, "sha256": hashlib.sha256(raw).hexdigest(), "count": len(items)})
        for row, (sid, cid, jnr, i) in enumerate(items):
            records.append(
                {
                    "id": sid,
                    "class_id": cid,
                    "jnr": jnr,
                    "index": i,
                    "seed": f"{derive_seed(cfg.seed, cid, jnr, i):032x}",
                    "shard": k,
                    "row": row,
                    "checksum": _sha(tf[row], psd[row]),
                }
            )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "root_seed": cfg.seed,
        "classes": {str(c): CLASS_NAMES[c] for c in cfg.classes},
        "jnr_grid": list(cfg.jnr_grid),
        "per_class": cfg.per_class,
        "profile": PROFILES[cfg.profile].to_dict(),
        "shards": shard_info,
        "records": records,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class FeatureSet:
    """Loaded features: tf (N, H, W), psd (N, L), labels (N,) class ids, ids, tiers."""

    tf: np.ndarray
    psd: np.ndarray
    labels: np.ndarray
    ids: list
    jnr: np.ndarray
    profile: FeatureProfile
    class_names: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def tiers(self):
        return np.array([tier(int(c)) for c in self.labels])

    def subset(self, idx):
        idx = np.asarray(idx)
        return FeatureSet(
            self.tf[idx], self.psd[idx], self.labels[idx], [self.ids[i] for i in idx],
            self.jnr[idx], self.profile, self.class_names,
        )

    def arrays(self):
        return self.tf, self.psd, self.labels


def manifest_path(path):
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def read_manifest(path):
    p = manifest_path(path)
    if not p.exists():
        raise DatasetError(f"no manifest at {p}")
    m = json.loads(p.read_text())
    if m.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported manifest schema {m.get('schema_version')}")
    ids = [r["id"] for r in m["records"]]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate sample ids in manifest")
    return m


def load_dataset(path, verify=True):
    """Read every shard named by the manifest, checking shard and sample checksums."""
    mpath = manifest_path(path)
    m = read_manifest(mpath)
    root = mpath.parent
    tfs, psds = [], []
    for k, sh in enumerate(m["shards"]):
        f = root / sh["file"]
        if not f.exists():
            raise MissingSample(f"shard file {f} is missing")
        raw = f.read_bytes()
        if verify and hashlib.sha256(raw).hexdigest() != sh["sha256"]:
            raise DatasetError(f"checksum mismatch in {sh['file']}")
        tensors, _ = container.decode(raw)
        tfs.append(tensors["tf"])
        psds.append(tensors["psd"])
    recs = m["records"]
    tf = np.concatenate(tfs)
    psd = np.concatenate(psds)
    starts = np.cumsum([0] + [sh["count"] for sh in m["shards"]])
    rows = np.array([starts[r["shard"]] + r["row"] for r in recs], dtype=np.int64)
    tf, psd = tf[rows], psd[rows]
    if verify:
        for n, r in enumerate(recs):
            if _sha(tf[n], psd[n]) != r["checksum"]:
                raise DatasetError(f"sample {r['id']} fails its checksum")
    return FeatureSet(
        tf,
        psd,
        np.array([r["class_id"] for r in recs], dtype=np.int64),
        [r["id"] for r in recs],
        np.array([r["jnr"] for r in recs], dtype=float),
        FeatureProfile.from_dict(m["profile"]),
        {int(k): v for k, v in m["classes"].items()},
    )


def find_record(manifest, sample_id):
    for r in manifest["records"]:
        if r["id"] == sample_id:
            return r
    raise MissingSample(sample_id)
