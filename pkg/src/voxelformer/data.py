"""Synthetic multi-subject voxel responses over a shared stimulus space.

Each subject s has its own voxel count N_s, voxel coordinates in [-1, 1]^3
and a fixed mixing matrix W_s.  A stimulus with latent e produces responses
``W_s @ e + noise``; its frozen target embedding is ``e / |e|``.

On disk a dataset is a directory::

    manifest.json        subjects, counts, dims, seed, noise, split
    subject_XX.bin       'VXF1', u32 N_s, u32 samples, u32 dim,
                         f64 coords[N_s, 3], then (u32 stimulus_id, f64[N_s]) records
    targets.bin          u32 stimuli, u32 dim, f64 rows

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .retrieval import RetrievalReport, evaluate_embeddings

MAGIC = b"VXF1"


@dataclass
class SynthConfig:
    subjects: int = 3
    train_stimuli: int = 600
    test_stimuli: int = 100
    voxel_counts: tuple[int, ...] = (64, 80, 96)
    target_tokens: int = 1
    target_dim: int = 64
    noise_sigma: float = 0.05
    subject_specific: float = 0.0  # variance share of W_s that is i.i.d. per subject
    field_frequency: float = 2.0  # angular frequency scale of the shared spatial field
    seed: int = 0

    def validate(self, merge: int = 0, layers: int = 0) -> None:
        if self.subjects < 1:
            raise ConfigError("need at least one subject")
        if len(self.voxel_counts) != self.subjects:
            raise ConfigError(f"{len(self.voxel_counts)} voxel counts for {self.subjects} subjects")
        if min(self.voxel_counts) < 1:
            raise ConfigError("voxel counts must be positive")
        if not 0.0 <= self.subject_specific <= 1.0:
            raise ConfigError(f"subject_specific must be in [0, 1], got {self.subject_specific}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.train_stimuli < 1 or self.test_stimuli < 0:
            raise ConfigError("need training stimuli and a non-negative test count")
        if self.target_tokens < 1 or self.target_dim < 1:
            raise ConfigError("target shape must be positive")
        if min(self.voxel_counts) - merge * layers < 2 * merge:
            raise ConfigError(
                f"N_s={min(self.voxel_counts)} cannot support {layers} stages merging {merge} pairs"
            )

    @property
    def latent_dim(self) -> int:
        return self.target_tokens * self.target_dim


@dataclass
class SubjectData:
    subject_id: int
    coords: np.ndarray  # [N, 3]
    stimulus_ids: np.ndarray  # [S]
    responses: np.ndarray  # [S, N]
    mixing: np.ndarray | None = None  # [N, D], generator side only

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    def indices(self, stimulus_ids) -> np.ndarray:
        return np.flatnonzero(np.isin(self.stimulus_ids, stimulus_ids))


@dataclass
class SyntheticDataset:
    subjects: list[SubjectData]
    targets: np.ndarray  # [stimuli, dim], unit rows
    train_ids: np.ndarray
    test_ids: np.ndarray
    manifest: dict = field(default_factory=dict)

    def split_ids(self, mode: str) -> np.ndarray:
        if mode == "train":
            return self.train_ids
        if mode == "test":
            return self.test_ids
        raise ContractError(f"mode must be 'train' or 'test', got {mode!r}")

    def subject(self, subject_id: int) -> SubjectData:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)


def generate(config: SynthConfig, merge: int = 0, layers: int = 0) -> SyntheticDataset:
    config.validate(merge, layers)
    rng = np.random.default_rng(config.seed)
    n_stim = config.train_stimuli + config.test_stimuli
    dim = config.latent_dim
    latents = rng.normal(size=(n_stim, dim))
    targets = latents / np.linalg.norm(latents, axis=1, keepdims=True)
    order = rng.permutation(n_stim)
    train_ids = np.sort(order[: config.train_stimuli])
    test_ids = np.sort(order[config.train_stimuli:])
    freqs = rng.normal(0.0, config.field_frequency, size=(3, dim))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=dim)
    subjects = []
    for sid, n_vox in enumerate(config.voxel_counts):
        coords = rng.uniform(-1.0, 1.0, size=(n_vox, 3))
        shared = np.sqrt(2.0 / dim) * np.cos(coords @ freqs + phases)
        own = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_vox, dim))
        beta = config.subject_specific
        mixing = np.sqrt(1.0 - beta) * shared + np.sqrt(beta) * own
        responses = latents @ mixing.T
        if config.noise_sigma > 0:
            responses = responses + rng.normal(0.0, config.noise_sigma, size=responses.shape)
        subjects.append(SubjectData(sid, coords, np.arange(n_stim), responses, mixing))
    manifest = {
        "format": "VXF1",
        "seed": config.seed,
        "noise_sigma": config.noise_sigma,
        "target_tokens": config.target_tokens,
        "target_dim": config.target_dim,
        "stimuli": n_stim,
        "subjects": [{"subject_id": s.subject_id, "n_voxels": s.n_voxels, "samples": n_stim,
                      "file": f"subject_{s.subject_id:02d}.bin"} for s in subjects],
        "train_ids": train_ids.tolist(),
        "test_ids": test_ids.tolist(),
    }
    return SyntheticDataset(subjects, targets, train_ids, test_ids, manifest)


def _record_dtype(n_vox: int) -> np.dtype:
    return np.dtype([("stimulus_id", "<u4"), ("responses", "<f8", (n_vox,))])


def write_dataset(dataset: SyntheticDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True) + "\n")
    for s in dataset.subjects:
        records = np.empty(len(s.stimulus_ids), dtype=_record_dtype(s.n_voxels))
        records["stimulus_id"] = s.stimulus_ids
        records["responses"] = s.responses
        with open(path / f"subject_{s.subject_id:02d}.bin", "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", s.n_voxels, len(records), dataset.targets.shape[1]))
            fh.write(s.coords.astype("<f8").tobytes())
            fh.write(records.tobytes())
    with open(path / "targets.bin", "wb") as fh:
        fh.write(struct.pack("<II", *dataset.targets.shape))
        fh.write(dataset.targets.astype("<f8").tobytes())
    return path


def _read_subject(file: Path, subject_id: int) -> tuple[SubjectData, int]:
    raw = file.read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{file}: bad magic {raw[:4]!r}")
    n_vox, n_samples, dim = struct.unpack_from("<III", raw, 4)
    offset = 16
    coords = np.frombuffer(raw, "<f8", n_vox * 3, offset).reshape(n_vox, 3).astype(np.float64)
    offset += n_vox * 3 * 8
    records = np.frombuffer(raw, _record_dtype(n_vox), n_samples, offset)
    if offset + records.nbytes != len(raw):
        raise ContractError(f"{file}: {len(raw) - offset - records.nbytes} trailing bytes")
    subject = SubjectData(subject_id, coords, records["stimulus_id"].astype(np.int64),
                          records["responses"].astype(np.float64))
    return subject, dim


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = (path / "targets.bin").read_bytes()
    n_stim, dim = struct.unpack_from("<II", raw, 0)
    targets = np.frombuffer(raw, "<f8", n_stim * dim, 8).reshape(n_stim, dim).astype(np.float64)
    subjects = []
    for entry in manifest["subjects"]:
        subject, sub_dim = _read_subject(path / entry["file"], entry["subject_id"])
        if sub_dim != dim:
            raise ShapeError(f"{entry['file']}: target dim {sub_dim} != {dim}")
        subjects.append(subject)
    return SyntheticDataset(subjects, targets, np.asarray(manifest["train_ids"]),
                            np.asarray(manifest["test_ids"]), manifest)


@dataclass
class Batch:
    subject_id: int
    responses: np.ndarray  # [B, N]
    coords: np.ndarray  # [B, N, 3] (broadcast view)
    targets: np.ndarray  # [B, dim]
    stimulus_ids: np.ndarray  # [B]

    def __len__(self) -> int:
        return self.responses.shape[0]


def batch_iterator(dataset: SyntheticDataset, batch_size: int, mode: str = "train",
                   rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Subject-homogeneous mini-batches, subjects visited round-robin.

    Each subject's samples are shuffled with ``rng`` (kept in order when it is
    None) and split into ceil(n / batch_size) near-equal chunks, so every
    sample appears exactly once per pass and no batch is a singleton.
    """
    ids = dataset.split_ids(mode)
    per_subject = []
    for s in dataset.subjects:
        idx = s.indices(ids)
        if batch_size < 1 or batch_size > idx.size:
            raise ContractError(f"batch size {batch_size} invalid for subject {s.subject_id} with {idx.size} samples")
        if rng is not None:
            idx = rng.permutation(idx)
        chunks = np.array_split(idx, -(-idx.size // batch_size))
        per_subject.append((s, chunks))
    longest = max(len(chunks) for _, chunks in per_subject)
    for i in range(longest):
        for s, chunks in per_subject:
            if i < len(chunks):
                idx = chunks[i]
                yield Batch(
                    s.subject_id,
                    s.responses[idx],
                    np.broadcast_to(s.coords, (idx.size, *s.coords.shape)),
                    dataset.targets[s.stimulus_ids[idx]],
                    s.stimulus_ids[idx],
                )


def least_squares_oracle(dataset: SyntheticDataset, pool_size: int = 50, trials: int = 30,
                         seed: int = 0) -> RetrievalReport:
    """Per-subject linear decoder fit on the train split, scored by retrieval on test.

    Establishes that the split is solvable before any network is trained.
    """
    brain, image = {}, {}
    for s in dataset.subjects:
        tr, te = s.indices(dataset.train_ids), s.indices(dataset.test_ids)
        design = np.hstack([s.responses[tr], np.ones((tr.size, 1))])
        coef, *_ = np.linalg.lstsq(design, dataset.targets[s.stimulus_ids[tr]], rcond=None)
        brain[s.subject_id] = np.hstack([s.responses[te], np.ones((te.size, 1))]) @ coef
        image[s.subject_id] = dataset.targets[s.stimulus_ids[te]]
    return evaluate_embeddings(brain, image, pool_size, trials, seed)


def config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    d["voxel_counts"] = list(config.voxel_counts)
    return d


def dataset_exists(path) -> bool:
    return os.path.exists(os.path.join(path, "manifest.json"))
