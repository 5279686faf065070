"""On-disk formats: raw arrays with JSON sidecars, dataset directories with
a hashed manifest, and the binary model checkpoint."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinetics import ScanSchedule
from .phantom import FengParams, KineticFields
from .projector import ProjectorConfig
from .recon import ReconModel, build_recon_model

__all__ = [
    "write_raw",
    "read_raw",
    "SampleRecord",
    "DatasetBundle",
    "save_sample",
    "load_sample",
    "write_manifest",
    "verify_manifest",
    "save_checkpoint",
    "load_checkpoint",
    "save_recon_model",
    "load_recon_model",
]

CHECKPOINT_MAGIC = b"HYKE1"

_DTYPES = {"u8": "<u1", "f32": "<f4", "u32": "<u4", "f64": "<f8"}


def write_raw(path: Path, arr: np.ndarray, dtype: str, units: str,
              seed=None, schedule=None, extra: dict | None = None):
    """Raw little-endian array plus a JSON sidecar describing it."""
    path = Path(path)
    arr = np.asarray(arr)
    arr.astype(_DTYPES[dtype]).tofile(path)
    sidecar = {"shape": list(arr.shape), "dtype": dtype, "units": units}
    if seed is not None:
        sidecar["seed"] = int(seed)
    if schedule is not None:
        sidecar["schedule"] = list(np.asarray(schedule, dtype=float))
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def read_raw(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    arr = np.fromfile(path, dtype=_DTYPES[sidecar["dtype"]])
    arr = arr.reshape(sidecar["shape"])
    return arr, sidecar


@dataclass
class SampleRecord:
    """One simulated acquisition: phantom truth plus its sinograms."""

    name: str
    labels: np.ndarray            # [H, W] u8
    kinetics: KineticFields
    activity: np.ndarray          # [T, H, W]
    expected: np.ndarray          # [T, A, B]
    measured: np.ndarray          # [T, A, B] integer counts
    scale_factor: float
    randoms_level: float
    randoms_fraction: float
    seed: int
    enc_norm: float | None = None  # cached encoder-input normalizer


@dataclass
class DatasetBundle:
    """In-memory dataset with the shared acquisition description."""

    schedule: ScanSchedule
    feng: FengParams
    tau: float
    projector: ProjectorConfig
    samples: dict[str, SampleRecord]
    splits: dict[str, list[str]]
    meta: dict = field(default_factory=dict)

    def split_samples(self, split: str) -> list[SampleRecord]:
        if split not in self.splits:
            raise ValueError(f"dataset has no split {split!r}")
        return [self.samples[name] for name in self.splits[split]]


def save_sample(sample_dir: Path, rec: SampleRecord, schedule: ScanSchedule,
                gen_seed: int):
    sample_dir = Path(sample_dir)
    sample_dir.mkdir(parents=True, exist_ok=True)
    bounds = schedule.boundaries
    write_raw(sample_dir / "labels.u8", rec.labels, "u8", "roi label",
              seed=gen_seed, schedule=bounds)
    write_raw(sample_dir / "kinetics.f32", rec.kinetics.planes(), "f32",
              "k1..k4 1/min; V fraction", seed=gen_seed, schedule=bounds)
    write_raw(sample_dir / "activity.f32", rec.activity, "f32",
              "activity concentration", seed=gen_seed, schedule=bounds)
    sino_extra = {"scale_factor": rec.scale_factor,
                  "randoms_fraction": rec.randoms_fraction,
                  "randoms_level": rec.randoms_level}
    write_raw(sample_dir / "expected.f32", rec.expected, "f32", "counts",
              seed=rec.seed, extra=dict(sino_extra, kind="expected"))
    write_raw(sample_dir / "measured.u32", rec.measured, "u32", "counts",
              seed=rec.seed, extra=dict(sino_extra, kind="measured"))


def load_sample(sample_dir: Path) -> SampleRecord:
    sample_dir = Path(sample_dir)
    labels, _ = read_raw(sample_dir / "labels.u8")
    planes, _ = read_raw(sample_dir / "kinetics.f32")
    activity, _ = read_raw(sample_dir / "activity.f32")
    expected, _ = read_raw(sample_dir / "expected.f32")
    measured, side = read_raw(sample_dir / "measured.u32")
    return SampleRecord(name=sample_dir.name, labels=labels,
                        kinetics=KineticFields.from_planes(planes.astype(np.float64)),
                        activity=activity.astype(np.float64),
                        expected=expected.astype(np.float64),
                        measured=measured.astype(np.int64),
                        scale_factor=float(side["scale_factor"]),
                        randoms_level=float(side["randoms_level"]),
                        randoms_fraction=float(side["randoms_fraction"]),
                        seed=int(side.get("seed", 0)))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(root: Path, splits: dict, config: dict, seed: int):
    root = Path(root)
    hashes = {}
    for f in sorted(root.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            hashes[str(f.relative_to(root))] = _sha256(f)
    manifest = {"format": "hyke-dataset-v1", "seed": seed, "splits": splits,
                "config": config, "hashes": hashes}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def verify_manifest(root: Path) -> dict:
    """Check every hashed file; raises on mismatch or absence."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    for rel, want in manifest["hashes"].items():
        f = root / rel
        if not f.exists():
            raise ValueError(f"dataset file missing: {rel}")
        got = _sha256(f)
        if got != want:
            raise ValueError(f"dataset file corrupted: {rel}")
    return manifest


def load_dataset(root: Path, verify: bool = True) -> DatasetBundle:
    root = Path(root)
    manifest = verify_manifest(root) if verify \
        else json.loads((root / "manifest.json").read_text())
    cfg = manifest["config"]
    schedule = ScanSchedule(np.asarray(cfg["schedule"]))
    feng = FengParams(**cfg["feng"])
    proj = ProjectorConfig(image_height=cfg["projector"]["image_height"],
                           image_width=cfg["projector"]["image_width"],
                           num_angles=cfg["projector"]["num_angles"],
                           num_bins=cfg["projector"]["num_bins"],
                           randoms_fraction=cfg["projector"]["randoms_fraction"],
                           target_total_counts=cfg["projector"]["target_total_counts"])
    samples = {}
    for split_names in manifest["splits"].values():
        for name in split_names:
            samples[name] = load_sample(root / "samples" / name)
    return DatasetBundle(schedule=schedule, feng=feng, tau=cfg["tau"],
                         projector=proj, samples=samples,
                         splits=manifest["splits"], meta=cfg)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path: Path, header: dict, named_tensors: list):
    """Binary checkpoint: magic, length-prefixed JSON header, then
    length-prefixed named float64 little-endian tensors."""
    path = Path(path)
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in named_tensors:
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: Path) -> tuple[dict, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint (bad magic)")
    off = 5
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    tensors = {}
    while off < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return header, tensors


def save_recon_model(path: Path, model: ReconModel, extra: dict | None = None):
    header = {"format": "hyke-checkpoint-v1",
              "variant": model.variant,
              "physics": model.hybrid.physics,
              "use_neural": model.hybrid.use_neural,
              "d_n": model.hybrid.d_n,
              "hidden": list(model.hybrid.hidden),
              "include_input_in_nn": model.hybrid.include_input_in_nn,
              "encoder_hidden": model.encoder_hidden,
              "n_frames": model.n_frames,
              "num_bins": model.phi.shape[0] // 2 + 1}
    if extra:
        header.update(extra)
    save_checkpoint(path, header, [(n, t.values) for n, t in model.named_parameters()])


def load_recon_model(path: Path) -> tuple[ReconModel, dict]:
    header, tensors = load_checkpoint(path)
    model = build_recon_model(variant=header["variant"], physics=header["physics"],
                              use_neural=header["use_neural"], d_n=header["d_n"],
                              n_frames=header["n_frames"],
                              num_bins=header["num_bins"], seed=0,
                              hidden=tuple(header["hidden"]),
                              encoder_hidden=header["encoder_hidden"],
                              include_input_in_nn=header["include_input_in_nn"])
    for name, tensor in model.named_parameters():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != tensor.values.shape:
            raise ValueError(f"checkpoint tensor {name!r} has shape "
                             f"{tensors[name].shape}, expected {tensor.values.shape}")
        tensor.values = tensors[name].copy()
    return model, header
