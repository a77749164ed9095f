"""File formats and the synthetic feature generator.

Feature file (extension ``.ifab``), all little-endian:

    header, 24 bytes:
        magic           4 bytes  b"IFAB"
        format_version  u32      currently 1
        dim             u32      feature width d (> 0)
        record_count    u64
        flags           u32      bit 0: file is a memory-bank export
    records, record_count times:
        class_id        u32
        family_id       u32
        feature         d * f32

Checkpoint file (extension ``.ckpt``):

    magic b"IACP", format_version u32, section_count u32, then per section:
        name_len u16, name bytes (utf-8), payload_len u64,
        crc32 u32 (zlib.crc32 of payload), payload

    Sections: "meta", "taxonomy", "config", "params", "bank", "rng",
    "history" (JSON payloads except "params" and "bank", which are binary).
    The "params" payload: count u32, then per parameter
        name_len u16 + utf-8 name, ndim u8, each dim u64,
        values f64[], adam_m f64[], adam_v f64[], step_count u64.

Every reader validates sizes and checksums before interpreting bytes and
raises :class:`FormatError` (or a subclass) on malformed input.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from modelattrib.hierarchy import CapacityError

__all__ = [
    "FormatError",
    "ChecksumError",
    "VersionError",
    "ManifestError",
    "FeatureFile",
    "write_features",
    "read_features",
    "ManifestClass",
    "Manifest",
    "load_manifest",
    "SyntheticSpec",
    "generate_synthetic",
    "write_sections",
    "read_sections",
    "pack_parameters",
    "unpack_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "export_bank",
]

FEATURE_MAGIC = b"IFAB"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sIIQI")
BANK_EXPORT_FLAG = 0x1

CHECKPOINT_MAGIC = b"IACP"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed file content; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


@dataclass
class FeatureFile:
    dim: int
    flags: int
    class_ids: np.ndarray
    family_ids: np.ndarray
    features: np.ndarray  # (n, dim) float32

    @property
    def record_count(self) -> int:
        return self.features.shape[0]


def write_features(
    path: str | Path,
    class_ids: np.ndarray,
    family_ids: np.ndarray,
    features: np.ndarray,
    flags: int = 0,
) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    class_ids = np.ascontiguousarray(class_ids, dtype="<u4")
    family_ids = np.ascontiguousarray(family_ids, dtype="<u4")
    if features.ndim != 2:
        raise ValueError("features must be a (n, d) matrix")
    n, dim = features.shape
    if dim == 0:
        raise ValueError("feature dim must be > 0")
    if class_ids.shape != (n,) or family_ids.shape != (n,):
        raise ValueError("class/family id arrays must have one entry per record")
    rec = np.empty(
        n, dtype=np.dtype([("class", "<u4"), ("family", "<u4"), ("feat", "<f4", (dim,))])
    )
    rec["class"] = class_ids
    rec["family"] = family_ids
    rec["feat"] = features
    header = FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dim, n, flags)
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def read_features(path: str | Path) -> FeatureFile:
    data = Path(path).read_bytes()
    if len(data) < FEATURE_HEADER.size:
        raise FormatError(
            f"feature file truncated: {len(data)} bytes, header needs {FEATURE_HEADER.size}",
            offset=len(data),
        )
    magic, version, dim, count, flags = FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=0)
    if version != FEATURE_VERSION:
        raise VersionError(
            f"unsupported feature format version {version}, this reader supports {FEATURE_VERSION}",
            offset=4,
        )
    if dim == 0:
        raise FormatError("feature dim must be > 0", offset=8)
    record_size = 8 + 4 * dim
    expected = FEATURE_HEADER.size + count * record_size
    if len(data) != expected:
        raise FormatError(
            f"file size {len(data)} does not match header (expected {expected} bytes "
            f"for {count} records of dim {dim})",
            offset=min(len(data), expected),
        )
    rec = np.frombuffer(
        data,
        dtype=np.dtype([("class", "<u4"), ("family", "<u4"), ("feat", "<f4", (dim,))]),
        count=count,
        offset=FEATURE_HEADER.size,
    )
    return FeatureFile(
        dim=dim,
        flags=flags,
        class_ids=rec["class"].astype(np.int64),
        family_ids=rec["family"].astype(np.int64),
        features=rec["feat"].reshape(count, dim).copy(),
    )


def export_bank(bank, taxonomy, path: str | Path) -> None:
    """Dump a memory bank as a feature file with the bank flag set."""
    rows = []
    cids = []
    fids = []
    for cid in bank.classes:
        arr = bank.entries[cid]
        rows.append(arr)
        cids.extend([cid] * arr.shape[0])
        fids.extend([taxonomy.family_of(cid)] * arr.shape[0])
    feats = np.concatenate(rows) if rows else np.zeros((0, bank.feature_dim or 1), np.float32)
    write_features(path, np.array(cids), np.array(fids), feats, flags=BANK_EXPORT_FLAG)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

ROLES = ("real", "generator", "unseen_holdout")


@dataclass
class ManifestClass:
    name: str
    family: str
    release_date: str
    role: str
    train: Path | None
    test: Path
    calib: Path | None = None


@dataclass
class Manifest:
    path: Path
    classes: list[ManifestClass]
    metadata: dict = field(default_factory=dict)

    def real(self) -> ManifestClass:
        return next(c for c in self.classes if c.role == "real")

    def generators(self) -> list[ManifestClass]:
        """Generator classes in temporal order (release date, then file order)."""
        gens = [c for c in self.classes if c.role == "generator"]
        return sorted(gens, key=lambda c: date.fromisoformat(c.release_date))

    def holdout(self) -> list[ManifestClass]:
        return [c for c in self.classes if c.role == "unseen_holdout"]

    def by_name(self, name: str) -> ManifestClass:
        return next(c for c in self.classes if c.name == name)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "classes" not in doc:
        raise ManifestError("manifest must be an object with a 'classes' list")
    root = path.parent
    classes: list[ManifestClass] = []
    names = set()
    for i, entry in enumerate(doc["classes"]):
        for key in ("name", "family", "release_date", "role"):
            if key not in entry:
                raise ManifestError(f"class #{i} is missing {key!r}")
        name = entry["name"]
        if name in names:
            raise ManifestError(f"duplicate class name {name!r}")
        names.add(name)
        role = entry["role"]
        if role not in ROLES:
            raise ManifestError(f"class {name!r} has unknown role {role!r}")
        try:
            date.fromisoformat(entry["release_date"])
        except ValueError as e:
            raise ManifestError(f"class {name!r}: bad release_date: {e}") from e

        def resolve(key: str, required: bool) -> Path | None:
            rel = entry.get(key)
            if rel is None:
                if required:
                    raise ManifestError(f"class {name!r} needs a {key!r} feature file")
                return None
            p = root / rel
            if not p.exists():
                raise ManifestError(f"class {name!r}: {key} file {p} does not exist")
            return p

        needs_train = role in ("real", "generator")
        classes.append(
            ManifestClass(
                name=name,
                family=entry["family"],
                release_date=entry["release_date"],
                role=role,
                train=resolve("train", required=needs_train),
                test=resolve("test", required=True),
                calib=resolve("calib", required=False),
            )
        )
    reals = [c for c in classes if c.role == "real"]
    if len(reals) != 1:
        raise ManifestError(f"manifest must designate exactly one real class, found {len(reals)}")
    return Manifest(path=path, classes=classes, metadata=doc.get("metadata", {}))


def load_split(cls: ManifestClass, split: str) -> np.ndarray:
    """Feature matrix (float32) of one class split."""
    p = getattr(cls, split)
    if p is None:
        raise ManifestError(f"class {cls.name!r} has no {split} split")
    return read_features(p).features


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Hierarchical Gaussian mixture emulating the family/model structure.

    ``families`` counts the real singleton plus the trainable generator
    families; ``holdout_families`` extra families are written with role
    unseen_holdout and never scheduled for training.  Scales are vector
    norms: family means sit at ``sigma_family`` from the origin, model means
    at ``sigma_model`` from their family mean, and samples add isotropic
    noise with expected norm ``sigma_noise``.
    """

    families: int = 4
    models_per_family: int = 3
    dim: int = 64
    train_per_class: int = 500
    test_per_class: int = 100
    calib_per_class: int = 100
    holdout_families: int = 1
    sigma_family: float = 10.0
    sigma_model: float = 2.0
    sigma_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma_family > self.sigma_model > self.sigma_noise > 0):
            raise ValueError("need sigma_family > sigma_model > sigma_noise > 0")
        if self.families < 2:
            raise ValueError("need at least the real family plus one generator family")


def _orthonormal_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n > dim:
        raise CapacityError(f"cannot place {n} orthogonal family means in dim {dim}")
    rows: list[np.ndarray] = []
    for _ in range(n):
        v = rng.normal(size=dim)
        for _pass in range(2):
            for u in rows:
                v = v - (v @ u) * u
        v /= np.linalg.norm(v)
        rows.append(v)
    return np.array(rows)


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write feature files plus a manifest; returns the manifest path.

    Layout: the real class is its own singleton family; generator models are
    released round-robin across families so tasks straddle families; the
    holdout family's models carry the latest release dates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    n_gen_families = spec.families - 1
    n_families_total = spec.families + spec.holdout_families
    dirs = _orthonormal_directions(n_families_total, spec.dim, rng)
    family_means = spec.sigma_family * dirs

    # (name, family, family_mean, role), real first
    class_rows: list[tuple[str, str, np.ndarray, str]] = [
        ("real", "real", family_means[0], "real")
    ]
    for j in range(spec.models_per_family):
        for k in range(n_gen_families):
            class_rows.append(
                (f"gen_f{k}_m{j}", f"family{k}", family_means[1 + k], "generator")
            )
    for h in range(spec.holdout_families):
        fam_mean = family_means[spec.families + h]
        for j in range(spec.models_per_family):
            class_rows.append(
                (f"holdout_f{h}_m{j}", f"holdout{h}", fam_mean, "unseen_holdout")
            )

    model_means = {}
    release = {}
    base = date(2022, 1, 1).toordinal()
    for i, (name, _family, fam_mean, _role) in enumerate(class_rows):
        model_means[name] = fam_mean + spec.sigma_model * _unit(rng, spec.dim)
        release[name] = date.fromordinal(base + 30 * i).isoformat()

    # sanity: the generated hierarchy must be a hierarchy
    _check_hierarchy(class_rows, model_means)

    entries = []
    counts = {
        "train": spec.train_per_class,
        "test": spec.test_per_class,
        "calib": spec.calib_per_class,
    }
    for class_id, (name, family, _fam_mean, role) in enumerate(class_rows):
        entry = {
            "name": name,
            "family": family,
            "release_date": release[name],
            "role": role,
        }
        for split, n in counts.items():
            noise = rng.normal(size=(n, spec.dim)) * (spec.sigma_noise / np.sqrt(spec.dim))
            feats = (model_means[name][None, :] + noise).astype(np.float32)
            fname = f"{name}.{split}.ifab"
            write_features(
                out / fname,
                np.full(n, class_id),
                np.full(n, _family_index(class_rows, family)),
                feats,
            )
            entry[split] = fname
        entries.append(entry)

    manifest_path = out / "manifest.json"
    doc = {
        "classes": entries,
        "metadata": {
            "synthetic": True,
            "dim": spec.dim,
            "seed": spec.seed,
            "sigma": [spec.sigma_family, spec.sigma_model, spec.sigma_noise],
        },
    }
    manifest_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return manifest_path


def _family_index(class_rows, family: str) -> int:
    seen: list[str] = []
    for _name, fam, _mean, _role in class_rows:
        if fam not in seen:
            seen.append(fam)
    return seen.index(family)


def _check_hierarchy(class_rows, model_means) -> None:
    """Within-family cosine of model means must exceed cross-family cosine."""
    by_family: dict[str, list[np.ndarray]] = {}
    for name, family, _mean, _role in class_rows:
        by_family.setdefault(family, []).append(model_means[name])
    within, cross = [], []
    fams = list(by_family)
    for fi, fa in enumerate(fams):
        for fj in range(fi, len(fams)):
            fb = fams[fj]
            for i, va in enumerate(by_family[fa]):
                for j, vb in enumerate(by_family[fb]):
                    if fa == fb and j <= i:
                        continue
                    cos = float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
                    (within if fa == fb else cross).append(cos)
    if within and cross and np.mean(within) <= np.mean(cross):
        raise RuntimeError("synthetic hierarchy violated: families are not separated")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


class _Reader:
    """Bounds-checked byte cursor; every violation is a FormatError."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.off = offset

    def take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.data):
            raise FormatError(
                f"unexpected end of data: need {n} bytes, have {len(self.data) - self.off}",
                offset=self.off,
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def utf8(self, n: int) -> str:
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid utf-8 in name field: {e}", offset=self.off - n) from e


def write_sections(path: str | Path, sections: list[tuple[str, bytes]]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(sections)))
        for name, payload in sections:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
            f.write(payload)


def read_sections(path: str | Path) -> dict[str, bytes]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"unsupported checkpoint version {version}, this reader supports {CHECKPOINT_VERSION}",
            offset=4,
        )
    n_sections = r.u32()
    if n_sections > 1024:
        raise FormatError(f"implausible section count {n_sections}", offset=8)
    sections: dict[str, bytes] = {}
    for _ in range(n_sections):
        name = r.utf8(r.u16())
        length = r.u64()
        crc = r.u32()
        payload = r.take(length)
        actual = zlib.crc32(payload)
        if actual != crc:
            raise ChecksumError(
                f"section {name!r} checksum mismatch: stored {crc:#010x}, computed {actual:#010x}",
                offset=r.off - length,
            )
        if name in sections:
            raise FormatError(f"duplicate section {name!r}", offset=r.off)
        sections[name] = payload
    if r.off != len(data):
        raise FormatError(f"{len(data) - r.off} trailing bytes after last section", offset=r.off)
    return sections


def pack_parameters(params: list) -> bytes:
    out = bytearray()
    out += struct.pack("<I", len(params))
    for p in params:
        raw = p.name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<B", p.values.ndim)
        for d in p.values.shape:
            out += struct.pack("<Q", d)
        for arr in (p.values, p.adam_m, p.adam_v):
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        out += struct.pack("<Q", p.step_count)
    return bytes(out)


def unpack_parameters(payload: bytes) -> dict[str, dict]:
    """Parse a params payload into {name: {values, adam_m, adam_v, step_count}}."""
    r = _Reader(payload)
    count = r.u32()
    if count > 4096:
        raise FormatError(f"implausible parameter count {count}", offset=0)
    out: dict[str, dict] = {}
    for _ in range(count):
        name = r.utf8(r.u16())
        ndim = r.u8()
        if ndim > 4:
            raise FormatError(f"parameter {name!r}: implausible ndim {ndim}", offset=r.off)
        shape = tuple(r.u64() for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        if size > 100_000_000:
            raise FormatError(f"parameter {name!r}: implausible size", offset=r.off)
        arrays = []
        for _ in range(3):
            arrays.append(
                np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).copy()
            )
        step_count = r.u64()
        out[name] = {
            "values": arrays[0],
            "adam_m": arrays[1],
            "adam_v": arrays[2],
            "step_count": step_count,
        }
    if r.off != len(payload):
        raise FormatError("trailing bytes in params section", offset=r.off)
    return out


def _pack_bank(bank) -> bytes:
    out = bytearray()
    out += struct.pack("<III", bank.budget, bank.feature_dim or 0, len(bank.entries))
    for cid in bank.classes:
        arr = bank.entries[cid]
        out += struct.pack("<II", cid, arr.shape[0])
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def _unpack_bank(payload: bytes):
    from modelattrib.memory_bank import MemoryBank

    r = _Reader(payload)
    budget, dim, n_classes = r.u32(), r.u32(), r.u32()
    if n_classes > 100_000:
        raise FormatError(f"implausible bank class count {n_classes}", offset=0)
    bank = MemoryBank(budget=budget, feature_dim=dim or None)
    for _ in range(n_classes):
        cid = r.u32()
        count = r.u32()
        arr = np.frombuffer(r.take(4 * count * dim), dtype="<f4").reshape(count, dim).copy()
        arr.setflags(write=False)
        bank.entries[cid] = arr
    if r.off != len(payload):
        raise FormatError("trailing bytes in bank section", offset=r.off)
    return bank


def save_checkpoint(state, path: str | Path) -> None:
    """Serialize a full protocol state; resuming is bit-identical to not stopping."""
    meta = {
        "tau": state.tau,
        "next_task": len(state.history),
        "latent_dim": state.head.output_dim,
        "feature_dim": state.head.input_dim,
    }
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode()),
        ("taxonomy", json.dumps(state.taxonomy.to_dict(), sort_keys=True).encode()),
        ("config", json.dumps(state.config.as_dict(), sort_keys=True).encode()),
        ("params", pack_parameters(state.parameters())),
        ("bank", _pack_bank(state.bank)),
        ("rng", json.dumps(state.rng.bit_generator.state).encode()),
        ("history", json.dumps([m.as_dict() for m in state.history]).encode()),
    ]
    write_sections(path, sections)


def load_checkpoint(path: str | Path):
    from modelattrib.protocol import ProtocolState

    sections = read_sections(path)
    for required in ("meta", "taxonomy", "config", "params", "bank", "rng", "history"):
        if required not in sections:
            raise FormatError(f"checkpoint is missing section {required!r}")
    try:
        meta = json.loads(sections["meta"])
        taxonomy = json.loads(sections["taxonomy"])
        config = json.loads(sections["config"])
        rng_state = json.loads(sections["rng"])
        history = json.loads(sections["history"])
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt JSON section: {e}") from e
    params = unpack_parameters(sections["params"])
    bank = _unpack_bank(sections["bank"])
    return ProtocolState._restore(meta, taxonomy, config, params, bank, rng_state, history)
