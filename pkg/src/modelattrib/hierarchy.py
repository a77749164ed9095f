"""Two-level taxonomy of generative models and its latent-space anchors.

Model classes group into families (architectural lineages); the real-image
class sits in a singleton family of its own.  Each class and each family owns
a learnable unit-norm anchor vector; anchors are born mutually orthogonal
(Gram-Schmidt in the orthogonal complement of the existing ones) and a
Frobenius penalty plus post-step renormalization keep them close to
orthonormal as they train.

Prototypes are batch statistics: the unit-normalized mean latent per class,
and per family the unit-normalized mean of its class prototypes.  They are
built on the differentiation tape so alignment losses propagate into the
projection head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from modelattrib.diffcore import Parameter, Tensor, matmul, normalize_rows

__all__ = [
    "CapacityError",
    "Taxonomy",
    "ModelEntry",
    "AnchorSet",
    "PrototypeSet",
    "compute_prototypes",
]


class CapacityError(RuntimeError):
    """Latent dimension cannot host another orthogonal anchor direction."""


@dataclass
class ModelEntry:
    name: str
    family_id: int
    release_date: str


class Taxonomy:
    """Registry of model classes and their families.

    Class ids are dense ``0..C-1`` in registration order and never reused;
    families are created on first reference.
    """

    def __init__(self):
        self.families: list[str] = []
        self.models: list[ModelEntry] = []
        self.real_class: int | None = None
        self._class_by_name: dict[str, int] = {}
        self._family_by_name: dict[str, int] = {}

    @property
    def n_classes(self) -> int:
        return len(self.models)

    @property
    def n_families(self) -> int:
        return len(self.families)

    def class_id(self, name: str) -> int:
        return self._class_by_name[name]

    def family_of(self, class_id: int) -> int:
        return self.models[class_id].family_id

    def class_name(self, class_id: int) -> str:
        return self.models[class_id].name

    def family_members(self, family_id: int) -> list[int]:
        return [i for i, m in enumerate(self.models) if m.family_id == family_id]

    def register_classes(self, new_models: list[tuple[str, str, str]]) -> "Taxonomy":
        """Append classes; new families are created on first reference.

        Re-registration of an existing name is refused: task label sets are
        disjoint by construction.
        """
        staged = []
        staged_names = set()
        for name, family, release_date in new_models:
            if name in self._class_by_name or name in staged_names:
                raise ValueError(f"class {name!r} is already registered")
            staged_names.add(name)
            staged.append((name, family, release_date))
        for name, family, release_date in staged:
            fam_id = self._family_by_name.get(family)
            if fam_id is None:
                fam_id = len(self.families)
                self.families.append(family)
                self._family_by_name[family] = fam_id
            elif (
                self.real_class is not None
                and fam_id == self.models[self.real_class].family_id
            ):
                raise ValueError("the real-image family cannot gain more classes")
            cid = len(self.models)
            self.models.append(ModelEntry(name, fam_id, release_date))
            self._class_by_name[name] = cid
        return self

    def mark_real(self, class_id: int) -> None:
        """Designate the real-image class; its family must stay a singleton."""
        if self.real_class is not None and self.real_class != class_id:
            raise ValueError("real class already designated")
        fam = self.models[class_id].family_id
        if len(self.family_members(fam)) != 1:
            raise ValueError("real class must live in a singleton family")
        self.real_class = class_id

    def to_dict(self) -> dict:
        return {
            "families": list(self.families),
            "models": [[m.name, m.family_id, m.release_date] for m in self.models],
            "real_class": self.real_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Taxonomy":
        tax = cls()
        tax.families = list(d["families"])
        tax._family_by_name = {name: i for i, name in enumerate(tax.families)}
        for name, fam_id, release in d["models"]:
            cid = len(tax.models)
            tax.models.append(ModelEntry(name, int(fam_id), release))
            tax._class_by_name[name] = cid
        tax.real_class = d["real_class"]
        return tax


def _gram_schmidt_new_rows(
    existing: np.ndarray, n_new: int, dim: int, rng: np.random.Generator
) -> np.ndarray:
    """Unit rows spanning directions orthogonal to ``existing`` and each other.

    Two Gram-Schmidt passes per vector keep residual overlap at float64
    roundoff even when the existing rows have drifted slightly off
    orthonormal during training.
    """
    if existing.shape[0] + n_new > dim:
        raise CapacityError(
            f"latent dim {dim} cannot host {existing.shape[0] + n_new} orthogonal anchors"
        )
    base = [row / np.linalg.norm(row) for row in existing]
    added: list[np.ndarray] = []
    for _ in range(n_new):
        for _attempt in range(64):
            v = rng.normal(size=dim)
            for _pass in range(2):
                for u in base:
                    v = v - (v @ u) * u
                for u in added:
                    v = v - (v @ u) * u
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                break
        else:
            raise CapacityError("no orthogonal direction found for a new anchor")
        added.append(v / norm)
    return np.array(added) if added else np.zeros((0, dim))


class AnchorSet:
    """Learnable unit-norm anchors for classes (fine) and families (coarse).

    Anchors are stored row-major: ``fine.values[c]`` is the anchor of class
    ``c``; the matrix of anchor columns is its transpose.
    """

    def __init__(self, latent_dim: int):
        self.latent_dim = latent_dim
        self.fine = Parameter(np.zeros((0, latent_dim)), name="anchors.fine")
        self.coarse = Parameter(np.zeros((0, latent_dim)), name="anchors.coarse")

    @property
    def n_classes(self) -> int:
        return self.fine.values.shape[0]

    @property
    def n_families(self) -> int:
        return self.coarse.values.shape[0]

    def grow(
        self, n_new_classes: int, n_new_families: int, rng: np.random.Generator
    ) -> "AnchorSet":
        """Append anchors in the orthogonal complement of the existing ones.

        Existing rows and their Adam moments are untouched.
        """
        if n_new_classes:
            rows = _gram_schmidt_new_rows(self.fine.values, n_new_classes, self.latent_dim, rng)
            self.fine.grow_rows(rows)
        if n_new_families:
            rows = _gram_schmidt_new_rows(
                self.coarse.values, n_new_families, self.latent_dim, rng
            )
            self.coarse.grow_rows(rows)
        return self

    def renormalize(self) -> None:
        """Project every anchor back onto the unit sphere (post-optimizer step)."""
        for p in (self.fine, self.coarse):
            if p.values.shape[0]:
                norms = np.linalg.norm(p.values, axis=1, keepdims=True)
                p.values /= np.maximum(norms, 1e-12)

    def fine_gram_deviation(self) -> float:
        a = self.fine.values
        return float(np.linalg.norm(a @ a.T - np.eye(a.shape[0])))

    def coarse_gram_deviation(self) -> float:
        a = self.coarse.values
        return float(np.linalg.norm(a @ a.T - np.eye(a.shape[0])))

    def parameters(self) -> list[Parameter]:
        return [self.fine, self.coarse]


@dataclass
class PrototypeSet:
    """Batch prototypes on the tape: rows of ``fine_matrix`` are unit class
    prototypes for ``classes`` (ascending); ``coarse_matrix`` rows are unit
    family prototypes for ``families``.  ``support`` holds the sample count
    per class, 0 for classes excluded by the degenerate-mean guard.
    """

    fine_matrix: Tensor
    classes: list[int]
    coarse_matrix: Tensor
    families: list[int]
    support: dict[int, int] = field(default_factory=dict)

    def fine(self, class_id: int) -> np.ndarray:
        return self.fine_matrix.value[self.classes.index(class_id)]

    def coarse(self, family_id: int) -> np.ndarray:
        return self.coarse_matrix.value[self.families.index(family_id)]


def compute_prototypes(
    latents: Tensor | np.ndarray, class_ids: np.ndarray, taxonomy: Taxonomy
) -> PrototypeSet:
    """Unit-mean prototypes per present class and per present family.

    Means are estimated over the given batch; classes whose raw mean has
    norm below 1e-12 are dropped (support 0).  Gradients flow back through
    ``latents`` when it is a tape node.
    """
    if not isinstance(latents, Tensor):
        latents = Tensor(np.asarray(latents, dtype=np.float64))
    class_ids = np.asarray(class_ids, dtype=np.intp)
    n = latents.value.shape[0]
    if n == 0 or class_ids.shape != (n,):
        raise ValueError("compute_prototypes needs one class id per latent row")

    present = sorted(set(int(c) for c in class_ids))
    counts = {c: int(np.sum(class_ids == c)) for c in present}
    mean_mat = np.zeros((len(present), n))
    for row, c in enumerate(present):
        mean_mat[row, class_ids == c] = 1.0 / counts[c]
    raw = matmul(Tensor(mean_mat), latents)

    norms = np.linalg.norm(raw.value, axis=1)
    keep = [i for i, nm in enumerate(norms) if nm >= 1e-12]
    support = {c: (counts[c] if i in keep else 0) for i, c in enumerate(present)}
    kept_classes = [present[i] for i in keep]
    if not kept_classes:
        raise ValueError("every class mean in the batch is degenerate")
    if len(keep) != len(present):
        sel = np.zeros((len(keep), len(present)))
        for row, i in enumerate(keep):
            sel[row, i] = 1.0
        raw = matmul(Tensor(sel), raw)
    fine = normalize_rows(raw)

    fam_ids = sorted({taxonomy.family_of(c) for c in kept_classes})
    fam_mat = np.zeros((len(fam_ids), len(kept_classes)))
    for row, f in enumerate(fam_ids):
        members = [i for i, c in enumerate(kept_classes) if taxonomy.family_of(c) == f]
        fam_mat[row, members] = 1.0 / len(members)
    coarse = normalize_rows(matmul(Tensor(fam_mat), fine))

    return PrototypeSet(
        fine_matrix=fine,
        classes=kept_classes,
        coarse_matrix=coarse,
        families=fam_ids,
        support=support,
    )
