from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator


class VertexKind(IntEnum):
    emission = 0
    scatter = 1
    reflect = 2
    escape = 3


class ProblemKind(str, Enum):
    tomography = "tomography"
    phong = "phong"


class Ray(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    origin: np.ndarray
    direction: np.ndarray

    @field_validator("origin", mode="before")
    @classmethod
    def _origin(cls, value):
        return np.array(value, dtype=np.float64).reshape(3)

    @field_validator("direction", mode="before")
    @classmethod
    def _unit(cls, value):
        direction = np.array(value, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            raise ValueError("ray direction must be non-zero")
        return direction / norm

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class SegmentIntersections(BaseModel):
    """Voxel ids crossed by one segment and the length inside each"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    voxels: np.ndarray
    lengths: np.ndarray

    @field_validator("voxels", mode="before")
    @classmethod
    def _ids(cls, value):
        return np.array(value, dtype=np.int64).ravel()

    @field_validator("lengths", mode="before")
    @classmethod
    def _lengths(cls, value):
        return np.array(value, dtype=np.float64).ravel()

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())

    def __len__(self) -> int:
        return int(self.voxels.shape[0])

    def length_in(self, voxel: int) -> float:
        return float(self.lengths[self.voxels == voxel].sum())


class LocalEstimate(BaseModel):
    """Connection of one path vertex to one detector"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    vertex: int
    detector: int
    u: float
    v: float
    cos: float
    geom: float
    intersections: SegmentIntersections


class PathRecord(BaseModel):
    """One sampled light path x_0..x_B.

    ``segments[b - 1]`` holds the intersections of the segment arriving at
    vertex b. ``cos[b]`` is the scattering cosine at a scatter vertex or the
    cosine between mirror and outgoing direction at a reflect vertex.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    path_index: int
    seed: int
    vertices: np.ndarray
    kinds: np.ndarray
    species: np.ndarray
    cos: np.ndarray
    surfaces: np.ndarray
    voxels: np.ndarray
    segments: List[SegmentIntersections]
    local_estimates: List[LocalEstimate] = Field(default_factory=list)
    direction0: np.ndarray
    truncated: bool = False

    @property
    def size(self) -> int:
        """Path size B (number of segments)"""
        return int(self.vertices.shape[0] - 1)

    @property
    def n_scatter(self) -> int:
        return int(np.count_nonzero(self.kinds == VertexKind.scatter))

    def directions(self) -> np.ndarray:
        steps = np.diff(self.vertices, axis=0)
        return steps / np.linalg.norm(steps, axis=1, keepdims=True)

    def split(self, k: int) -> Tuple["PathRecord", "PathRecord"]:
        """Cut at interior vertex k: the head keeps k as its last vertex, the tail starts from it."""
        if not 0 < k < self.size:
            raise ValueError(f"split vertex must be interior, got {k} for B={self.size}")
        tail_kinds = np.array(self.kinds[k:])
        tail_kinds[0] = VertexKind.emission
        head = self.model_copy(
            update={
                "vertices": self.vertices[: k + 1],
                "kinds": self.kinds[: k + 1],
                "species": self.species[: k + 1],
                "cos": self.cos[: k + 1],
                "surfaces": self.surfaces[: k + 1],
                "voxels": self.voxels[: k + 1],
                "segments": self.segments[:k],
                "local_estimates": [le for le in self.local_estimates if le.vertex <= k],
                "truncated": False,
            }
        )
        tail = self.model_copy(
            update={
                "vertices": self.vertices[k:],
                "kinds": tail_kinds,
                "species": self.species[k:],
                "cos": self.cos[k:],
                "surfaces": self.surfaces[k:],
                "voxels": self.voxels[k:],
                "segments": self.segments[k:],
                "local_estimates": [
                    le.model_copy(update={"vertex": le.vertex - k}) for le in self.local_estimates if le.vertex > k
                ],
                "direction0": self.directions()[k],
            }
        )
        return head, tail


class StoreStats(BaseModel):
    n_paths: int
    n_vertices: int
    n_intersections: int
    n_local_estimates: int
    n_local_intersections: int
    mean_size: float
    max_size: int
    n_truncated: int
    nbytes: int


class PathStore(BaseModel):
    """Frozen set of traced paths in structure-of-arrays layout, ordered by path index.

    ``order`` is the processing order (ascending B once sorted); storage itself
    is never permuted so reductions keyed by path index stay fixed.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    seed: int
    max_bounces: int
    prefactor: float
    generation: int = 0
    ref_params_id: str = ""
    sorted_flag: bool = False
    order: np.ndarray

    path_offsets: np.ndarray
    truncated: np.ndarray
    direction0: np.ndarray

    vertex_pos: np.ndarray
    vertex_kind: np.ndarray
    vertex_species: np.ndarray
    vertex_cos: np.ndarray
    vertex_surface: np.ndarray
    vertex_voxel: np.ndarray

    segment_offsets: np.ndarray
    segment_voxels: np.ndarray
    segment_lengths: np.ndarray

    le_offsets: np.ndarray
    le_detector: np.ndarray
    le_u: np.ndarray
    le_v: np.ndarray
    le_cos: np.ndarray
    le_geom: np.ndarray
    le_segment_offsets: np.ndarray
    le_segment_voxels: np.ndarray
    le_segment_lengths: np.ndarray

    @property
    def n_paths(self) -> int:
        return int(self.path_offsets.shape[0] - 1)

    @property
    def sizes(self) -> np.ndarray:
        """B per path, in path-index order"""
        return np.diff(self.path_offsets) - 1

    def array_fields(self) -> Dict[str, np.ndarray]:
        return {name: value for name, value in self.__dict__.items() if isinstance(value, np.ndarray)}

    def stats(self) -> StoreStats:
        sizes = self.sizes
        return StoreStats(
            n_paths=self.n_paths,
            n_vertices=int(self.vertex_kind.shape[0]),
            n_intersections=int(self.segment_voxels.shape[0]),
            n_local_estimates=int(self.le_detector.shape[0]),
            n_local_intersections=int(self.le_segment_voxels.shape[0]),
            mean_size=float(sizes.mean()) if sizes.size else 0.0,
            max_size=int(sizes.max()) if sizes.size else 0,
            n_truncated=int(self.truncated.sum()),
            nbytes=int(sum(a.nbytes for a in self.array_fields().values())),
        )

    def record(self, i: int) -> PathRecord:
        """Materialize path i (path-index order) as a PathRecord"""
        first, last = int(self.path_offsets[i]), int(self.path_offsets[i + 1])
        segments = []
        local_estimates = []
        for g in range(first + 1, last):
            a, b = self.segment_offsets[g], self.segment_offsets[g + 1]
            segments.append(
                SegmentIntersections(voxels=self.segment_voxels[a:b], lengths=self.segment_lengths[a:b])
            )
        for g in range(first, last):
            for e in range(self.le_offsets[g], self.le_offsets[g + 1]):
                a, b = self.le_segment_offsets[e], self.le_segment_offsets[e + 1]
                local_estimates.append(
                    LocalEstimate(
                        vertex=g - first,
                        detector=int(self.le_detector[e]),
                        u=float(self.le_u[e]),
                        v=float(self.le_v[e]),
                        cos=float(self.le_cos[e]),
                        geom=float(self.le_geom[e]),
                        intersections=SegmentIntersections(
                            voxels=self.le_segment_voxels[a:b], lengths=self.le_segment_lengths[a:b]
                        ),
                    )
                )
        return PathRecord(
            path_index=i,
            seed=self.seed,
            vertices=self.vertex_pos[first:last],
            kinds=self.vertex_kind[first:last],
            species=self.vertex_species[first:last],
            cos=self.vertex_cos[first:last],
            surfaces=self.vertex_surface[first:last],
            voxels=self.vertex_voxel[first:last],
            segments=segments,
            local_estimates=local_estimates,
            direction0=self.direction0[i],
            truncated=bool(self.truncated[i]),
        )

    def records(self) -> List[PathRecord]:
        """Records in processing order"""
        return [self.record(int(i)) for i in self.order]


class SparseGradient(BaseModel):
    """Sparse map unknown index -> derivative value"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: ProblemKind = ProblemKind.tomography
    size: int
    indices: np.ndarray
    values: np.ndarray

    @field_validator("indices", mode="before")
    @classmethod
    def _indices(cls, value):
        return np.array(value, dtype=np.int64).ravel()

    @field_validator("values", mode="before")
    @classmethod
    def _values(cls, value):
        return np.array(value, dtype=np.float64).ravel()

    @classmethod
    def from_dense(cls, dense: np.ndarray, kind: ProblemKind = ProblemKind.tomography) -> "SparseGradient":
        dense = np.asarray(dense, dtype=np.float64).ravel()
        nz = np.flatnonzero(dense)
        return cls(kind=kind, size=dense.shape[0], indices=nz, values=dense[nz])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.size, dtype=np.float64)
        np.add.at(out, self.indices, self.values)
        return out

    def get(self, index: int) -> float:
        return float(self.values[self.indices == index].sum())


class EstimatorOutput(BaseModel):
    """Per-detector forward images plus optional derivative rows"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    images: List[np.ndarray]
    pixel_offsets: np.ndarray
    n_paths: int
    clamp_events: int = 0
    zero_brdf_vertices: int = 0
    kind: ProblemKind = ProblemKind.tomography
    jacobian: Optional[sp.csr_matrix] = None

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([image.ravel() for image in self.images])

    def row(self, detector: int, pixel: int) -> SparseGradient:
        """dF_d(pixel)/dm for one measurement"""
        if self.jacobian is None:
            raise ValueError("estimator was evaluated without derivatives")
        r = int(self.pixel_offsets[detector]) + int(pixel)
        row = self.jacobian.getrow(r).tocoo()
        return SparseGradient(kind=self.kind, size=self.jacobian.shape[1], indices=row.col, values=row.data)

    def detector_gradient(self, detector: int) -> SparseGradient:
        """Gradient of the sum over all pixels of one detector"""
        a, b = int(self.pixel_offsets[detector]), int(self.pixel_offsets[detector + 1])
        dense = np.asarray(self.jacobian[a:b].sum(axis=0)).ravel()
        return SparseGradient.from_dense(dense, self.kind)


class DistanceEvent(str, Enum):
    scatter = "scatter"
    escaped = "escaped"
    surface = "surface"


class DistanceSample(BaseModel):
    """Outcome of one free-flight draw along a ray"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    event: DistanceEvent
    distance: float
    point: Optional[np.ndarray] = None
    voxel: int = -1
    surface: int = -1
    tau: float = 0.0


class Evaluation(BaseModel):
    """Per-slot results of re-evaluating a store under one parameter set"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    le_row: np.ndarray
    le_value: np.ndarray
    path_logr: np.ndarray
    clamp_events: int = 0
    zero_brdf_vertices: int = 0
    normalizer: float = 1.0
