"""Training-pose generation and the on-disk dataset format.

Pose pipeline per force field: ramp the magnitude geometrically, run the
overdamped quasi-static linear sequence at each magnitude, register every
linear snapshot to its nonlinear counterpart, and stop the ramp once the
equilibrium linear displacement reaches the cap max_i |u_i| >= 2 (the cap is
evaluated on the linear displacement, which exists before registration).

Records are per non-anchor node: the 7-feature vector plus the canonical
frame displacement fix Q (u_i - u_lin_i).

Dataset file format (little-endian): magic 'DWTP', version u32, record count
u64, then one 10-double row per record (7 features in FEATURE_ORDER, then
the 3 target components).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dynamics import QuasistaticDriver
from .features import (ForceField, StaticFeatureSet, align_batch,
                       assemble_features_batch, force_vector, geodesic_all,
                       static_features)
from .material import MaterialModel, MaterialParams, MeshPrecomp
from .mesh import TetMesh, lumped_mass, node_adjacency
from .registration import gradient_operator, register_sequence, \
    rotation_vectors_from_displacement

MAGIC = b"DWTP"
FORMAT_VERSION = 1
RECORD_DOUBLES = 10
DISPLACEMENT_CAP = 2.0


class DatasetFormatError(Exception):
    """Dataset stream rejected (magic, version, truncation, NaN payload)."""


@dataclass(frozen=True)
class TrainingRecord:
    """One node-pose instance."""

    features: np.ndarray
    target: np.ndarray
    pose_id: int
    node_id: int


class RecordSet:
    """Columnar container of training records."""

    def __init__(self, features: np.ndarray, targets: np.ndarray,
                 pose_ids: np.ndarray | None = None,
                 node_ids: np.ndarray | None = None):
        self.features = np.asarray(features, dtype=np.float64).reshape(-1, 7)
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
        n = len(self.features)
        if len(self.targets) != n:
            raise ValueError("features and targets disagree in length")
        self.pose_ids = (np.asarray(pose_ids, dtype=np.int64)
                         if pose_ids is not None else np.full(n, -1, dtype=np.int64))
        self.node_ids = (np.asarray(node_ids, dtype=np.int64)
                         if node_ids is not None else np.full(n, -1, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.features)

    def record(self, i: int) -> TrainingRecord:
        return TrainingRecord(features=self.features[i].copy(),
                              target=self.targets[i].copy(),
                              pose_id=int(self.pose_ids[i]),
                              node_id=int(self.node_ids[i]))

    def subset(self, idx) -> "RecordSet":
        return RecordSet(self.features[idx], self.targets[idx],
                         self.pose_ids[idx], self.node_ids[idx])

    @classmethod
    def concat(cls, parts: list["RecordSet"]) -> "RecordSet":
        if not parts:
            return cls(np.zeros((0, 7)), np.zeros((0, 3)))
        return cls(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.targets for p in parts]),
                   np.concatenate([p.pose_ids for p in parts]),
                   np.concatenate([p.node_ids for p in parts]))

    def validate(self, anchors: frozenset[int] | None = None) -> None:
        """Re-check finiteness, feature ranges and anchored-node exclusion."""
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise ValueError("record set contains non-finite values")
        g, p, d = self.features[:, 3], self.features[:, 4], self.features[:, 5]
        if np.any((g < 0) | (g > 1)) or np.any((p < 0) | (p > 1)):
            raise ValueError("geodesic/potential feature out of [0, 1]")
        circ = d == -1.0
        if np.any((~circ) & ((d < 0) | (d > np.pi + 1e-12))):
            raise ValueError("digression feature out of [0, pi] + {-1}")
        if anchors:
            if np.any(np.isin(self.node_ids, list(anchors))):
                raise ValueError("anchored node leaked into the record set")


def sample_directions(n_alpha: int, n_beta: int) -> np.ndarray:
    """Semi-hemisphere force directions from a uniform [0, pi/2]^2 grid.

    e = [sin(beta) cos(alpha), cos(beta), sin(beta) sin(alpha)].
    """
    if n_alpha < 1 or n_beta < 1:
        raise ValueError("need at least one sample per parameter")
    alphas = np.linspace(0.0, np.pi / 2.0, n_alpha)
    betas = np.linspace(0.0, np.pi / 2.0, n_beta)
    A, B = np.meshgrid(alphas, betas, indexing="ij")
    e = np.stack([np.sin(B) * np.cos(A), np.cos(B), np.sin(B) * np.sin(A)], axis=-1)
    return e.reshape(-1, 3)


@dataclass(frozen=True)
class RampConfig:
    """Geometric force-magnitude ramp settings."""

    start: float
    factor: float = 1.3
    max_magnitudes: int = 50
    poses_per_magnitude: int = 10
    cap: float = DISPLACEMENT_CAP

    def __post_init__(self):
        if self.start <= 0.0:
            raise ValueError("ramp start magnitude must be positive")
        if self.factor <= 1.0:
            raise ValueError("ramp factor must exceed 1")


@dataclass
class Pose:
    """One registered linear/nonlinear displacement pair."""

    field: ForceField
    magnitude: float
    u_lin: np.ndarray
    u: np.ndarray
    converged: bool
    residual: float


@dataclass
class PoseGenerationReport:
    poses: list[Pose] = field(default_factory=list)
    attempted: int = 0
    dropped_nonconverged: int = 0
    dropped_capped: int = 0

    @property
    def emitted(self) -> int:
        return len(self.poses)


def generate_poses(mesh: TetMesh, params: MaterialParams, fields: list[ForceField],
                   ramp: RampConfig, density: float = 1000.0,
                   rel_tol: float = 1e-6) -> PoseGenerationReport:
    """Registered training poses for every field over the magnitude ramp.

    Per field the rest pose (magnitude 0) is emitted first; snapshots whose
    max per-node linear displacement already exceeds the cap are dropped,
    except the final equilibrium pose of the ramp.
    """
    if params.model is MaterialModel.LINEAR:
        raise ValueError("pose generation registers against a nonlinear model")
    report = PoseGenerationReport()
    adjacency = node_adjacency(mesh)
    grad_op = gradient_operator(mesh, adjacency)
    pre = MeshPrecomp(mesh)
    masses = lumped_mass(mesh, density)
    driver = QuasistaticDriver(mesh, params.as_linear(), density=density)
    zero = np.zeros(3 * mesh.n_nodes)
    for f in fields:
        emitted_before = report.emitted
        magnitude = ramp.start
        for _ in range(ramp.max_magnitudes):
            # every registered sequence starts from the rest shape, so each
            # magnitude contributes the rest pair first; this also keeps the
            # network's rest-feature region represented in the training set
            report.poses.append(Pose(field=f.with_magnitude(0.0), magnitude=0.0,
                                     u_lin=zero.copy(), u=zero.copy(),
                                     converged=True, residual=0.0))
            report.attempted += 1
            current = f.with_magnitude(magnitude)
            fvec = force_vector(mesh, current, masses=masses)
            seq = driver.run(fvec, n_steps=ramp.poses_per_magnitude, rel_tol=rel_tol)
            reg = register_sequence(mesh, params, seq.displacements,
                                    grad_op=grad_op, pre=pre, rel_tol=rel_tol)
            report.attempted += len(seq.displacements)
            report.dropped_nonconverged += len(seq.displacements) - len(reg.pairs)
            max_lin = [float(np.linalg.norm(p.u_lin.reshape(-1, 3), axis=1).max())
                       for p in reg.pairs]
            cap_hit = bool(max_lin and max_lin[-1] >= ramp.cap and reg.completed)
            for k, pair in enumerate(reg.pairs):
                is_final = cap_hit and (k == len(reg.pairs) - 1)
                if max_lin[k] >= ramp.cap and not is_final:
                    report.dropped_capped += 1
                    continue
                report.poses.append(Pose(field=current, magnitude=magnitude,
                                         u_lin=pair.u_lin, u=pair.u,
                                         converged=True, residual=pair.residual))
            if cap_hit or not reg.completed:
                break
            magnitude *= ramp.factor
        if report.emitted == emitted_before:
            raise ValueError(f"no converged poses generated for field {f}")
    return report


def extract_records(pose: Pose, static: StaticFeatureSet, poisson: float,
                    mesh: TetMesh, grad_op) -> RecordSet:
    """Canonical-frame records for every non-anchor node of a pose."""
    w = rotation_vectors_from_displacement(grad_op, pose.u_lin)
    U = pose.u_lin.reshape(-1, 3)
    u_mag, w_mag, angle, Q = align_batch(U, w)
    X = assemble_features_batch(u_mag, w_mag, angle, static, poisson)
    delta = pose.u.reshape(-1, 3) - U
    targets = np.einsum("npq,nq->np", Q, delta)
    keep = np.ones(mesh.n_nodes, dtype=bool)
    if mesh.anchors:
        keep[mesh.anchor_array()] = False
    idx = np.nonzero(keep)[0]
    return RecordSet(X[idx], targets[idx],
                     pose_ids=np.full(len(idx), -1), node_ids=idx)


def build_dataset(mesh: TetMesh, params: MaterialParams, fields: list[ForceField],
                  ramp: RampConfig, density: float = 1000.0,
                  rel_tol: float = 1e-6) -> tuple[RecordSet, PoseGenerationReport]:
    """End-to-end record generation over fields, magnitudes and nodes."""
    report = generate_poses(mesh, params, fields, ramp, density, rel_tol)
    adjacency = node_adjacency(mesh)
    grad_op = gradient_operator(mesh, adjacency)
    parts = []
    static_cache: dict = {}
    geo = geodesic_all(mesh, adjacency)
    for pose_id, pose in enumerate(report.poses):
        key = _field_key(pose.field)
        if key not in static_cache:
            static_cache[key] = static_features(mesh, pose.field, adjacency, geo)
        rs = extract_records(pose, static_cache[key], params.poisson, mesh, grad_op)
        rs.pose_ids[:] = pose_id
        parts.append(rs)
    records = RecordSet.concat(parts)
    records.validate(mesh.anchors)
    return records, report


def _field_key(f: ForceField):
    if f.direction is not None:
        return ("dir", tuple(np.round(f.direction, 15)))
    return ("circ", tuple(np.round(f.axis_point, 15)), tuple(np.round(f.axis_dir, 15)))


def split(records: RecordSet, val_fraction: float, test_fraction: float,
          seed: int) -> tuple[RecordSet, RecordSet, RecordSet]:
    """Seeded shuffle, then floor-sized val/test partitions; train gets the rest."""
    if not (0.0 < val_fraction < 1.0 and 0.0 < test_fraction < 1.0):
        raise ValueError("fractions must lie in (0, 1)")
    if val_fraction + test_fraction >= 1.0:
        raise ValueError("fractions must sum below 1")
    n = len(records)
    n_val = int(n * val_fraction)
    n_test = int(n * test_fraction)
    if n_val == 0 or n_test == 0 or n - n_val - n_test == 0:
        raise ValueError(f"empty partition for {n} records "
                         f"(val={val_fraction}, test={test_fraction})")
    perm = np.random.default_rng(seed).permutation(n)
    val = records.subset(perm[:n_val])
    test = records.subset(perm[n_val:n_val + n_test])
    train = records.subset(perm[n_val + n_test:])
    return train, val, test


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_dataset(stream, records: RecordSet) -> None:
    rows = np.hstack([records.features, records.targets])
    if not np.all(np.isfinite(rows)):
        raise DatasetFormatError("refusing to write non-finite record payload")
    stream.write(MAGIC)
    stream.write(struct.pack("<IQ", FORMAT_VERSION, len(records)))
    stream.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def iter_dataset(stream, batch_size: int = 65536):
    """Stream (features, targets) batches without loading the whole file."""
    head = stream.read(4)
    if head != MAGIC:
        raise DatasetFormatError("bad magic: not a dataset file")
    raw = stream.read(12)
    if len(raw) != 12:
        raise DatasetFormatError("truncated dataset header")
    version, count = struct.unpack("<IQ", raw)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {version}")
    remaining = count
    row_bytes = 8 * RECORD_DOUBLES
    while remaining > 0:
        take = min(batch_size, remaining)
        data = stream.read(take * row_bytes)
        if len(data) != take * row_bytes:
            raise DatasetFormatError(
                f"truncated dataset: expected {count} records, payload ended early")
        rows = np.frombuffer(data, dtype="<f8").reshape(take, RECORD_DOUBLES)
        if not np.all(np.isfinite(rows)):
            raise DatasetFormatError("dataset payload contains non-finite values")
        yield rows[:, :7].copy(), rows[:, 7:].copy()
        remaining -= take


def read_dataset(stream) -> RecordSet:
    feats, targs = [], []
    for X, Y in iter_dataset(stream):
        feats.append(X)
        targs.append(Y)
    if not feats:
        return RecordSet(np.zeros((0, 7)), np.zeros((0, 3)))
    return RecordSet(np.concatenate(feats), np.concatenate(targs))


def write_dataset_file(path, records: RecordSet) -> None:
    with open(path, "wb") as f:
        write_dataset(f, records)


def read_dataset_file(path) -> RecordSet:
    with open(path, "rb") as f:
        return read_dataset(f)
